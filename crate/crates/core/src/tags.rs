//! Detection events and per-channel tag streams.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const N_CHANNELS: usize = 4;

/// One detection: channel `1..=4` and arrival time in picoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TagRecord {
    pub channel: u8,
    pub timestamp_ps: u64,
}

impl TagRecord {
    pub fn new(channel: u8, timestamp_ps: u64) -> Self {
        Self { channel, timestamp_ps }
    }
}

/// Four per-channel timestamp streams plus the pulse period they refer to.
///
/// `channels[0]` holds channel 1. Streams are expected to be sorted
/// ascending; [`TagStreams::check_sorted`] verifies it.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TagStreams {
    pub period_ps: u64,
    pub channels: [Vec<u64>; N_CHANNELS],
}

impl TagStreams {
    pub fn new(period_ps: u64, channels: [Vec<u64>; N_CHANNELS]) -> Self {
        Self { period_ps, channels }
    }

    pub fn empty(period_ps: u64) -> Self {
        Self::new(period_ps, Default::default())
    }

    /// Stream of channel `ch` (1-based).
    pub fn channel(&self, ch: u8) -> &[u64] {
        &self.channels[usize::from(ch - 1)]
    }

    pub fn total_tags(&self) -> usize {
        self.channels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_tags() == 0
    }

    pub fn check_sorted(&self) -> Result<()> {
        for (i, stream) in self.channels.iter().enumerate() {
            if let Some(pos) = stream.windows(2).position(|w| w[0] > w[1]) {
                return Err(Error::UnsortedStream {
                    channel: i as u8 + 1,
                    index: pos + 1,
                });
            }
        }
        Ok(())
    }

    /// Splits records into channel streams, preserving per-channel order.
    pub fn from_records<I>(period_ps: u64, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = TagRecord>,
    {
        let mut out = Self::empty(period_ps);
        for r in records {
            if !(1..=N_CHANNELS as u8).contains(&r.channel) {
                return Err(Error::Format(format!("channel {} out of range 1..=4", r.channel)));
            }
            out.channels[usize::from(r.channel - 1)].push(r.timestamp_ps);
        }
        Ok(out)
    }

    /// All tags merged into one time-ordered sequence (ties broken by channel).
    pub fn to_records(&self) -> Vec<TagRecord> {
        let mut recs: Vec<TagRecord> = self
            .channels
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.iter().map(move |&t| TagRecord::new(i as u8 + 1, t)))
            .collect();
        recs.sort_by_key(|r| (r.timestamp_ps, r.channel));
        recs
    }

    /// Every timestamp moved later by `offset_ps`.
    pub fn shifted(&self, offset_ps: u64) -> Self {
        let mut out = self.clone();
        for s in &mut out.channels {
            for t in s.iter_mut() {
                *t += offset_ps;
            }
        }
        out
    }
}
