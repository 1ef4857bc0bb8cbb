//! Time-resolved four-fold coincidence counting.
//!
//! Channel 4 is the reference. For every reference tag the engine looks at
//! all tags of channels 1–3 within `max_lag * T + gate` and assigns each one
//! the nearest pulse-lag index `n` if `|t_c - t_4 - n T| <= gate`. Every
//! combination of gated tags increments the histogram at `(n14, n24, n34)`.
//! No one-to-one matching is done: a tag may take part in many quadruples.

use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tags::TagStreams;

/// Size guard for the exhaustive oracle.
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

/// Lag indices `(n14, n24, n34)` in units of the pulse period.
pub type LagTriple = (i32, i32, i32);

/// The four accidental bars, in the order reported by [`CarResult::acc_bars`].
pub const ACC_BINS: [LagTriple; 4] = [(-1, 0, -1), (1, 0, 1), (0, -1, -1), (0, 1, 1)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoincConfig {
    pub period_ps: u64,
    pub gate_halfwidth_ps: u64,
    pub max_lag: u32,
}

impl CoincConfig {
    pub fn new(period_ps: u64, gate_halfwidth_ps: u64, max_lag: u32) -> Result<Self> {
        let c = Self {
            period_ps,
            gate_halfwidth_ps,
            max_lag,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.period_ps == 0 {
            return Err(Error::config("period_ps", "must be positive"));
        }
        if self.gate_halfwidth_ps == 0 || 2 * self.gate_halfwidth_ps >= self.period_ps {
            return Err(Error::config(
                "gate_halfwidth_ps",
                format!("must lie in (0, T/2) for T = {} ps", self.period_ps),
            ));
        }
        if self.max_lag == 0 {
            return Err(Error::config("max_lag", "must be at least 1"));
        }
        Ok(())
    }

    /// Half-width of the candidate search window around a reference tag.
    pub fn search_halfwidth(&self) -> u64 {
        u64::from(self.max_lag) * self.period_ps + self.gate_halfwidth_ps
    }

    /// Lag index of a time difference, or `None` if it falls between gates.
    /// Rounds to the nearest multiple of T; exact ties go to the smaller |n|.
    pub fn classify(&self, delta: i64) -> Option<i32> {
        let t = self.period_ps as i64;
        let floor = delta.div_euclid(t);
        let rem = delta.rem_euclid(t);
        let n = match (2 * rem).cmp(&t) {
            std::cmp::Ordering::Less => floor,
            std::cmp::Ordering::Greater => floor + 1,
            std::cmp::Ordering::Equal => {
                if floor.abs() <= (floor + 1).abs() {
                    floor
                } else {
                    floor + 1
                }
            }
        };
        if n.unsigned_abs() > u64::from(self.max_lag) {
            return None;
        }
        ((delta - n * t).unsigned_abs() <= self.gate_halfwidth_ps).then_some(n as i32)
    }
}

impl Default for CoincConfig {
    fn default() -> Self {
        Self {
            period_ps: 3125,
            gate_halfwidth_ps: 1280,
            max_lag: 5,
        }
    }
}

/// Dense `(2L+1)^3` count cube over lag triples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FourfoldHistogram {
    max_lag: u32,
    counts: Vec<u64>,
    /// Quadruples whose three differences all fall inside the search window.
    inspected: u64,
}

impl FourfoldHistogram {
    pub fn new(max_lag: u32) -> Self {
        let side = 2 * max_lag as usize + 1;
        Self {
            max_lag,
            counts: vec![0; side * side * side],
            inspected: 0,
        }
    }

    /// Builds a histogram from explicit bins. Out-of-range bins are rejected.
    pub fn from_bins<I>(max_lag: u32, bins: I) -> Result<Self>
    where
        I: IntoIterator<Item = (LagTriple, u64)>,
    {
        let mut h = Self::new(max_lag);
        for (bin, c) in bins {
            let idx = h
                .index(bin)
                .ok_or_else(|| Error::config("max_lag", format!("bin {bin:?} outside +-{max_lag}")))?;
            h.counts[idx] += c;
            h.inspected += c;
        }
        Ok(h)
    }

    pub fn max_lag(&self) -> u32 {
        self.max_lag
    }

    pub fn inspected(&self) -> u64 {
        self.inspected
    }

    fn side(&self) -> usize {
        2 * self.max_lag as usize + 1
    }

    fn index(&self, (a, b, c): LagTriple) -> Option<usize> {
        let l = self.max_lag as i32;
        if [a, b, c].iter().any(|v| v.abs() > l) {
            return None;
        }
        let s = self.side();
        let off = |v: i32| (v + l) as usize;
        Some((off(a) * s + off(b)) * s + off(c))
    }

    fn triple(&self, idx: usize) -> LagTriple {
        let s = self.side();
        let l = self.max_lag as i32;
        let c = (idx % s) as i32 - l;
        let b = ((idx / s) % s) as i32 - l;
        let a = (idx / (s * s)) as i32 - l;
        (a, b, c)
    }

    /// Count at a lag triple; zero outside the range.
    pub fn get(&self, bin: LagTriple) -> u64 {
        self.index(bin).map_or(0, |i| self.counts[i])
    }

    /// Non-zero bins in lexicographic order of `(n14, n24, n34)`.
    pub fn iter(&self) -> impl Iterator<Item = (LagTriple, u64)> + '_ {
        self.counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (self.triple(i), c))
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total() == 0
    }

    /// Adds `other` bin by bin. Both must share `max_lag`.
    pub fn merge(&mut self, other: &FourfoldHistogram) {
        assert_eq!(self.max_lag, other.max_lag, "merging histograms of different extent");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.inspected += other.inspected;
    }
}

/// Single-threaded four-fold histogram.
pub fn count_fourfolds(streams: &TagStreams, config: &CoincConfig) -> Result<FourfoldHistogram> {
    count_fourfolds_parallel(streams, config, 1)
}

/// Splits the reference stream into `workers` contiguous chunks scanned on
/// separate threads. The result does not depend on `workers`.
pub fn count_fourfolds_parallel(
    streams: &TagStreams,
    config: &CoincConfig,
    workers: usize,
) -> Result<FourfoldHistogram> {
    config.validate()?;
    streams.check_sorted()?;

    let refs = streams.channel(4);
    let workers = workers.max(1).min(refs.len().max(1));
    if workers == 1 {
        return Ok(scan_references(streams, config, refs));
    }
    let chunk = refs.len().div_ceil(workers);
    let partials: Vec<FourfoldHistogram> = thread::scope(|s| {
        let handles: Vec<_> = refs
            .chunks(chunk)
            .map(|part| s.spawn(move || scan_references(streams, config, part)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("coincidence worker panicked"))
            .collect()
    });
    let mut hist = FourfoldHistogram::new(config.max_lag);
    for p in &partials {
        hist.merge(p);
    }
    Ok(hist)
}

fn scan_references(streams: &TagStreams, config: &CoincConfig, refs: &[u64]) -> FourfoldHistogram {
    let mut hist = FourfoldHistogram::new(config.max_lag);
    let w = config.search_halfwidth();
    let others = [streams.channel(1), streams.channel(2), streams.channel(3)];
    // lower bound of each window only moves forward as the reference advances
    let mut lo = [0usize; 3];
    let mut lags: [Vec<i32>; 3] = Default::default();
    let side = hist.side();
    let l = config.max_lag as i32;

    for &t4 in refs {
        let start = t4.saturating_sub(w);
        let end = t4.saturating_add(w);
        let mut window = [0u64; 3];
        for c in 0..3 {
            let s = others[c];
            lo[c] += s[lo[c]..].partition_point(|&t| t < start);
            let hi = lo[c] + s[lo[c]..].partition_point(|&t| t <= end);
            window[c] = (hi - lo[c]) as u64;
            lags[c].clear();
            for &t in &s[lo[c]..hi] {
                if let Some(n) = config.classify(t as i64 - t4 as i64) {
                    lags[c].push(n);
                }
            }
        }
        hist.inspected += window.iter().product::<u64>();
        if lags.iter().any(Vec::is_empty) {
            continue;
        }
        for &a in &lags[0] {
            let base_a = (a + l) as usize * side;
            for &b in &lags[1] {
                let base_ab = (base_a + (b + l) as usize) * side;
                for &c in &lags[2] {
                    hist.counts[base_ab + (c + l) as usize] += 1;
                }
            }
        }
    }
    hist
}

/// Exhaustive oracle: compares every reference tag with every tag of the
/// other channels, without relying on sorted input or binary search.
pub fn brute_force_fourfolds(streams: &TagStreams, config: &CoincConfig) -> Result<FourfoldHistogram> {
    config.validate()?;
    let largest = streams.channels.iter().map(Vec::len).max().unwrap_or(0);
    if largest > BRUTE_FORCE_LIMIT {
        return Err(Error::OracleInputTooLarge {
            limit: BRUTE_FORCE_LIMIT,
            got: largest,
        });
    }
    let t = config.period_ps as i64;
    let gate = config.gate_halfwidth_ps as i64;
    let w = config.search_halfwidth() as i64;
    let l = config.max_lag as i32;
    let lag_of = |delta: i64| -> Option<i32> {
        (0..=l)
            .flat_map(|m| [m, -m])
            .find(|&n| (delta - i64::from(n) * t).abs() <= gate)
    };

    let mut bins: BTreeMap<LagTriple, u64> = BTreeMap::new();
    let mut inspected = 0u64;
    for &t4 in streams.channel(4) {
        let mut gated: [Vec<i32>; 3] = Default::default();
        let mut in_window = [0u64; 3];
        for c in 0..3 {
            for &tc in streams.channel(c as u8 + 1) {
                let delta = tc as i64 - t4 as i64;
                if delta.abs() <= w {
                    in_window[c] += 1;
                }
                if let Some(n) = lag_of(delta) {
                    gated[c].push(n);
                }
            }
        }
        inspected += in_window.iter().product::<u64>();
        for &a in &gated[0] {
            for &b in &gated[1] {
                for &c in &gated[2] {
                    *bins.entry((a, b, c)).or_default() += 1;
                }
            }
        }
    }
    let mut hist = FourfoldHistogram::from_bins(config.max_lag, bins)?;
    hist.inspected = inspected;
    Ok(hist)
}

/// Bins on the plane `n34 = n14 + n24`, keyed by `(n14, n24)`.
pub fn plane_slice(hist: &FourfoldHistogram) -> BTreeMap<(i32, i32), u64> {
    hist.iter()
        .filter(|&((a, b, c), _)| c == a + b)
        .map(|((a, b, _), n)| ((a, b), n))
        .collect()
}

/// Coincidence-to-accidental ratio with Poisson errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CarResult {
    pub cc: u64,
    /// Counts at (-1,0,-1), (1,0,1), (0,-1,-1), (0,1,1).
    pub acc_bars: [u64; 4],
    pub acc_mean: f64,
    /// `cc / (2 acc_mean)`; `None` when no accidentals were recorded.
    pub r: Option<f64>,
    pub cc_err: f64,
    pub acc_err: f64,
    pub r_err: Option<f64>,
}

pub fn extract_car(hist: &FourfoldHistogram) -> CarResult {
    let cc = hist.get((0, 0, 0));
    let acc_bars = ACC_BINS.map(|b| hist.get(b));
    let acc_sum: u64 = acc_bars.iter().sum();
    let acc_mean = acc_sum as f64 / 4.0;
    let cc_err = (cc as f64).sqrt();
    let acc_err = (acc_sum as f64).sqrt() / 4.0;
    let (r, r_err) = if acc_sum == 0 {
        (None, None)
    } else {
        let r = cc as f64 / (2.0 * acc_mean);
        let d_cc = cc_err / (2.0 * acc_mean);
        let d_acc = r * acc_err / acc_mean;
        (Some(r), Some(d_cc.hypot(d_acc)))
    };
    CarResult {
        cc,
        acc_bars,
        acc_mean,
        r,
        cc_err,
        acc_err,
        r_err,
    }
}
