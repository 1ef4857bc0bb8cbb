//! Synthetic inputs shared by the benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use stimfwm_core::TagStreams;

pub const PERIOD_PS: u64 = 3125;

/// Four independent pulsed streams: each channel fires on a pulse with
/// probability `occupancy`, with 70 ps Gaussian jitter.
pub fn pulsed_streams(tags_per_channel: usize, occupancy: f64, seed: u64) -> TagStreams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Geometric::new(occupancy).expect("occupancy in (0, 1]");
    let jitter = Normal::new(0.0, 70.0).expect("finite sigma");
    let channels = std::array::from_fn(|_| {
        let mut slot = 10u64;
        let mut s: Vec<u64> = (0..tags_per_channel)
            .map(|_| {
                slot += 1 + gap.sample(&mut rng);
                let j: f64 = jitter.sample(&mut rng);
                ((slot * PERIOD_PS) as i64 + j.round() as i64) as u64
            })
            .collect();
        s.sort_unstable();
        s
    });
    TagStreams::new(PERIOD_PS, channels)
}
