//! Monte Carlo generator of four-channel tag streams.
//!
//! Each pump pulse may produce one forward pair (idler to channel 1, signal
//! reflected back as the seed) and one backward pair (idler to channel 2)
//! whose probability is enhanced when the seed survives the reflection loop
//! and overlaps the pump. Every backward-travelling signal photon lands on a
//! 50:50 splitter feeding channels 3 and 4. Detectors are click detectors
//! with Gaussian jitter, Poisson dark counts and a non-paralyzable dead time.
//!
//! The run is cut into fixed-size pulse blocks, each drawing from its own
//! ChaCha stream keyed by `(rng_seed, block index)`, so output depends on the
//! block size but not on how blocks are scheduled across threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fwm::{bs_two_photon_split, pair_gen_enhancement, OverlapModel};
use crate::tags::{TagStreams, N_CHANNELS};

pub const DEFAULT_PERIOD_PS: u64 = 3125;
pub const DEFAULT_BLOCK_SIZE: u64 = 1 << 18;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PulseTrainConfig {
    pub period_ps: u64,
    pub n_pulses: u64,
}

impl PulseTrainConfig {
    pub fn repetition_rate_hz(&self) -> f64 {
        1e12 / self.period_ps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.period_ps == 0 {
            return Err(Error::config("period_ps", "must be positive"));
        }
        Ok(())
    }
}

impl Default for PulseTrainConfig {
    fn default() -> Self {
        Self {
            period_ps: DEFAULT_PERIOD_PS,
            n_pulses: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConfig {
    /// Forward pair probability per pulse.
    pub p1: f64,
    /// Backward spontaneous pair probability per pulse.
    pub p2: f64,
    pub overlap: OverlapModel,
    /// Seed delay relative to the reflected pump (the delay-line setting).
    pub seed_delay_ps: f64,
    /// Probability that the reflected seed re-enters the fiber.
    pub loop_transmission: f64,
}

impl SourceConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("p1", self.p1),
            ("p2", self.p2),
            ("loop_transmission", self.loop_transmission),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, format!("{v} is not a probability")));
            }
        }
        if !self.seed_delay_ps.is_finite() {
            return Err(Error::config("seed_delay_ps", "must be finite"));
        }
        self.overlap.validate()
    }

    /// Backward pair probability with a seed present, capped at 1.
    fn seeded_backward(&self) -> f64 {
        (self.p2 * pair_gen_enhancement(true, self.seed_delay_ps, &self.overlap)).min(1.0)
    }
}

impl Default for SourceConfig {
    /// Rates giving about 0.003 counts per pulse per channel at 10% efficiency.
    fn default() -> Self {
        Self {
            p1: 0.03,
            p2: 0.03,
            overlap: OverlapModel::default(),
            seed_delay_ps: 0.0,
            loop_transmission: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub efficiency: f64,
    pub jitter_sigma_ps: f64,
    pub dark_rate_hz: f64,
    pub dead_time_ps: u64,
    pub nominal_offset_ps: i64,
}

impl DetectorConfig {
    pub fn ideal() -> Self {
        Self {
            efficiency: 1.0,
            jitter_sigma_ps: 0.0,
            ..Self::default()
        }
    }

    pub fn with_efficiency(efficiency: f64) -> Self {
        Self {
            efficiency,
            ..Self::default()
        }
    }

    pub fn validate(&self, channel: usize) -> Result<()> {
        let key = |k: &str| format!("ch{channel}.{k}");
        if !(0.0..=1.0).contains(&self.efficiency) {
            return Err(Error::config(key("efficiency"), "must lie in [0, 1]"));
        }
        if !(self.jitter_sigma_ps >= 0.0 && self.jitter_sigma_ps.is_finite()) {
            return Err(Error::config(key("jitter_sigma_ps"), "must be non-negative"));
        }
        if !(self.dark_rate_hz >= 0.0 && self.dark_rate_hz.is_finite()) {
            return Err(Error::config(key("dark_rate_hz"), "must be non-negative"));
        }
        Ok(())
    }
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            efficiency: 0.10,
            jitter_sigma_ps: 70.0,
            dark_rate_hz: 0.0,
            dead_time_ps: 0,
            nominal_offset_ps: 0,
        }
    }
}

pub type Detectors = [DetectorConfig; N_CHANNELS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimOptions {
    /// Pulses per independently seeded block.
    pub block_size: u64,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

/// Everything needed to reproduce a run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimMetadata {
    pub pulse: PulseTrainConfig,
    pub source: SourceConfig,
    pub detectors: Detectors,
    pub rng_seed: u64,
    pub block_size: u64,
    pub generator: String,
}

impl SimMetadata {
    pub fn new(
        pulse: &PulseTrainConfig,
        source: &SourceConfig,
        detectors: &Detectors,
        seed: u64,
        opts: SimOptions,
    ) -> Self {
        Self {
            pulse: *pulse,
            source: *source,
            detectors: *detectors,
            rng_seed: seed,
            block_size: opts.block_size,
            generator: "ChaCha8 seed_from_u64(seed), stream = block index".into(),
        }
    }
}

/// Per-pulse photon content before routing and detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct PulseEvent {
    forward: bool,
    seed_back: bool,
    backward: bool,
}

/// The five non-empty pulse outcomes and their probabilities.
fn event_table(source: &SourceConfig) -> [(PulseEvent, f64); 5] {
    let (p1, p2, lt) = (source.p1, source.p2, source.loop_transmission);
    let ps = source.seeded_backward();
    let ev = |forward, seed_back, backward| PulseEvent {
        forward,
        seed_back,
        backward,
    };
    [
        (ev(false, false, true), (1.0 - p1) * p2),
        (ev(true, false, false), p1 * (1.0 - lt) * (1.0 - p2)),
        (ev(true, false, true), p1 * (1.0 - lt) * p2),
        (ev(true, true, false), p1 * lt * (1.0 - ps)),
        (ev(true, true, true), p1 * lt * ps),
    ]
}

fn validate_all(pulse: &PulseTrainConfig, source: &SourceConfig, detectors: &Detectors) -> Result<()> {
    pulse.validate()?;
    source.validate()?;
    for (i, d) in detectors.iter().enumerate() {
        d.validate(i + 1)?;
    }
    Ok(())
}

/// Simulates one run with the default block size.
pub fn simulate(
    pulse: &PulseTrainConfig,
    source: &SourceConfig,
    detectors: &Detectors,
    rng_seed: u64,
) -> Result<TagStreams> {
    simulate_with(pulse, source, detectors, rng_seed, SimOptions::default())
}

pub fn simulate_with(
    pulse: &PulseTrainConfig,
    source: &SourceConfig,
    detectors: &Detectors,
    rng_seed: u64,
    opts: SimOptions,
) -> Result<TagStreams> {
    validate_all(pulse, source, detectors)?;
    if opts.block_size == 0 {
        return Err(Error::config("block_size", "must be positive"));
    }
    if pulse.n_pulses == 0 {
        return Ok(TagStreams::empty(pulse.period_ps));
    }

    let sampler = BlockSampler::new(pulse, source, detectors)?;
    let n_blocks = pulse.n_pulses.div_ceil(opts.block_size);
    let blocks: Vec<[Vec<u64>; N_CHANNELS]> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let start = b * opts.block_size;
            let end = (start + opts.block_size).min(pulse.n_pulses);
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            rng.set_stream(b);
            sampler.run_block(start, end, &mut rng)
        })
        .collect();

    let mut channels: [Vec<u64>; N_CHANNELS] = Default::default();
    for (c, out) in channels.iter_mut().enumerate() {
        out.reserve(blocks.iter().map(|b| b[c].len()).sum());
        for b in &blocks {
            out.extend_from_slice(&b[c]);
        }
        out.sort_unstable();
        apply_dead_time(out, detectors[c].dead_time_ps);
    }
    Ok(TagStreams::new(pulse.period_ps, channels))
}

/// Drops every tag arriving less than `dead_time_ps` after the last kept tag.
pub fn apply_dead_time(stream: &mut Vec<u64>, dead_time_ps: u64) {
    if dead_time_ps == 0 || stream.is_empty() {
        return;
    }
    let mut last = stream[0];
    let mut keep = 1;
    for i in 1..stream.len() {
        let t = stream[i];
        if t - last >= dead_time_ps {
            stream[keep] = t;
            keep += 1;
            last = t;
        }
    }
    stream.truncate(keep);
}

struct BlockSampler {
    period_ps: u64,
    events: Vec<(PulseEvent, f64)>,
    /// Probability that a pulse produces anything at all.
    active: f64,
    eta: [f64; N_CHANNELS],
    offset: [i64; N_CHANNELS],
    jitter: [Option<Normal<f64>>; N_CHANNELS],
    dark_per_ps: [f64; N_CHANNELS],
    bunch: [f64; 2],
}

impl BlockSampler {
    fn new(pulse: &PulseTrainConfig, source: &SourceConfig, detectors: &Detectors) -> Result<Self> {
        let events: Vec<_> = event_table(source).into_iter().filter(|(_, p)| *p > 0.0).collect();
        let active = events.iter().map(|(_, p)| p).sum::<f64>().min(1.0);
        let mut jitter = [None; N_CHANNELS];
        for (j, d) in jitter.iter_mut().zip(detectors) {
            if d.jitter_sigma_ps > 0.0 {
                *j = Some(
                    Normal::new(0.0, d.jitter_sigma_ps).map_err(|e| Error::config("jitter_sigma_ps", e.to_string()))?,
                );
            }
        }
        let split = bs_two_photon_split();
        Ok(Self {
            period_ps: pulse.period_ps,
            events,
            active,
            eta: detectors.map(|d| d.efficiency),
            offset: detectors.map(|d| d.nominal_offset_ps),
            jitter,
            dark_per_ps: detectors.map(|d| d.dark_rate_hz * 1e-12),
            bunch: [split.both_a, split.both_a + split.split],
        })
    }

    fn run_block(&self, start: u64, end: u64, rng: &mut ChaCha8Rng) -> [Vec<u64>; N_CHANNELS] {
        let mut out: [Vec<u64>; N_CHANNELS] = Default::default();

        if self.active > 0.0 {
            let skip = Geometric::new(self.active).expect("probability in (0, 1]");
            let mut n = start;
            loop {
                let gap = skip.sample(rng);
                n = match n.checked_add(gap) {
                    Some(v) if v < end => v,
                    _ => break,
                };
                let event = self.pick_event(rng);
                self.emit_pulse(n, event, rng, &mut out);
                n += 1;
            }
        }

        let t0 = start * self.period_ps;
        let span = (end - start) * self.period_ps;
        for (c, stream) in out.iter_mut().enumerate() {
            let mean = self.dark_per_ps[c] * span as f64;
            if mean <= 0.0 {
                continue;
            }
            let count = Poisson::new(mean).expect("positive mean").sample(rng) as u64;
            stream.extend((0..count).map(|_| t0 + rng.random_range(0..span)));
        }
        out
    }

    fn pick_event(&self, rng: &mut ChaCha8Rng) -> PulseEvent {
        let mut u = rng.random::<f64>() * self.active;
        for (ev, p) in &self.events {
            if u < *p {
                return *ev;
            }
            u -= p;
        }
        self.events.last().expect("active > 0 implies an event").0
    }

    fn emit_pulse(&self, n: u64, ev: PulseEvent, rng: &mut ChaCha8Rng, out: &mut [Vec<u64>; N_CHANNELS]) {
        // photons arriving at each channel
        let mut photons = [0u32; N_CHANNELS];
        photons[0] = u32::from(ev.forward);
        photons[1] = u32::from(ev.backward);
        match u32::from(ev.seed_back) + u32::from(ev.backward) {
            0 => {}
            1 => photons[if rng.random::<bool>() { 2 } else { 3 }] += 1,
            _ => {
                let u = rng.random::<f64>();
                if u < self.bunch[0] {
                    photons[2] = 2;
                } else if u < self.bunch[1] {
                    photons[2] = 1;
                    photons[3] = 1;
                } else {
                    photons[3] = 2;
                }
            }
        }

        let t_pulse = (n * self.period_ps) as i64;
        for c in 0..N_CHANNELS {
            let k = photons[c];
            if k == 0 {
                continue;
            }
            let p_click = 1.0 - (1.0 - self.eta[c]).powi(k as i32);
            if rng.random::<f64>() >= p_click {
                continue;
            }
            let jitter = self.jitter[c].map_or(0.0, |d| d.sample(rng)).round() as i64;
            out[c].push((t_pulse + self.offset[c] + jitter).max(0) as u64);
        }
    }
}

/// Probability that a channel holding `photons` photons clicks.
fn click_probability(eta: f64, photons: u32) -> f64 {
    1.0 - (1.0 - eta).powi(photons as i32)
}

/// Joint click distribution of one pulse, indexed by the bitmask
/// `c1 | c2 << 1 | c3 << 2 | c4 << 3`. Excludes dark counts.
pub fn pulse_click_distribution(source: &SourceConfig, eta: &[f64; N_CHANNELS]) -> [f64; 16] {
    let mut dist = [0.0; 16];
    let table = event_table(source);
    let quiet: f64 = 1.0 - table.iter().map(|(_, p)| p).sum::<f64>();
    dist[0] += quiet.max(0.0);

    let split = bs_two_photon_split();
    for (ev, p_ev) in table {
        if p_ev == 0.0 {
            continue;
        }
        let routes: Vec<([u32; 2], f64)> = match u32::from(ev.seed_back) + u32::from(ev.backward) {
            0 => vec![([0, 0], 1.0)],
            1 => vec![([1, 0], 0.5), ([0, 1], 0.5)],
            _ => vec![([2, 0], split.both_a), ([1, 1], split.split), ([0, 2], split.both_b)],
        };
        for ([n3, n4], p_route) in routes {
            let photons = [u32::from(ev.forward), u32::from(ev.backward), n3, n4];
            for (mask, slot) in dist.iter_mut().enumerate() {
                let mut p = p_ev * p_route;
                for c in 0..N_CHANNELS {
                    let pc = click_probability(eta[c], photons[c]);
                    p *= if mask >> c & 1 == 1 { pc } else { 1.0 - pc };
                }
                *slot += p;
            }
        }
    }
    dist
}

/// Exact model expectation of the CC bin and the four ACC bars, per pulse
/// (per pulse pair for the bars), including multi-pair contributions within
/// a pulse. Valid without dark counts and with jitter well inside the gate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExpectedFourfold {
    pub cc: f64,
    /// Bars in the order (-1,0,-1), (1,0,1), (0,-1,-1), (0,1,1).
    pub acc_bars: [f64; 4],
}

impl ExpectedFourfold {
    pub fn acc_mean(&self) -> f64 {
        self.acc_bars.iter().sum::<f64>() / 4.0
    }

    pub fn car(&self) -> f64 {
        self.cc / (2.0 * self.acc_mean())
    }
}

pub fn expected_fourfold(source: &SourceConfig, detectors: &Detectors) -> ExpectedFourfold {
    let eta = detectors.map(|d| d.efficiency);
    let dist = pulse_click_distribution(source, &eta);
    // P(all channels in `need` click) within one pulse
    let both = |need: usize| -> f64 { (0..16usize).filter(|m| m & need == need).map(|m| dist[m]).sum() };
    const C1: usize = 1;
    const C2: usize = 2;
    const C3: usize = 4;
    const C4: usize = 8;
    let a = both(C1 | C3) * both(C2 | C4);
    let b = both(C2 | C3) * both(C1 | C4);
    ExpectedFourfold {
        cc: dist[15],
        acc_bars: [a, a, b, b],
    }
}

/// Expected tags per second on each channel, ignoring dead time.
pub fn expected_singles_rate(
    source: &SourceConfig,
    detectors: &Detectors,
    pulse: &PulseTrainConfig,
) -> [f64; N_CHANNELS] {
    let eta = detectors.map(|d| d.efficiency);
    let dist = pulse_click_distribution(source, &eta);
    let rep = pulse.repetition_rate_hz();
    std::array::from_fn(|c| {
        let p: f64 = (0..16usize).filter(|m| m >> c & 1 == 1).map(|m| dist[m]).sum();
        p * rep + detectors[c].dark_rate_hz
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn far_source(p1: f64, p2: f64) -> SourceConfig {
        SourceConfig {
            p1,
            p2,
            overlap: OverlapModel::new(1.0, 4.25, 0.0).unwrap(),
            seed_delay_ps: 1e6,
            loop_transmission: 1.0,
        }
    }

    #[test]
    fn certain_forward_pair() {
        let pulse = PulseTrainConfig {
            period_ps: 3125,
            n_pulses: 2000,
        };
        let det = [DetectorConfig::ideal(); 4];
        let s = simulate(&pulse, &far_source(1.0, 0.0), &det, 3).unwrap();
        assert_eq!(s.channel(1).len(), 2000);
        assert!(s.channel(2).is_empty());
        assert_eq!(s.channel(3).len() + s.channel(4).len(), 2000);
        let mut three = s.channel(3).to_vec();
        three.extend_from_slice(s.channel(4));
        three.sort_unstable();
        assert_eq!(three, s.channel(1));
        assert!(s.channel(3).len() > 800 && s.channel(4).len() > 800);
    }

    #[test]
    fn zero_pulses_gives_empty_streams() {
        let pulse = PulseTrainConfig {
            period_ps: 3125,
            n_pulses: 0,
        };
        let s = simulate(&pulse, &SourceConfig::default(), &[DetectorConfig::default(); 4], 1).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn invalid_configs_rejected() {
        let pulse = PulseTrainConfig::default();
        let mut det = [DetectorConfig::default(); 4];
        det[2].efficiency = 1.5;
        let err = simulate(&pulse, &SourceConfig::default(), &det, 1).unwrap_err();
        assert!(err.to_string().contains("ch3.efficiency"));

        let src = SourceConfig {
            p1: 2.0,
            ..SourceConfig::default()
        };
        let err = simulate(&pulse, &src, &[DetectorConfig::default(); 4], 1).unwrap_err();
        assert!(err.to_string().contains("p1"));

        let bad = PulseTrainConfig {
            period_ps: 0,
            n_pulses: 5,
        };
        assert!(simulate(&bad, &SourceConfig::default(), &[DetectorConfig::default(); 4], 1).is_err());
    }

    #[test]
    fn dead_time_filter() {
        let mut s = vec![0, 10, 50, 99, 100, 150, 260];
        apply_dead_time(&mut s, 100);
        assert_eq!(s, vec![0, 100, 260]);
        let mut s = vec![5, 5, 6];
        apply_dead_time(&mut s, 0);
        assert_eq!(s, vec![5, 5, 6]);
    }

    #[test]
    fn darks_only_rate() {
        let mut det = [DetectorConfig::default(); 4];
        for d in &mut det {
            d.dark_rate_hz = 1000.0;
        }
        let rates = expected_singles_rate(&far_source(0.0, 0.0), &det, &PulseTrainConfig::default());
        assert_eq!(rates, [1000.0; 4]);
    }

    #[test]
    fn certain_idler_rate_equals_repetition() {
        let det = [DetectorConfig::ideal(); 4];
        let pulse = PulseTrainConfig::default();
        let rates = expected_singles_rate(&far_source(1.0, 0.0), &det, &pulse);
        assert!((rates[0] - 320e6).abs() < 1e-3);
    }

    #[test]
    fn default_config_is_about_one_megahertz() {
        let rates = expected_singles_rate(
            &SourceConfig::default(),
            &[DetectorConfig::default(); 4],
            &PulseTrainConfig::default(),
        );
        for r in rates {
            assert!((0.8e6..1.3e6).contains(&r), "{r}");
        }
    }

    #[test]
    fn click_distribution_is_normalized() {
        let src = SourceConfig {
            p1: 0.3,
            p2: 0.4,
            seed_delay_ps: 0.0,
            loop_transmission: 0.7,
            overlap: OverlapModel::new(0.9, 3.0, 0.0).unwrap(),
        };
        let dist = pulse_click_distribution(&src, &[0.2, 0.5, 0.9, 1.0]);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(dist.iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn expected_fourfold_reduces_to_first_order() {
        // multi-pair corrections vanish as p -> 0
        let src = far_source(1e-4, 1e-4);
        let det = [DetectorConfig::with_efficiency(0.5); 4];
        let e = expected_fourfold(&src, &det);
        assert!((e.car() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn enhancement_applies_only_with_seed() {
        let src = SourceConfig {
            loop_transmission: 0.0,
            ..far_source(0.5, 0.2)
        };
        let src = SourceConfig {
            seed_delay_ps: 0.0,
            ..src
        };
        // no seed ever returns, so backward probability stays p2
        let rates = expected_singles_rate(&src, &[DetectorConfig::ideal(); 4], &PulseTrainConfig::default());
        assert!((rates[1] / 320e6 - 0.2).abs() < 1e-12);
    }
}
