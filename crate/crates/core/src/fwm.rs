//! First-order four-wave-mixing model and the analytic rate oracle.
//!
//! The interaction `k a_s† a_i† + h.c.` acting on a two-mode Fock state
//! `|n, m>` adds, to first order, the term `g sqrt((n+1)(m+1)) |n+1, m+1>`.
//! For vacuum input this is the spontaneous pair term; for a single seeded
//! signal photon the pair amplitude picks up a factor `sqrt(2)`, doubling the
//! pair probability. Everything downstream (simulator, coincidence analysis,
//! fitting) is checked against the closed forms in this module.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default photon-number truncation per mode.
pub const DEFAULT_TRUNCATION: u32 = 4;

/// Above this gain magnitude the dropped second-order terms stop being small.
pub const GAIN_WARN_THRESHOLD: f64 = 0.3;

/// Two-mode photon-number state: `n_signal` signal photons, `m_idler` idler photons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FockState {
    pub n_signal: u32,
    pub m_idler: u32,
}

impl FockState {
    pub const VACUUM: FockState = FockState::new(0, 0);

    pub const fn new(n_signal: u32, m_idler: u32) -> Self {
        Self { n_signal, m_idler }
    }

    fn check(self, truncation: u32) -> Result<Self> {
        if self.n_signal > truncation || self.m_idler > truncation {
            return Err(Error::TruncationExceeded {
                n: self.n_signal,
                m: self.m_idler,
                truncation,
            });
        }
        Ok(self)
    }
}

impl fmt::Display for FockState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "|{},{}>", self.n_signal, self.m_idler)
    }
}

/// Complex nonlinear gain `g = i k t`, restricted to `|g| < 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainParam(Complex64);

impl GainParam {
    pub fn new(g: Complex64) -> Result<Self> {
        let mag = g.norm();
        if !mag.is_finite() || mag >= 1.0 {
            return Err(Error::GainOutOfRange(mag));
        }
        if mag > GAIN_WARN_THRESHOLD {
            log::warn!("|g| = {mag:.3} exceeds {GAIN_WARN_THRESHOLD}; first-order evolution is inaccurate");
        }
        Ok(Self(g))
    }

    pub fn real(g: f64) -> Result<Self> {
        Self::new(Complex64::new(g, 0.0))
    }

    pub fn imag(g: f64) -> Result<Self> {
        Self::new(Complex64::new(0.0, g))
    }

    pub fn value(self) -> Complex64 {
        self.0
    }
}

/// Sparse, unnormalized amplitude map produced by first-order evolution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FockAmplitudeMap(BTreeMap<FockState, Complex64>);

impl FockAmplitudeMap {
    pub fn get(&self, state: FockState) -> Option<Complex64> {
        self.0.get(&state).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (FockState, Complex64)> + '_ {
        self.0.iter().map(|(s, a)| (*s, *a))
    }

    /// Squared magnitude of the amplitude on `state`, zero when absent.
    pub fn probability(&self, state: FockState) -> f64 {
        self.get(state).map_or(0.0, |a| a.norm_sqr())
    }
}

/// Applies `1 - i H t` to `input` with the default truncation.
pub fn evolve_first_order(input: FockState, g: GainParam) -> Result<FockAmplitudeMap> {
    evolve_first_order_truncated(input, g, DEFAULT_TRUNCATION)
}

pub fn evolve_first_order_truncated(input: FockState, g: GainParam, truncation: u32) -> Result<FockAmplitudeMap> {
    let input = input.check(truncation)?;
    let out = FockState::new(input.n_signal + 1, input.m_idler + 1).check(truncation)?;

    let mut map = BTreeMap::new();
    map.insert(input, Complex64::new(1.0, 0.0));
    let g = g.value();
    if g.norm_sqr() > 0.0 {
        let bosonic = (f64::from(out.n_signal) * f64::from(out.m_idler)).sqrt();
        map.insert(out, g * bosonic);
    }
    Ok(FockAmplitudeMap(map))
}

/// Seed/pump temporal-overlap model: a Gaussian window in the seed delay
/// with peak visibility `visibility`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapModel {
    pub visibility: f64,
    pub coherence_width_ps: f64,
    pub center_ps: f64,
}

impl OverlapModel {
    pub fn new(visibility: f64, coherence_width_ps: f64, center_ps: f64) -> Result<Self> {
        let m = Self {
            visibility,
            coherence_width_ps,
            center_ps,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.visibility) {
            return Err(Error::config("visibility", "must lie in [0, 1]"));
        }
        if !(self.coherence_width_ps > 0.0 && self.coherence_width_ps.is_finite()) {
            return Err(Error::config("coherence_width_ps", "must be positive"));
        }
        if !self.center_ps.is_finite() {
            return Err(Error::config("tau0_ps", "must be finite"));
        }
        Ok(())
    }

    /// Overlap of seed and pump at delay `tau_ps`, in `[0, visibility]`.
    pub fn overlap(&self, tau_ps: f64) -> f64 {
        let d = (tau_ps - self.center_ps) / self.coherence_width_ps;
        self.visibility * (-0.5 * d * d).exp()
    }
}

impl Default for OverlapModel {
    fn default() -> Self {
        Self {
            visibility: 0.71,
            coherence_width_ps: 10.0 / FWHM_PER_SIGMA,
            center_ps: 0.0,
        }
    }
}

/// `2 sqrt(2 ln 2)`, the FWHM of a unit-sigma Gaussian.
pub const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949;

/// Multiplier on the backward pair probability: `1 + V exp(-(tau-tau0)^2 / 2 sigma^2)`
/// with a seed present, exactly 1 without.
pub fn pair_gen_enhancement(seed_present: bool, tau_ps: f64, overlap: &OverlapModel) -> f64 {
    if seed_present {
        1.0 + overlap.overlap(tau_ps)
    } else {
        1.0
    }
}

/// Output occupations of a 50:50 splitter fed with photons in one input port.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoPhotonSplit {
    pub both_a: f64,
    pub split: f64,
    pub both_b: f64,
}

/// Two indistinguishable photons entering the same port of a 50:50 splitter.
pub fn bs_two_photon_split() -> TwoPhotonSplit {
    let d = bs_output_distribution(2);
    TwoPhotonSplit {
        both_a: d[2],
        split: d[1],
        both_b: d[0],
    }
}

/// `P(k photons exit port A)` for `n` indistinguishable photons in one input
/// port, indexed by `k`. This is `C(n, k) / 2^n`.
pub fn bs_output_distribution(n: u32) -> Vec<f64> {
    let norm = 0.5f64.powi(n as i32);
    let mut binom = 1.0f64;
    (0..=n)
        .map(|k| {
            let p = binom * norm;
            binom = binom * f64::from(n - k) / f64::from(k + 1);
            p
        })
        .collect()
}

/// Source and collection parameters for the analytic four-fold rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRates {
    /// Forward pair probability per pulse.
    pub p1: f64,
    /// Backward spontaneous pair probability per pulse.
    pub p2: f64,
    /// Detection efficiency of channels 1..4.
    pub eta: [f64; 4],
}

impl AnalyticRates {
    pub fn new(p1: f64, p2: f64, eta: [f64; 4]) -> Result<Self> {
        let r = Self { p1, p2, eta };
        for (key, v) in [("p1", p1), ("p2", p2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1]"));
            }
        }
        if eta.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::config("efficiency", "must lie in [0, 1]"));
        }
        Ok(r)
    }

    fn collection(&self) -> f64 {
        self.eta.iter().product()
    }
}

/// Per-pulse probability of a true four-fold coincidence (one forward and one
/// backward pair in the same pulse, signals split at the beam splitter).
pub fn analytic_cc_rate(rates: &AnalyticRates, stimulated: bool) -> f64 {
    let backward = if stimulated { 2.0 * rates.p2 } else { rates.p2 };
    0.5 * rates.p1 * backward * rates.collection()
}

/// Per-pulse-pair probability for each of the four accidental bars. Unaffected
/// by stimulation, which only acts within a pulse.
pub fn analytic_acc_rate(rates: &AnalyticRates) -> f64 {
    0.25 * rates.p1 * rates.p2 * rates.collection()
}

/// Coincidence-to-accidental ratio: 1 for spontaneous backward generation,
/// 2 for fully stimulated.
pub fn predicted_car(stimulated: bool) -> f64 {
    if stimulated {
        2.0
    } else {
        1.0
    }
}

/// `F = (2R' + 1) / (2R' + 2)` for a 1 -> 2 cloner with enhancement ratio `R'`.
pub fn cloning_fidelity(r_prime: f64) -> Result<f64> {
    if r_prime.is_nan() || r_prime < 0.0 {
        return Err(Error::NegativeInput("r_prime"));
    }
    if r_prime.is_infinite() {
        return Ok(1.0);
    }
    Ok((2.0 * r_prime + 1.0) / (2.0 * r_prime + 2.0))
}
