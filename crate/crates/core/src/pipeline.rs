//! Simulate → count → fit glue shared by the CLI and the acceptance suite.

use serde::{Deserialize, Serialize};

use crate::coinc::{count_fourfolds_parallel, extract_car, CarResult, FourfoldHistogram};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fitkit::{
    confidence_band, fit_baseline, fit_delay_scan, r_prime, Band, BaselineFit, DelayScanPoint, GaussianFit,
    ValueWithError,
};
use crate::fwm::cloning_fidelity;
use crate::tagsim::simulate_with;

/// Seed for the `index`-th point of a scan (SplitMix64 of the base seed).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One simulated and counted run.
pub fn run_once(cfg: &RunConfig, seed: u64, workers: usize) -> Result<(FourfoldHistogram, CarResult)> {
    let streams = simulate_with(&cfg.pulse, &cfg.source, &cfg.detectors, seed, cfg.sim_options())?;
    let hist = count_fourfolds_parallel(&streams, &cfg.coinc(), workers)?;
    let car = extract_car(&hist);
    Ok((hist, car))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub point: DelayScanPoint,
    pub seed: u64,
    pub car: CarResult,
}

/// Runs one simulation per delay with seeds derived from `cfg.seed`.
pub fn delay_scan(cfg: &RunConfig, taus: &[f64], workers: usize) -> Result<Vec<ScanRow>> {
    if taus.is_empty() {
        return Err(Error::config("tau-list", "empty"));
    }
    taus.iter()
        .enumerate()
        .map(|(i, &tau)| {
            if !tau.is_finite() {
                return Err(Error::config("tau-list", format!("non-finite delay {tau}")));
            }
            let mut point_cfg = cfg.clone();
            point_cfg.source.seed_delay_ps = tau;
            let seed = derive_seed(cfg.seed, i as u64);
            let (_, car) = run_once(&point_cfg, seed, workers)?;
            Ok(ScanRow {
                point: DelayScanPoint::from_counts(tau, car.cc as f64, car.acc_mean),
                seed,
                car,
            })
        })
        .collect()
}

/// Fit, band, `R'` and cloning fidelity of a delay scan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub fit: GaussianFit,
    pub fit_errors: [f64; 4],
    pub fwhm_ps: f64,
    pub acc_baseline: BaselineFit,
    pub r_prime: ValueWithError,
    pub fidelity: ValueWithError,
    pub band: Band,
}

pub fn analyze_scan(points: &[DelayScanPoint], band_points: usize) -> Result<ScanReport> {
    let fit = fit_delay_scan(points)?;
    let acc: Vec<(f64, f64, f64)> = points.iter().map(|p| (p.tau_ps, p.acc, p.acc_err)).collect();
    let acc_baseline = fit_baseline(&acc)?;
    let rp = r_prime(&fit)?;
    let f = cloning_fidelity(rp.value)?;
    // dF/dR' = 1 / (2 (R'+1)^2)
    let fidelity = ValueWithError {
        value: f,
        err: rp.err / (2.0 * (rp.value + 1.0).powi(2)),
    };

    let lo = points.iter().map(|p| p.tau_ps).fold(f64::INFINITY, f64::min);
    let hi = points.iter().map(|p| p.tau_ps).fold(f64::NEG_INFINITY, f64::max);
    let n = band_points.max(2);
    let taus: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let band = confidence_band(&fit, &taus)?;

    Ok(ScanReport {
        fit_errors: fit.std_errors(),
        fwhm_ps: fit.fwhm_ps(),
        fit,
        acc_baseline,
        r_prime: rp,
        fidelity,
        band,
    })
}
