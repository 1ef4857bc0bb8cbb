//! Simulation and analysis of single-photon stimulated four-wave mixing.
//!
//! - [`fwm`]: first-order state evolution and the analytic CC/ACC rates
//! - [`tagsim`]: Monte Carlo generation of four-channel tag streams
//! - [`coinc`]: four-fold coincidence histogram, plane slice and CAR
//! - [`fitkit`]: delay-scan Gaussian fit, `R'` and confidence band
//! - [`io`], [`config`]: TT4F/CSV formats and the flat run configuration

pub mod coinc;
pub mod config;
pub mod error;
pub mod fitkit;
pub mod fwm;
pub mod io;
pub mod pipeline;
pub mod tags;
pub mod tagsim;

pub use coinc::{
    brute_force_fourfolds, count_fourfolds, count_fourfolds_parallel, extract_car, plane_slice, CarResult, CoincConfig,
    FourfoldHistogram, LagTriple,
};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use fitkit::{
    confidence_band, fit_baseline, fit_delay_scan, r_prime, BaselineFit, DelayScanPoint, GaussianFit, ValueWithError,
};
pub use fwm::{
    analytic_acc_rate, analytic_cc_rate, bs_two_photon_split, cloning_fidelity, evolve_first_order,
    pair_gen_enhancement, predicted_car, AnalyticRates, FockAmplitudeMap, FockState, GainParam, OverlapModel,
};
pub use tags::{TagRecord, TagStreams};
pub use tagsim::{
    expected_singles_rate, simulate, simulate_with, DetectorConfig, PulseTrainConfig, SimOptions, SourceConfig,
};
