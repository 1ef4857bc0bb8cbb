//! Exit criteria. Each test prints one `[PASS]`/`[FAIL]` line; run with
//! `cargo test -p stimfwm-core --test acceptance -- --nocapture` to see them.

use std::sync::{Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};

use stimfwm_core::coinc::{brute_force_fourfolds, count_fourfolds, count_fourfolds_parallel, extract_car};
use stimfwm_core::config::RunConfig;
use stimfwm_core::fitkit::fit_delay_scan;
use stimfwm_core::fwm::{
    analytic_acc_rate, analytic_cc_rate, cloning_fidelity, predicted_car, AnalyticRates, OverlapModel,
};
use stimfwm_core::io::{read_streams_tt4f, read_tags_csv, read_tt4f, write_streams_tt4f, write_tags_csv};
use stimfwm_core::pipeline::{delay_scan, run_once};
use stimfwm_core::r_prime;
use stimfwm_core::tagsim::{expected_fourfold, simulate, DetectorConfig, PulseTrainConfig, SourceConfig};
use stimfwm_core::{CarResult, CoincConfig, TagStreams};

static SERIAL: Mutex<()> = Mutex::new(());

/// Criteria run one at a time so the timing criterion is not measured under load.
fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: u32, pass: bool, detail: String) {
    println!("[{}] criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} failed: {detail}");
}

fn r_and_err(car: &CarResult) -> (f64, f64) {
    (
        car.r.expect("accidentals recorded"),
        car.r_err.expect("accidentals recorded"),
    )
}

// ---------------------------------------------------------------- 1

#[test]
fn c1_analytic_oracle_exactness() {
    let _serial = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p1: f64 = rng.random();
        let p2: f64 = rng.random();
        let eta: [f64; 4] = std::array::from_fn(|_| rng.random());
        let rates = AnalyticRates::new(p1, p2, eta).unwrap();
        let collection = eta[0] * eta[1] * eta[2] * eta[3];
        let s1 = p1 * p2 * collection / 2.0;
        let s1_stim = p1 * (2.0 * p2) * collection / 2.0;
        let s2 = p1 * p2 * collection / 4.0;
        for (got, want) in [
            (analytic_cc_rate(&rates, false), s1),
            (analytic_cc_rate(&rates, true), s1_stim),
            (analytic_acc_rate(&rates), s2),
        ] {
            if want > 0.0 {
                worst = worst.max((got - want).abs() / want);
            } else {
                worst = worst.max(got.abs());
            }
        }
    }
    let exact = predicted_car(false) == 1.0 && predicted_car(true) == 2.0;
    verdict(
        1,
        exact && worst <= 4.0 * f64::EPSILON,
        format!("predicted_car exact = {exact}, worst relative deviation from S1/S2 = {worst:.2e}"),
    );
}

// ---------------------------------------------------------------- 2 & 3

fn elevated_rate_run(visibility: f64, seed: u64) -> (CarResult, f64) {
    let source = SourceConfig {
        p1: 0.1,
        p2: 0.1,
        overlap: OverlapModel::new(visibility, 4.25, 0.0).unwrap(),
        seed_delay_ps: 0.0,
        loop_transmission: 1.0,
    };
    let det = [DetectorConfig {
        efficiency: 0.5,
        jitter_sigma_ps: 70.0,
        ..DetectorConfig::default()
    }; 4];
    let pulse = PulseTrainConfig {
        period_ps: 3125,
        n_pulses: 1_000_000,
    };
    let coinc = CoincConfig::new(3125, 1280, 5).unwrap();
    let streams = simulate(&pulse, &source, &det, seed).unwrap();
    let car = extract_car(&count_fourfolds(&streams, &coinc).unwrap());
    (car, expected_fourfold(&source, &det).car())
}

#[test]
fn c2_spontaneous_baseline() {
    let _serial = serial();
    let t = Instant::now();
    let (car, model) = elevated_rate_run(0.0, 2002);
    let (r, dr) = r_and_err(&car);
    let pass = (r - 1.0).abs() <= 3.0 * dr && (r - 1.0).abs() <= 0.10;
    verdict(
        2,
        pass,
        format!(
            "R = {r:.3} +- {dr:.3} (target 1, 3 sigma and +-0.10); CC = {}, ACC mean = {:.1}; \
             exact finite-rate model R = {model:.3}; {:.2?}",
            car.cc,
            car.acc_mean,
            t.elapsed()
        ),
    );
}

#[test]
fn c3_stimulated() {
    let _serial = serial();
    let t = Instant::now();
    let (full, model_full) = elevated_rate_run(1.0, 3003);
    let (partial, model_partial) = elevated_rate_run(0.71, 3004);
    let (r1, d1) = r_and_err(&full);
    let (r2, d2) = r_and_err(&partial);
    let pass_full = (r1 - 2.0).abs() <= 3.0 * d1;
    let pass_partial = (r2 - 1.71).abs() <= 3.0 * d2;
    verdict(
        3,
        pass_full && pass_partial,
        format!(
            "V=1: R = {r1:.3} +- {d1:.3} (target 2, model {model_full:.3}); \
             V=0.71: R = {r2:.3} +- {d2:.3} (target 1.71, model {model_partial:.3}); {:.2?}",
            t.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- 4 & 5

/// First-order regime: low pair probabilities, unit efficiency, 70 ps jitter.
fn low_rate_config(n_pulses: u64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.pulse.n_pulses = n_pulses;
    cfg.source.p1 = 0.01;
    cfg.source.p2 = 0.01;
    cfg.source.overlap = OverlapModel::new(0.71, 4.25, 0.0).unwrap();
    for d in &mut cfg.detectors {
        d.efficiency = 1.0;
        d.jitter_sigma_ps = 70.0;
    }
    cfg.seed = seed;
    cfg
}

#[test]
fn c4_paper_delay_pattern() {
    let _serial = serial();
    let t = Instant::now();
    let cfg = low_rate_config(40_000_000, 44);
    let rows = delay_scan(&cfg, &[-18.98, 0.62, 21.62], 1).unwrap();
    let rs: Vec<(f64, f64)> = rows.iter().map(|row| r_and_err(&row.car)).collect();
    let outer_ok = [rs[0].0, rs[2].0].iter().all(|r| (0.85..=1.15).contains(r));
    let target = 1.0 + cfg.source.overlap.visibility;
    let center_ok = (rs[1].0 - target).abs() <= 3.0 * rs[1].1;
    verdict(
        4,
        outer_ok && center_ok,
        format!(
            "R(-18.98) = {:.3} +- {:.3}, R(0.62) = {:.3} +- {:.3} (target {target:.2}), R(21.62) = {:.3} +- {:.3}; {:.2?}",
            rs[0].0,
            rs[0].1,
            rs[1].0,
            rs[1].1,
            rs[2].0,
            rs[2].1,
            t.elapsed()
        ),
    );
}

#[test]
fn c5_delay_scan_fit() {
    let _serial = serial();
    let t = Instant::now();
    let cfg = low_rate_config(4_000_000, 55);
    let taus: Vec<f64> = (0..21).map(|i| -25.0 + 2.5 * i as f64).collect();
    let rows = delay_scan(&cfg, &taus, 1).unwrap();
    let points: Vec<_> = rows.iter().map(|r| r.point).collect();
    let fit = fit_delay_scan(&points).unwrap();
    let errs = fit.std_errors();
    let sigma_tau = cfg.source.overlap.coherence_width_ps;
    let width_ok = fit.converged && (fit.width_ps - sigma_tau).abs() <= 3.0 * errs[2];

    let rp = r_prime(&fit).unwrap();
    let (_, car) = run_once(&low_rate_config(40_000_000, 56), 56, 1).unwrap();
    let (r, dr) = r_and_err(&car);
    let combined = rp.err.hypot(dr);
    let ratio_ok = (rp.value - r).abs() <= 3.0 * combined;
    verdict(
        5,
        width_ok && ratio_ok,
        format!(
            "w = {:.3} +- {:.3} ps (configured {sigma_tau}); R' = {:.3} +- {:.3} vs R = {r:.3} +- {dr:.3} \
             (|diff| = {:.3}, 3 sigma = {:.3}); {:.2?}",
            fit.width_ps,
            errs[2],
            rp.value,
            rp.err,
            (rp.value - r).abs(),
            3.0 * combined,
            t.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn c6_fidelity_formula() {
    let _serial = serial();
    let f1 = cloning_fidelity(1.66).unwrap();
    let f2 = cloning_fidelity(2.0).unwrap();
    verdict(
        6,
        (f1 - 0.812).abs() <= 0.001 && (f2 - 0.8333).abs() <= 0.0005,
        format!("F(1.66) = {f1:.5}, F(2) = {f2:.5}"),
    );
}

// ---------------------------------------------------------------- 7

fn random_instance(rng: &mut ChaCha8Rng) -> (TagStreams, CoincConfig) {
    let period = rng.random_range(1000..5000u64);
    let gate = rng.random_range(1..period.div_ceil(2));
    let max_lag = rng.random_range(1..=5);
    let cfg = CoincConfig::new(period, gate, max_lag).unwrap();
    let slots = rng.random_range(20..2500u64);
    let spread = rng.random_range(0..period);
    let channels = std::array::from_fn(|_| {
        let n = rng.random_range(0..=1000usize);
        let mut s: Vec<u64> = (0..n)
            .map(|_| {
                let slot = rng.random_range(0..slots);
                let base = slot * period + period * 6;
                if rng.random_bool(0.2) {
                    // unaligned background
                    base + rng.random_range(0..period)
                } else {
                    (base as i64 + rng.random_range(-(spread as i64)..=spread as i64)) as u64
                }
            })
            .collect();
        s.sort_unstable();
        s
    });
    (TagStreams::new(period, channels), cfg)
}

#[test]
fn c7_oracle_equivalence() {
    let _serial = serial();
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut total = 0u64;
    for _ in 0..200 {
        let (streams, cfg) = random_instance(&mut rng);
        let fast = count_fourfolds(&streams, &cfg).unwrap();
        let slow = brute_force_fourfolds(&streams, &cfg).unwrap();
        total += fast.total();
        if fast != slow {
            mismatches += 1;
        }
    }
    verdict(
        7,
        mismatches == 0,
        format!(
            "{mismatches}/200 instances differ ({total} quadruples counted); {:.2?}",
            t.elapsed()
        ),
    );
}

// ---------------------------------------------------------------- 8

/// Independent pulsed streams: each channel fires in a pulse slot with
/// probability 0.1, plus 70 ps jitter.
fn pulsed_streams(tags_per_channel: usize, seed: u64) -> TagStreams {
    const T: u64 = 3125;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gap = Geometric::new(0.1).unwrap();
    let jitter = Normal::new(0.0, 70.0).unwrap();
    let channels = std::array::from_fn(|_| {
        let mut slot = 10u64;
        let mut s: Vec<u64> = (0..tags_per_channel)
            .map(|_| {
                slot += 1 + gap.sample(&mut rng);
                let j: f64 = jitter.sample(&mut rng);
                ((slot * T) as i64 + j.round() as i64) as u64
            })
            .collect();
        s.sort_unstable();
        s
    });
    TagStreams::new(T, channels)
}

fn best_time(streams: &TagStreams, cfg: &CoincConfig, reps: usize) -> Duration {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            std::hint::black_box(count_fourfolds(streams, cfg).unwrap());
            t.elapsed()
        })
        .min()
        .unwrap()
}

#[test]
fn c8_scaling_and_parallel_identity() {
    let _serial = serial();
    let cfg = CoincConfig::default();
    let n = 10_000_000;
    let (t_n, t_2n, identical) = {
        let small = pulsed_streams(n, 80);
        let t_n = best_time(&small, &cfg, 3);
        let reference = count_fourfolds(&small, &cfg).unwrap();
        let identical = [1, 2, 4, 8]
            .iter()
            .all(|&w| count_fourfolds_parallel(&small, &cfg, w).unwrap() == reference);
        drop(small);
        let large = pulsed_streams(2 * n, 81);
        let t_2n = best_time(&large, &cfg, 3);
        (t_n, t_2n, identical)
    };
    let ratio = t_2n.as_secs_f64() / t_n.as_secs_f64();
    verdict(
        8,
        ratio <= 2.5 && identical,
        format!(
            "t(N=1e7) = {t_n:.2?}, t(2N) = {t_2n:.2?}, ratio = {ratio:.2} (<= 2.5); \
             workers 1/2/4/8 bit-identical = {identical}"
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn c9_formats() {
    let _serial = serial();
    let mut cfg = RunConfig::default();
    cfg.pulse.n_pulses = 200_000;
    cfg.source.p1 = 0.2;
    cfg.source.p2 = 0.2;
    for d in &mut cfg.detectors {
        d.efficiency = 0.8;
        d.dark_rate_hz = 2e5;
    }
    let streams = simulate(&cfg.pulse, &cfg.source, &cfg.detectors, 9).unwrap();

    let mut bin = Vec::new();
    write_streams_tt4f(&mut bin, &streams).unwrap();
    let (header, records) = read_tt4f(&bin[..]).unwrap();
    let mut again = Vec::new();
    stimfwm_core::io::write_tt4f(&mut again, header, &records).unwrap();
    let from_bin = read_streams_tt4f(&bin[..]).unwrap();
    let round_trip = again == bin && from_bin == streams;

    let mut text = Vec::new();
    write_tags_csv(&mut text, &streams).unwrap();
    let from_csv = read_tags_csv(&text[..], streams.period_ps).unwrap();
    let coinc = cfg.coinc();
    let h_bin = count_fourfolds(&from_bin, &coinc).unwrap();
    let h_csv = count_fourfolds(&from_csv, &coinc).unwrap();
    let equivalent = h_bin == h_csv && !h_bin.is_empty();
    verdict(
        9,
        round_trip && equivalent,
        format!(
            "TT4F round trip bit-exact = {round_trip} ({} bytes, {} tags); CSV/TT4F histograms identical = {equivalent} ({} quadruples)",
            bin.len(),
            streams.total_tags(),
            h_bin.total()
        ),
    );
}
