use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use serde_json::json;
use sha2::{Digest, Sha256};

use stimfwm_core::config::default_config_text;
use stimfwm_core::io::{load_tags, read_scan_csv, save_tags, write_histogram_csv, write_plane_csv, write_scan_csv};
use stimfwm_core::pipeline::{analyze_scan, delay_scan};
use stimfwm_core::tagsim::SimMetadata;
use stimfwm_core::{count_fourfolds_parallel, extract_car, plane_slice, simulate_with, CoincConfig, Error, RunConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_FORMAT: u8 = 4;
const EXIT_NUMERIC: u8 = 5;

/// The delay-scan fit stopped without meeting its convergence test.
#[derive(Debug)]
struct NotConverged {
    iterations: usize,
}

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "fit did not converge after {} iterations", self.iterations)
    }
}

impl std::error::Error for NotConverged {}

#[derive(Parser)]
#[command(
    name = "stimfwm",
    version,
    about = "Stimulated FWM tag simulation and four-fold coincidence analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate four tag streams and write them as TT4F (or CSV for a .csv path).
    Simulate {
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `seed` from the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the four-fold lag histogram of a tag file and report CC, ACC and R.
    Count {
        tags: PathBuf,
        /// Gate half-width in ps.
        #[arg(long, default_value_t = 1280)]
        gate: u64,
        #[arg(long, default_value_t = 5)]
        max_lag: u32,
        /// Pulse period in ps for CSV input (TT4F carries its own).
        #[arg(long, default_value_t = 3125)]
        period: u64,
        /// Writes <out>.hist.csv, <out>.plane.csv and <out>.car.json.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Simulate and count once per seed-pump delay.
    Scan {
        config: PathBuf,
        /// Comma-separated delays in ps.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        tau_list: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fit a scan CSV and report the fit, band, R' and cloning fidelity.
    Report {
        scan: PathBuf,
        /// JSON report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plot-ready CSV of tau, fit, band lower and upper.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long, default_value_t = 201)]
        band_points: usize,
    },
    /// Print the default configuration.
    DefaultConfig,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::InvalidConfig { .. }
                | Error::TruncationExceeded { .. }
                | Error::GainOutOfRange(_)
                | Error::NegativeInput(_) => EXIT_CONFIG,
                Error::Io(_) => EXIT_IO,
                Error::Format(_) | Error::UnsortedStream { .. } | Error::Csv(_) | Error::Json(_) => EXIT_FORMAT,
                Error::OracleInputTooLarge { .. }
                | Error::InsufficientData { .. }
                | Error::NonFiniteCovariance
                | Error::NonPositiveBaseline => EXIT_NUMERIC,
            };
        }
        if cause.downcast_ref::<NotConverged>().is_some() {
            return EXIT_NUMERIC;
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    1
}

fn workers(requested: Option<usize>) -> usize {
    requested
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn file_sha256(path: &Path) -> anyhow::Result<String> {
    let bytes = fs::read(path).map_err(Error::Io)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn write_json(path: &Path, value: &serde_json::Value) -> anyhow::Result<()> {
    let mut w = BufWriter::new(
        File::create(path)
            .map_err(Error::Io)
            .with_context(|| format!("creating {}", path.display()))?,
    );
    serde_json::to_writer_pretty(&mut w, value).map_err(Error::Json)?;
    writeln!(w).map_err(Error::Io)?;
    w.flush().map_err(Error::Io)?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path)
        .map_err(Error::Io)
        .with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn load_config(path: &Path, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path)
        .map_err(Error::Io)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut cfg: RunConfig = text.parse().with_context(|| format!("in {}", path.display()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_simulate(config: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let cfg = load_config(config, seed)?;
    let opts = cfg.sim_options();
    let streams = simulate_with(&cfg.pulse, &cfg.source, &cfg.detectors, cfg.seed, opts)?;
    save_tags(out, &streams).with_context(|| format!("writing {}", out.display()))?;

    let duration_s = (cfg.pulse.n_pulses * cfg.pulse.period_ps) as f64 * 1e-12;
    let counts: Vec<usize> = streams.channels.iter().map(Vec::len).collect();
    let rates: Vec<f64> = counts.iter().map(|&n| n as f64 / duration_s).collect();
    let meta = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "config": cfg.to_text(),
        "simulation": SimMetadata::new(&cfg.pulse, &cfg.source, &cfg.detectors, cfg.seed, opts),
        "tags_per_channel": counts,
        "rate_hz_per_channel": rates,
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&with_suffix(out, ".meta.json"), &meta)?;
    log::info!("wrote {} tags to {}", streams.total_tags(), out.display());
    Ok(())
}

fn cmd_count(tags: &Path, coinc: CoincConfig, out: Option<&Path>, workers: usize) -> anyhow::Result<()> {
    let streams = load_tags(tags, coinc.period_ps).with_context(|| format!("reading {}", tags.display()))?;
    let coinc = CoincConfig::new(streams.period_ps, coinc.gate_halfwidth_ps, coinc.max_lag)?;
    let hist = count_fourfolds_parallel(&streams, &coinc, workers)?;
    let plane = plane_slice(&hist);
    let car = extract_car(&hist);

    // provenance from a simulate sidecar, when there is one
    let source = fs::read(with_suffix(tags, ".meta.json"))
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
        .map(|m| json!({ "config_hash": m["config_hash"], "seed": m["seed"] }));
    let report = json!({
        "input": tags.display().to_string(),
        "source": source,
        "input_sha256": file_sha256(tags)?,
        "period_ps": coinc.period_ps,
        "gate_halfwidth_ps": coinc.gate_halfwidth_ps,
        "max_lag": coinc.max_lag,
        "gating": "peak-centred: |dt - nT| <= gate",
        "tags_per_channel": streams.channels.iter().map(Vec::len).collect::<Vec<_>>(),
        "total_fourfolds": hist.total(),
        "inspected_quadruples": hist.inspected(),
        "on_plane": plane.values().sum::<u64>(),
        "car": car,
        "r_defined": car.r.is_some(),
    });

    if let Some(prefix) = out {
        write_histogram_csv(create(&with_suffix(prefix, ".hist.csv"))?, &hist)?;
        write_plane_csv(create(&with_suffix(prefix, ".plane.csv"))?, &plane)?;
        write_json(&with_suffix(prefix, ".car.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    if car.r.is_none() {
        eprintln!("warning: no accidental counts; R is undefined");
    }
    Ok(())
}

fn parse_taus(raw: &[String]) -> anyhow::Result<Vec<f64>> {
    raw.iter()
        .map(|s| {
            s.trim().parse::<f64>().ok().filter(|t| t.is_finite()).ok_or_else(|| {
                Error::InvalidConfig {
                    key: "tau-list".into(),
                    reason: format!("cannot parse `{s}`"),
                }
                .into()
            })
        })
        .collect()
}

fn cmd_scan(config: &Path, tau_list: &[String], seed: Option<u64>, out: &Path, workers: usize) -> anyhow::Result<()> {
    let cfg = load_config(config, seed)?;
    let taus = parse_taus(tau_list)?;
    // fail on an unwritable destination before spending time simulating
    let w = create(out)?;
    let rows = delay_scan(&cfg, &taus, workers)?;
    let points: Vec<_> = rows.iter().map(|r| r.point).collect();
    write_scan_csv(w, &points)?;

    let meta = json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "config": cfg.to_text(),
        "points": rows.iter().map(|r| json!({
            "tau_ps": r.point.tau_ps,
            "seed": r.seed,
            "car": r.car,
        })).collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&with_suffix(out, ".meta.json"), &meta)?;
    for r in &rows {
        match (r.car.r, r.car.r_err) {
            (Some(v), Some(e)) => eprintln!(
                "tau = {:>8.2} ps  CC = {:>7}  R = {v:.3} +- {e:.3}",
                r.point.tau_ps, r.car.cc
            ),
            _ => eprintln!("tau = {:>8.2} ps  CC = {:>7}  R undefined", r.point.tau_ps, r.car.cc),
        }
    }
    Ok(())
}

fn cmd_report(scan: &Path, out: Option<&Path>, curve: Option<&Path>, band_points: usize) -> anyhow::Result<()> {
    let file = File::open(scan)
        .map_err(Error::Io)
        .with_context(|| format!("reading {}", scan.display()))?;
    let points = read_scan_csv(BufReader::new(file)).with_context(|| format!("parsing {}", scan.display()))?;
    let rep = analyze_scan(&points, band_points).context("fitting delay scan")?;

    let report = json!({
        "input": scan.display().to_string(),
        "input_sha256": file_sha256(scan)?,
        "points": points.len(),
        "fit": {
            "amplitude": rep.fit.amplitude,
            "tau0_ps": rep.fit.tau0_ps,
            "width_ps": rep.fit.width_ps,
            "baseline": rep.fit.baseline,
            "errors": {
                "amplitude": rep.fit_errors[0],
                "tau0_ps": rep.fit_errors[1],
                "width_ps": rep.fit_errors[2],
                "baseline": rep.fit_errors[3],
            },
            "fwhm_ps": rep.fwhm_ps,
            "covariance": rep.fit.covariance,
            "residual_sum": rep.fit.residual_sum,
            "iterations": rep.fit.iterations,
            "converged": rep.fit.converged,
            "degenerate": rep.fit.degenerate,
        },
        "acc_baseline": rep.acc_baseline,
        "r_prime": rep.r_prime,
        "fidelity": rep.fidelity,
        "band": rep.band,
    });
    match out {
        Some(p) => write_json(p, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if let Some(p) = curve {
        let mut w = create(p)?;
        writeln!(w, "tau_ps,fit,lower,upper").map_err(Error::Io)?;
        for (i, &t) in rep.band.tau_ps.iter().enumerate() {
            writeln!(w, "{t},{},{},{}", rep.fit.eval(t), rep.band.lower[i], rep.band.upper[i]).map_err(Error::Io)?;
        }
        w.flush().map_err(Error::Io)?;
    }
    eprintln!(
        "R' = {:.4} +- {:.4}  F = {:.4} +- {:.4}  FWHM = {:.2} ps",
        rep.r_prime.value, rep.r_prime.err, rep.fidelity.value, rep.fidelity.err, rep.fwhm_ps
    );
    if !rep.fit.converged {
        eprintln!(
            "last residual sums: {:?}",
            rep.fit.trace.iter().rev().take(5).collect::<Vec<_>>()
        );
        return Err(NotConverged {
            iterations: rep.fit.iterations,
        }
        .into());
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { config, out, seed } => cmd_simulate(&config, &out, seed),
        Command::Count {
            tags,
            gate,
            max_lag,
            period,
            out,
            workers: w,
        } => {
            let coinc = CoincConfig {
                period_ps: period,
                gate_halfwidth_ps: gate,
                max_lag,
            };
            cmd_count(&tags, coinc, out.as_deref(), workers(w))
        }
        Command::Scan {
            config,
            tau_list,
            seed,
            out,
            workers: w,
        } => cmd_scan(&config, &tau_list, seed, &out, workers(w)),
        Command::Report {
            scan,
            out,
            curve,
            band_points,
        } => {
            if band_points < 2 {
                bail!(Error::InvalidConfig {
                    key: "band-points".into(),
                    reason: "need at least 2".into(),
                });
            }
            cmd_report(&scan, out.as_deref(), curve.as_deref(), band_points)
        }
        Command::DefaultConfig => {
            print!("{}", default_config_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
