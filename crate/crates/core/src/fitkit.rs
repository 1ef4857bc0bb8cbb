//! Delay-scan fitting: Gaussian-plus-baseline for the four-fold coincidences,
//! a constant for the accidentals, the peak-to-baseline ratio `R'` and the
//! corner-scan `±σ` band.

use nalgebra::{Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fwm::FWHM_PER_SIGMA;

pub const MIN_SCAN_POINTS: usize = 6;

/// One delay setting: coincidences, accidental mean and their Poisson errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayScanPoint {
    pub tau_ps: f64,
    pub cc: f64,
    pub acc: f64,
    pub cc_err: f64,
    pub acc_err: f64,
}

impl DelayScanPoint {
    /// `acc` is the mean of the four accidental bars, so its variance is `acc / 4`.
    pub fn from_counts(tau_ps: f64, cc: f64, acc: f64) -> Self {
        Self {
            tau_ps,
            cc,
            acc,
            cc_err: cc.max(0.0).sqrt(),
            acc_err: (acc.max(0.0) / 4.0).sqrt(),
        }
    }
}

/// `C(τ) = A exp(-(τ-τ0)² / 2w²) + B`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianFit {
    pub amplitude: f64,
    pub tau0_ps: f64,
    pub width_ps: f64,
    pub baseline: f64,
    /// Covariance of `[A, τ0, w, B]`.
    pub covariance: [[f64; 4]; 4],
    /// Weighted residual sum of squares at the optimum.
    pub residual_sum: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The normal matrix was singular and a pseudo-inverse was used.
    pub degenerate: bool,
    /// Residual sum after the initial guess and after every accepted step.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

impl GaussianFit {
    pub fn params(&self) -> [f64; 4] {
        [self.amplitude, self.tau0_ps, self.width_ps, self.baseline]
    }

    pub fn std_errors(&self) -> [f64; 4] {
        std::array::from_fn(|i| self.covariance[i][i].max(0.0).sqrt())
    }

    pub fn fwhm_ps(&self) -> f64 {
        FWHM_PER_SIGMA * self.width_ps
    }

    pub fn eval(&self, tau_ps: f64) -> f64 {
        model(&self.params(), tau_ps)
    }
}

fn model(p: &[f64; 4], tau: f64) -> f64 {
    let [a, t0, w, b] = *p;
    let w = w.abs().max(f64::MIN_POSITIVE);
    let d = (tau - t0) / w;
    a * (-0.5 * d * d).exp() + b
}

fn jacobian_row(p: &[f64; 4], tau: f64) -> Vector4<f64> {
    let [a, t0, w, _] = *p;
    let d = tau - t0;
    let e = (-0.5 * d * d / (w * w)).exp();
    Vector4::new(e, a * e * d / (w * w), a * e * d * d / (w * w * w), 1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop once the relative decrease of the residual sum drops below this.
    pub rel_tolerance: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            rel_tolerance: 1e-8,
        }
    }
}

/// Fits the coincidence counts of a delay scan.
pub fn fit_delay_scan(points: &[DelayScanPoint]) -> Result<GaussianFit> {
    let data: Vec<(f64, f64)> = points.iter().map(|p| (p.tau_ps, p.cc)).collect();
    fit_gaussian(&data, FitOptions::default())
}

/// Weighted Levenberg–Marquardt fit of `(tau, count)` pairs with weights
/// `1 / max(count, 1)`.
pub fn fit_gaussian(data: &[(f64, f64)], opts: FitOptions) -> Result<GaussianFit> {
    if data.len() < MIN_SCAN_POINTS {
        return Err(Error::InsufficientData {
            need: MIN_SCAN_POINTS,
            got: data.len(),
        });
    }
    if data.iter().any(|(t, y)| !t.is_finite() || !y.is_finite()) {
        return Err(Error::Format("non-finite scan value".into()));
    }
    let mut data = data.to_vec();
    data.sort_by(|a, b| a.0.total_cmp(&b.0));
    let weights: Vec<f64> = data.iter().map(|&(_, y)| 1.0 / y.max(1.0)).collect();

    let residual = |p: &[f64; 4]| -> f64 {
        data.iter()
            .zip(&weights)
            .map(|(&(t, y), w)| {
                let r = y - model(p, t);
                w * r * r
            })
            .sum()
    };
    let normal = |p: &[f64; 4]| -> (Matrix4<f64>, Vector4<f64>) {
        let mut n = Matrix4::zeros();
        let mut g = Vector4::zeros();
        for (&(t, y), &w) in data.iter().zip(&weights) {
            let j = jacobian_row(p, t);
            n += w * j * j.transpose();
            g += w * (y - model(p, t)) * j;
        }
        (n, g)
    };

    let mut p = initial_guess(&data);
    let mut s = residual(&p);
    let mut trace = vec![s];
    let mut lambda = 1e-3;
    let mut converged = s == 0.0;
    let mut iterations = 0;

    while !converged && iterations < opts.max_iterations {
        iterations += 1;
        let (n, g) = normal(&p);
        let mut damped = n;
        for i in 0..4 {
            damped[(i, i)] += lambda * n[(i, i)].max(1e-12);
        }
        let step = damped.lu().solve(&g);
        let trial = step.map(|d| [p[0] + d[0], p[1] + d[1], p[2] + d[2], p[3] + d[3]]);
        let accepted = trial.filter(|q| q[2] > 0.0 && q[3] >= 0.0).and_then(|q| {
            let sq = residual(&q);
            (sq.is_finite() && sq <= s).then_some((q, sq))
        });
        match accepted {
            Some((q, sq)) => {
                let rel = (s - sq) / s.max(f64::MIN_POSITIVE);
                p = q;
                s = sq;
                trace.push(s);
                lambda = (lambda / 10.0).max(1e-12);
                if rel < opts.rel_tolerance || s == 0.0 {
                    converged = true;
                }
            }
            None => {
                lambda *= 10.0;
                if lambda > 1e16 {
                    // no descent direction left at any damping: at a minimum
                    converged = true;
                }
            }
        }
    }

    let (n, _) = normal(&p);
    let (covariance, degenerate) = invert_normal(&n);
    Ok(GaussianFit {
        amplitude: p[0],
        tau0_ps: p[1],
        width_ps: p[2],
        baseline: p[3],
        covariance,
        residual_sum: s,
        iterations,
        converged,
        degenerate,
        trace,
    })
}

fn invert_normal(n: &Matrix4<f64>) -> ([[f64; 4]; 4], bool) {
    let (inv, degenerate) = match n.cholesky() {
        Some(ch) => (ch.inverse(), false),
        None => {
            let pinv = n
                .pseudo_inverse(1e-12 * n.norm().max(f64::MIN_POSITIVE))
                .unwrap_or_else(|_| Matrix4::from_element(f64::NAN));
            (pinv, true)
        }
    };
    let sym = (inv + inv.transpose()) * 0.5;
    (
        std::array::from_fn(|i| std::array::from_fn(|j| sym[(i, j)])),
        degenerate,
    )
}

/// Baseline from the outer third, peak from the maximum, width from the
/// half-maximum crossings. `data` must be sorted by tau.
fn initial_guess(data: &[(f64, f64)]) -> [f64; 4] {
    let n = data.len();
    let k = (n / 3).max(2);
    let mut outer: Vec<f64> = data[..k.div_ceil(2)]
        .iter()
        .chain(&data[n - k / 2..])
        .map(|&(_, y)| y)
        .collect();
    outer.sort_by(f64::total_cmp);
    let m = outer.len();
    let baseline = if m % 2 == 1 {
        outer[m / 2]
    } else {
        0.5 * (outer[m / 2 - 1] + outer[m / 2])
    }
    .max(0.0);

    let (imax, &(tau_max, y_max)) = data
        .iter()
        .enumerate()
        .max_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .expect("non-empty scan");
    let amplitude = y_max - baseline;

    let span = data[n - 1].0 - data[0].0;
    let min_step = data
        .windows(2)
        .map(|w| w[1].0 - w[0].0)
        .filter(|d| *d > 0.0)
        .fold(f64::INFINITY, f64::min);
    let fallback = if span > 0.0 { span / 6.0 } else { 1.0 };

    let width = if amplitude > 0.0 {
        let half = baseline + 0.5 * amplitude;
        let cross = |range: &mut dyn Iterator<Item = usize>, toward: isize| -> Option<f64> {
            for i in range {
                let j = (i as isize + toward) as usize;
                let (t_in, y_in) = data[i];
                let (t_out, y_out) = data[j];
                if y_out < half {
                    let frac = (y_in - half) / (y_in - y_out);
                    return Some(t_in + frac * (t_out - t_in));
                }
            }
            None
        };
        let left = cross(&mut (1..=imax).rev(), -1);
        let right = cross(&mut (imax..n - 1), 1);
        match (left, right) {
            (Some(l), Some(r)) => (r - l) / FWHM_PER_SIGMA,
            (Some(l), None) => 2.0 * (tau_max - l) / FWHM_PER_SIGMA,
            (None, Some(r)) => 2.0 * (r - tau_max) / FWHM_PER_SIGMA,
            (None, None) => fallback,
        }
    } else {
        fallback
    };
    let floor = if min_step.is_finite() { 0.5 * min_step } else { 1e-3 };
    [amplitude, tau_max, width.max(floor), baseline]
}

/// Constant fit to the accidental counts, with a linear-trend check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFit {
    pub value: f64,
    /// Poisson standard error of `value`.
    pub err: f64,
    pub chi2: f64,
    pub dof: usize,
    pub slope_per_ps: f64,
    pub slope_err: f64,
    /// `slope / slope_err`; near zero for delay-independent data.
    pub slope_z: f64,
}

/// Fits a constant to `(tau, value, sigma)` samples. Under the constant
/// hypothesis every point has the same Poisson variance, so the estimate is
/// the unweighted mean and its error is derived from the supplied sigmas.
pub fn fit_baseline(points: &[(f64, f64, f64)]) -> Result<BaselineFit> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InsufficientData { need: 2, got: n });
    }
    let nf = n as f64;
    let value = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let mean_var = points.iter().map(|p| p.2 * p.2).sum::<f64>() / nf;
    let err = (mean_var / nf).sqrt();
    let sigma2 = |p: &(f64, f64, f64)| (p.2 * p.2).max(f64::MIN_POSITIVE);
    let chi2 = points.iter().map(|p| (p.1 - value).powi(2) / sigma2(p)).sum();

    // ordinary least-squares slope with the pooled variance
    let tau_mean = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let sxx: f64 = points.iter().map(|p| (p.0 - tau_mean).powi(2)).sum();
    let (slope, slope_err) = if sxx > 0.0 {
        let sxy: f64 = points.iter().map(|p| (p.0 - tau_mean) * (p.1 - value)).sum();
        (sxy / sxx, (mean_var / sxx).sqrt())
    } else {
        (0.0, f64::INFINITY)
    };
    let slope_z = if slope_err > 0.0 && slope_err.is_finite() {
        slope / slope_err
    } else {
        0.0
    };
    Ok(BaselineFit {
        value,
        err,
        chi2,
        dof: n - 1,
        slope_per_ps: slope,
        slope_err,
        slope_z,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub tau_ps: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// Envelope of the model over the 16 corners `p_j ± σ_j` (and the central
/// fit) at each `tau`.
pub fn confidence_band(fit: &GaussianFit, taus: &[f64]) -> Result<Band> {
    if fit.covariance.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCovariance);
    }
    let p = fit.params();
    let s = fit.std_errors();
    let mut sets = vec![p];
    for corner in 0..16u32 {
        sets.push(std::array::from_fn(|j| {
            if corner >> j & 1 == 1 {
                p[j] + s[j]
            } else {
                p[j] - s[j]
            }
        }));
    }
    let (lower, upper) = taus
        .iter()
        .map(|&t| {
            sets.iter()
                .map(|q| model(q, t))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        })
        .unzip();
    Ok(Band {
        tau_ps: taus.to_vec(),
        lower,
        upper,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueWithError {
    pub value: f64,
    pub err: f64,
}

/// `R' = C(τ=0) / B` from the fitted curve, with first-order error propagation.
pub fn r_prime(fit: &GaussianFit) -> Result<ValueWithError> {
    let [a, t0, w, b] = fit.params();
    if b.is_nan() || b <= 0.0 {
        return Err(Error::NonPositiveBaseline);
    }
    let e0 = (-0.5 * t0 * t0 / (w * w)).exp();
    let value = (a * e0 + b) / b;
    let grad = [
        e0 / b,
        -a * e0 * t0 / (w * w) / b,
        a * e0 * t0 * t0 / (w * w * w) / b,
        -a * e0 / (b * b),
    ];
    let c = &fit.covariance;
    let mut var = 0.0;
    for i in 0..4 {
        for j in 0..4 {
            if grad[i] != 0.0 && grad[j] != 0.0 {
                var += grad[i] * c[i][j] * grad[j];
            }
        }
    }
    Ok(ValueWithError {
        value,
        err: var.max(0.0).sqrt(),
    })
}
