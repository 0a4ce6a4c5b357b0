//! Ergodicity diagnostics: return ratios of `exp(theta G)` from energy
//! shells, zero-temperature dissipation scaling, integrated autocorrelation
//! times.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{deterministic_integrate, DynamicsError, IntegratorConfig, Stepper};
use crate::model::{ChainModel, State};
use crate::streams::SeedTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("theta * max(T) = {0} must lie in (0, 1)")]
    BadTheta(f64),
    #[error("weight exponent {0} overflowed")]
    WeightOverflow(f64),
    #[error("autocorrelation window {window} exceeds a quarter of the series length {len}")]
    WindowTooShort { window: usize, len: usize },
    #[error("invalid argument: {0}")]
    BadArgument(String),
}

/// Draws a state with `G = energy`: a standard normal direction for
/// `(p, q)` rescaled onto the level `H = energy - r^2/2`, and `r` from its
/// reservoir equilibrium `N(0, T)` (or `r = 0` when `thermal_r` is false).
pub fn sample_shell_state<R: Rng + ?Sized>(model: &ChainModel, energy: f64, thermal_r: bool, rng: &mut R) -> State {
    loop {
        let mut x = model.zero_state();
        for v in x.p.iter_mut().chain(x.q.iter_mut()) {
            *v = rng.sample(StandardNormal);
        }
        if thermal_r {
            for (j, r) in x.r.iter_mut().enumerate() {
                *r = model.r_temperature(j).sqrt() * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let target = energy - 0.5 * x.r.iter().map(|v| v * v).sum::<f64>();
        if target > 0.0 {
            return model.scale_to_energy(&x, target, false);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LiapunovConfig {
    pub theta: f64,
    pub horizon: f64,
    /// Shell states per energy.
    pub shell_states: usize,
    /// Noise realizations per shell state.
    pub noise_samples: usize,
    /// Step used at `E <= 1`; for anharmonic chains it shrinks like
    /// `E^{-1/2}` so that the shadow-energy error stays below the dissipation.
    pub integrator: IntegratorConfig,
}

impl LiapunovConfig {
    /// Integrator for the shell at `energy`, with the horizon an exact
    /// multiple of the step.
    pub fn integrator_at(&self, model: &ChainModel, energy: f64) -> IntegratorConfig {
        let mut step = self.integrator.step;
        if model.k2() > 2 {
            step /= energy.max(1.0).sqrt();
        }
        let steps = (self.horizon / step).ceil().max(1.0);
        IntegratorConfig {
            step: self.horizon / steps,
            ..self.integrator
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellRatio {
    pub energy: f64,
    /// Largest `log E[exp(theta (G(x_t) - G(x)))]` over the sampled shell states.
    pub log_ratio: f64,
    /// Delta-method standard error of `log_ratio` for the maximizing state.
    pub stderr: f64,
}

/// Fit `log ratio = offset - scale * E^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub offset: f64,
    pub scale: f64,
    pub exponent: f64,
    pub rms_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiapunovReport {
    pub theta: f64,
    pub horizon: f64,
    pub shells: Vec<ShellRatio>,
    pub fit: Option<DecayFit>,
}

/// Estimates `sup_{G(x)=E} E_x[exp(theta G(x_t))] / exp(theta G(x))` for each energy.
pub fn liapunov_ratio(
    model: &ChainModel,
    config: &LiapunovConfig,
    energies: &[f64],
    seeds: &SeedTree,
) -> Result<LiapunovReport, DiagnosticsError> {
    let hot = model.t1().max(model.tn());
    let th = config.theta * hot;
    if !(th > 0.0 && th < 1.0) {
        return Err(DiagnosticsError::BadTheta(th));
    }
    if config.shell_states == 0 || config.noise_samples < 2 {
        return Err(DiagnosticsError::BadArgument(
            "need shell states and at least two noise samples".into(),
        ));
    }
    let mut shells = Vec::with_capacity(energies.len());
    for (ei, &energy) in energies.iter().enumerate() {
        let integrator = config.integrator_at(model, energy);
        let steps = integrator.steps_for(config.horizon)?;
        let per_state: Vec<Result<(f64, f64), DiagnosticsError>> = (0..config.shell_states)
            .into_par_iter()
            .map(|s| {
                let mut rng = seeds.rng("shell", &[ei as u64, s as u64]);
                let x0 = sample_shell_state(model, energy, true, &mut rng);
                let g0 = model.energy_g(&x0);
                let mut exps = Vec::with_capacity(config.noise_samples);
                for k in 0..config.noise_samples {
                    let mut rng = seeds.rng("shell-noise", &[ei as u64, s as u64, k as u64]);
                    let mut stepper = Stepper::new(model, integrator)?;
                    let mut x = x0.clone();
                    for _ in 0..steps {
                        stepper.step(&mut x, &mut rng)?;
                    }
                    let e = config.theta * (model.energy_g(&x) - g0);
                    if !e.is_finite() {
                        return Err(DiagnosticsError::WeightOverflow(e));
                    }
                    exps.push(e);
                }
                Ok(log_mean_exp(&exps))
            })
            .collect();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for r in per_state {
            let r = r?;
            if r.0 > best.0 {
                best = r;
            }
        }
        shells.push(ShellRatio {
            energy,
            log_ratio: best.0,
            stderr: best.1,
        });
    }
    let fit = (shells.len() >= 3).then(|| {
        let e: Vec<f64> = shells.iter().map(|s| s.energy).collect();
        let y: Vec<f64> = shells.iter().map(|s| s.log_ratio).collect();
        fit_stretched_decay(&e, &y)
    });
    Ok(LiapunovReport {
        theta: config.theta,
        horizon: config.horizon,
        shells,
        fit,
    })
}

/// `log mean exp(v)` and its delta-method standard error.
pub fn log_mean_exp(v: &[f64]) -> (f64, f64) {
    let top = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = v.iter().map(|x| (x - top).exp()).collect();
    let k = w.len() as f64;
    let mean = w.iter().sum::<f64>() / k;
    let var = w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (top + mean.ln(), (var / k).sqrt() / mean)
}

/// Least squares `y = offset - scale * x^exponent`, scanning the exponent on
/// a fine grid in `[0.05, 2]` and solving the linear part exactly.
pub fn fit_stretched_decay(x: &[f64], y: &[f64]) -> DecayFit {
    let mut best = DecayFit {
        offset: f64::NAN,
        scale: f64::NAN,
        exponent: f64::NAN,
        rms_residual: f64::INFINITY,
    };
    for k in 0..=1950 {
        let beta = 0.05 + k as f64 * 1e-3;
        let f: Vec<f64> = x.iter().map(|e| -e.powf(beta)).collect();
        let (offset, scale) = linear_fit(&f, y);
        let rms = (f
            .iter()
            .zip(y)
            .map(|(fi, yi)| (yi - offset - scale * fi).powi(2))
            .sum::<f64>()
            / x.len() as f64)
            .sqrt();
        if rms < best.rms_residual {
            best = DecayFit {
                offset,
                scale,
                exponent: beta,
                rms_residual: rms,
            };
        }
    }
    best
}

/// `(intercept, slope)` of the least-squares line `y = intercept + slope x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let k = x.len() as f64;
    let mx = x.iter().sum::<f64>() / k;
    let my = y.iter().sum::<f64>() / k;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (my - slope * mx, slope)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingConfig {
    pub shell_states: usize,
    /// Integration steps per horizon `t_E`.
    pub steps_per_horizon: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    /// `3/k_2 - 1/2`.
    pub predicted: f64,
    pub energies: Vec<f64>,
    /// Log-log slope of `int_0^{t_E} r^2 ds` against `E`, one per shell direction.
    pub slopes: Vec<f64>,
    /// Slope farthest from the prediction.
    pub worst: f64,
    pub mean: f64,
}

impl TrackingReport {
    pub fn worst_relative_error(&self) -> f64 {
        ((self.worst - self.predicted) / self.predicted).abs()
    }
}

/// Zero-temperature dissipation over `t_E = E^{1/k_2 - 1/2}` from shell
/// states with `r = 0`, for a fixed set of random directions.
pub fn tracking_scaling(
    model: &ChainModel,
    energies: &[f64],
    config: &TrackingConfig,
    seeds: &SeedTree,
) -> Result<TrackingReport, DiagnosticsError> {
    if energies.len() < 2 || config.shell_states == 0 || config.steps_per_horizon == 0 {
        return Err(DiagnosticsError::BadArgument(
            "need two energies, shell states and steps".into(),
        ));
    }
    let k2 = model.k2() as f64;
    let predicted = 3.0 / k2 - 0.5;
    let log_e: Vec<f64> = energies.iter().map(|e| e.ln()).collect();
    let slopes: Vec<Result<f64, DiagnosticsError>> = (0..config.shell_states)
        .into_par_iter()
        .map(|s| {
            let mut rng = seeds.rng("tracking", &[s as u64]);
            let direction = sample_shell_state(model, 1.0, false, &mut rng);
            let mut log_r2 = Vec::with_capacity(energies.len());
            for &e in energies {
                let x0 = model.scale_to_energy(&direction, e, false);
                let horizon = e.powf(1.0 / k2 - 0.5);
                let h = horizon / config.steps_per_horizon as f64;
                let path = deterministic_integrate(model, &x0, horizon, h, config.steps_per_horizon)?;
                log_r2.push(path.r2_integral.ln());
            }
            Ok(linear_fit(&log_e, &log_r2).1)
        })
        .collect();
    let slopes = slopes.into_iter().collect::<Result<Vec<_>, _>>()?;
    let worst = slopes.iter().cloned().fold(predicted, |w, s| {
        if (s - predicted).abs() > (w - predicted).abs() {
            s
        } else {
            w
        }
    });
    let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
    Ok(TrackingReport {
        predicted,
        energies: energies.to_vec(),
        slopes,
        worst,
        mean,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingEstimate {
    /// Integrated autocorrelation time in time units.
    pub tau: f64,
    /// Summation window in samples.
    pub window: usize,
    pub variance: f64,
}

/// Integrated autocorrelation time `dt (1 + 2 sum_k rho_k)` with the
/// self-consistent window `W >= c tau(W)`.
pub fn mixing_time_series(series: &[f64], dt: f64, window_factor: f64) -> Result<MixingEstimate, DiagnosticsError> {
    let len = series.len();
    if len < 8 {
        return Err(DiagnosticsError::BadArgument("series too short".into()));
    }
    let mean = series.iter().sum::<f64>() / len as f64;
    let centred: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let c0 = centred.iter().map(|v| v * v).sum::<f64>() / len as f64;
    if c0 == 0.0 {
        return Ok(MixingEstimate {
            tau: dt,
            window: 0,
            variance: 0.0,
        });
    }
    let mut tau = 1.0;
    let limit = len / 4;
    for k in 1..=limit {
        let ck = centred[..len - k]
            .iter()
            .zip(&centred[k..])
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / len as f64;
        tau += 2.0 * ck / c0;
        if k as f64 >= window_factor * tau {
            return Ok(MixingEstimate {
                tau: tau * dt,
                window: k,
                variance: c0,
            });
        }
    }
    Err(DiagnosticsError::WindowTooShort { window: limit, len })
}

/// Integrated autocorrelation time of `observable` sampled every
/// `sample_every` steps along one stationary trajectory.
#[allow(clippy::too_many_arguments)]
pub fn mixing_estimate(
    model: &ChainModel,
    observable: &(dyn Fn(&State) -> f64 + Sync),
    x0: &State,
    horizon: f64,
    burn_in: f64,
    sample_every: usize,
    integrator: &IntegratorConfig,
    seeds: &SeedTree,
) -> Result<MixingEstimate, DiagnosticsError> {
    let burn = integrator.steps_for(burn_in)?;
    let steps = integrator.steps_for(horizon)?;
    let every = sample_every.max(1) as u64;
    let mut rng = seeds.rng("mixing", &[]);
    let mut stepper = Stepper::new(model, *integrator)?;
    let mut x = x0.clone();
    for _ in 0..burn {
        stepper.step(&mut x, &mut rng)?;
    }
    let mut series = Vec::with_capacity((steps / every) as usize);
    for k in 1..=steps {
        stepper.step(&mut x, &mut rng)?;
        if k % every == 0 {
            series.push(observable(&x));
        }
    }
    mixing_time_series(&series, integrator.step * every as f64, 5.0)
}
