//! Monte Carlo estimators: stationary averages, the finite-time moment
//! generating function, the cumulant generating function `e(alpha)` by
//! population dynamics, and its Legendre transform.
//!
//! Sign convention: `e(alpha) = lim -(1/t) log E[exp(-alpha W(t))]` with
//! `W(t) = int_0^t sigma ds`, so `e(0) = e(1) = 0` and `e'(0) = <sigma>`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{DynamicsError, IntegratorConfig, Stepper};
use crate::model::{ChainModel, ModelError, Observable, State};
use crate::streams::SeedTree;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("weight exponent {exponent} overflowed (horizon too long for this estimator)")]
    WeightOverflow { exponent: f64 },
    #[error("population collapsed in window {window}: effective sample size {ess}")]
    PopulationCollapse { window: usize, ess: f64 },
    #[error("alpha = {alpha} lies outside the admissible interval ({lo}, {hi})")]
    AlphaInadmissible { alpha: f64, lo: f64, hi: f64 },
    #[error("alpha grid is not closed under alpha -> 1 - alpha (missing partner of {0})")]
    GridNotSymmetric(f64),
    #[error("argmax for w = {w} lies on the boundary of the alpha grid")]
    GridTooCoarse { w: f64 },
    #[error("invalid argument: {0}")]
    BadArgument(String),
}

/// `(-T_min/(T_max-T_min), 1 + T_min/(T_max-T_min))`, or the whole line when
/// the temperatures agree.
pub fn admissible_alpha_interval(model: &ChainModel) -> (f64, f64) {
    let (t1, tn) = (model.t1(), model.tn());
    if t1 == tn {
        return (f64::NEG_INFINITY, f64::INFINITY);
    }
    let tmin = t1.min(tn);
    let spread = t1.max(tn) - tmin;
    (-tmin / spread, 1.0 + tmin / spread)
}

fn check_alpha(model: &ChainModel, alpha: f64) -> Result<(), EstimatorError> {
    let (lo, hi) = admissible_alpha_interval(model);
    if alpha > lo && alpha < hi {
        Ok(())
    } else {
        Err(EstimatorError::AlphaInadmissible { alpha, lo, hi })
    }
}

/// Batch-means estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchEstimate {
    pub mean: f64,
    pub stderr: f64,
    /// Pooled batch means over all replicas, replica-major.
    pub batch_means: Vec<f64>,
}

impl BatchEstimate {
    pub fn from_batches(batch_means: Vec<f64>) -> Self {
        let (mean, stderr) = mean_and_stderr(&batch_means);
        Self {
            mean,
            stderr,
            batch_means,
        }
    }

    /// Estimate of `self - other` from paired batches.
    pub fn difference(&self, other: &BatchEstimate) -> BatchEstimate {
        BatchEstimate::from_batches(
            self.batch_means
                .iter()
                .zip(&other.batch_means)
                .map(|(a, b)| a - b)
                .collect(),
        )
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(v: &[f64]) -> (f64, f64) {
    let k = v.len() as f64;
    let mean = v.iter().sum::<f64>() / k;
    if v.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1.0);
    (mean, (var / k).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AverageConfig {
    /// Measured horizon per replica, after burn-in.
    pub horizon: f64,
    pub burn_in: f64,
    pub batches: usize,
    pub replicas: usize,
    pub integrator: IntegratorConfig,
}

pub type ObservableFn<'a> = &'a (dyn Fn(&State) -> f64 + Sync);

/// Batch-means time averages of several observables along the same paths.
pub fn ergodic_averages(
    model: &ChainModel,
    observables: &[ObservableFn<'_>],
    x0: &State,
    config: &AverageConfig,
    seeds: &SeedTree,
) -> Result<Vec<BatchEstimate>, EstimatorError> {
    if config.batches == 0 || config.replicas == 0 {
        return Err(EstimatorError::BadArgument(
            "need at least one batch and one replica".into(),
        ));
    }
    if !(config.horizon > 0.0) || config.burn_in < 0.0 {
        return Err(EstimatorError::BadArgument("horizon must exceed burn-in".into()));
    }
    let burn = config.integrator.steps_for(config.burn_in)?;
    let total = config.integrator.steps_for(config.horizon)?;
    let per_batch = total / config.batches as u64;
    if per_batch == 0 {
        return Err(EstimatorError::BadArgument("fewer steps than batches".into()));
    }
    let runs: Vec<Result<Vec<Vec<f64>>, EstimatorError>> = (0..config.replicas)
        .into_par_iter()
        .map(|rep| {
            let mut rng = seeds.rng("average", &[rep as u64]);
            let mut stepper = Stepper::new(model, config.integrator)?;
            let mut x = x0.clone();
            for _ in 0..burn {
                stepper.step(&mut x, &mut rng)?;
            }
            let mut out = vec![Vec::with_capacity(config.batches); observables.len()];
            let mut sums = vec![0.0; observables.len()];
            for _ in 0..config.batches {
                sums.iter_mut().for_each(|s| *s = 0.0);
                let mut weight = 0.0;
                for _ in 0..per_batch {
                    stepper.step_with(&mut x, &mut rng, |s, w| {
                        weight += w;
                        for (acc, f) in sums.iter_mut().zip(observables) {
                            *acc += w * f(s);
                        }
                    })?;
                }
                for (o, s) in out.iter_mut().zip(&sums) {
                    o.push(s / weight);
                }
            }
            Ok(out)
        })
        .collect();
    let mut pooled = vec![Vec::new(); observables.len()];
    for run in runs {
        for (p, b) in pooled.iter_mut().zip(run?) {
            p.extend(b);
        }
    }
    Ok(pooled.into_iter().map(BatchEstimate::from_batches).collect())
}

pub fn ergodic_average(
    model: &ChainModel,
    observable: ObservableFn<'_>,
    x0: &State,
    config: &AverageConfig,
    seeds: &SeedTree,
) -> Result<BatchEstimate, EstimatorError> {
    Ok(ergodic_averages(model, &[observable], x0, config, seeds)?.remove(0))
}

/// Naive estimate of `E_x[exp(-alpha W(t))]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MgfEstimate {
    pub value: f64,
    /// 95% percentile bootstrap interval.
    pub ci: (f64, f64),
    pub samples: usize,
}

const EXPONENT_GUARD: f64 = 700.0;

pub fn mgf_naive(
    model: &ChainModel,
    obs: Observable,
    alpha: f64,
    t: f64,
    samples: usize,
    x0: &State,
    integrator: &IntegratorConfig,
    seeds: &SeedTree,
) -> Result<MgfEstimate, EstimatorError> {
    model.check_observable(obs)?;
    check_alpha(model, alpha)?;
    if samples < 2 {
        return Err(EstimatorError::BadArgument("need at least two trajectories".into()));
    }
    let works: Vec<Result<f64, EstimatorError>> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let mut rng = seeds.rng("mgf", &[k as u64]);
            let traj = crate::dynamics::integrate(model, x0, t, integrator, &mut rng, &[obs], None)?;
            Ok(traj.work.integrals[0])
        })
        .collect();
    let mut weights = Vec::with_capacity(samples);
    for w in works {
        let exponent = -alpha * w?;
        if !exponent.is_finite() || exponent.abs() > EXPONENT_GUARD {
            return Err(EstimatorError::WeightOverflow { exponent });
        }
        weights.push(exponent.exp());
    }
    let value = weights.iter().sum::<f64>() / samples as f64;
    let mut rng = seeds.rng("mgf-bootstrap", &[]);
    let mut boot: Vec<f64> = (0..1000)
        .map(|_| (0..samples).map(|_| weights[rng.random_range(0..samples)]).sum::<f64>() / samples as f64)
        .collect();
    boot.sort_by(f64::total_cmp);
    Ok(MgfEstimate {
        value,
        ci: (boot[25], boot[974]),
        samples,
    })
}

/// How an `e(alpha)` value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CgfMethod {
    Naive,
    Cloning,
    Riccati,
    Grid,
}

impl std::fmt::Display for CgfMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CgfMethod::Naive => "naive",
            CgfMethod::Cloning => "cloning",
            CgfMethod::Riccati => "riccati",
            CgfMethod::Grid => "grid",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgfPoint {
    pub alpha: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub method: CgfMethod,
    /// Horizon `t`; zero for exact methods.
    pub horizon: f64,
    /// Population size; zero for exact methods.
    pub population: usize,
}

impl CgfPoint {
    pub fn exact(alpha: f64, value: f64, method: CgfMethod) -> Self {
        Self {
            alpha,
            estimate: value,
            stderr: 0.0,
            method,
            horizon: 0.0,
            population: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CloningConfig {
    /// Measured horizon, excluding warm-up windows.
    pub horizon: f64,
    pub population: usize,
    pub window: f64,
    pub warmup_windows: usize,
    /// Independent populations; the standard error comes from their spread.
    pub replicas: usize,
    pub integrator: IntegratorConfig,
}

impl CloningConfig {
    pub fn with_horizon(mut self, horizon: f64) -> Self {
        self.horizon = horizon;
        self
    }
}

/// Population-dynamics estimate of `e(alpha)` with systematic resampling
/// after every window.
pub fn cgf_cloning(
    model: &ChainModel,
    obs: Observable,
    alpha: f64,
    config: &CloningConfig,
    x0: &State,
    seeds: &SeedTree,
) -> Result<CgfPoint, EstimatorError> {
    model.check_observable(obs)?;
    check_alpha(model, alpha)?;
    if config.population < 2 || config.replicas < 2 {
        return Err(EstimatorError::BadArgument(
            "cloning needs a population of at least 2 and at least 2 replicas".into(),
        ));
    }
    let window_steps = config.integrator.steps_for(config.window)?;
    let windows = (config.horizon / config.window).round() as usize;
    if windows == 0 || ((windows as f64) * config.window - config.horizon).abs() > 1e-9 * config.horizon {
        return Err(EstimatorError::BadArgument(format!(
            "horizon {} is not a positive multiple of the window {}",
            config.horizon, config.window
        )));
    }
    let measured = windows as f64 * config.window;
    let mut values = Vec::with_capacity(config.replicas);
    for rep in 0..config.replicas {
        let tree = seeds.child("cloning", &[rep as u64]);
        let log_sum = run_population(model, obs, alpha, config, window_steps, windows, x0, &tree)?;
        values.push(-log_sum / measured);
    }
    let (estimate, stderr) = mean_and_stderr(&values);
    Ok(CgfPoint {
        alpha,
        estimate,
        stderr,
        method: CgfMethod::Cloning,
        horizon: measured,
        population: config.population,
    })
}

/// Sum over measured windows of `log(mean window weight)`.
#[allow(clippy::too_many_arguments)]
fn run_population(
    model: &ChainModel,
    obs: Observable,
    alpha: f64,
    config: &CloningConfig,
    window_steps: u64,
    windows: usize,
    x0: &State,
    seeds: &SeedTree,
) -> Result<f64, EstimatorError> {
    let n = config.population;
    let mut walkers = vec![x0.clone(); n];
    let mut log_sum = 0.0;
    for window in 0..config.warmup_windows + windows {
        let moved: Vec<Result<(State, f64), EstimatorError>> = walkers
            .par_iter()
            .enumerate()
            .map(|(k, x)| {
                let mut rng = seeds.rng("walker", &[window as u64, k as u64]);
                let mut stepper = Stepper::new(model, config.integrator)?;
                let mut x = x.clone();
                let mut work = 0.0;
                for _ in 0..window_steps {
                    stepper.step_with(&mut x, &mut rng, |s, w| work += w * model.observe(obs, s))?;
                }
                Ok((x, work))
            })
            .collect();
        let mut states = Vec::with_capacity(n);
        let mut log_w = Vec::with_capacity(n);
        for m in moved {
            let (x, work) = m?;
            let e = -alpha * work;
            if !e.is_finite() {
                return Err(EstimatorError::WeightOverflow { exponent: e });
            }
            states.push(x);
            log_w.push(e);
        }
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - top).exp()).collect();
        let sum: f64 = w.iter().sum();
        let sum_sq: f64 = w.iter().map(|v| v * v).sum();
        let ess = sum * sum / sum_sq;
        if ess < 2.0 {
            return Err(EstimatorError::PopulationCollapse { window, ess });
        }
        if window >= config.warmup_windows {
            log_sum += top + (sum / n as f64).ln();
        }
        let mut rng = seeds.rng("resample", &[window as u64]);
        walkers = systematic_resample(&states, &w, sum, rng.random::<f64>());
    }
    Ok(log_sum)
}

/// Systematic resampling to the same population size with a single uniform offset.
pub fn systematic_resample(states: &[State], weights: &[f64], total: f64, offset: f64) -> Vec<State> {
    let n = states.len();
    let step = total / n as f64;
    let mut out = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut k = 0;
    for j in 0..n {
        let target = (j as f64 + offset) * step;
        while cumulative < target && k + 1 < n {
            k += 1;
            cumulative += weights[k];
        }
        out.push(states[k].clone());
    }
    out
}

/// Cloning estimates at horizons `t` and `2t` with the `1/t` extrapolation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoHorizon {
    pub short: CgfPoint,
    pub long: CgfPoint,
    /// `2 e(2t) - e(t)`.
    pub extrapolated: f64,
    pub extrapolated_stderr: f64,
}

impl TwoHorizon {
    pub fn from_runs(short: CgfPoint, long: CgfPoint) -> Self {
        Self {
            short,
            long,
            extrapolated: 2.0 * long.estimate - short.estimate,
            extrapolated_stderr: (4.0 * long.stderr.powi(2) + short.stderr.powi(2)).sqrt(),
        }
    }

    /// `|e(2t) - e(t)|` relative to the combined standard error.
    pub fn shift_in_stderr(&self) -> f64 {
        (self.long.estimate - self.short.estimate).abs() / (self.short.stderr.powi(2) + self.long.stderr.powi(2)).sqrt()
    }
}

pub fn cgf_cloning_two_horizon(
    model: &ChainModel,
    obs: Observable,
    alpha: f64,
    config: &CloningConfig,
    x0: &State,
    seeds: &SeedTree,
) -> Result<TwoHorizon, EstimatorError> {
    let short = cgf_cloning(model, obs, alpha, config, x0, &seeds.child("horizon", &[0]))?;
    let long = cgf_cloning(
        model,
        obs,
        alpha,
        &config.with_horizon(2.0 * config.horizon),
        x0,
        &seeds.child("horizon", &[1]),
    )?;
    Ok(TwoHorizon::from_runs(short, long))
}

/// Doubles the horizon from `config.horizon` until doubling moves the
/// estimate by less than one combined standard error, at most
/// `max_doublings` times. Each doubling reuses the previous long run as the
/// new short one. Returns the last pair examined.
pub fn cgf_cloning_converged(
    model: &ChainModel,
    obs: Observable,
    alpha: f64,
    config: &CloningConfig,
    x0: &State,
    seeds: &SeedTree,
    max_doublings: usize,
) -> Result<TwoHorizon, EstimatorError> {
    let mut pair = cgf_cloning_two_horizon(model, obs, alpha, config, x0, seeds)?;
    for k in 0..max_doublings {
        if pair.shift_in_stderr() < 1.0 {
            break;
        }
        let horizon = 2.0 * pair.long.horizon;
        let long = cgf_cloning(
            model,
            obs,
            alpha,
            &config.with_horizon(horizon),
            x0,
            &seeds.child("horizon", &[k as u64 + 2]),
        )?;
        pair = TwoHorizon::from_runs(pair.long, long);
    }
    Ok(pair)
}

/// `e(alpha)` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CgfCurve {
    pub observable: Observable,
    pub points: Vec<CgfPoint>,
}

impl CgfCurve {
    pub fn alphas(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.alpha).collect()
    }

    fn find(&self, alpha: f64) -> Option<&CgfPoint> {
        self.points.iter().find(|p| (p.alpha - alpha).abs() < 1e-9)
    }
}

/// Checks that `grid` is closed under `alpha -> 1 - alpha`.
pub fn check_symmetric_grid(grid: &[f64]) -> Result<(), EstimatorError> {
    for &a in grid {
        if !grid.iter().any(|&b| (a + b - 1.0).abs() < 1e-9) {
            return Err(EstimatorError::GridNotSymmetric(a));
        }
    }
    Ok(())
}

/// Cloning curve over a grid closed under `alpha -> 1 - alpha`.
pub fn cgf_curve(
    model: &ChainModel,
    obs: Observable,
    grid: &[f64],
    config: &CloningConfig,
    x0: &State,
    seeds: &SeedTree,
) -> Result<CgfCurve, EstimatorError> {
    check_symmetric_grid(grid)?;
    for &a in grid {
        check_alpha(model, a)?;
    }
    let points = grid
        .iter()
        .enumerate()
        .map(|(k, &a)| cgf_cloning(model, obs, a, config, x0, &seeds.child("alpha", &[k as u64])))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(CgfCurve {
        observable: obs,
        points,
    })
}

/// Largest discrepancy between two matched sets of estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Discrepancy {
    pub max_abs: f64,
    /// Alpha at which `max_abs` occurs.
    pub at: f64,
    /// Largest `|difference| / sqrt(stderr_a^2 + stderr_b^2)`.
    pub max_z: f64,
}

/// `max |e(alpha) - e(1 - alpha)|` over the curve.
pub fn symmetry_residual(curve: &CgfCurve) -> Result<Discrepancy, EstimatorError> {
    let mut out = Discrepancy {
        max_abs: 0.0,
        at: f64::NAN,
        max_z: 0.0,
    };
    for p in &curve.points {
        let q = curve
            .find(1.0 - p.alpha)
            .ok_or(EstimatorError::GridNotSymmetric(p.alpha))?;
        track(&mut out, p, q);
    }
    Ok(out)
}

/// `max |e_a(alpha) - e_b(alpha)|` between curves of two observables.
pub fn cross_bond_discrepancy(a: &CgfCurve, b: &CgfCurve) -> Result<Discrepancy, EstimatorError> {
    let mut out = Discrepancy {
        max_abs: 0.0,
        at: f64::NAN,
        max_z: 0.0,
    };
    for p in &a.points {
        let q = b
            .find(p.alpha)
            .ok_or_else(|| EstimatorError::BadArgument(format!("alpha {} missing from second curve", p.alpha)))?;
        track(&mut out, p, q);
    }
    Ok(out)
}

fn track(out: &mut Discrepancy, p: &CgfPoint, q: &CgfPoint) {
    let diff = (p.estimate - q.estimate).abs();
    let se = (p.stderr.powi(2) + q.stderr.powi(2)).sqrt();
    let z = if diff == 0.0 { 0.0 } else { diff / se };
    if diff > out.max_abs || out.at.is_nan() {
        out.max_abs = diff;
        out.at = p.alpha;
    }
    out.max_z = out.max_z.max(z);
}

/// Largest positive divided second difference of `(alpha, e)`; zero or
/// negative for a concave curve.
pub fn concavity_violation(alphas: &[f64], values: &[f64]) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for k in 1..alphas.len().saturating_sub(1) {
        let (a0, a1, a2) = (alphas[k - 1], alphas[k], alphas[k + 1]);
        let s1 = (values[k] - values[k - 1]) / (a1 - a0);
        let s2 = (values[k + 1] - values[k]) / (a2 - a1);
        worst = worst.max(2.0 * (s2 - s1) / (a2 - a0));
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRow {
    pub w: f64,
    pub rate: f64,
    pub alpha_star: f64,
}

/// `I(w) = sup_alpha { e(alpha) - alpha w }` on a grid of `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
    /// Description of the curve the table was computed from.
    pub source: String,
}

impl RateTable {
    /// `max |I(w) - I(-w) + w|` over pairs `(w, -w)` present in the table.
    pub fn symmetry_residual(&self) -> f64 {
        self.rows
            .iter()
            .filter_map(|r| self.rate_at(-r.w).map(|minus| (r.rate - minus + r.w).abs()))
            .fold(0.0, f64::max)
    }

    pub fn rate_at(&self, w: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.w - w).abs() < 1e-12 * (1.0 + w.abs()))
            .map(|r| r.rate)
    }

    /// Largest violation of discrete midpoint convexity of `I`.
    pub fn convexity_violation(&self) -> f64 {
        let w: Vec<f64> = self.rows.iter().map(|r| r.w).collect();
        let i: Vec<f64> = self.rows.iter().map(|r| -r.rate).collect();
        concavity_violation(&w, &i)
    }
}

/// Discrete Legendre transform with three-point parabolic refinement at the
/// maximizing grid point. Requires `alphas` sorted increasingly; including
/// `alpha = 0` (where `e = 0`) makes every `I(w) >= 0`.
pub fn legendre_transform(
    alphas: &[f64],
    values: &[f64],
    w_grid: &[f64],
    source: &str,
) -> Result<RateTable, EstimatorError> {
    if alphas.len() < 3 || alphas.len() != values.len() {
        return Err(EstimatorError::BadArgument(
            "need at least three (alpha, e) pairs".into(),
        ));
    }
    if alphas.windows(2).any(|p| p[1] <= p[0]) {
        return Err(EstimatorError::BadArgument(
            "alpha grid must be strictly increasing".into(),
        ));
    }
    let mut rows = Vec::with_capacity(w_grid.len());
    for &w in w_grid {
        let f: Vec<f64> = alphas.iter().zip(values).map(|(a, e)| e - a * w).collect();
        let k = f
            .iter()
            .enumerate()
            .fold(0, |best, (j, v)| if *v > f[best] { j } else { best });
        if k == 0 || k == alphas.len() - 1 {
            return Err(EstimatorError::GridTooCoarse { w });
        }
        let (a0, a1, a2) = (alphas[k - 1], alphas[k], alphas[k + 1]);
        let (f0, f1, f2) = (f[k - 1], f[k], f[k + 1]);
        // Parabola through the three points.
        let d01 = (f1 - f0) / (a1 - a0);
        let d12 = (f2 - f1) / (a2 - a1);
        let curv = (d12 - d01) / (a2 - a0);
        let (rate, alpha_star) = if curv < 0.0 {
            let slope = d01 - curv * (a0 + a1);
            let vertex = (-slope / (2.0 * curv)).clamp(a0, a2);
            let value = f1 + (vertex - a1) * (d01 + curv * (vertex - a0));
            (value.max(f1), vertex)
        } else {
            (f1, a1)
        };
        rows.push(RateRow { w, rate, alpha_star });
    }
    Ok(RateTable {
        rows,
        source: source.to_string(),
    })
}
