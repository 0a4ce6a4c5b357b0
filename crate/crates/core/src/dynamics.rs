//! Integration of the reduced chain-plus-reservoir SDE
//!
//! ```text
//! dq = p dt
//! dp = (-grad V(q) - Lambda^T r) dt
//! dr = (-gamma r + Lambda p) dt + sqrt(2 gamma T) dW
//! ```
//!
//! The default scheme is the palindromic splitting
//! `C(h/2) B(h/2) A(h) B(h/2) C(h/2)` where `A` is velocity Verlet for the
//! chain Hamiltonian, `B` the exact rotation of the boundary pairs
//! `(p_1, r_1)`, `(p_n, r_n)` and `C` the exact Ornstein-Uhlenbeck update of `r`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ChainModel, Observable, State};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("state became non-finite at step {step} (time {time}); reduce the step size")]
    NonFinite { step: u64, time: f64 },
    #[error("step size must be positive and finite, got {0}")]
    BadStep(f64),
    #[error("horizon {t} is not a non-negative multiple of the step {h}")]
    NotMultiple { t: f64, h: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Splitting,
    EulerMaruyama,
}

/// Where observables are sampled inside a step when integrating in time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quadrature {
    /// One node at the centre of the step (for the splitting: halfway
    /// through the Verlet drift).
    Midpoint,
    Trapezoid,
}

/// How the reservoir variables are driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReservoirMode {
    /// Damping plus thermal noise.
    Stochastic,
    /// Damping only, i.e. both temperatures set to zero.
    Deterministic,
    /// Neither damping nor noise: the closed system conserving `G`.
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub step: f64,
    pub scheme: Scheme,
    pub quadrature: Quadrature,
}

impl IntegratorConfig {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            scheme: Scheme::Splitting,
            quadrature: Quadrature::Midpoint,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_quadrature(mut self, quadrature: Quadrature) -> Self {
        self.quadrature = quadrature;
        self
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.step > 0.0 && self.step.is_finite() {
            Ok(())
        } else {
            Err(DynamicsError::BadStep(self.step))
        }
    }

    /// Number of steps covering `t`, which must be a multiple of the step.
    pub fn steps_for(&self, t: f64) -> Result<u64, DynamicsError> {
        self.validate()?;
        let k = (t / self.step).round();
        if !(t >= 0.0) || (k * self.step - t).abs() > 1e-9 * t.abs().max(1.0) {
            return Err(DynamicsError::NotMultiple { t, h: self.step });
        }
        Ok(k as u64)
    }
}

/// One-step propagator with cached coefficients and scratch space.
#[derive(Debug, Clone)]
pub struct Stepper<'m> {
    model: &'m ChainModel,
    config: IntegratorConfig,
    mode: ReservoirMode,
    decay_half: f64,
    noise_half: Vec<f64>,
    noise_full: Vec<f64>,
    rot_cos: f64,
    rot_sin: f64,
    force: Vec<f64>,
    scratch: State,
    steps_taken: u64,
}

impl<'m> Stepper<'m> {
    pub fn new(model: &'m ChainModel, config: IntegratorConfig) -> Result<Self, DynamicsError> {
        Self::with_mode(model, config, ReservoirMode::Stochastic)
    }

    pub fn with_mode(
        model: &'m ChainModel,
        config: IntegratorConfig,
        mode: ReservoirMode,
    ) -> Result<Self, DynamicsError> {
        config.validate()?;
        let h = config.step;
        let gamma = model.gamma();
        let d = model.d();
        let decay_half = (-gamma * h / 2.0).exp();
        let noise_half = (0..2 * d)
            .map(|j| (model.r_temperature(j) * (1.0 - decay_half * decay_half)).sqrt())
            .collect();
        let noise_full = (0..2 * d)
            .map(|j| (2.0 * gamma * model.r_temperature(j) * h).sqrt())
            .collect();
        // With a single oscillator both reservoirs couple to p_1 and the
        // rotation acts on (p_1, (r_1 + r_n)/sqrt 2) at frequency sqrt(2) lambda.
        let omega = if model.n() == 1 {
            model.lambda() * std::f64::consts::SQRT_2
        } else {
            model.lambda()
        };
        Ok(Self {
            model,
            config,
            mode,
            decay_half,
            noise_half,
            noise_full,
            rot_cos: (omega * h / 2.0).cos(),
            rot_sin: (omega * h / 2.0).sin(),
            force: vec![0.0; model.n() * d],
            scratch: model.zero_state(),
            steps_taken: 0,
        })
    }

    pub fn config(&self) -> &IntegratorConfig {
        &self.config
    }

    pub fn model(&self) -> &'m ChainModel {
        self.model
    }

    /// Advances `x` by one step.
    pub fn step<R: Rng + ?Sized>(&mut self, x: &mut State, rng: &mut R) -> Result<(), DynamicsError> {
        self.step_with(x, rng, |_, _| {})
    }

    /// Advances `x` by one step and reports quadrature nodes `(state, weight)`
    /// to `node`; the weights of one step sum to the step size.
    pub fn step_with<R, F>(&mut self, x: &mut State, rng: &mut R, mut node: F) -> Result<(), DynamicsError>
    where
        R: Rng + ?Sized,
        F: FnMut(&State, f64),
    {
        let h = self.config.step;
        let trapezoid = self.config.quadrature == Quadrature::Trapezoid;
        if trapezoid {
            node(x, 0.5 * h);
        }
        match self.config.scheme {
            Scheme::Splitting => {
                self.reservoir_half(x, rng);
                self.rotate_half(x);
                self.kick(x, 0.5 * h);
                drift(x, 0.5 * h);
                if !trapezoid {
                    node(x, h);
                }
                drift(x, 0.5 * h);
                self.kick(x, 0.5 * h);
                self.rotate_half(x);
                self.reservoir_half(x, rng);
            }
            Scheme::EulerMaruyama => {
                let start = if trapezoid { None } else { Some(x.clone()) };
                self.euler_maruyama(x, rng);
                if let Some(start) = start {
                    for (s, (a, b)) in self.scratch.p.iter_mut().zip(start.p.iter().zip(&x.p)) {
                        *s = 0.5 * (a + b);
                    }
                    for (s, (a, b)) in self.scratch.q.iter_mut().zip(start.q.iter().zip(&x.q)) {
                        *s = 0.5 * (a + b);
                    }
                    for (s, (a, b)) in self.scratch.r.iter_mut().zip(start.r.iter().zip(&x.r)) {
                        *s = 0.5 * (a + b);
                    }
                    node(&self.scratch, h);
                }
            }
        }
        if trapezoid {
            node(x, 0.5 * h);
        }
        self.steps_taken += 1;
        if !x.is_finite() {
            return Err(DynamicsError::NonFinite {
                step: self.steps_taken,
                time: self.steps_taken as f64 * h,
            });
        }
        Ok(())
    }

    fn reservoir_half<R: Rng + ?Sized>(&self, x: &mut State, rng: &mut R) {
        match self.mode {
            ReservoirMode::Closed => {}
            ReservoirMode::Deterministic => x.r.iter_mut().for_each(|r| *r *= self.decay_half),
            ReservoirMode::Stochastic => {
                for (r, s) in x.r.iter_mut().zip(&self.noise_half) {
                    let xi: f64 = rng.sample(StandardNormal);
                    *r = self.decay_half * *r + s * xi;
                }
            }
        }
    }

    fn rotate_half(&self, x: &mut State) {
        let d = self.model.d();
        let n = self.model.n();
        let (c, s) = (self.rot_cos, self.rot_sin);
        if n == 1 {
            let inv = std::f64::consts::FRAC_1_SQRT_2;
            for k in 0..d {
                let (r1, rn) = (x.r[k], x.r[d + k]);
                let sum = (r1 + rn) * inv;
                let diff = (r1 - rn) * inv;
                let p = x.p[k];
                x.p[k] = p * c - sum * s;
                let sum = sum * c + p * s;
                x.r[k] = (sum + diff) * inv;
                x.r[d + k] = (sum - diff) * inv;
            }
        } else {
            for k in 0..d {
                for (pi, ri) in [(k, k), ((n - 1) * d + k, d + k)] {
                    let (p, r) = (x.p[pi], x.r[ri]);
                    x.p[pi] = p * c - r * s;
                    x.r[ri] = r * c + p * s;
                }
            }
        }
    }

    fn kick(&mut self, x: &mut State, tau: f64) {
        self.model.grad_v_into(&x.q, &mut self.force);
        for (p, f) in x.p.iter_mut().zip(&self.force) {
            *p -= tau * f;
        }
    }

    fn euler_maruyama<R: Rng + ?Sized>(&mut self, x: &mut State, rng: &mut R) {
        let h = self.config.step;
        let d = self.model.d();
        let n = self.model.n();
        let lambda = self.model.lambda();
        let gamma = self.model.gamma();
        self.model.grad_v_into(&x.q, &mut self.force);
        let p_old = x.p.clone();
        for k in 0..d {
            self.force[k] += lambda * x.r[k];
            self.force[(n - 1) * d + k] += lambda * x.r[d + k];
        }
        for (q, p) in x.q.iter_mut().zip(&p_old) {
            *q += h * p;
        }
        for (p, f) in x.p.iter_mut().zip(&self.force) {
            *p -= h * f;
        }
        for k in 0..d {
            for (j, pi) in [(k, k), (d + k, (n - 1) * d + k)] {
                let drift = -gamma * x.r[j] + lambda * p_old[pi];
                let noise = match self.mode {
                    ReservoirMode::Stochastic => {
                        let xi: f64 = rng.sample(StandardNormal);
                        self.noise_full[j] * xi
                    }
                    _ => 0.0,
                };
                let damping_on = self.mode != ReservoirMode::Closed;
                x.r[j] += h * if damping_on { drift } else { lambda * p_old[pi] } + noise;
            }
        }
    }
}

fn drift(x: &mut State, tau: f64) {
    for (q, p) in x.q.iter_mut().zip(&x.p) {
        *q += tau * p;
    }
}

/// Running time integrals `W_i(t) = int_0^t sigma_i(x(s)) ds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkAccumulator {
    pub elapsed: f64,
    pub observed: Vec<Observable>,
    pub integrals: Vec<f64>,
}

impl WorkAccumulator {
    pub fn new(observed: &[Observable]) -> Self {
        Self {
            elapsed: 0.0,
            observed: observed.to_vec(),
            integrals: vec![0.0; observed.len()],
        }
    }

    pub fn add_node(&mut self, model: &ChainModel, x: &State, weight: f64) {
        for (w, obs) in self.integrals.iter_mut().zip(&self.observed) {
            *w += weight * model.observe(*obs, x);
        }
    }

    /// Ergodic average `W_i / t`.
    pub fn average(&self, k: usize) -> f64 {
        self.integrals[k] / self.elapsed
    }

    /// Appends a later segment tracking the same observables.
    pub fn extend(&mut self, later: &WorkAccumulator) {
        assert_eq!(self.observed, later.observed, "segments track different observables");
        self.elapsed += later.elapsed;
        for (a, b) in self.integrals.iter_mut().zip(&later.integrals) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub state: State,
    pub work: WorkAccumulator,
    /// `(time, state)` every `sample_every` steps, starting with the initial state.
    pub samples: Vec<(f64, State)>,
}

/// Integrates over `[0, t]` accumulating the work integrals of `observed`.
pub fn integrate<R: Rng + ?Sized>(
    model: &ChainModel,
    x0: &State,
    t: f64,
    config: &IntegratorConfig,
    rng: &mut R,
    observed: &[Observable],
    sample_every: Option<usize>,
) -> Result<Trajectory, DynamicsError> {
    let steps = config.steps_for(t)?;
    let mut stepper = Stepper::new(model, *config)?;
    let mut x = x0.clone();
    let mut work = WorkAccumulator::new(observed);
    let mut samples = Vec::new();
    if sample_every.is_some() {
        samples.push((0.0, x.clone()));
    }
    for k in 1..=steps {
        stepper.step_with(&mut x, rng, |s, w| work.add_node(model, s, w))?;
        if let Some(every) = sample_every {
            if k % every.max(1) as u64 == 0 {
                samples.push((k as f64 * config.step, x.clone()));
            }
        }
    }
    work.elapsed = steps as f64 * config.step;
    Ok(Trajectory {
        state: x,
        work,
        samples,
    })
}

#[derive(Debug, Clone)]
pub struct DeterministicPath {
    pub times: Vec<f64>,
    pub energies: Vec<f64>,
    /// `int_0^t r(s)^2 ds`.
    pub r2_integral: f64,
    pub state: State,
}

/// Integrates the noiseless dynamics (both temperatures zero, damping kept),
/// recording `G` every `sample_every` steps and `int r^2 ds`.
pub fn deterministic_integrate(
    model: &ChainModel,
    x0: &State,
    t: f64,
    h: f64,
    sample_every: usize,
) -> Result<DeterministicPath, DynamicsError> {
    run_noiseless(model, x0, t, h, sample_every, ReservoirMode::Deterministic)
}

/// As [`deterministic_integrate`] but without damping either, so `G` is a
/// conserved quantity of the exact flow.
pub fn closed_integrate(
    model: &ChainModel,
    x0: &State,
    t: f64,
    h: f64,
    sample_every: usize,
) -> Result<DeterministicPath, DynamicsError> {
    run_noiseless(model, x0, t, h, sample_every, ReservoirMode::Closed)
}

fn run_noiseless(
    model: &ChainModel,
    x0: &State,
    t: f64,
    h: f64,
    sample_every: usize,
    mode: ReservoirMode,
) -> Result<DeterministicPath, DynamicsError> {
    let config = IntegratorConfig::new(h);
    let steps = config.steps_for(t)?;
    let mut stepper = Stepper::with_mode(model, config, mode)?;
    // No noise is drawn in the noiseless modes.
    let mut rng = <crate::streams::StreamRng as rand::SeedableRng>::seed_from_u64(0);
    let mut x = x0.clone();
    let mut r2 = 0.0;
    let mut times = vec![0.0];
    let mut energies = vec![model.energy_g(&x)];
    let every = sample_every.max(1) as u64;
    for k in 1..=steps {
        stepper.step_with(&mut x, &mut rng, |s, w| {
            r2 += w * s.r.iter().map(|v| v * v).sum::<f64>()
        })?;
        if k % every == 0 || k == steps {
            times.push(k as f64 * h);
            energies.push(model.energy_g(&x));
        }
    }
    Ok(DeterministicPath {
        times,
        energies,
        r2_integral: r2,
        state: x,
    })
}
