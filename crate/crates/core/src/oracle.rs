//! Reference values independent of Monte Carlo: the stationary covariance
//! and mean flows of harmonic chains, the cumulant generating function of
//! harmonic chains from an algebraic Riccati equation, and a grid
//! eigensolver for the single oscillator.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

use crate::estimators::admissible_alpha_interval;
use crate::model::{ChainModel, Layout, Observable, State};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("model is not harmonic; the linear oracles need quadratic potentials")]
    NotHarmonic,
    #[error("drift matrix is not stable (max real eigenvalue {0})")]
    UnstableDrift(f64),
    #[error("alpha = {alpha} lies outside the admissible interval ({lo}, {hi})")]
    AlphaInadmissible { alpha: f64, lo: f64, hi: f64 },
    #[error("no stabilizing Riccati solution at alpha = {alpha}: {reason}")]
    NoStabilizingSolution { alpha: f64, reason: String },
    #[error("grid eigensolver needs n = 1 and d = 1")]
    GridShape,
    #[error("the spectral grid scheme covers alpha in [0, 1), got {0}")]
    GridAlphaUnsupported(f64),
    #[error("grid resolution {0} too small (need at least 17 nodes per axis)")]
    GridResolution(usize),
    #[error("power iteration did not converge in {iterations} iterations (last change {change})")]
    NotConverged { iterations: usize, change: f64 },
    #[error("eigenfunction mass {mass} in the outer layer of the box exceeds {threshold}")]
    BoxTooSmall { mass: f64, threshold: f64 },
    #[error("linear solve failed: {0}")]
    Singular(&'static str),
}

/// `dx = B x dt + noise` with noise covariance `Q dt` for a harmonic chain.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystem {
    pub drift: DMatrix<f64>,
    pub noise: DMatrix<f64>,
    layout: Layout,
}

impl LinearSystem {
    pub fn new(model: &ChainModel) -> Result<Self, OracleError> {
        if !model.is_harmonic() {
            return Err(OracleError::NotHarmonic);
        }
        let layout = model.layout();
        let dim = layout.dim();
        let d = model.d();
        let n = model.n();
        let lambda = model.lambda();
        let gamma = model.gamma();
        let mut b = DMatrix::zeros(dim, dim);
        let mut unit = vec![0.0; layout.nd];
        for k in 0..layout.nd {
            b[(layout.q + k, layout.p + k)] = 1.0;
            unit[k] = 1.0;
            let g = model.grad_v(&unit);
            unit[k] = 0.0;
            for (row, gv) in g.iter().enumerate() {
                b[(layout.p + row, layout.q + k)] = -gv;
            }
        }
        for k in 0..d {
            for (j, site) in [(k, k), (d + k, (n - 1) * d + k)] {
                b[(layout.p + site, layout.r + j)] -= lambda;
                b[(layout.r + j, layout.p + site)] += lambda;
                b[(layout.r + j, layout.r + j)] = -gamma;
            }
        }
        let mut q = DMatrix::zeros(dim, dim);
        for j in 0..2 * d {
            q[(layout.r + j, layout.r + j)] = 2.0 * gamma * model.r_temperature(j);
        }
        Ok(Self {
            drift: b,
            noise: q,
            layout,
        })
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }
}

/// Largest real part of the spectrum.
pub fn spectral_abscissa(m: &DMatrix<f64>) -> f64 {
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.re)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `A X + X A^T + Q = 0` by a dense Kronecker-product LU solve.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, OracleError> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    // vec(A X) = (I kron A) vec X, vec(X A^T) = (A kron I) vec X (column-major).
    let k = id.kronecker(a) + a.kronecker(&id);
    let rhs = DVector::from_iterator(n * n, q.iter().map(|v| -v));
    let sol = k.lu().solve(&rhs).ok_or(OracleError::Singular("lyapunov"))?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    Ok((&x + x.transpose()) * 0.5)
}

/// Stationary covariance of a harmonic chain.
pub fn lyapunov_covariance(model: &ChainModel) -> Result<DMatrix<f64>, OracleError> {
    let sys = LinearSystem::new(model)?;
    let abscissa = spectral_abscissa(&sys.drift);
    if abscissa >= 0.0 {
        return Err(OracleError::UnstableDrift(abscissa));
    }
    solve_lyapunov(&sys.drift, &sys.noise)
}

/// `|| B S + S B^T + Q ||_max`.
pub fn lyapunov_residual(sys: &LinearSystem, sigma: &DMatrix<f64>) -> f64 {
    (&sys.drift * sigma + sigma * sys.drift.transpose() + &sys.noise).amax()
}

/// Symmetric matrix of a quadratic form `f(x) = x^T A x`, recovered by
/// polarization from point values.
pub fn quadratic_form_matrix(layout: Layout, f: impl Fn(&State) -> f64) -> DMatrix<f64> {
    let dim = layout.dim();
    let mut x = vec![0.0; dim];
    let eval = |x: &[f64]| f(&State::from_flat(layout, x));
    let mut diag = vec![0.0; dim];
    for k in 0..dim {
        x[k] = 1.0;
        diag[k] = eval(&x);
        x[k] = 0.0;
    }
    let mut a = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        a[(k, k)] = diag[k];
        for l in k + 1..dim {
            x[k] = 1.0;
            x[l] = 1.0;
            let v = 0.5 * (eval(&x) - diag[k] - diag[l]);
            x[k] = 0.0;
            x[l] = 0.0;
            a[(k, l)] = v;
            a[(l, k)] = v;
        }
    }
    a
}

/// `E[x^T A x]` under a centred Gaussian with covariance `sigma`.
pub fn gaussian_expectation(a: &DMatrix<f64>, sigma: &DMatrix<f64>) -> f64 {
    a.component_mul(sigma).sum()
}

/// Stationary mean heat flows `<Phi_i>` for `i = 0..=n`.
pub fn mean_flows(model: &ChainModel) -> Result<Vec<f64>, OracleError> {
    let sigma = lyapunov_covariance(model)?;
    let layout = model.layout();
    Ok((0..=model.n())
        .map(|i| {
            let a = quadratic_form_matrix(layout, |x| model.heat_flow(x, i).expect("in range"));
            gaussian_expectation(&a, &sigma)
        })
        .collect())
}

/// Stationary mean of an entropy-production observable.
pub fn mean_entropy_production(model: &ChainModel, obs: Observable) -> Result<f64, OracleError> {
    let sigma = lyapunov_covariance(model)?;
    let a = quadratic_form_matrix(model.layout(), |x| model.observe(obs, x));
    Ok(gaussian_expectation(&a, &sigma))
}

/// Result of the Riccati construction at one `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiSolution {
    pub alpha: f64,
    /// `e(alpha)`.
    pub value: f64,
    /// Eigenfunction is `exp(-x^T M x / 2)`.
    pub m: DMatrix<f64>,
    /// `|| (1/2) M D M - sym(B^T M) - C ||_max` for the returned `M`.
    pub residual: f64,
    /// Largest real part of the closed-loop drift `B - D M`.
    pub closed_loop_abscissa: f64,
}

/// Matrices of the tilted operator `(1/2) div D grad + (B x) grad - x^T C x + c0`.
struct TiltedQuadratic {
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    c: DMatrix<f64>,
    c0: f64,
}

fn tilted_quadratic(model: &ChainModel, alpha: f64) -> Result<TiltedQuadratic, OracleError> {
    let sys = LinearSystem::new(model)?;
    let layout = sys.layout();
    let gamma = model.gamma();
    let mut b = sys.drift.clone();
    let mut c = DMatrix::zeros(sys.dim(), sys.dim());
    for j in 0..2 * model.d() {
        let k = layout.r + j;
        b[(k, k)] = -gamma * (1.0 - 2.0 * alpha);
        c[(k, k)] = (alpha - alpha * alpha) * gamma / model.r_temperature(j);
    }
    Ok(TiltedQuadratic {
        b,
        d: sys.noise,
        c,
        c0: alpha * gamma * 2.0 * model.d() as f64,
    })
}

/// Matrix sign function by scaled Newton iteration.
fn matrix_sign(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = h.nrows();
    let mut z = h.clone();
    for _ in 0..100 {
        let inv = z.clone().try_inverse()?;
        let det = z.determinant().abs();
        let c = if det > 0.0 && det.is_finite() {
            det.powf(1.0 / n as f64)
        } else {
            1.0
        };
        let next = (&z / c + inv * c) * 0.5;
        let change = (&next - &z).norm() / next.norm();
        z = next;
        if !z.iter().all(|v| v.is_finite()) {
            return None;
        }
        if change < 1e-14 {
            return Some(z);
        }
    }
    (&z * &z - DMatrix::identity(n, n)).amax().lt(&1e-8).then_some(z)
}

/// Solves `A^T X + X A - X G X + Q = 0` for the stabilizing `X`.
fn solve_care(a: &DMatrix<f64>, g: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>, String> {
    let n = a.nrows();
    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));
    let w = matrix_sign(&h).ok_or("sign iteration failed (eigenvalues on the imaginary axis)")?;
    let id = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w.view((n, n), (n, n)) + &id));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n))
        .copy_from(&(-(w.view((0, 0), (n, n)) + &id)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));
    let x = lhs
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| format!("least-squares solve failed: {e}"))?;
    let mut x = (&x + x.transpose()) * 0.5;
    // Newton-Kleinman refinement.
    for _ in 0..2 {
        let closed = a - g * &x;
        let rhs = q + &x * g * &x;
        let next = solve_lyapunov(&closed.transpose(), &rhs).map_err(|e| e.to_string())?;
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        x = next;
    }
    Ok(x)
}

/// `e(alpha)` of a harmonic chain from the Gaussian principal eigenfunction
/// of the tilted generator.
pub fn riccati_cgf(model: &ChainModel, alpha: f64) -> Result<RiccatiSolution, OracleError> {
    if !model.is_harmonic() {
        return Err(OracleError::NotHarmonic);
    }
    let (lo, hi) = admissible_alpha_interval(model);
    if !(alpha > lo && alpha < hi) {
        return Err(OracleError::AlphaInadmissible { alpha, lo, hi });
    }
    let tq = tilted_quadratic(model, alpha)?;
    let fail = |reason: String| OracleError::NoStabilizingSolution { alpha, reason };
    let m = if alpha == 0.0 {
        DMatrix::zeros(tq.b.nrows(), tq.b.nrows())
    } else {
        solve_care(&tq.b, &tq.d, &(&tq.c * 2.0)).map_err(fail)?
    };
    let closed = &tq.b - &tq.d * &m;
    let closed_loop_abscissa = spectral_abscissa(&closed);
    if closed_loop_abscissa >= 0.0 {
        return Err(fail(format!("closed-loop abscissa {closed_loop_abscissa}")));
    }
    let btm = tq.b.transpose() * &m;
    let residual = ((&m * &tq.d * &m) * 0.5 - (&btm + btm.transpose()) * 0.5 - &tq.c).amax();
    let value = 0.5 * (&tq.d * &m).trace() - tq.c0;
    Ok(RiccatiSolution {
        alpha,
        value,
        m,
        residual,
        closed_loop_abscissa,
    })
}

/// Central-difference `e'(0)` from the Riccati construction.
pub fn riccati_slope_at_zero(model: &ChainModel, step: f64) -> Result<f64, OracleError> {
    let up = riccati_cgf(model, step)?.value;
    let down = riccati_cgf(model, -step)?.value;
    Ok((up - down) / (2.0 * step))
}

/// Discretization used by the grid eigensolver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridScheme {
    /// Central second differences in `r`, first-order upwind transport,
    /// absorbing boundary, explicit power iteration of `I + tau A`.
    Upwind,
    /// Periodic grid with spectrally exact shears for the transport, the
    /// exact Gaussian reservoir kernel and pointwise tilting, composed by
    /// Strang splitting with time step `step`; repeated at `step / 2` and
    /// extrapolated in the step.
    Spectral { step: f64 },
}

/// Truncation box and resolution for the grid eigensolver, axes ordered
/// `(p, q, r_1, r_n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub half_widths: [f64; 4],
    /// Nodes per axis (including the two boundary nodes for the upwind scheme).
    pub nodes: usize,
    pub scheme: GridScheme,
    /// Stop when the estimated distance to the limit falls below this.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Largest admissible fraction of eigenvector mass on the outer layer.
    pub boundary_mass_threshold: f64,
}

impl GridSpec {
    /// Box covering `width` thermal lengths at the hotter temperature,
    /// scaled by `(1 - alpha)^{-1/2}` (with `alpha` clamped to `[-1, 0.9]`), the
    /// change in reservoir spread of the tilted density.
    pub fn for_model(model: &ChainModel, alpha: f64, nodes: usize, width: f64, scheme: GridScheme) -> Self {
        let t = model.t1().max(model.tn()) / (1.0 - alpha.clamp(-1.0, 0.9));
        let kinetic = width * t.sqrt();
        // q where U_1(q) reaches the same thermal multiple.
        let target = 0.5 * width * width * t;
        let (mut lo, mut hi) = (0.0, kinetic.max(1.0));
        while model.u1().value_sq(hi * hi) < target {
            hi *= 2.0;
        }
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if model.u1().value_sq(mid * mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Self {
            half_widths: [kinetic, hi, kinetic, kinetic],
            nodes,
            scheme,
            tolerance: 1e-8,
            max_iterations: match scheme {
                GridScheme::Upwind => 400_000,
                GridScheme::Spectral { .. } => 5_000,
            },
            boundary_mass_threshold: 1e-3,
        }
    }

    pub fn with_nodes(mut self, nodes: usize) -> Self {
        self.nodes = nodes;
        self
    }

    fn spacing(&self) -> [f64; 4] {
        self.half_widths.map(|w| 2.0 * w / (self.nodes - 1) as f64)
    }
}

/// Outcome of one grid eigensolve.
#[derive(Debug, Clone, PartialEq)]
pub struct GridEigen {
    pub alpha: f64,
    /// `e(alpha)`: minus the leading eigenvalue of the discretized operator.
    pub value: f64,
    pub iterations: usize,
    /// Fraction of the leading left eigenvector on the outermost layer.
    pub boundary_mass: f64,
    pub nodes: usize,
    pub scheme: GridScheme,
    /// `(time step, value)` before extrapolation; empty for the upwind scheme.
    pub step_estimates: Vec<(f64, f64)>,
    /// Leading left eigenvector (a density), flat over the grid.
    pub density: Vec<f64>,
}

/// Coefficients of the discretized tilted operator at one node:
/// `(A f)_i = diag f_i + sum_k (up_k f_{i+s_k} + down_k f_{i-s_k})`.
struct Stencil {
    diag: f64,
    up: [f64; 4],
    down: [f64; 4],
}

struct Grid<'a> {
    model: &'a ChainModel,
    alpha: f64,
    spec: &'a GridSpec,
    h: [f64; 4],
    strides: [usize; 4],
}

impl<'a> Grid<'a> {
    fn coord(&self, axis: usize, i: usize) -> f64 {
        -self.spec.half_widths[axis] + i as f64 * self.h[axis]
    }

    fn len(&self) -> usize {
        self.spec.nodes.pow(4)
    }

    fn stencil(&self, idx: [usize; 4]) -> Stencil {
        let m = self.model;
        let gamma = m.gamma();
        let lambda = m.lambda();
        let damping = gamma * (1.0 - 2.0 * self.alpha);
        let x: [f64; 4] = std::array::from_fn(|k| self.coord(k, idx[k]));
        let (p, q, r1, rn) = (x[0], x[1], x[2], x[3]);
        let force = m.u1().force_factor_sq(q * q) * q;
        let drift = [
            -lambda * (r1 + rn) - force,
            p,
            -damping * r1 + lambda * p,
            -damping * rn + lambda * p,
        ];
        let diffusion = [0.0, 0.0, gamma * m.t1(), gamma * m.tn()];
        let potential = (self.alpha - self.alpha * self.alpha) * gamma * (r1 * r1 / m.t1() + rn * rn / m.tn())
            - 2.0 * self.alpha * gamma;
        let mut diag = -potential;
        let mut up = [0.0; 4];
        let mut down = [0.0; 4];
        for k in 0..4 {
            let h = self.h[k];
            let dif = diffusion[k] / (h * h);
            up[k] = dif + drift[k].max(0.0) / h;
            down[k] = dif + (-drift[k]).max(0.0) / h;
            diag -= up[k] + down[k];
        }
        Stencil { diag, up, down }
    }

    fn interior(&self, flat: usize) -> Option<[usize; 4]> {
        let m = self.spec.nodes;
        let idx = [
            flat / self.strides[0],
            (flat / self.strides[1]) % m,
            (flat / self.strides[2]) % m,
            flat % m,
        ];
        idx.iter().all(|&i| i > 0 && i < m - 1).then_some(idx)
    }
}

/// Leading eigenvalue of the tilted generator of the single oscillator by
/// power iteration of a discretized forward semigroup. A warm start must
/// come from the same scheme.
pub fn grid_eigen_cgf(
    model: &ChainModel,
    alpha: f64,
    spec: &GridSpec,
    warm_start: Option<&GridEigen>,
) -> Result<GridEigen, OracleError> {
    if model.n() != 1 || model.d() != 1 {
        return Err(OracleError::GridShape);
    }
    if spec.nodes < 17 {
        return Err(OracleError::GridResolution(spec.nodes));
    }
    match spec.scheme {
        GridScheme::Upwind => upwind_eigen(model, alpha, spec, warm_start),
        GridScheme::Spectral { .. } if !(0.0..1.0).contains(&alpha) => Err(OracleError::GridAlphaUnsupported(alpha)),
        GridScheme::Spectral { step } => spectral_eigen(model, alpha, spec, step, warm_start),
    }
}

fn upwind_eigen(
    model: &ChainModel,
    alpha: f64,
    spec: &GridSpec,
    warm_start: Option<&GridEigen>,
) -> Result<GridEigen, OracleError> {
    let m = spec.nodes;
    let grid = Grid {
        model,
        alpha,
        spec,
        h: spec.spacing(),
        strides: [m * m * m, m * m, m, 1],
    };
    let len = grid.len();
    // Interior stencils, flattened.
    let mut nodes = Vec::new();
    let mut boundary = Vec::new();
    let mut coeffs = Vec::new();
    let mut max_rate: f64 = 0.0;
    for flat in 0..len {
        if let Some(idx) = grid.interior(flat) {
            let s = grid.stencil(idx);
            max_rate = max_rate.max(-s.diag);
            nodes.push(flat);
            coeffs.push(s);
        } else {
            boundary.push(flat);
        }
    }
    let tau = 1.0 / max_rate;
    let mut rho = match warm_start {
        Some(prev) => interpolate_density(&prev.density, prev.nodes, m),
        None => {
            let mut v = vec![0.0; len];
            for &i in &nodes {
                v[i] = 1.0;
            }
            v
        }
    };
    normalize(&mut rho);
    let mut next = vec![0.0; len];
    let mut history: Vec<f64> = Vec::new();
    let mut checkpoint = rho.clone();
    let check_every = 200;
    let mut iterations = 0;
    let mut mu;
    loop {
        // next = rho + tau A^T rho, restricted to interior nodes.
        next.iter_mut().for_each(|v| *v = 0.0);
        for (&i, s) in nodes.iter().zip(&coeffs) {
            let w = rho[i];
            if w == 0.0 {
                continue;
            }
            next[i] += w * (1.0 + tau * s.diag);
            for k in 0..4 {
                let st = grid.strides[k];
                next[i + st] += tau * s.up[k] * w;
                next[i - st] += tau * s.down[k] * w;
            }
        }
        // Mass reaching a boundary node is absorbed.
        for &k in &boundary {
            next[k] = 0.0;
        }
        let total: f64 = next.iter().sum();
        // Rayleigh-type estimate; killing at the boundary included.
        mu = (total - 1.0) / tau;
        next.iter_mut().for_each(|v| *v /= total);
        std::mem::swap(&mut rho, &mut next);
        iterations += 1;
        if iterations % check_every == 0 {
            history.push(mu);
            if density_change(&rho, &checkpoint) < DENSITY_TOLERANCE_FACTOR * spec.tolerance
                && converged(&history, spec.tolerance)
            {
                break;
            }
            checkpoint.copy_from_slice(&rho);
        }
        if iterations >= spec.max_iterations {
            let h = history.len();
            let change = if h >= 2 {
                (history[h - 1] - history[h - 2]).abs()
            } else {
                f64::NAN
            };
            return Err(OracleError::NotConverged { iterations, change });
        }
    }
    let boundary_mass = outer_layer_mass(&rho, m);
    if boundary_mass > spec.boundary_mass_threshold {
        return Err(OracleError::BoxTooSmall {
            mass: boundary_mass,
            threshold: spec.boundary_mass_threshold,
        });
    }
    Ok(GridEigen {
        alpha,
        value: -mu,
        iterations,
        boundary_mass,
        nodes: m,
        scheme: GridScheme::Upwind,
        step_estimates: Vec::new(),
        density: rho,
    })
}

/// Grid eigensolve at `coarse` nodes per axis, then at `spec.nodes`
/// warm-started from the coarse density. Returns both.
pub fn grid_eigen_refined(
    model: &ChainModel,
    alpha: f64,
    spec: &GridSpec,
    coarse: usize,
) -> Result<(GridEigen, GridEigen), OracleError> {
    let c = grid_eigen_cgf(model, alpha, &spec.clone().with_nodes(coarse), None)?;
    let f = grid_eigen_cgf(model, alpha, spec, Some(&c))?;
    Ok((c, f))
}

/// First-order extrapolation `2 e_fine - e_coarse` for nested upwind grids.
pub fn richardson_first_order(coarse: f64, fine: f64) -> f64 {
    2.0 * fine - coarse
}

fn spectral_eigen(
    model: &ChainModel,
    alpha: f64,
    spec: &GridSpec,
    step: f64,
    warm_start: Option<&GridEigen>,
) -> Result<GridEigen, OracleError> {
    let grid = SpectralGrid::new(model, alpha, spec);
    let init = match warm_start {
        Some(prev) if prev.nodes == spec.nodes => prev.density.clone(),
        Some(prev) => interpolate_periodic(&prev.density, prev.nodes, spec.nodes),
        None => grid.gaussian_start(),
    };
    let (coarse, it1, rho) = grid.power_iteration(step, init, spec)?;
    let (fine, it2, rho) = grid.power_iteration(0.5 * step, rho, spec)?;
    let boundary_mass = grid.edge_mass(&rho);
    if boundary_mass > spec.boundary_mass_threshold {
        return Err(OracleError::BoxTooSmall {
            mass: boundary_mass,
            threshold: spec.boundary_mass_threshold,
        });
    }
    Ok(GridEigen {
        alpha,
        value: (4.0 * fine - coarse) / 3.0,
        iterations: it1 + it2,
        boundary_mass,
        nodes: spec.nodes,
        scheme: spec.scheme,
        step_estimates: vec![(step, coarse), (0.5 * step, fine)],
        density: rho,
    })
}

/// Periodic grid `x_i = -L + i h`, `h = 2L/N`, on each axis.
struct SpectralGrid<'a> {
    model: &'a ChainModel,
    alpha: f64,
    n: usize,
    coords: [Vec<f64>; 4],
    freqs: [Vec<f64>; 4],
    strides: [usize; 4],
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl<'a> SpectralGrid<'a> {
    fn new(model: &'a ChainModel, alpha: f64, spec: &GridSpec) -> Self {
        let n = spec.nodes;
        let coords = spec.half_widths.map(|w| {
            let h = 2.0 * w / n as f64;
            (0..n).map(|i| -w + i as f64 * h).collect::<Vec<_>>()
        });
        let freqs = spec.half_widths.map(|w| {
            let h = 2.0 * w / n as f64;
            (0..n)
                .map(|m| {
                    let m = if m < n.div_ceil(2) {
                        m as f64
                    } else {
                        m as f64 - n as f64
                    };
                    2.0 * std::f64::consts::PI * m / (n as f64 * h)
                })
                .collect::<Vec<_>>()
        });
        let mut planner = FftPlanner::new();
        Self {
            model,
            alpha,
            n,
            coords,
            freqs,
            strides: [n * n * n, n * n, n, 1],
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
        }
    }

    fn len(&self) -> usize {
        self.n.pow(4)
    }

    fn index(&self, flat: usize) -> [usize; 4] {
        std::array::from_fn(|k| (flat / self.strides[k]) % self.n)
    }

    fn gaussian_start(&self) -> Vec<f64> {
        let m = self.model;
        let t = 0.5 * (m.t1() + m.tn());
        let mut v: Vec<f64> = (0..self.len())
            .map(|flat| {
                let i = self.index(flat);
                let (p, q) = (self.coords[0][i[0]], self.coords[1][i[1]]);
                let (r1, rn) = (self.coords[2][i[2]], self.coords[3][i[3]]);
                (-(p * p + q * q) / (2.0 * t) - r1 * r1 / (2.0 * m.t1()) - rn * rn / (2.0 * m.tn())).exp()
            })
            .collect();
        normalize(&mut v);
        v
    }

    /// Start index of every grid line along `axis`.
    fn line_starts(&self, axis: usize) -> impl Iterator<Item = usize> {
        let stride = self.strides[axis];
        let block = stride * self.n;
        (0..self.len() / block).flat_map(move |outer| (0..stride).map(move |inner| outer * block + inner))
    }

    /// `rho(x) <- rho(x - delta e_axis)` with `delta` depending on the other coordinates.
    fn shear(&self, rho: &mut [f64], axis: usize, delta: impl Fn([usize; 4]) -> f64) {
        let n = self.n;
        let stride = self.strides[axis];
        let half = n.div_ceil(2);
        let base_freq = self.freqs[axis][1];
        let mut buf = vec![Complex::new(0.0, 0.0); n];
        let mut phase = vec![Complex::new(0.0, 0.0); n];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        let scale = 1.0 / n as f64;
        for base in self.line_starts(axis) {
            let shift = delta(self.index(base));
            if shift == 0.0 {
                continue;
            }
            let (sin, cos) = (-base_freq * shift).sin_cos();
            let unit = Complex::new(cos, sin);
            phase[0] = Complex::new(scale, 0.0);
            for m in 1..half {
                phase[m] = phase[m - 1] * unit;
            }
            for m in half..n {
                phase[m] = phase[n - m].conj();
            }
            if n.is_multiple_of(2) {
                // Nyquist mode: real part of the symmetric shift.
                let (_, c) = (-self.freqs[axis][n / 2] * shift).sin_cos();
                phase[n / 2] = Complex::new(c * scale, 0.0);
            }
            for (j, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(rho[base + j * stride], 0.0);
            }
            self.forward.process_with_scratch(&mut buf, &mut scratch);
            for (b, z) in buf.iter_mut().zip(&phase) {
                *b *= z;
            }
            self.inverse.process_with_scratch(&mut buf, &mut scratch);
            for (j, b) in buf.iter().enumerate() {
                rho[base + j * stride] = b.re;
            }
        }
    }

    /// Exact reservoir transition of duration `t` along `axis`, acting on the
    /// trigonometric interpolant of the density. Row-major.
    fn reservoir_kernel(&self, axis: usize, temperature: f64, t: f64) -> Vec<f64> {
        let gamma = self.model.gamma();
        let damping = gamma * (1.0 - 2.0 * self.alpha);
        let a = (-damping * t).exp();
        let var = if damping.abs() < 1e-12 {
            2.0 * gamma * temperature * t
        } else {
            gamma * temperature * (1.0 - (-2.0 * damping * t).exp()) / damping
        };
        let n = self.n;
        let x = &self.coords[axis];
        let k = &self.freqs[axis];
        let half_width = -x[0];
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            // Mass arriving from outside the box is taken to be zero.
            if (x[i] / a).abs() > half_width {
                continue;
            }
            for j in 0..n {
                out[i * n + j] = (0..n)
                    .map(|m| {
                        let phase = k[m] / a * x[i] - k[m] * x[j];
                        phase.cos() * (-var * k[m] * k[m] / (2.0 * a * a)).exp()
                    })
                    .sum::<f64>()
                    / (n as f64 * a);
            }
        }
        out
    }

    fn apply_along(&self, rho: &mut [f64], axis: usize, kernel: &[f64]) {
        let n = self.n;
        let stride = self.strides[axis];
        let block = stride * n;
        let mut out = vec![0.0; block];
        for chunk in rho.chunks_exact_mut(block) {
            out.iter_mut().for_each(|v| *v = 0.0);
            for i in 0..n {
                let row = &mut out[i * stride..(i + 1) * stride];
                for j in 0..n {
                    let kij = kernel[i * n + j];
                    let src = &chunk[j * stride..(j + 1) * stride];
                    for (o, v) in row.iter_mut().zip(src) {
                        *o += kij * v;
                    }
                }
            }
            chunk.copy_from_slice(&out);
        }
    }

    fn power_iteration(
        &self,
        tau: f64,
        mut rho: Vec<f64>,
        spec: &GridSpec,
    ) -> Result<(f64, usize, Vec<f64>), OracleError> {
        let m = self.model;
        let (gamma, lambda) = (m.gamma(), m.lambda());
        let alpha = self.alpha;
        let n = self.n;
        let tilt: Vec<f64> = (0..n * n)
            .map(|ij| {
                let (r1, rn) = (self.coords[2][ij / n], self.coords[3][ij % n]);
                let w = (alpha - alpha * alpha) * gamma * (r1 * r1 / m.t1() + rn * rn / m.tn()) - 2.0 * alpha * gamma;
                (-0.5 * tau * w).exp()
            })
            .collect();
        let k1 = self.reservoir_kernel(2, m.t1(), 0.5 * tau);
        let kn = self.reservoir_kernel(3, m.tn(), 0.5 * tau);
        let c = &self.coords;
        let kick = |i: [usize; 4]| {
            let q = c[1][i[1]];
            -(m.u1().force_factor_sq(q * q) * q + lambda * (c[2][i[2]] + c[3][i[3]])) * 0.5 * tau
        };
        let mut history = Vec::new();
        let mut checkpoint = rho.clone();
        let check_every = 10;
        let mut iterations = 0;
        loop {
            for (k, v) in rho.iter_mut().enumerate() {
                *v *= tilt[k % (n * n)];
            }
            self.apply_along(&mut rho, 2, &k1);
            self.apply_along(&mut rho, 3, &kn);
            self.shear(&mut rho, 0, kick);
            self.shear(&mut rho, 1, |i| c[0][i[0]] * tau);
            self.shear(&mut rho, 2, |i| lambda * c[0][i[0]] * tau);
            self.shear(&mut rho, 3, |i| lambda * c[0][i[0]] * tau);
            self.shear(&mut rho, 0, kick);
            self.apply_along(&mut rho, 3, &kn);
            self.apply_along(&mut rho, 2, &k1);
            for (k, v) in rho.iter_mut().enumerate() {
                *v *= tilt[k % (n * n)];
            }
            let mass: f64 = rho.iter().sum();
            if !(mass > 0.0 && mass.is_finite()) {
                return Err(OracleError::NotConverged {
                    iterations,
                    change: f64::NAN,
                });
            }
            rho.iter_mut().for_each(|v| *v /= mass);
            let value = -mass.ln() / tau;
            iterations += 1;
            if iterations % check_every == 0 {
                history.push(value);
                let settled = density_change(&rho, &checkpoint) < DENSITY_TOLERANCE_FACTOR * spec.tolerance;
                if settled && converged(&history, spec.tolerance) {
                    return Ok((value, iterations, rho));
                }
                checkpoint.copy_from_slice(&rho);
            }
            if iterations >= spec.max_iterations {
                let h = history.len();
                let change = if h >= 2 {
                    (history[h - 1] - history[h - 2]).abs()
                } else {
                    f64::NAN
                };
                return Err(OracleError::NotConverged { iterations, change });
            }
        }
    }

    fn edge_mass(&self, rho: &[f64]) -> f64 {
        let total: f64 = rho.iter().map(|v| v.abs()).sum();
        let edge: f64 = rho
            .iter()
            .enumerate()
            .filter(|(flat, _)| self.index(*flat).iter().any(|&i| i == 0 || i == self.n - 1))
            .map(|(_, v)| v.abs())
            .sum();
        edge / total
    }
}

/// Density drift allowed between checks, relative to the eigenvalue tolerance.
const DENSITY_TOLERANCE_FACTOR: f64 = 100.0;

/// L1 distance between two normalized densities.
fn density_change(rho: &[f64], previous: &[f64]) -> f64 {
    rho.iter().zip(previous).map(|(a, b)| (a - b).abs()).sum()
}

/// Aitken-style stopping rule on a linearly converging sequence.
fn converged(history: &[f64], tolerance: f64) -> bool {
    let h = history.len();
    if h < 3 {
        return false;
    }
    let d1 = history[h - 1] - history[h - 2];
    let d2 = history[h - 2] - history[h - 3];
    if d1 == 0.0 {
        return true;
    }
    let ratio = d1 / d2;
    let err = if ratio > 0.0 && ratio < 1.0 {
        d1.abs() * ratio / (1.0 - ratio)
    } else if ratio.abs() < 1.0 {
        d1.abs()
    } else {
        f64::INFINITY
    };
    err < tolerance * (1.0 + history[h - 1].abs())
}

/// Linear interpolation between periodic grids on the same box.
fn interpolate_periodic(src: &[f64], from: usize, to: usize) -> Vec<f64> {
    let scale = from as f64 / to as f64;
    let mut out: Vec<f64> = (0..to.pow(4))
        .map(|flat| {
            let idx = [
                flat / (to * to * to),
                (flat / (to * to)) % to,
                (flat / to) % to,
                flat % to,
            ];
            let pos: [f64; 4] = idx.map(|i| i as f64 * scale);
            let base: [usize; 4] = pos.map(|x| x.floor() as usize);
            let frac: [f64; 4] = std::array::from_fn(|k| pos[k] - base[k] as f64);
            let mut acc = 0.0;
            for corner in 0..16usize {
                let mut w = 1.0;
                let mut s = 0;
                for k in 0..4 {
                    let bit = (corner >> k) & 1;
                    w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                    s = s * from + (base[k] + bit) % from;
                }
                acc += w * src[s];
            }
            acc
        })
        .collect();
    normalize(&mut out);
    out
}

fn normalize(v: &mut [f64]) {
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
}

fn outer_layer_mass(rho: &[f64], m: usize) -> f64 {
    let mut mass = 0.0;
    for (flat, v) in rho.iter().enumerate() {
        let idx = [flat / (m * m * m), (flat / (m * m)) % m, (flat / m) % m, flat % m];
        if idx.iter().any(|&i| i == 1 || i == m - 2) {
            mass += v;
        }
    }
    mass
}

/// Multilinear interpolation of a grid function between node counts on the
/// same box.
fn interpolate_density(src: &[f64], from: usize, to: usize) -> Vec<f64> {
    let scale = (from - 1) as f64 / (to - 1) as f64;
    let mut out = vec![0.0; to.pow(4)];
    for (flat, o) in out.iter_mut().enumerate() {
        let idx = [
            flat / (to * to * to),
            (flat / (to * to)) % to,
            (flat / to) % to,
            flat % to,
        ];
        if idx.iter().any(|&i| i == 0 || i == to - 1) {
            continue;
        }
        let pos: [f64; 4] = idx.map(|i| i as f64 * scale);
        let base: [usize; 4] = pos.map(|x| (x.floor() as usize).min(from - 2));
        let frac: [f64; 4] = std::array::from_fn(|k| pos[k] - base[k] as f64);
        let mut acc = 0.0;
        for corner in 0..16usize {
            let mut w = 1.0;
            let mut s = 0;
            for k in 0..4 {
                let bit = (corner >> k) & 1;
                w *= if bit == 1 { frac[k] } else { 1.0 - frac[k] };
                s = s * from + base[k] + bit;
            }
            if w != 0.0 {
                acc += w * src[s];
            }
        }
        *o = acc.max(0.0);
    }
    out
}
