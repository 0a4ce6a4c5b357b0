//! Chain model: potentials, phase-space state, local energies, heat flows and
//! entropy productions.
//!
//! Phase points are `x = (p, q, r)` with `p, q` in `R^{nd}` and the auxiliary
//! reservoir variables `r = (r_1, r_n)` in `R^{2d}`. Vectors are stored
//! site-major: component `a` of particle `i` (zero based) lives at `i * d + a`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("potential {name} is not confining: leading coefficient a_{degree} = {value} must be > 0")]
    NonConfining {
        name: &'static str,
        degree: u32,
        value: f64,
    },
    #[error("potential {name} has invalid degree {degree}: must be even and >= 2")]
    BadDegree { name: &'static str, degree: u32 },
    #[error("interaction degree k_2 = {k2} is smaller than pinning degree k_1 = {k1}")]
    DegreeOrder { k1: u32, k2: u32 },
    #[error("parameter {name} = {value} must be strictly positive")]
    NonPositiveParam { name: &'static str, value: f64 },
    #[error("invalid chain shape: {0}")]
    Shape(String),
    #[error("index {index} out of range 0..={max}")]
    IndexOutOfRange { index: usize, max: usize },
}

/// Radial even polynomial `U(x) = sum_m a_m |x|^m / m` for `m = 2, 4, ..., k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialSpec {
    /// Leading degree `k` (even, at least 2).
    pub degree: u32,
    /// `a_2, a_4, ..., a_k`. Missing trailing entries are read as zero.
    pub coefficients: Vec<f64>,
}

impl PotentialSpec {
    pub fn harmonic(a2: f64) -> Self {
        Self {
            degree: 2,
            coefficients: vec![a2],
        }
    }

    pub fn quartic(a2: f64, a4: f64) -> Self {
        Self {
            degree: 4,
            coefficients: vec![a2, a4],
        }
    }

    fn validate(&self, name: &'static str) -> Result<Potential, ModelError> {
        if self.degree < 2 || !self.degree.is_multiple_of(2) {
            return Err(ModelError::BadDegree {
                name,
                degree: self.degree,
            });
        }
        let terms = (self.degree / 2) as usize;
        if self.coefficients.len() > terms {
            return Err(ModelError::Shape(format!(
                "potential {name} of degree {} has {} coefficients",
                self.degree,
                self.coefficients.len()
            )));
        }
        let mut coefficients = self.coefficients.clone();
        coefficients.resize(terms, 0.0);
        let lead = coefficients[terms - 1];
        if !(lead > 0.0) {
            return Err(ModelError::NonConfining {
                name,
                degree: self.degree,
                value: lead,
            });
        }
        if coefficients.iter().any(|c| !c.is_finite()) {
            return Err(ModelError::Shape(format!(
                "potential {name} has non-finite coefficients"
            )));
        }
        Ok(Potential {
            degree: self.degree,
            coefficients,
        })
    }
}

/// Validated radial potential.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    degree: u32,
    /// `coefficients[j]` multiplies `|x|^{2j+2} / (2j+2)`.
    coefficients: Vec<f64>,
}

impl Potential {
    pub fn degree(&self) -> u32 {
        self.degree
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    /// `U` as a function of `s = |x|^2`.
    pub fn value_sq(&self, s: f64) -> f64 {
        let mut power = s;
        let mut acc = 0.0;
        for (j, a) in self.coefficients.iter().enumerate() {
            acc += a * power / (2 * j + 2) as f64;
            power *= s;
        }
        acc
    }

    /// Radial factor `g(s)` with `grad U(x) = g(|x|^2) x`.
    pub fn force_factor_sq(&self, s: f64) -> f64 {
        let mut power = 1.0;
        let mut acc = 0.0;
        for a in &self.coefficients {
            acc += a * power;
            power *= s;
        }
        acc
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.value_sq(norm_sq(x))
    }

    /// Writes `grad U(x)` into `out`.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let g = self.force_factor_sq(norm_sq(x));
        for (o, xi) in out.iter_mut().zip(x) {
            *o = g * xi;
        }
    }

    pub fn is_harmonic(&self) -> bool {
        self.degree == 2
    }
}

/// Raw, unvalidated chain parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub n: usize,
    pub d: usize,
    pub u1: PotentialSpec,
    /// Must be absent iff `n == 1`.
    pub u2: Option<PotentialSpec>,
    pub lambda: f64,
    pub gamma: f64,
    pub t1: f64,
    pub tn: f64,
}

impl ChainParams {
    /// Harmonic chain with unit pinning and interaction constants.
    pub fn harmonic(n: usize, t1: f64, tn: f64) -> Self {
        Self {
            n,
            d: 1,
            u1: PotentialSpec::harmonic(1.0),
            u2: (n > 1).then(|| PotentialSpec::harmonic(1.0)),
            lambda: 1.0,
            gamma: 1.0,
            t1,
            tn,
        }
    }

    /// Chain with `U(x) = x^2/2 + x^4/4` for both potentials.
    pub fn quartic(n: usize, t1: f64, tn: f64) -> Self {
        Self {
            n,
            d: 1,
            u1: PotentialSpec::quartic(1.0, 1.0),
            u2: (n > 1).then(|| PotentialSpec::quartic(1.0, 1.0)),
            lambda: 1.0,
            gamma: 1.0,
            t1,
            tn,
        }
    }
}

/// Validated, immutable chain model.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainModel {
    params: ChainParams,
    u1: Potential,
    u2: Option<Potential>,
    harmonic: bool,
}

/// Checks the growth and positivity assumptions and builds the model.
pub fn validate_model(params: ChainParams) -> Result<ChainModel, ModelError> {
    ChainModel::new(params)
}

impl ChainModel {
    pub fn new(params: ChainParams) -> Result<Self, ModelError> {
        if params.n == 0 {
            return Err(ModelError::Shape("chain length n must be >= 1".into()));
        }
        if params.d == 0 {
            return Err(ModelError::Shape("dimension d must be >= 1".into()));
        }
        for (name, value) in [
            ("t1", params.t1),
            ("tn", params.tn),
            ("gamma", params.gamma),
            ("lambda", params.lambda),
        ] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(ModelError::NonPositiveParam { name, value });
            }
        }
        let u1 = params.u1.validate("u1")?;
        let u2 = match (&params.u2, params.n) {
            (None, 1) => None,
            (Some(_), 1) => {
                return Err(ModelError::Shape(
                    "a single oscillator has no interaction potential u2".into(),
                ))
            }
            (None, _) => {
                return Err(ModelError::Shape(
                    "chains with n >= 2 need an interaction potential u2".into(),
                ))
            }
            (Some(spec), _) => Some(spec.validate("u2")?),
        };
        if let Some(u2) = &u2 {
            if u2.degree < u1.degree {
                return Err(ModelError::DegreeOrder {
                    k1: u1.degree,
                    k2: u2.degree,
                });
            }
        }
        let harmonic = u1.is_harmonic() && u2.as_ref().is_none_or(Potential::is_harmonic);
        Ok(Self {
            params,
            u1,
            u2,
            harmonic,
        })
    }

    pub fn params(&self) -> &ChainParams {
        &self.params
    }
    pub fn n(&self) -> usize {
        self.params.n
    }
    pub fn d(&self) -> usize {
        self.params.d
    }
    pub fn lambda(&self) -> f64 {
        self.params.lambda
    }
    pub fn gamma(&self) -> f64 {
        self.params.gamma
    }
    pub fn t1(&self) -> f64 {
        self.params.t1
    }
    pub fn tn(&self) -> f64 {
        self.params.tn
    }
    pub fn u1(&self) -> &Potential {
        &self.u1
    }
    pub fn u2(&self) -> Option<&Potential> {
        self.u2.as_ref()
    }
    pub fn is_harmonic(&self) -> bool {
        self.harmonic
    }
    pub fn k1(&self) -> u32 {
        self.u1.degree
    }
    /// Growth exponent of the interaction. A single oscillator has no
    /// interaction, so its pinning degree is used instead.
    pub fn k2(&self) -> u32 {
        self.u2.as_ref().map_or(self.u1.degree, |u| u.degree)
    }

    /// Temperature attached to reservoir coordinate `j` of `r` (`0..2d`).
    pub fn r_temperature(&self, j: usize) -> f64 {
        if j < self.d() {
            self.t1()
        } else {
            self.tn()
        }
    }

    /// `Tr(T)` over the `2d`-dimensional reservoir space.
    pub fn trace_t(&self) -> f64 {
        self.d() as f64 * (self.t1() + self.tn())
    }

    /// Prefactor `1/T_n - 1/T_1` turning heat flows into entropy production.
    pub fn entropy_prefactor(&self) -> f64 {
        1.0 / self.tn() - 1.0 / self.t1()
    }

    /// Length of the flat coordinate vector, `2d(n+1)`.
    pub fn dim(&self) -> usize {
        2 * self.d() * (self.n() + 1)
    }

    /// Offsets of the `p`, `q` and `r` blocks in the flat layout.
    pub fn layout(&self) -> Layout {
        let nd = self.n() * self.d();
        Layout {
            p: 0,
            q: nd,
            r: 2 * nd,
            nd,
            d: self.d(),
        }
    }

    pub fn zero_state(&self) -> State {
        State::zeros(self.n(), self.d())
    }

    /// `V(q) = sum U1(q_i) + sum U2(q_i - q_{i+1})`.
    pub fn potential(&self, q: &[f64]) -> f64 {
        let d = self.d();
        let mut v: f64 = q.chunks_exact(d).map(|qi| self.u1.value(qi)).sum();
        if let Some(u2) = &self.u2 {
            for i in 0..self.n() - 1 {
                v += u2.value_sq(diff_norm_sq(&q[i * d..(i + 1) * d], &q[(i + 1) * d..(i + 2) * d]));
            }
        }
        v
    }

    /// Writes `grad_q V` into `out` (length `nd`).
    pub fn grad_v_into(&self, q: &[f64], out: &mut [f64]) {
        let d = self.d();
        for (qi, oi) in q.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let g = self.u1.force_factor_sq(norm_sq(qi));
            for (o, x) in oi.iter_mut().zip(qi) {
                *o = g * x;
            }
        }
        if let Some(u2) = &self.u2 {
            for i in 0..self.n() - 1 {
                let (a, b) = (&q[i * d..(i + 1) * d], &q[(i + 1) * d..(i + 2) * d]);
                let g = u2.force_factor_sq(diff_norm_sq(a, b));
                for k in 0..d {
                    let f = g * (a[k] - b[k]);
                    out[i * d + k] += f;
                    out[(i + 1) * d + k] -= f;
                }
            }
        }
    }

    pub fn grad_v(&self, q: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; q.len()];
        self.grad_v_into(q, &mut out);
        out
    }

    /// Chain Hamiltonian `H(p, q) = p^2/2 + V(q)`.
    pub fn hamiltonian(&self, x: &State) -> f64 {
        0.5 * norm_sq(&x.p) + self.potential(&x.q)
    }

    /// Total energy `G = r^2/2 + H(p, q)`.
    pub fn energy_g(&self, x: &State) -> f64 {
        0.5 * norm_sq(&x.r) + self.hamiltonian(x)
    }

    /// Local energies `H_1..H_n`; every bond energy is split evenly between
    /// its two particles, so the entries sum to `H(p, q)`.
    pub fn local_energies(&self, x: &State) -> Vec<f64> {
        let d = self.d();
        let n = self.n();
        let mut h: Vec<f64> = (0..n)
            .map(|i| {
                let pi = &x.p[i * d..(i + 1) * d];
                let qi = &x.q[i * d..(i + 1) * d];
                0.5 * norm_sq(pi) + self.u1.value(qi)
            })
            .collect();
        if let Some(u2) = &self.u2 {
            for i in 0..n - 1 {
                let bond = 0.5 * u2.value_sq(diff_norm_sq(&x.q[i * d..(i + 1) * d], &x.q[(i + 1) * d..(i + 2) * d]));
                h[i] += bond;
                h[i + 1] += bond;
            }
        }
        h
    }

    /// Heat flow across bond `i` (`0..=n`). `i = 0` is the flow from the left
    /// reservoir into the chain, `i = n` the flow from the chain into the right
    /// reservoir.
    pub fn heat_flow(&self, x: &State, i: usize) -> Result<f64, ModelError> {
        let n = self.n();
        let d = self.d();
        if i > n {
            return Err(ModelError::IndexOutOfRange { index: i, max: n });
        }
        let lambda = self.lambda();
        Ok(if i == 0 {
            -lambda * dot(x.r1(d), &x.p[..d])
        } else if i == n {
            lambda * dot(x.rn(d), &x.p[(n - 1) * d..n * d])
        } else {
            let u2 = self.u2.as_ref().expect("n >= 2 has u2");
            let (a, b) = (&x.q[(i - 1) * d..i * d], &x.q[i * d..(i + 1) * d]);
            let g = u2.force_factor_sq(diff_norm_sq(a, b));
            let mut acc = 0.0;
            for k in 0..d {
                acc += 0.5 * (x.p[(i - 1) * d + k] + x.p[i * d + k]) * g * (a[k] - b[k]);
            }
            acc
        })
    }

    pub fn heat_flows(&self, x: &State) -> Vec<f64> {
        (0..=self.n())
            .map(|i| self.heat_flow(x, i).expect("index in range"))
            .collect()
    }

    /// Entropy production `sigma_i = (1/T_n - 1/T_1) Phi_i` across bond `i`.
    pub fn entropy_production(&self, x: &State, i: usize) -> Result<f64, ModelError> {
        Ok(self.entropy_prefactor() * self.heat_flow(x, i)?)
    }

    /// Reservoir-side entropy production `-Phi_0/T_1 + Phi_n/T_n`: the entropy
    /// gained by both reservoirs from the boundary flows.
    pub fn boundary_entropy_production(&self, x: &State) -> f64 {
        let phi0 = self.heat_flow(x, 0).expect("in range");
        let phin = self.heat_flow(x, self.n()).expect("in range");
        -phi0 / self.t1() + phin / self.tn()
    }

    /// Reference function
    /// `R_i = (r_1^2/2 + sum_{k<=i} H_k)/T_1 + (sum_{k>i} H_k + r_n^2/2)/T_n`.
    pub fn reference_r(&self, x: &State, i: usize) -> Result<f64, ModelError> {
        let n = self.n();
        if i > n {
            return Err(ModelError::IndexOutOfRange { index: i, max: n });
        }
        let d = self.d();
        let h = self.local_energies(x);
        let left: f64 = h[..i].iter().sum();
        let right: f64 = h[i..].iter().sum();
        Ok((0.5 * norm_sq(x.r1(d)) + left) / self.t1() + (right + 0.5 * norm_sq(x.rn(d))) / self.tn())
    }

    /// `r T^{-1} r`.
    pub fn r_inv_t_r(&self, x: &State) -> f64 {
        let d = self.d();
        norm_sq(x.r1(d)) / self.t1() + norm_sq(x.rn(d)) / self.tn()
    }

    /// Rescales `x` along `p -> s^{k_2/2} p`, `q -> s q` (and `r` like `p` when
    /// `scale_r`) so that `H` (or `G` when `scale_r`) equals `target`.
    /// Returns `x` unchanged when it has no energy to rescale.
    pub fn scale_to_energy(&self, x: &State, target: f64, scale_r: bool) -> State {
        let half = self.k2() as f64 / 2.0;
        let apply = |log_s: f64| {
            let s = log_s.exp();
            let sp = s.powf(half);
            State {
                p: x.p.iter().map(|v| v * sp).collect(),
                q: x.q.iter().map(|v| v * s).collect(),
                r: if scale_r {
                    x.r.iter().map(|v| v * sp).collect()
                } else {
                    x.r.clone()
                },
            }
        };
        let level = |y: &State| if scale_r { self.energy_g(y) } else { self.hamiltonian(y) };
        let (mut lo, mut hi) = (-40.0f64, 40.0f64);
        if level(&apply(hi)) <= target || level(&apply(lo)) >= target {
            return x.clone();
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if level(&apply(mid)) < target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 {
                break;
            }
        }
        apply(0.5 * (lo + hi))
    }

    /// Evaluates an observable at `x`.
    pub fn observe(&self, obs: Observable, x: &State) -> f64 {
        match obs {
            Observable::Bond(i) => self.entropy_production(x, i).expect("observable index validated"),
            Observable::Boundary => self.boundary_entropy_production(x),
        }
    }

    pub fn check_observable(&self, obs: Observable) -> Result<(), ModelError> {
        match obs {
            Observable::Bond(i) if i > self.n() => Err(ModelError::IndexOutOfRange {
                index: i,
                max: self.n(),
            }),
            _ => Ok(()),
        }
    }
}

/// Which entropy production is tracked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Observable {
    /// `sigma_i` across bond `i` in `0..=n`.
    Bond(usize),
    /// Reservoir-side variant built from the two boundary flows.
    Boundary,
}

impl std::fmt::Display for Observable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Observable::Bond(i) => write!(f, "sigma_{i}"),
            Observable::Boundary => write!(f, "sigma_b"),
        }
    }
}

/// Index offsets of the flat `(p, q, r)` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub nd: usize,
    pub d: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        2 * self.nd + 2 * self.d
    }
}

/// Phase point `(p, q, r)`.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// `(r_1, r_n)`, each of length `d`.
    pub r: Vec<f64>,
}

impl State {
    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            p: vec![0.0; n * d],
            q: vec![0.0; n * d],
            r: vec![0.0; 2 * d],
        }
    }

    pub fn new(p: Vec<f64>, q: Vec<f64>, r: Vec<f64>) -> Self {
        Self { p, q, r }
    }

    pub fn r1(&self, d: usize) -> &[f64] {
        &self.r[..d]
    }

    pub fn rn(&self, d: usize) -> &[f64] {
        &self.r[d..]
    }

    pub fn is_finite(&self) -> bool {
        self.p.iter().chain(&self.q).chain(&self.r).all(|v| v.is_finite())
    }

    /// Time reversal: flips the sign of every momentum.
    pub fn reversed(&self) -> Self {
        Self {
            p: self.p.iter().map(|v| -v).collect(),
            q: self.q.clone(),
            r: self.r.clone(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.p.len() * 2 + self.r.len());
        v.extend_from_slice(&self.p);
        v.extend_from_slice(&self.q);
        v.extend_from_slice(&self.r);
        v
    }

    pub fn from_flat(layout: Layout, x: &[f64]) -> Self {
        Self {
            p: x[layout.p..layout.p + layout.nd].to_vec(),
            q: x[layout.q..layout.q + layout.nd].to_vec(),
            r: x[layout.r..layout.r + 2 * layout.d].to_vec(),
        }
    }
}

pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn diff_norm_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn harmonic2() -> ChainModel {
        ChainModel::new(ChainParams::harmonic(2, 2.0, 1.0)).unwrap()
    }

    #[test]
    fn validation_flags_and_errors() {
        let m = harmonic2();
        assert!(m.is_harmonic());
        assert_eq!((m.k1(), m.k2()), (2, 2));

        let mut p = ChainParams::harmonic(2, 2.0, 1.0);
        p.u1 = PotentialSpec::quartic(1.0, 1.0);
        assert_eq!(
            ChainModel::new(p).unwrap_err(),
            ModelError::DegreeOrder { k1: 4, k2: 2 }
        );

        let mut p = ChainParams::harmonic(2, 2.0, 1.0);
        p.t1 = 0.0;
        assert!(matches!(
            ChainModel::new(p),
            Err(ModelError::NonPositiveParam { name: "t1", .. })
        ));

        let mut p = ChainParams::harmonic(2, 2.0, 1.0);
        p.u2 = Some(PotentialSpec::quartic(1.0, -1.0));
        assert!(matches!(
            ChainModel::new(p),
            Err(ModelError::NonConfining { name: "u2", .. })
        ));

        let mut p = ChainParams::harmonic(2, 2.0, 1.0);
        p.u2 = Some(PotentialSpec {
            degree: 3,
            coefficients: vec![1.0],
        });
        assert!(matches!(ChainModel::new(p), Err(ModelError::BadDegree { .. })));

        let quartic = ChainModel::new(ChainParams::quartic(3, 2.0, 1.0)).unwrap();
        assert!(!quartic.is_harmonic());
        assert_eq!(quartic.k2(), 4);
    }

    #[test]
    fn gradient_by_hand() {
        let m1 = ChainModel::new(ChainParams::harmonic(1, 1.0, 1.0)).unwrap();
        assert_eq!(m1.grad_v(&[3.0]), vec![3.0]);
        let m2 = harmonic2();
        assert_eq!(m2.grad_v(&[1.0, 0.0]), vec![2.0, -1.0]);
    }

    #[test]
    fn quartic_gradient_matches_finite_difference() {
        let u = PotentialSpec {
            degree: 4,
            coefficients: vec![0.0, 1.0],
        }
        .validate("u1")
        .unwrap();
        let h = 1e-5;
        let fd = (u.value(&[2.0 + h]) - u.value(&[2.0 - h])) / (2.0 * h);
        let mut g = [0.0];
        u.gradient(&[2.0], &mut g);
        assert!((fd - 8.0).abs() < 1e-8);
        assert!((g[0] - fd).abs() < 1e-8);
    }

    #[test]
    fn energies_by_hand() {
        let m1 = ChainModel::new(ChainParams::harmonic(1, 1.0, 1.0)).unwrap();
        let x = State::new(vec![1.0], vec![0.0], vec![0.0, 0.0]);
        assert_eq!(m1.energy_g(&x), 0.5);
        let x = State::new(vec![0.0], vec![0.0], vec![2.0, 0.0]);
        assert_eq!(m1.energy_g(&x), 2.0);

        let mq = ChainModel::new(ChainParams::quartic(1, 1.0, 1.0)).unwrap();
        let x = State::new(vec![0.0], vec![1.0], vec![0.0, 0.0]);
        assert!((mq.energy_g(&x) - (0.5 + 0.25)).abs() < 1e-15);

        let m2 = harmonic2();
        let x = State::new(vec![0.0, 0.0], vec![1.0, -1.0], vec![0.0, 0.0]);
        assert_eq!(m2.local_energies(&x), vec![1.5, 1.5]);

        let x = State::new(vec![0.7], vec![1.3], vec![0.0, 0.0]);
        let h = m1.local_energies(&x);
        assert!((h[0] - (0.49 / 2.0 + 1.69 / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn flows_and_entropy_by_hand() {
        let m2 = harmonic2();
        let x = State::new(vec![3.0, 1.0], vec![1.0, 0.0], vec![2.0, 0.0]);
        assert_eq!(m2.heat_flow(&x, 0).unwrap(), -6.0);
        let x = State::new(vec![1.0, 1.0], vec![1.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(m2.heat_flow(&x, 1).unwrap(), 1.0);
        // T1 = 2, Tn = 1: prefactor 1 - 1/2.
        let x = State::new(vec![1.5, 1.5], vec![2.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(m2.heat_flow(&x, 1).unwrap(), 3.0);
        assert_eq!(m2.entropy_production(&x, 1).unwrap(), 1.5);
        assert!(matches!(
            m2.entropy_production(&x, 3),
            Err(ModelError::IndexOutOfRange { index: 3, max: 2 })
        ));

        let eq = ChainModel::new(ChainParams::harmonic(2, 1.5, 1.5)).unwrap();
        assert_eq!(eq.entropy_production(&x, 1).unwrap(), 0.0);
    }

    #[test]
    fn reference_function_by_hand() {
        let m = ChainModel::new(ChainParams::harmonic(1, 1.0, 2.0)).unwrap();
        let x = State::new(vec![1.0], vec![0.0], vec![1.0, 1.0]);
        assert!((m.reference_r(&x, 0).unwrap() - 1.0).abs() < 1e-15);
        assert!(m.reference_r(&x, 2).is_err());
    }
}
