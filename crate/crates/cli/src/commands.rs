//! Subcommands: each turns a parsed configuration and a master seed into
//! result tables and a list of failed checks.

use std::collections::BTreeMap;

use anyhow::{bail, ensure, Context, Result};
use heatchain::calculus::{
    check_identity_conj, check_identity_magic, random_state_in_ball, DerivativeMode, GaussianPolynomial,
};
use heatchain::diagnostics::{liapunov_ratio, mixing_estimate, tracking_scaling, LiapunovConfig, TrackingConfig};
use heatchain::dynamics::integrate;
use heatchain::estimators::{
    cgf_cloning, cgf_cloning_converged, ergodic_averages, legendre_transform, mgf_naive, AverageConfig, CgfMethod,
    CgfPoint, CloningConfig, ObservableFn,
};
use heatchain::model::Observable;
use heatchain::oracle::{
    grid_eigen_cgf, grid_eigen_refined, lyapunov_covariance, lyapunov_residual, mean_entropy_production, mean_flows,
    riccati_cgf, GridScheme, GridSpec, LinearSystem,
};
use heatchain::streams::{SeedTree, GENERATOR_NAME};
use heatchain::{ChainModel, State};

use crate::config::{MethodChoice, RunConfig, TaskParams};
use crate::output::{num, opt_num, Table};

/// Tolerance for the pointwise operator identities.
pub const IDENTITY_TOLERANCE: f64 = 1e-6;
/// Allowed window for the measured finite-difference order.
pub const FD_ORDER_WINDOW: (f64, f64) = (1.5, 2.5);
/// Half-width of the accepted window around the predicted decay exponent.
pub const DECAY_EXPONENT_WINDOW: f64 = 0.15;
/// Largest accepted relative error of the tracking slope.
pub const TRACKING_TOLERANCE: f64 = 0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Average,
    Cgf,
    Rate,
    Oracle,
    CheckIdentities,
    Diagnose,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Average => "average",
            Command::Cgf => "cgf",
            Command::Rate => "rate",
            Command::Oracle => "oracle",
            Command::CheckIdentities => "check-identities",
            Command::Diagnose => "diagnose",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Outcome {
    pub tables: Vec<Table>,
    /// Human-readable descriptions of failed checks.
    pub failures: Vec<String>,
    pub task_seeds: BTreeMap<String, u64>,
    pub integration_steps: u64,
}

struct Run<'a> {
    cfg: &'a RunConfig,
    command: Command,
    seeds: SeedTree,
    master: u64,
    out: Outcome,
}

impl<'a> Run<'a> {
    fn model(&self) -> &'a ChainModel {
        &self.cfg.model
    }

    fn task(&self) -> &'a TaskParams {
        &self.cfg.task
    }

    /// Child seed tree for `task`, recorded in the manifest.
    fn tree(&mut self, task: &str, indices: &[u64]) -> SeedTree {
        let child = self.seeds.child(task, indices);
        let label = if indices.is_empty() {
            task.to_string()
        } else {
            format!("{task}{indices:?}")
        };
        self.out.task_seeds.insert(label, child.master);
        child
    }

    fn table(&self, file: &str, header: &[&str]) -> Table {
        let mut t = Table::new(file, header);
        let m = self.model();
        t.meta("generator", GENERATOR_NAME)
            .meta("subcommand", self.command.name())
            .meta("seed", self.master)
            .meta(
                "model",
                format!(
                    "n={} d={} k1={} k2={} lambda={} gamma={} t1={} tn={}",
                    m.n(),
                    m.d(),
                    m.k1(),
                    m.k2(),
                    m.lambda(),
                    m.gamma(),
                    m.t1(),
                    m.tn()
                ),
            )
            .meta(
                "units",
                "model units: k_B = 1, unit masses, time in the units of gamma and lambda",
            )
            .meta(
                "sigma_convention",
                "sigma_i = (1/tn - 1/t1) phi_i, phi_i = heat flow across bond i; sigma_b = -phi_0/t1 + phi_n/tn",
            )
            .meta(
                "alpha_convention",
                "e(alpha) = -lim (1/t) log E exp(-alpha W_t), W_t = int_0^t sigma ds; e(0) = e(1) = 0",
            );
        t
    }

    fn observable(&self) -> Observable {
        self.task().observable.unwrap_or(Observable::Bond(0))
    }
}

pub fn run(command: Command, cfg: &RunConfig, seed: u64) -> Result<Outcome> {
    let mut run = Run {
        cfg,
        command,
        seeds: SeedTree::new(seed).child(command.name(), &[]),
        master: seed,
        out: Outcome::default(),
    };
    match command {
        Command::Simulate => simulate(&mut run)?,
        Command::Average => average(&mut run)?,
        Command::Cgf => cgf(&mut run)?,
        Command::Rate => rate(&mut run)?,
        Command::Oracle => oracle(&mut run)?,
        Command::CheckIdentities => check_identities(&mut run)?,
        Command::Diagnose => diagnose(&mut run)?,
    }
    Ok(run.out)
}

fn required<T: Clone>(value: &Option<T>, key: &str) -> Result<T> {
    value.clone().with_context(|| format!("task key `{key}` is required"))
}

fn steps_over(run: &Run, t: f64) -> u64 {
    (t / run.cfg.integrator.step).round() as u64
}

fn simulate(run: &mut Run) -> Result<()> {
    let model = run.model();
    let t = required(&run.task().t, "t")?;
    let steps = run.cfg.integrator.steps_for(t)?;
    let every = run.task().sample_every.unwrap_or((steps / 1000).max(1) as usize);
    let mut observed: Vec<Observable> = (0..=model.n()).map(Observable::Bond).collect();
    observed.push(Observable::Boundary);
    let mut rng = run.tree("trajectory", &[]).rng("path", &[]);
    let traj = integrate(
        model,
        &model.zero_state(),
        t,
        &run.cfg.integrator,
        &mut rng,
        &observed,
        Some(every),
    )?;
    run.out.integration_steps += steps;

    let flows: Vec<String> = (0..=model.n()).map(|i| format!("phi_{i}")).collect();
    let mut header = vec!["time", "G", "H"];
    header.extend(flows.iter().map(String::as_str));
    let mut path = run.table("simulate.csv", &header);
    path.meta("initial_state", "zero").meta("sample_every", every);
    for (time, x) in &traj.samples {
        let mut row = vec![num(*time), num(model.energy_g(x)), num(model.hamiltonian(x))];
        row.extend(model.heat_flows(x).into_iter().map(num));
        path.push(row);
    }
    let mut work = run.table("simulate_work.csv", &["observable", "W", "W_over_t"]);
    work.meta("t", t);
    for (k, obs) in observed.iter().enumerate() {
        let w = traj.work.integrals[k];
        work.push(vec![obs.to_string(), num(w), num(w / traj.work.elapsed)]);
    }
    run.out.tables.extend([path, work]);
    Ok(())
}

fn average(run: &mut Run) -> Result<()> {
    let model = run.model();
    let task = run.task();
    let config = AverageConfig {
        horizon: required(&task.t, "t")?,
        burn_in: task.burn_in.unwrap_or(10.0),
        batches: task.batches.unwrap_or(20),
        replicas: task.replicas.unwrap_or(4),
        integrator: run.cfg.integrator,
    };
    let n = model.n();
    let sigma = |i: usize| move |x: &State| model.entropy_production(x, i).expect("bond in range");
    let phi = |i: usize| move |x: &State| model.heat_flow(x, i).expect("bond in range");
    let sigmas: Vec<_> = (0..=n).map(sigma).collect();
    let phis: Vec<_> = (0..=n).map(phi).collect();
    let boundary = |x: &State| model.boundary_entropy_production(x);
    let energy = |x: &State| model.energy_g(x);
    let mut names = Vec::new();
    let mut fns: Vec<ObservableFn> = Vec::new();
    for (i, f) in sigmas.iter().enumerate() {
        names.push(format!("sigma_{i}"));
        fns.push(f);
    }
    names.push("sigma_b".into());
    fns.push(&boundary);
    for (i, f) in phis.iter().enumerate() {
        names.push(format!("phi_{i}"));
        fns.push(f);
    }
    names.push("G".into());
    fns.push(&energy);

    let seeds = run.tree("average", &[]);
    let estimates = ergodic_averages(model, &fns, &model.zero_state(), &config, &seeds)?;
    run.out.integration_steps += config.replicas as u64 * steps_over(run, config.burn_in + config.horizon);

    let exact: Option<Vec<f64>> = if model.is_harmonic() {
        let flows = mean_flows(model)?;
        let mut v = Vec::new();
        for i in 0..=n {
            v.push(mean_entropy_production(model, Observable::Bond(i))?);
        }
        v.push(mean_entropy_production(model, Observable::Boundary)?);
        v.extend(flows);
        v.push(f64::NAN);
        Some(v)
    } else {
        None
    };
    let mut table = run.table("average.csv", &["observable", "mean", "stderr", "oracle"]);
    table
        .meta("t", config.horizon)
        .meta("burn_in", config.burn_in)
        .meta("batches", config.batches)
        .meta("replicas", config.replicas)
        .meta(
            "oracle",
            "stationary Gaussian (Lyapunov) value for harmonic chains, empty otherwise",
        );
    for (k, (name, est)) in names.iter().zip(&estimates).enumerate() {
        let oracle = exact.as_ref().map(|v| v[k]).filter(|v| v.is_finite());
        table.push(vec![name.clone(), num(est.mean), num(est.stderr), opt_num(oracle)]);
    }
    run.out.tables.push(table);
    Ok(())
}

fn cloning_config(run: &Run) -> Result<(CloningConfig, usize)> {
    let task = run.task();
    let horizon = task.t.unwrap_or(100.0);
    let windows = task.windows.unwrap_or(horizon.round().max(1.0) as usize);
    ensure!(windows > 0, "task key `windows` must be positive");
    let config = CloningConfig {
        horizon,
        population: task.population.unwrap_or(1000),
        window: horizon / windows as f64,
        warmup_windows: task.warmup_windows.unwrap_or(20),
        replicas: task.replicas.unwrap_or(4),
        integrator: run.cfg.integrator,
    };
    Ok((config, task.doublings.unwrap_or(0)))
}

fn grid_spec(run: &Run, alpha: f64) -> GridSpec {
    let task = run.task();
    GridSpec::for_model(
        run.model(),
        alpha,
        task.nodes.unwrap_or(17),
        task.width.unwrap_or(5.0),
        GridScheme::Spectral {
            step: task.grid_step.unwrap_or(0.2),
        },
    )
}

/// `e(alpha)` at every point of the task's alpha grid with `method`.
fn cgf_points(run: &mut Run, method: MethodChoice, alphas: &[f64]) -> Result<Vec<CgfPoint>> {
    let model = run.model();
    let obs = run.observable();
    let mut points = Vec::with_capacity(alphas.len());
    for (k, &alpha) in alphas.iter().enumerate() {
        let point = match method {
            MethodChoice::Riccati => {
                ensure!(model.is_harmonic(), "the riccati method needs a harmonic chain");
                CgfPoint::exact(alpha, riccati_cgf(model, alpha)?.value, CgfMethod::Riccati)
            }
            MethodChoice::Grid => {
                let spec = grid_spec(run, alpha);
                let eigen = match run.task().coarse_nodes {
                    Some(coarse) => grid_eigen_refined(model, alpha, &spec, coarse)?.1,
                    None => grid_eigen_cgf(model, alpha, &spec, None)?,
                };
                CgfPoint {
                    population: spec.nodes,
                    ..CgfPoint::exact(alpha, eigen.value, CgfMethod::Grid)
                }
            }
            MethodChoice::Naive => {
                let t = required(&run.task().t, "t")?;
                let samples = run.task().samples.unwrap_or(1000);
                let seeds = run.tree("naive", &[k as u64]);
                let est = mgf_naive(
                    model,
                    obs,
                    alpha,
                    t,
                    samples,
                    &model.zero_state(),
                    &run.cfg.integrator,
                    &seeds,
                )?;
                run.out.integration_steps += samples as u64 * steps_over(run, t);
                ensure!(est.ci.0 > 0.0, "bootstrap interval of the naive estimate reaches zero");
                CgfPoint {
                    alpha,
                    estimate: -est.value.ln() / t,
                    stderr: (est.ci.1.ln() - est.ci.0.ln()) / (2.0 * 1.96 * t),
                    method: CgfMethod::Naive,
                    horizon: t,
                    population: samples,
                }
            }
            MethodChoice::Cloning => {
                let (config, doublings) = cloning_config(run)?;
                let seeds = run.tree("cloning", &[k as u64]);
                let walker_steps = |h: f64| {
                    let t = h + config.warmup_windows as f64 * config.window;
                    config.replicas as u64 * config.population as u64 * (t / config.integrator.step).round() as u64
                };
                if doublings == 0 {
                    run.out.integration_steps += walker_steps(config.horizon);
                    cgf_cloning(model, obs, alpha, &config, &model.zero_state(), &seeds)?
                } else {
                    let pair =
                        cgf_cloning_converged(model, obs, alpha, &config, &model.zero_state(), &seeds, doublings)?;
                    run.out.integration_steps += walker_steps(pair.short.horizon) + walker_steps(pair.long.horizon);
                    pair.long
                }
            }
        };
        points.push(point);
    }
    Ok(points)
}

fn cgf_table(run: &Run, file: &str, points: &[CgfPoint]) -> Table {
    let mut table = run.table(file, &["alpha", "e_hat", "stderr", "method", "t", "N"]);
    table
        .meta("observable", run.observable())
        .meta(
            "columns",
            "t and N are zero for exact methods; N is nodes per axis for the grid method",
        )
        .meta("integrator_step", run.cfg.integrator.step);
    for p in points {
        table.push(vec![
            num(p.alpha),
            num(p.estimate),
            num(p.stderr),
            p.method.to_string(),
            num(p.horizon),
            p.population.to_string(),
        ]);
    }
    table
}

fn cgf(run: &mut Run) -> Result<()> {
    let alphas = required(&run.task().alpha_grid, "alpha_grid")?;
    let method = run.task().method.unwrap_or(MethodChoice::Cloning);
    let points = cgf_points(run, method, &alphas)?;
    let table = cgf_table(run, "cgf.csv", &points);
    run.out.tables.push(table);
    Ok(())
}

fn rate(run: &mut Run) -> Result<()> {
    let mut alphas = required(&run.task().alpha_grid, "alpha_grid")?;
    let w_grid = required(&run.task().w_grid, "w_grid")?;
    alphas.sort_by(f64::total_cmp);
    alphas.dedup();
    let method = run.task().method.unwrap_or(if run.model().is_harmonic() {
        MethodChoice::Riccati
    } else {
        MethodChoice::Cloning
    });
    let points = cgf_points(run, method, &alphas)?;
    let values: Vec<f64> = points.iter().map(|p| p.estimate).collect();
    let source = format!("{} curve on {} alpha points", points[0].method, points.len());
    let rates = legendre_transform(&alphas, &values, &w_grid, &source)?;
    let mut table = run.table("rate.csv", &["w", "I", "alpha_star", "symmetry"]);
    table
        .meta("observable", run.observable())
        .meta("source", &rates.source)
        .meta(
            "definition",
            "I(w) = sup_alpha (e(alpha) - alpha w); symmetry = I(w) - I(-w) + w, empty when -w is off the grid",
        )
        .meta("max_abs_symmetry", num(rates.symmetry_residual()));
    for row in &rates.rows {
        let symmetry = rates.rate_at(-row.w).map(|minus| row.rate - minus + row.w);
        table.push(vec![num(row.w), num(row.rate), num(row.alpha_star), opt_num(symmetry)]);
    }
    let curve = cgf_table(run, "rate_cgf.csv", &points);
    run.out.tables.extend([table, curve]);
    Ok(())
}

fn oracle(run: &mut Run) -> Result<()> {
    let model = run.model();
    if model.is_harmonic() {
        let sys = LinearSystem::new(model)?;
        let cov = lyapunov_covariance(model)?;
        let flows = mean_flows(model)?;
        let mut table = run.table("oracle_flows.csv", &["observable", "mean_flow", "mean_sigma"]);
        table.meta("lyapunov_residual", num(lyapunov_residual(&sys, &cov)));
        for (i, f) in flows.iter().enumerate() {
            let s = mean_entropy_production(model, Observable::Bond(i))?;
            table.push(vec![format!("bond_{i}"), num(*f), num(s)]);
        }
        let sb = mean_entropy_production(model, Observable::Boundary)?;
        table.push(vec!["boundary".into(), String::new(), num(sb)]);
        run.out.tables.push(table);
    }
    let Some(alphas) = run.task().alpha_grid.clone() else {
        ensure!(
            model.is_harmonic(),
            "anharmonic chains have no flow oracle; give alpha_grid for the grid eigensolver"
        );
        return Ok(());
    };
    let header = [
        "alpha",
        "e",
        "method",
        "riccati_residual",
        "boundary_mass",
        "iterations",
    ];
    let mut table = run.table("oracle_cgf.csv", &header);
    for &alpha in &alphas {
        if model.is_harmonic() {
            let sol = riccati_cgf(model, alpha)?;
            table.push(vec![
                num(alpha),
                num(sol.value),
                "riccati".into(),
                num(sol.residual),
                String::new(),
                String::new(),
            ]);
        } else {
            if model.n() != 1 || model.d() != 1 {
                bail!("the grid eigensolver covers single oscillators in one dimension only");
            }
            let spec = grid_spec(run, alpha);
            let eigen = match run.task().coarse_nodes {
                Some(coarse) => grid_eigen_refined(model, alpha, &spec, coarse)?.1,
                None => grid_eigen_cgf(model, alpha, &spec, None)?,
            };
            table.push(vec![
                num(alpha),
                num(eigen.value),
                "grid".into(),
                String::new(),
                num(eigen.boundary_mass),
                eigen.iterations.to_string(),
            ]);
        }
    }
    table.meta(
        "grid",
        "spectral splitting; nodes, width and grid_step from the task section",
    );
    run.out.tables.push(table);
    Ok(())
}

fn check_identities(run: &mut Run) -> Result<()> {
    let model = run.model();
    let task = run.task();
    let samples = task.samples.unwrap_or(100);
    let g_max = task.g_max.unwrap_or(50.0);
    let alphas = task.alpha_grid.clone().unwrap_or_else(|| vec![0.0, 0.3, 1.0]);
    let mut bonds = vec![0, 1.min(model.n()), model.n()];
    bonds.dedup();
    let seeds = run.tree("identities", &[]);
    let mut rng = seeds.rng("states", &[]);
    let cases: Vec<(State, GaussianPolynomial)> = (0..samples)
        .map(|_| {
            let x = random_state_in_ball(model, g_max, &mut rng);
            let f = GaussianPolynomial::random(model.layout(), &mut rng, 1.0, 0.1);
            (x, f)
        })
        .collect();
    let header = ["identity", "alpha", "bond", "value", "tolerance", "pass"];
    let mut table = run.table("identities.csv", &header);
    table.meta("states", samples).meta("g_max", g_max).meta(
        "value",
        "largest absolute residual over the states (analytic derivatives), or measured order",
    );
    let tol = format!("<= {IDENTITY_TOLERANCE:e}");
    let mut record =
        |run: &mut Run, name: &str, alpha: Option<f64>, bond: String, value: f64, tolerance: &str, pass: bool| {
            if !pass {
                run.out
                    .failures
                    .push(format!("{name} alpha={} bond={bond}: {value}", opt_num(alpha)));
            }
            table.push(vec![
                name.to_string(),
                opt_num(alpha),
                bond,
                num(value),
                tolerance.to_string(),
                pass.to_string(),
            ]);
        };

    for &i in &bonds {
        let mut worst: f64 = 0.0;
        for (x, _) in &cases {
            worst = worst.max(check_identity_magic(model, x, i, DerivativeMode::Analytic)?.abs());
        }
        record(
            run,
            "magic",
            None,
            i.to_string(),
            worst,
            &tol,
            worst <= IDENTITY_TOLERANCE,
        );
    }
    for &alpha in &alphas {
        for &i in &bonds {
            let (mut conj, mut op): (f64, f64) = (0.0, 0.0);
            for (x, f) in &cases {
                let res = check_identity_conj(
                    model,
                    &f.function(model.layout()),
                    x,
                    i,
                    alpha,
                    DerivativeMode::Analytic,
                )?;
                conj = conj.max(res.conj);
                op = op.max(res.op);
            }
            record(
                run,
                "conj",
                Some(alpha),
                i.to_string(),
                conj,
                &tol,
                conj <= IDENTITY_TOLERANCE,
            );
            record(
                run,
                "op",
                Some(alpha),
                i.to_string(),
                op,
                &tol,
                op <= IDENTITY_TOLERANCE,
            );
        }
    }

    // Finite-difference residuals should shrink fourfold when the step halves.
    let mut orders = Vec::new();
    let alpha = 0.4;
    let i = 1.min(model.n());
    let mut rng = seeds.rng("fd", &[]);
    for _ in 0..samples.clamp(1, 20) {
        let x = random_state_in_ball(model, g_max.min(20.0), &mut rng);
        let f = GaussianPolynomial::random(model.layout(), &mut rng, 1.0, 0.3)
            .function(model.layout())
            .values_only();
        let coarse = check_identity_conj(model, &f, &x, i, alpha, DerivativeMode::FiniteDifference(0.04))?;
        let fine = check_identity_conj(model, &f, &x, i, alpha, DerivativeMode::FiniteDifference(0.02))?;
        if coarse.op > 1e-9 && fine.op > 0.0 {
            orders.push((coarse.op / fine.op).log2());
        }
    }
    orders.sort_by(f64::total_cmp);
    let median = orders.get(orders.len() / 2).copied().unwrap_or(f64::NAN);
    let (lo, hi) = FD_ORDER_WINDOW;
    record(
        run,
        "fd_order",
        Some(alpha),
        i.to_string(),
        median,
        &format!("in [{lo}, {hi}]"),
        median >= lo && median <= hi,
    );
    run.out.tables.push(table);
    Ok(())
}

fn diagnose(run: &mut Run) -> Result<()> {
    let model = run.model();
    let task = run.task().clone();
    let energies = required(&task.energies, "energies")?;
    let k2 = model.k2() as f64;

    let liapunov = LiapunovConfig {
        theta: task.theta.unwrap_or(0.25),
        horizon: task.horizon.unwrap_or(1.0),
        shell_states: task.samples.unwrap_or(64),
        noise_samples: task.noise_samples.unwrap_or(16),
        integrator: run.cfg.integrator,
    };
    let seeds = run.tree("liapunov", &[]);
    let report = liapunov_ratio(model, &liapunov, &energies, &seeds)?;
    for &e in &energies {
        let integrator = liapunov.integrator_at(model, e);
        run.out.integration_steps += (liapunov.shell_states * liapunov.noise_samples) as u64
            * (liapunov.horizon / integrator.step).round() as u64;
    }
    let predicted = 2.0 / k2;
    let mut table = run.table("diagnose_liapunov.csv", &["energy", "log_ratio", "stderr"]);
    table
        .meta("theta", liapunov.theta)
        .meta("horizon", liapunov.horizon)
        .meta("shell_states", liapunov.shell_states)
        .meta("noise_samples", liapunov.noise_samples)
        .meta(
            "log_ratio",
            "max over shell states of log E[exp(theta (G(x_t) - G(x)))]",
        )
        .meta("predicted_exponent", num(predicted));
    if let Some(fit) = report.fit {
        table
            .meta("fit", "log_ratio = offset - scale * energy^exponent")
            .meta("fit_exponent", num(fit.exponent))
            .meta("fit_scale", num(fit.scale))
            .meta("fit_offset", num(fit.offset))
            .meta("fit_rms", num(fit.rms_residual));
        if (fit.exponent - predicted).abs() > DECAY_EXPONENT_WINDOW {
            run.out.failures.push(format!(
                "decay exponent {} outside {predicted} +- {DECAY_EXPONENT_WINDOW}",
                fit.exponent
            ));
        }
    }
    for s in &report.shells {
        table.push(vec![num(s.energy), num(s.log_ratio), num(s.stderr)]);
    }
    run.out.tables.push(table);

    if energies.len() >= 2 {
        let cfg = TrackingConfig {
            shell_states: task.tracking_states.unwrap_or(8),
            steps_per_horizon: task.tracking_steps.unwrap_or(4000),
        };
        let seeds = run.tree("tracking", &[]);
        let rep = tracking_scaling(model, &energies, &cfg, &seeds)?;
        run.out.integration_steps += (cfg.shell_states * cfg.steps_per_horizon * energies.len()) as u64;
        let mut table = run.table("diagnose_tracking.csv", &["direction", "slope", "predicted"]);
        table
            .meta(
                "slope",
                "log-log slope of int_0^{t_E} r^2 ds against E at zero temperature, t_E = E^{1/k2 - 1/2}",
            )
            .meta("worst_relative_error", num(rep.worst_relative_error()))
            .meta("mean_slope", num(rep.mean));
        for (k, s) in rep.slopes.iter().enumerate() {
            table.push(vec![k.to_string(), num(*s), num(rep.predicted)]);
        }
        if rep.worst_relative_error() > TRACKING_TOLERANCE {
            run.out.failures.push(format!(
                "tracking slope {} deviates from {} by more than {}",
                rep.worst, rep.predicted, TRACKING_TOLERANCE
            ));
        }
        run.out.tables.push(table);
    }

    if let Some(t) = task.t {
        let obs = run.observable();
        let f = |x: &State| model.observe(obs, x);
        let burn_in = task.burn_in.unwrap_or(10.0);
        let every = task.sample_every.unwrap_or(10);
        let seeds = run.tree("mixing", &[]);
        let est = mixing_estimate(
            model,
            &f,
            &model.zero_state(),
            t,
            burn_in,
            every,
            &run.cfg.integrator,
            &seeds,
        )?;
        run.out.integration_steps += steps_over(run, t + burn_in);
        let mut table = run.table("diagnose_mixing.csv", &["observable", "tau", "window", "variance"]);
        table.meta("t", t).meta("burn_in", burn_in).meta("sample_every", every);
        table.push(vec![
            obs.to_string(),
            num(est.tau),
            est.window.to_string(),
            num(est.variance),
        ]);
        run.out.tables.push(table);
    }
    Ok(())
}
