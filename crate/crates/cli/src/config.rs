//! Flat sectioned key-value configuration.
//!
//! ```text
//! [model]
//! n = 2
//! t1 = 2
//! tn = 1
//!
//! [integrator]
//! h = 0.05
//!
//! [task]
//! alpha_grid = 0.1:0.1:0.9
//! ```
//!
//! Lists are comma separated; an item `start:step:stop` expands to an
//! inclusive arithmetic range. `#` starts a comment.

use std::collections::BTreeMap;
use std::path::Path;

use heatchain::dynamics::{IntegratorConfig, Quadrature, Scheme};
use heatchain::model::{ModelError, Observable, PotentialSpec};
use heatchain::{ChainModel, ChainParams};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("line {line}: unknown key `{key}` in section [{section}]")]
    UnknownKey { line: usize, section: String, key: String },
    #[error("missing key `{key}` in section [{section}]")]
    MissingKey { section: &'static str, key: &'static str },
    #[error("invalid configuration: {0}")]
    Validation(#[from] ModelError),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

const MODEL_KEYS: &[&str] = &[
    "n",
    "d",
    "u1.degree",
    "u1.a2",
    "u1.a4",
    "u2.degree",
    "u2.a2",
    "u2.a4",
    "lambda",
    "gamma",
    "t1",
    "tn",
];
const INTEGRATOR_KEYS: &[&str] = &["h", "scheme", "quadrature"];
const TASK_KEYS: &[&str] = &[
    "alpha_grid",
    "t",
    "population",
    "windows",
    "w_grid",
    "theta",
    "energies",
    "observable",
    "method",
    "replicas",
    "warmup_windows",
    "doublings",
    "burn_in",
    "batches",
    "samples",
    "sample_every",
    "g_max",
    "nodes",
    "coarse_nodes",
    "width",
    "grid_step",
    "horizon",
    "noise_samples",
    "tracking_states",
    "tracking_steps",
];

fn known_keys(section: &str) -> Option<&'static [&'static str]> {
    match section {
        "model" => Some(MODEL_KEYS),
        "integrator" => Some(INTEGRATOR_KEYS),
        "task" => Some(TASK_KEYS),
        _ => None,
    }
}

/// A raw value with its source position.
#[derive(Debug, Clone)]
struct Entry {
    line: usize,
    column: usize,
    text: String,
}

impl Entry {
    fn error(&self, message: impl Into<String>) -> ConfigError {
        ConfigError::Parse {
            line: self.line,
            column: self.column,
            message: message.into(),
        }
    }

    fn number(&self) -> Result<f64, ConfigError> {
        parse_number(&self.text).ok_or_else(|| self.error(format!("expected a number, found `{}`", self.text)))
    }

    fn count(&self) -> Result<usize, ConfigError> {
        self.text
            .parse::<usize>()
            .map_err(|_| self.error(format!("expected a non-negative integer, found `{}`", self.text)))
    }

    fn list(&self) -> Result<Vec<f64>, ConfigError> {
        let mut out = Vec::new();
        let mut offset = 0;
        for item in self.text.split(',') {
            let lead = item.len() - item.trim_start().len();
            let at = Entry {
                line: self.line,
                column: self.column + offset + lead,
                text: item.trim().to_string(),
            };
            offset += item.len() + 1;
            let parts: Vec<&str> = at.text.split(':').collect();
            match parts.as_slice() {
                [single] => out.push(
                    parse_number(single).ok_or_else(|| at.error(format!("expected a number, found `{single}`")))?,
                ),
                [start, step, stop] => {
                    let bad = || at.error(format!("expected start:step:stop, found `{}`", at.text));
                    let (start, step, stop) = (
                        parse_number(start).ok_or_else(bad)?,
                        parse_number(step).ok_or_else(bad)?,
                        parse_number(stop).ok_or_else(bad)?,
                    );
                    let span = (stop - start) / step;
                    if step == 0.0 || !(-1e-9..1e6).contains(&span) {
                        return Err(at.error(format!("range `{}` is empty or too long", at.text)));
                    }
                    let k = (span + 1e-9).floor() as usize;
                    // Round away representation noise so that 1 - alpha matches exactly.
                    out.extend((0..=k).map(|j| round_to(start + j as f64 * step, 12)));
                }
                _ => return Err(at.error(format!("malformed list item `{}`", at.text))),
            }
        }
        Ok(out)
    }
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn round_to(v: f64, digits: i32) -> f64 {
    let scale = 10f64.powi(digits);
    (v * scale).round() / scale
}

/// Entries of one section, consumed as they are read.
#[derive(Debug, Default)]
struct Section {
    entries: BTreeMap<String, Entry>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<Entry> {
        self.entries.remove(key)
    }
}

/// Which estimator computes `e(alpha)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodChoice {
    Cloning,
    Naive,
    Riccati,
    Grid,
}

impl MethodChoice {
    fn parse(entry: &Entry) -> Result<Self, ConfigError> {
        match entry.text.as_str() {
            "cloning" => Ok(Self::Cloning),
            "naive" => Ok(Self::Naive),
            "riccati" => Ok(Self::Riccati),
            "grid" => Ok(Self::Grid),
            other => Err(entry.error(format!("unknown method `{other}` (cloning, naive, riccati, grid)"))),
        }
    }
}

/// Task parameters; each subcommand reads the ones it needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskParams {
    pub alpha_grid: Option<Vec<f64>>,
    pub t: Option<f64>,
    pub population: Option<usize>,
    pub windows: Option<usize>,
    pub w_grid: Option<Vec<f64>>,
    pub theta: Option<f64>,
    pub energies: Option<Vec<f64>>,
    pub observable: Option<Observable>,
    pub method: Option<MethodChoice>,
    pub replicas: Option<usize>,
    pub warmup_windows: Option<usize>,
    pub doublings: Option<usize>,
    pub burn_in: Option<f64>,
    pub batches: Option<usize>,
    pub samples: Option<usize>,
    pub sample_every: Option<usize>,
    pub g_max: Option<f64>,
    pub nodes: Option<usize>,
    pub coarse_nodes: Option<usize>,
    pub width: Option<f64>,
    pub grid_step: Option<f64>,
    pub horizon: Option<f64>,
    pub noise_samples: Option<usize>,
    pub tracking_states: Option<usize>,
    pub tracking_steps: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ChainModel,
    pub integrator: IntegratorConfig,
    pub task: TaskParams,
    /// Verbatim configuration text.
    pub source: String,
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut sections = tokenize(text)?;
    let model_section = sections.remove("model").unwrap_or_default();
    let integrator_section = sections.remove("integrator").unwrap_or_default();
    let task_section = sections.remove("task").unwrap_or_default();
    let model = build_model(model_section)?;
    let integrator = build_integrator(integrator_section)?;
    let task = build_task(task_section, &model)?;
    Ok(RunConfig {
        model,
        integrator,
        task,
        source: text.to_string(),
    })
}

fn tokenize(text: &str) -> Result<BTreeMap<String, Section>, ConfigError> {
    let mut sections: BTreeMap<String, Section> = BTreeMap::new();
    let mut current: Option<String> = None;
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        let content = raw.split('#').next().unwrap_or("");
        let trimmed = content.trim();
        if trimmed.is_empty() {
            continue;
        }
        let column = content.len() - content.trim_start().len() + 1;
        let err = |column: usize, message: String| ConfigError::Parse { line, column, message };
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err(column + trimmed.len(), "expected `]`".into()))?
                .trim();
            if known_keys(name).is_none() {
                return Err(err(
                    column + 1,
                    format!("unknown section [{name}] (model, integrator, task)"),
                ));
            }
            if sections.contains_key(name) {
                return Err(err(column + 1, format!("section [{name}] appears twice")));
            }
            sections.insert(name.to_string(), Section::default());
            current = Some(name.to_string());
            continue;
        }
        let Some(eq) = trimmed.find('=') else {
            return Err(err(column, "expected `key = value`".into()));
        };
        let key = trimmed[..eq].trim();
        let value_raw = &trimmed[eq + 1..];
        let value = value_raw.trim();
        if key.is_empty() {
            return Err(err(column, "empty key".into()));
        }
        let value_column = column + eq + 1 + (value_raw.len() - value_raw.trim_start().len());
        if value.is_empty() {
            return Err(err(value_column, format!("missing value for `{key}`")));
        }
        let Some(section) = current.clone() else {
            return Err(err(column, "key outside of any section".into()));
        };
        if !known_keys(&section).is_some_and(|keys| keys.contains(&key)) {
            return Err(ConfigError::UnknownKey {
                line,
                section,
                key: key.to_string(),
            });
        }
        let entries = &mut sections.get_mut(&section).expect("section registered").entries;
        if entries.contains_key(key) {
            return Err(err(column, format!("duplicate key `{key}`")));
        }
        entries.insert(
            key.to_string(),
            Entry {
                line,
                column: value_column,
                text: value.to_string(),
            },
        );
    }
    Ok(sections)
}

fn potential(section: &mut Section, prefix: &str) -> Result<Option<PotentialSpec>, ConfigError> {
    let degree = section.take(&format!("{prefix}.degree"));
    let a2 = section.take(&format!("{prefix}.a2"));
    let a4 = section.take(&format!("{prefix}.a4"));
    if degree.is_none() && a2.is_none() && a4.is_none() {
        return Ok(None);
    }
    let degree_value = match &degree {
        Some(e) => e.count()? as u32,
        None if a4.is_some() => 4,
        None => 2,
    };
    let mut coefficients = vec![a2.as_ref().map(Entry::number).transpose()?.unwrap_or(0.0)];
    if let Some(e) = &a4 {
        coefficients.push(e.number()?);
    }
    Ok(Some(PotentialSpec {
        degree: degree_value,
        coefficients,
    }))
}

fn build_model(mut s: Section) -> Result<ChainModel, ConfigError> {
    let required =
        |s: &mut Section, key: &'static str| s.take(key).ok_or(ConfigError::MissingKey { section: "model", key });
    let n = required(&mut s, "n")?.count()?;
    let t1 = required(&mut s, "t1")?.number()?;
    let tn = required(&mut s, "tn")?.number()?;
    let d = s.take("d").map(|e| e.count()).transpose()?.unwrap_or(1);
    let lambda = s.take("lambda").map(|e| e.number()).transpose()?.unwrap_or(1.0);
    let gamma = s.take("gamma").map(|e| e.number()).transpose()?.unwrap_or(1.0);
    let u1 = potential(&mut s, "u1")?.unwrap_or_else(|| PotentialSpec::harmonic(1.0));
    let u2 = match potential(&mut s, "u2")? {
        Some(spec) => Some(spec),
        None if n > 1 => Some(PotentialSpec::harmonic(1.0)),
        None => None,
    };
    let params = ChainParams {
        n,
        d,
        u1,
        u2,
        lambda,
        gamma,
        t1,
        tn,
    };
    Ok(ChainModel::new(params)?)
}

fn build_integrator(mut s: Section) -> Result<IntegratorConfig, ConfigError> {
    let step = s.take("h").map(|e| e.number()).transpose()?.unwrap_or(0.01);
    let mut config = IntegratorConfig::new(step);
    if let Some(e) = s.take("scheme") {
        config.scheme = match e.text.as_str() {
            "splitting" => Scheme::Splitting,
            "euler-maruyama" => Scheme::EulerMaruyama,
            other => return Err(e.error(format!("unknown scheme `{other}` (splitting, euler-maruyama)"))),
        };
    }
    if let Some(e) = s.take("quadrature") {
        config.quadrature = match e.text.as_str() {
            "midpoint" => Quadrature::Midpoint,
            "trapezoid" => Quadrature::Trapezoid,
            other => return Err(e.error(format!("unknown quadrature `{other}` (midpoint, trapezoid)"))),
        };
    }
    config
        .validate()
        .map_err(|_| ConfigError::Validation(ModelError::NonPositiveParam { name: "h", value: step }))?;
    Ok(config)
}

fn parse_observable(entry: &Entry, model: &ChainModel) -> Result<Observable, ConfigError> {
    let text = entry.text.as_str();
    let obs = if text == "sigma_b" || text == "boundary" {
        Observable::Boundary
    } else {
        let index = text.strip_prefix("sigma_").unwrap_or(text);
        Observable::Bond(
            index
                .parse()
                .map_err(|_| entry.error(format!("expected sigma_<i> or sigma_b, found `{text}`")))?,
        )
    };
    model.check_observable(obs)?;
    Ok(obs)
}

fn build_task(mut s: Section, model: &ChainModel) -> Result<TaskParams, ConfigError> {
    let number = |s: &mut Section, key: &str| s.take(key).map(|e| e.number()).transpose();
    let count = |s: &mut Section, key: &str| s.take(key).map(|e| e.count()).transpose();
    let list = |s: &mut Section, key: &str| s.take(key).map(|e| e.list()).transpose();
    let task = TaskParams {
        alpha_grid: list(&mut s, "alpha_grid")?,
        t: number(&mut s, "t")?,
        population: count(&mut s, "population")?,
        windows: count(&mut s, "windows")?,
        w_grid: list(&mut s, "w_grid")?,
        theta: number(&mut s, "theta")?,
        energies: list(&mut s, "energies")?,
        observable: s.take("observable").map(|e| parse_observable(&e, model)).transpose()?,
        method: s.take("method").map(|e| MethodChoice::parse(&e)).transpose()?,
        replicas: count(&mut s, "replicas")?,
        warmup_windows: count(&mut s, "warmup_windows")?,
        doublings: count(&mut s, "doublings")?,
        burn_in: number(&mut s, "burn_in")?,
        batches: count(&mut s, "batches")?,
        samples: count(&mut s, "samples")?,
        sample_every: count(&mut s, "sample_every")?,
        g_max: number(&mut s, "g_max")?,
        nodes: count(&mut s, "nodes")?,
        coarse_nodes: count(&mut s, "coarse_nodes")?,
        width: number(&mut s, "width")?,
        grid_step: number(&mut s, "grid_step")?,
        horizon: number(&mut s, "horizon")?,
        noise_samples: count(&mut s, "noise_samples")?,
        tracking_states: count(&mut s, "tracking_states")?,
        tracking_steps: count(&mut s, "tracking_steps")?,
    };
    for (name, value) in [
        ("t", task.t),
        ("theta", task.theta),
        ("horizon", task.horizon),
        ("g_max", task.g_max),
        ("width", task.width),
        ("grid_step", task.grid_step),
    ] {
        if let Some(v) = value {
            if v <= 0.0 {
                return Err(ConfigError::Invalid(format!(
                    "task key `{name}` = {v} must be positive"
                )));
            }
        }
    }
    if let Some(v) = task.burn_in {
        if v < 0.0 {
            return Err(ConfigError::Invalid(format!(
                "task key `burn_in` = {v} must be non-negative"
            )));
        }
    }
    if let Some(e) = &task.energies {
        if e.iter().any(|v| *v <= 0.0) {
            return Err(ConfigError::Invalid("energies must be positive".into()));
        }
    }
    Ok(task)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "\
[model]
n = 2
d = 1
u1.degree = 2
u1.a2 = 1
u2.degree = 2
u2.a2 = 1
lambda = 1
gamma = 1
t1 = 2
tn = 1
";

    fn parse_err(text: &str) -> ConfigError {
        parse_config_str(text).unwrap_err()
    }

    #[test]
    fn minimal_harmonic_config_parses() {
        let cfg = parse_config_str(MINIMAL).unwrap();
        assert_eq!(cfg.model.n(), 2);
        assert!(cfg.model.is_harmonic());
        assert_eq!(cfg.model.t1(), 2.0);
        assert_eq!(cfg.integrator, IntegratorConfig::new(0.01));
        assert_eq!(cfg.task, TaskParams::default());
    }

    #[test]
    fn misspelled_key_reports_line() {
        let text = MINIMAL.replace("gamma = 1", "gama = 1");
        match parse_err(&text) {
            ConfigError::UnknownKey { line, key, section } => {
                assert_eq!((line, key.as_str(), section.as_str()), (9, "gama", "model"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_temperature_is_rejected_by_validation() {
        let text = MINIMAL.replace("t1 = 2", "t1 = -1");
        match parse_err(&text) {
            ConfigError::Validation(ModelError::NonPositiveParam { name, value }) => {
                assert_eq!(name, "t1");
                assert_eq!(value, -1.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_line_and_column() {
        let text = MINIMAL.replace("lambda = 1", "lambda = 1.x");
        match parse_err(&text) {
            ConfigError::Parse { line, column, .. } => assert_eq!((line, column), (8, 10)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_lines_are_parse_errors() {
        for (text, line, column) in [
            ("[model\nn = 1".to_string(), 1, 7),
            ("[modle]".to_string(), 1, 2),
            ("n = 1".to_string(), 1, 1),
            ("[model]\n  n 1".to_string(), 2, 3),
            ("[model]\nn = 1\nn = 2".to_string(), 3, 1),
            (format!("{MINIMAL}[task]\nalpha_grid = 0.1, x"), 13, 19),
        ] {
            match parse_err(&text) {
                ConfigError::Parse { line: l, column: c, .. } => assert_eq!((l, c), (line, column), "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn lists_and_ranges_expand() {
        let text = format!("{MINIMAL}[task]\nalpha_grid = 0.1:0.2:0.9, 0.95 # tail\nw_grid = -1, 1\n");
        let cfg = parse_config_str(&text).unwrap();
        assert_eq!(cfg.task.alpha_grid.unwrap(), vec![0.1, 0.3, 0.5, 0.7, 0.9, 0.95]);
        assert_eq!(cfg.task.w_grid.unwrap(), vec![-1.0, 1.0]);
    }

    #[test]
    fn quartic_defaults_and_observable() {
        let text = "[model]\nn = 1\nu1.a4 = 1\nt1 = 2\ntn = 1\n[task]\nobservable = sigma_b\nmethod = grid\n";
        let cfg = parse_config_str(text).unwrap();
        assert_eq!(cfg.model.k1(), 4);
        assert_eq!(cfg.task.observable, Some(Observable::Boundary));
        assert_eq!(cfg.task.method, Some(MethodChoice::Grid));
        let bad = "[model]\nn = 1\nt1 = 2\ntn = 1\n[task]\nobservable = sigma_3\n";
        assert!(matches!(parse_err(bad), ConfigError::Validation(_)));
    }

    #[test]
    fn missing_required_key() {
        assert!(matches!(
            parse_err("[model]\nn = 1\nt1 = 1\n"),
            ConfigError::MissingKey { key: "tn", .. }
        ));
    }
}
