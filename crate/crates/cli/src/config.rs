//! Flat `key = value` experiment configuration.
//!
//! Layers are merged in increasing priority: built-in defaults, the
//! `OLALA_SIM_SEED` environment variable, the config file, `--set` /
//! positional overrides, and finally `--seed`. Keys are case-sensitive;
//! unknown keys and malformed values are rejected with the key named.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use olala::fl::{DataConfig, FlConfig, ModelKind, QuantizerKind, SyntheticSpec};
use olala::learning::{LossKind, OverloadMode};
use olala::theory::SuiteConfig;

use crate::CliError;

pub const SEED_ENV: &str = "OLALA_SIM_SEED";

/// Every recognised key with a one-line description, in documentation order.
pub const KEYS: &[(&str, &str)] = &[
    ("model", "linear | mlp (default linear)"),
    ("hidden", "MLP hidden widths, two comma-separated integers (default 64,32)"),
    ("dataset", "synthetic | idx (default synthetic)"),
    ("train_images", "IDX image file for training (dataset=idx)"),
    ("train_labels", "IDX label file for training (dataset=idx)"),
    ("test_images", "IDX image file for testing (dataset=idx)"),
    ("test_labels", "IDX label file for testing (dataset=idx)"),
    ("classes", "number of classes (default 10)"),
    ("synthetic_train", "synthetic training samples (default 6000)"),
    ("synthetic_test", "synthetic test samples (default 1000)"),
    ("synthetic_dim", "synthetic feature dimension (default 64)"),
    ("synthetic_noise", "synthetic class noise scale (default 0.35)"),
    ("data_seed", "seed of the synthetic corpus (default 0)"),
    ("U", "number of clients (default 5)"),
    ("L", "lattice dimension (default 2)"),
    ("R", "bits per model coordinate (default 2)"),
    ("rounds", "global rounds (default 20)"),
    ("local_steps", "local SGD steps per round (default 100)"),
    ("local_lr", "local SGD step size (default 0.1)"),
    ("adapt_every", "rounds between lattice adaptations (default 1)"),
    ("quantizer", "none | fixed_hex | fixed_a2 | fixed_d2 | fixed_square | static_global | static_per_user | olala (default olala)"),
    ("loss_kind", "mse | neg_snr | task (default mse)"),
    ("lattice_lr", "lattice learning rate (default: per loss kind)"),
    ("epochs", "lattice learning epochs per adaptation (default 20)"),
    ("batches", "lattice learning batches per epoch (default 8; task uses 1)"),
    ("overload_mode", "fraction:P | heuristic_minus1 (default fraction:0.005)"),
    ("include_zeta", "count 64 bits for the scale in the bit budget (default true)"),
    ("reset_theta", "re-initialise the lattice network every round (default false)"),
    ("master_seed", "root seed of the experiment (default 0)"),
    ("parallel", "worker threads (default 1)"),
    ("final_window", "rounds averaged into the final accuracy (default 5)"),
    ("rates", "sweep: comma-separated rates (default 2,3,4)"),
    ("quantizers", "sweep: comma-separated quantizer kinds (default: all)"),
    ("seeds", "sweep: seeds per entry, master_seed + 0..seeds (default 1)"),
    ("check_scalar_samples", "checks: scalar moment samples (default 1000000)"),
    ("check_sdq_samples", "checks: error-law samples per generator (default 100000)"),
    ("check_distortion_trials", "checks: distortion bound trials (default 100000)"),
    ("check_convergence_rounds", "checks: convergence rounds T (default 2000)"),
    ("check_convergence_seeds", "checks: convergence seeds (default 20)"),
    ("check_convergence_dim", "checks: quadratic problem dimension (default 128)"),
    ("check_scaling_samples", "checks: radius-scaling samples per radius (default 100000)"),
    ("check_scaling_rate", "checks: rate of the radius-scaling check (default 2)"),
    ("check_shape_rate", "checks: rate of the hexagonal-vs-square comparison (default 3)"),
    ("out", "output directory (default out)"),
    ("verbosity", "error | warn | info | debug | trace (default warn)"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub fl: FlConfig,
    pub checks: SuiteConfig,
    pub sweep_rates: Vec<f64>,
    pub sweep_quantizers: Vec<QuantizerKind>,
    pub sweep_seeds: u64,
    pub final_window: usize,
    pub out: PathBuf,
    pub verbosity: log::LevelFilter,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            fl: FlConfig::default(),
            checks: SuiteConfig::default(),
            sweep_rates: vec![2.0, 3.0, 4.0],
            sweep_quantizers: QuantizerKind::ALL.to_vec(),
            sweep_seeds: 1,
            final_window: 5,
            out: PathBuf::from("out"),
            verbosity: log::LevelFilter::Warn,
        }
    }
}

/// Raw, unvalidated assignments in application order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides(Vec<(String, String)>);

impl Overrides {
    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.0.push((key.into(), value.into()));
    }

    /// Parses `key=value` (surrounding whitespace ignored).
    pub fn push_assignment(&mut self, text: &str) -> Result<(), CliError> {
        let (k, v) = text
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got '{text}'")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(CliError::Config(format!("missing key in '{text}'")));
        }
        self.push(k, v.trim());
        Ok(())
    }

    /// File syntax: one assignment per line, `#` starts a comment.
    pub fn parse_text(text: &str, origin: &str) -> Result<Self, CliError> {
        let mut o = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            o.push_assignment(line)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(o)
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config file {}: {e}", path.display())))?;
        Self::parse_text(&text, &path.display().to_string())
    }

    pub fn extend(&mut self, other: Overrides) {
        self.0.extend(other.0);
    }
}

/// Merges the layers and validates the result.
pub fn parse_config(
    file: Option<&Path>,
    overrides: &Overrides,
    env_seed: Option<&str>,
    seed: Option<u64>,
) -> Result<ExperimentConfig, CliError> {
    let mut layers = Overrides::default();
    if let Some(s) = env_seed {
        layers.push("master_seed", s);
    }
    if let Some(p) = file {
        layers.extend(Overrides::from_file(p)?);
    }
    layers.extend(overrides.clone());
    if let Some(s) = seed {
        layers.push("master_seed", s.to_string());
    }
    let mut cfg = ExperimentConfig::default();
    let mut data = DataSettings::default();
    for (k, v) in &layers.0 {
        apply(&mut cfg, &mut data, k, v)?;
    }
    cfg.fl.data = data.build()?;
    cfg.checks.seed = cfg.fl.master_seed;
    cfg.fl.validate().map_err(|e| match e {
        olala::Error::Usage(msg) => CliError::Config(msg),
        other => CliError::Config(other.to_string()),
    })?;
    validate_extra(&cfg)?;
    Ok(cfg)
}

#[derive(Debug, Default)]
struct DataSettings {
    idx: bool,
    train_images: Option<PathBuf>,
    train_labels: Option<PathBuf>,
    test_images: Option<PathBuf>,
    test_labels: Option<PathBuf>,
    classes: Option<usize>,
    synthetic: SyntheticSpec,
}

impl DataSettings {
    fn build(self) -> Result<DataConfig, CliError> {
        if self.idx {
            let need = |p: Option<PathBuf>, key: &str| {
                p.ok_or_else(|| CliError::Config(format!("{key}: required when dataset=idx")))
            };
            Ok(DataConfig::Idx {
                train_images: need(self.train_images, "train_images")?,
                train_labels: need(self.train_labels, "train_labels")?,
                test_images: need(self.test_images, "test_images")?,
                test_labels: need(self.test_labels, "test_labels")?,
                classes: self.classes.unwrap_or(10),
            })
        } else {
            let mut s = self.synthetic;
            if let Some(c) = self.classes {
                s.classes = c;
            }
            Ok(DataConfig::Synthetic(s))
        }
    }
}

fn bad(key: &str, msg: impl fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse().map_err(|_| bad(key, format!("expected a {}, got '{v}'", std::any::type_name::<T>())))
}

fn list<T>(key: &str, v: &str, f: impl Fn(&str) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    let items: Vec<T> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(f).collect::<Result<_, _>>()?;
    if items.is_empty() {
        return Err(bad(key, "expected a non-empty comma-separated list"));
    }
    Ok(items)
}

fn boolean(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, format!("expected true or false, got '{v}'"))),
    }
}

fn parse_overload(key: &str, v: &str) -> Result<OverloadMode, CliError> {
    if v == "heuristic_minus1" || v == "-1" {
        return Ok(OverloadMode::heuristic());
    }
    if v == "fraction" {
        return Ok(OverloadMode::Fraction(OverloadMode::DEFAULT_FRACTION));
    }
    let p = v
        .strip_prefix("fraction:")
        .map(|p| num::<f64>(key, p))
        .transpose()?
        .ok_or_else(|| bad(key, format!("expected fraction:P or heuristic_minus1, got '{v}'")))?;
    Ok(OverloadMode::Fraction(p))
}

fn apply(cfg: &mut ExperimentConfig, data: &mut DataSettings, key: &str, v: &str) -> Result<(), CliError> {
    let fl = &mut cfg.fl;
    let ck = &mut cfg.checks;
    match key {
        "model" => {
            fl.model = match v {
                "linear" => ModelKind::Linear,
                "mlp" => ModelKind::Mlp,
                _ => return Err(bad(key, format!("expected linear or mlp, got '{v}'"))),
            }
        }
        "hidden" => {
            let w = list(key, v, |s| num::<usize>(key, s))?;
            if w.len() != 2 {
                return Err(bad(key, "expected exactly two widths"));
            }
            fl.hidden = [w[0], w[1]];
        }
        "dataset" => {
            data.idx = match v {
                "synthetic" => false,
                "idx" => true,
                _ => return Err(bad(key, format!("expected synthetic or idx, got '{v}'"))),
            }
        }
        "train_images" => data.train_images = Some(PathBuf::from(v)),
        "train_labels" => data.train_labels = Some(PathBuf::from(v)),
        "test_images" => data.test_images = Some(PathBuf::from(v)),
        "test_labels" => data.test_labels = Some(PathBuf::from(v)),
        "classes" => data.classes = Some(num(key, v)?),
        "synthetic_train" => data.synthetic.train = num(key, v)?,
        "synthetic_test" => data.synthetic.test = num(key, v)?,
        "synthetic_dim" => data.synthetic.dim = num(key, v)?,
        "synthetic_noise" => data.synthetic.noise = num(key, v)?,
        "data_seed" => data.synthetic.seed = num(key, v)?,
        "U" => fl.users = num(key, v)?,
        "L" => fl.dim = num(key, v)?,
        "R" => fl.rate = num(key, v)?,
        "rounds" => fl.rounds = num(key, v)?,
        "local_steps" => fl.local_steps = num(key, v)?,
        "local_lr" => fl.local_lr = num(key, v)?,
        "adapt_every" => fl.adapt_every = num(key, v)?,
        "quantizer" => fl.quantizer = v.parse().map_err(|e| bad(key, e))?,
        "loss_kind" => fl.loss = v.parse::<LossKind>().map_err(|e| bad(key, e))?,
        "lattice_lr" => fl.lattice_lr = Some(num(key, v)?),
        "epochs" => fl.epochs = num(key, v)?,
        "batches" => fl.batches = num(key, v)?,
        "overload_mode" => fl.overload = parse_overload(key, v)?,
        "include_zeta" => fl.include_zeta = boolean(key, v)?,
        "reset_theta" => fl.reset_theta_each_round = boolean(key, v)?,
        "master_seed" => fl.master_seed = num(key, v)?,
        "parallel" => fl.parallel = num(key, v)?,
        "final_window" => cfg.final_window = num(key, v)?,
        "rates" => cfg.sweep_rates = list(key, v, |s| num::<f64>(key, s))?,
        "quantizers" => cfg.sweep_quantizers = list(key, v, |s| s.parse().map_err(|e| bad(key, e)))?,
        "seeds" => cfg.sweep_seeds = num(key, v)?,
        "check_scalar_samples" => ck.scalar_samples = num(key, v)?,
        "check_sdq_samples" => ck.sdq_samples = num(key, v)?,
        "check_distortion_trials" => ck.distortion_trials = num(key, v)?,
        "check_convergence_rounds" => ck.convergence_rounds = num(key, v)?,
        "check_convergence_seeds" => ck.convergence_seeds = num(key, v)?,
        "check_convergence_dim" => ck.convergence_dim = num(key, v)?,
        "check_scaling_samples" => ck.scaling_samples = num(key, v)?,
        "check_scaling_rate" => ck.scaling_rate = num(key, v)?,
        "check_shape_rate" => ck.shape_rate = num(key, v)?,
        "out" => cfg.out = PathBuf::from(v),
        "verbosity" => cfg.verbosity = v.parse().map_err(|_| bad(key, format!("unknown level '{v}'")))?,
        _ => {
            let known = KEYS.iter().find(|(k, _)| k.eq_ignore_ascii_case(key)).map(|(k, _)| *k);
            return Err(CliError::Config(match known {
                Some(k) => format!("unknown key '{key}' (keys are case-sensitive; did you mean '{k}'?)"),
                None => format!("unknown key '{key}'"),
            }));
        }
    }
    Ok(())
}

fn validate_extra(cfg: &ExperimentConfig) -> Result<(), CliError> {
    if cfg.final_window == 0 {
        return Err(bad("final_window", "must be at least 1"));
    }
    if cfg.sweep_seeds == 0 {
        return Err(bad("seeds", "must be at least 1"));
    }
    if let Some(r) = cfg.sweep_rates.iter().find(|r| !r.is_finite() || **r <= 0.0 || **r > 16.0) {
        return Err(bad("rates", format!("every rate must be in (0, 16], got {r}")));
    }
    if let Some(q) = cfg.sweep_quantizers.iter().find(|q| q.fixed_shape().is_some() && cfg.fl.dim != 2) {
        return Err(bad("quantizers", format!("{q} needs L=2")));
    }
    let ck = &cfg.checks;
    for (key, v, min) in [
        ("check_scalar_samples", ck.scalar_samples, 100),
        ("check_sdq_samples", ck.sdq_samples, 100),
        ("check_distortion_trials", ck.distortion_trials, 2),
        ("check_convergence_rounds", ck.convergence_rounds, 20),
        ("check_convergence_seeds", ck.convergence_seeds, 1),
        ("check_convergence_dim", ck.convergence_dim, 2),
        ("check_scaling_samples", ck.scaling_samples, 100),
    ] {
        if v < min {
            return Err(bad(key, format!("must be at least {min}, got {v}")));
        }
    }
    if ck.convergence_dim % 2 != 0 {
        return Err(bad("check_convergence_dim", "must be even (two-dimensional lattices)"));
    }
    for (key, r) in [("check_scaling_rate", ck.scaling_rate), ("check_shape_rate", ck.shape_rate)] {
        if !(r > 0.0) || r > 8.0 {
            return Err(bad(key, format!("must be in (0, 8], got {r}")));
        }
    }
    Ok(())
}

/// The documented schema, one `key  description` line per key.
pub fn schema() -> String {
    KEYS.iter().map(|(k, d)| format!("{k:<26}{d}\n")).collect()
}
