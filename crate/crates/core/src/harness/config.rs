//! Flat `key = value` configuration with dotted keys.
//!
//! ```text
//! # comments start with '#'
//! seed = 3
//! plan.lambda_u = 1.0
//! plan.gamma = 20:0.95, 40:0.95
//! ```
//!
//! Command-line overrides use the same names (`--plan.lr=0.1` or
//! `--plan.lr 0.1`) and replace file values.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::augment::{AugmentPolicy, ImageShape, Perturbation};
use crate::data::{PartitionMode, PartitionSpec};
use crate::error::{Error, Result};
use crate::flcore::{ExecutionOrder, RoundPlan};
use crate::model::ClassifierSpec;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut errors = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) if !k.trim().is_empty() => raw.set(k.trim(), v.trim()),
                _ => errors.push(format!("line {}: expected `key = value`, got {line:?}", n + 1)),
            }
        }
        if errors.is_empty() {
            Ok(raw)
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", path.as_ref().display())]))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Applies `--key=value` and `--key value` arguments.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, args: &[S]) -> Result<()> {
        let mut errors = Vec::new();
        let mut it = args.iter().map(AsRef::as_ref);
        while let Some(arg) = it.next() {
            let Some(body) = arg.strip_prefix("--") else {
                errors.push(format!("unexpected argument {arg:?}; overrides look like --key=value"));
                continue;
            };
            match body.split_once('=') {
                Some((k, v)) => self.set(k, v),
                None => match it.next() {
                    Some(v) => self.set(body, v),
                    None => errors.push(format!("override --{body} is missing a value")),
                },
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn render(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Supervised,
    ConsistencyOnly,
    SemiFed,
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "supervised" => Ok(Method::Supervised),
            "consistency-only" => Ok(Method::ConsistencyOnly),
            "semifed" => Ok(Method::SemiFed),
            _ => Err("expected supervised, consistency-only or semifed".into()),
        }
    }
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::ConsistencyOnly => "consistency-only",
            Method::SemiFed => "semifed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Sfds {
        path: PathBuf,
        test_path: Option<PathBuf>,
    },
    Blobs {
        n: usize,
        classes: usize,
        dim: usize,
        separation: f64,
        test_n: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// CNN for image data, MLP for vectors.
    Auto,
    Mlp,
    Cnn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub channels: [usize; 2],
}

impl ModelConfig {
    /// The classifier for samples of `sample_shape`.
    pub fn classifier(&self, sample_shape: &[usize], num_classes: usize) -> Result<ClassifierSpec> {
        let image = sample_shape.len() == 3;
        match (self.kind, image) {
            (ModelKind::Cnn, false) => Err(Error::Spec(format!(
                "model.kind = cnn needs image samples, got shape {sample_shape:?}"
            ))),
            (ModelKind::Cnn | ModelKind::Auto, true) => {
                let hidden = self.hidden.first().copied().unwrap_or(128);
                let shape = [sample_shape[0], sample_shape[1], sample_shape[2]];
                Ok(ClassifierSpec::small_cnn(shape, self.channels, hidden, num_classes))
            }
            _ => Ok(ClassifierSpec::mlp(
                sample_shape.iter().product(),
                &self.hidden,
                num_classes,
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbationKind {
    /// RandAugment for images, Gaussian noise for vectors.
    Auto,
    Identity,
    Gaussian,
    RandAugment,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub kind: PerturbationKind,
    pub policy: AugmentPolicy,
    pub sigma: f32,
}

impl AugmentConfig {
    pub fn perturbation(&self, sample_shape: &[usize]) -> Result<Perturbation> {
        let image =
            (sample_shape.len() == 3).then(|| ImageShape::new(sample_shape[0], sample_shape[1], sample_shape[2]));
        Ok(match (self.kind, image) {
            (PerturbationKind::Identity, _) => Perturbation::Identity,
            (PerturbationKind::Gaussian, _) | (PerturbationKind::Auto, None) => {
                Perturbation::Gaussian { sigma: self.sigma }
            }
            (PerturbationKind::RandAugment | PerturbationKind::Auto, Some(shape)) => Perturbation::RandAugment {
                policy: self.policy,
                shape,
            },
            (PerturbationKind::RandAugment, None) => {
                return Err(Error::Spec("augment.kind = randaugment needs image samples".into()))
            }
        })
    }
}

/// Everything one experiment needs. Partition and plan seeds follow `seed`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub method: Method,
    pub execution: ExecutionOrder,
    pub dataset: DatasetSource,
    /// Samples held out of training and used for evaluation instead of the
    /// test split; 0 disables the holdout.
    pub holdout: usize,
    pub partition: PartitionSpec,
    pub model: ModelConfig,
    pub plan: RoundPlan,
    pub augment: AugmentConfig,
}

/// Names accepted by `sweep`, with the config key each one sets.
pub const SWEEP_KNOBS: [(&str, &str); 6] = [
    ("lambda_u", "plan.lambda_u"),
    ("l2", "plan.l2"),
    ("lr", "plan.lr"),
    ("gamma", "plan.gamma"),
    ("u", "plan.agreement"),
    ("cap", "plan.cap"),
];

/// The config key behind a sweep knob, by short or dotted name.
pub fn sweep_key(knob: &str) -> Option<&'static str> {
    SWEEP_KNOBS
        .iter()
        .find(|(short, key)| *short == knob || *key == knob)
        .map(|(_, key)| *key)
}

struct Fields<'a> {
    raw: &'a RawConfig,
    used: BTreeSet<&'static str>,
    errors: Vec<String>,
}

impl<'a> Fields<'a> {
    fn text(&mut self, key: &'static str) -> Option<&'a str> {
        self.used.insert(key);
        self.raw.get(key)
    }

    fn parse_with<T>(
        &mut self,
        key: &'static str,
        default: T,
        f: impl Fn(&str) -> std::result::Result<T, String>,
    ) -> T {
        match self.text(key) {
            None => default,
            Some(v) => f(v).unwrap_or_else(|e| {
                self.errors.push(format!("{key} = {v:?}: {e}"));
                default
            }),
        }
    }

    fn get<T: FromStr>(&mut self, key: &'static str, default: T) -> T
    where
        T::Err: Display,
    {
        self.parse_with(key, default, |v| v.parse::<T>().map_err(|e| e.to_string()))
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        if !ok {
            self.errors.push(msg());
        }
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<usize>, String> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|e| format!("{s:?}: {e}")))
        .collect()
}

/// `round:threshold` pairs separated by commas; empty means no pseudo-label rounds.
pub fn parse_gamma_schedule(v: &str) -> std::result::Result<BTreeMap<usize, f64>, String> {
    let mut out = BTreeMap::new();
    for item in v.split(',').map(str::trim).filter(|s| !s.is_empty() && *s != "none") {
        let (r, g) = item
            .split_once(':')
            .ok_or_else(|| format!("{item:?} is not round:threshold"))?;
        let r: usize = r.trim().parse().map_err(|e| format!("round {r:?}: {e}"))?;
        let g: f64 = g.trim().parse().map_err(|e| format!("threshold {g:?}: {e}"))?;
        if out.insert(r, g).is_some() {
            return Err(format!("round {r} listed twice"));
        }
    }
    Ok(out)
}

fn parse_cap(v: &str) -> std::result::Result<Option<usize>, String> {
    match v.trim() {
        "none" | "unlimited" => Ok(None),
        s => s.parse().map(Some).map_err(|e| format!("{e}")),
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

impl ExperimentConfig {
    /// Builds and validates a config. All problems are reported together.
    pub fn resolve(raw: &RawConfig) -> Result<Self> {
        let mut f = Fields {
            raw,
            used: BTreeSet::new(),
            errors: Vec::new(),
        };
        let seed = f.get("seed", 0u64);
        let output_dir = f
            .text("output_dir")
            .filter(|s| !s.is_empty() && *s != "none")
            .map(PathBuf::from);
        let method = f.get("method", Method::SemiFed);
        let execution = f.parse_with("execution", ExecutionOrder::Parallel, |v| match v {
            "parallel" => Ok(ExecutionOrder::Parallel),
            "sequential" => Ok(ExecutionOrder::Sequential),
            "reverse" => Ok(ExecutionOrder::Reverse),
            _ => Err("expected parallel, sequential or reverse".into()),
        });

        let kind = f.text("dataset.kind").unwrap_or("sfds");
        let path = f.text("dataset.path").map(PathBuf::from);
        let test_path = f.text("dataset.test_path").map(PathBuf::from);
        let blobs_n = f.get("dataset.blobs.n", 4000usize);
        let blobs_classes = f.get("dataset.blobs.classes", 4usize);
        let blobs_dim = f.get("dataset.blobs.dim", 2usize);
        let blobs_sep = f.get("dataset.blobs.separation", 3.0f64);
        let blobs_test_n = f.get("dataset.blobs.test_n", 2000usize);
        let holdout = f.get("dataset.holdout", 0usize);
        let dataset = match kind {
            "blobs" => {
                f.check(blobs_classes >= 1 && blobs_dim >= 1 && blobs_n >= blobs_classes, || {
                    "dataset.blobs needs n >= classes >= 1 and dim >= 1".into()
                });
                f.check(blobs_sep >= 0.0 && blobs_sep.is_finite(), || {
                    "dataset.blobs.separation must be finite and >= 0".into()
                });
                f.check(blobs_test_n > 0 || holdout > 0, || {
                    "dataset.blobs.test_n must be positive unless dataset.holdout is set".into()
                });
                DatasetSource::Blobs {
                    n: blobs_n,
                    classes: blobs_classes,
                    dim: blobs_dim,
                    separation: blobs_sep,
                    test_n: blobs_test_n,
                }
            }
            "sfds" => {
                match &path {
                    None => f
                        .errors
                        .push("dataset.path is required when dataset.kind = sfds".into()),
                    Some(p) if !p.is_file() => f.errors.push(format!("dataset.path {} does not exist", p.display())),
                    _ => {}
                }
                if let Some(p) = &test_path {
                    f.check(p.is_file(), || {
                        format!("dataset.test_path {} does not exist", p.display())
                    });
                }
                f.check(test_path.is_some() || holdout > 0, || {
                    "set dataset.test_path or a positive dataset.holdout to evaluate on".into()
                });
                DatasetSource::Sfds {
                    path: path.clone().unwrap_or_default(),
                    test_path: test_path.clone(),
                }
            }
            other => {
                f.errors
                    .push(format!("dataset.kind = {other:?}: expected sfds or blobs"));
                DatasetSource::Blobs {
                    n: 0,
                    classes: 0,
                    dim: 0,
                    separation: 0.0,
                    test_n: 0,
                }
            }
        };

        let mode_name = f.text("partition.mode").unwrap_or("dirichlet");
        let alpha = f.get("partition.alpha", 0.5f64);
        let mode = match mode_name {
            "iid" => PartitionMode::Iid,
            "dirichlet" => PartitionMode::Dirichlet { alpha },
            other => {
                f.errors
                    .push(format!("partition.mode = {other:?}: expected iid or dirichlet"));
                PartitionMode::Iid
            }
        };
        let partition = PartitionSpec {
            mode,
            clients: f.get("partition.clients", 10usize),
            n_labeled_total: f.get("partition.n_labeled", 4000usize),
            seed,
            independent_draws: f.parse_with("partition.independent_draws", false, parse_bool),
        };
        if let Err(e) = partition.validate() {
            f.errors.push(format!("partition: {e}"));
        }

        let model_kind = f.parse_with("model.kind", ModelKind::Auto, |v| match v {
            "auto" => Ok(ModelKind::Auto),
            "mlp" => Ok(ModelKind::Mlp),
            "cnn" => Ok(ModelKind::Cnn),
            _ => Err("expected auto, mlp or cnn".into()),
        });
        let hidden = f.parse_with("model.hidden", vec![128], parse_list);
        let channels = f.parse_with("model.channels", vec![32, 64], parse_list);
        f.check(hidden.iter().all(|&h| h > 0), || {
            "model.hidden widths must be positive".into()
        });
        f.check(channels.len() == 2 && channels.iter().all(|&c| c > 0), || {
            "model.channels must be two positive widths".into()
        });
        let model = ModelConfig {
            kind: model_kind,
            hidden,
            channels: [
                channels.first().copied().unwrap_or(1),
                channels.get(1).copied().unwrap_or(1),
            ],
        };

        let defaults = RoundPlan::default();
        let mut plan = RoundPlan {
            rounds: f.get("plan.rounds", defaults.rounds),
            pseudo_rounds: f.parse_with(
                "plan.gamma",
                parse_gamma_schedule("50:0.9,100:0.85,200:0.7").unwrap(),
                parse_gamma_schedule,
            ),
            epochs: f.get("plan.epochs", defaults.epochs),
            batch_labeled: f.get("plan.batch_labeled", defaults.batch_labeled),
            batch_unlabeled: f.get("plan.batch_unlabeled", defaults.batch_unlabeled),
            learning_rate: f.get("plan.lr", defaults.learning_rate),
            momentum: f.get("plan.momentum", defaults.momentum),
            l2_coeff: f.get("plan.l2", defaults.l2_coeff),
            lambda_u: f.get("plan.lambda_u", defaults.lambda_u),
            agreement: f.get("plan.agreement", defaults.agreement),
            cap: f.parse_with("plan.cap", defaults.cap, parse_cap),
            stop_gradient: f.parse_with("plan.stop_gradient", defaults.stop_gradient, parse_bool),
        };
        if let Some(s) = f.text("plan.lr_schedule") {
            f.check(s == "constant", || {
                format!("plan.lr_schedule = {s:?}: only constant is supported")
            });
        }
        match method {
            Method::Supervised => {
                plan.lambda_u = 0.0;
                plan.pseudo_rounds.clear();
            }
            Method::ConsistencyOnly => plan.pseudo_rounds.clear(),
            Method::SemiFed => {}
        }
        f.errors.extend(plan.problems(partition.clients));

        let n_ops = f.get("augment.n_ops", 2usize);
        let magnitude = f.get("augment.magnitude", 9u8);
        let sigma = f.get("augment.sigma", 0.5f32);
        let policy = AugmentPolicy::new(n_ops, magnitude).unwrap_or_else(|e| {
            f.errors.push(format!("augment: {e}"));
            AugmentPolicy::default()
        });
        f.check(sigma >= 0.0 && sigma.is_finite(), || {
            "augment.sigma must be finite and >= 0".into()
        });
        let augment_kind = f.parse_with("augment.kind", PerturbationKind::Auto, |v| match v {
            "auto" => Ok(PerturbationKind::Auto),
            "identity" => Ok(PerturbationKind::Identity),
            "gaussian" => Ok(PerturbationKind::Gaussian),
            "randaugment" => Ok(PerturbationKind::RandAugment),
            _ => Err("expected auto, identity, gaussian or randaugment".into()),
        });
        let augment = AugmentConfig {
            kind: augment_kind,
            policy,
            sigma,
        };

        for (key, _) in raw.iter() {
            if !f.used.contains(key) {
                f.errors.push(format!("unknown key {key:?}"));
            }
        }
        if !f.errors.is_empty() {
            return Err(Error::Config(f.errors));
        }
        Ok(ExperimentConfig {
            seed,
            output_dir,
            method,
            execution,
            dataset,
            holdout,
            partition,
            model,
            plan,
            augment,
        })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::resolve(&RawConfig::parse(text)?)
    }
}
