//! Experiment driver: configuration, data loading, the round loop with
//! evaluation and metrics output, sweeps, and plot-data export.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::data::{load_dataset, make_synthetic_blobs, partition, Dataset};
use crate::error::{Error, Result};
use crate::flcore::{Federation, MetricsRecord};
use crate::model::{predict_batch, ClassifierSpec, ModelParams};
use crate::seed::{derive_seed, rng_for, stream};
use crate::tensor::argmax;

pub mod config;
mod report;

pub use config::{
    sweep_key, AugmentConfig, DatasetSource, ExperimentConfig, Method, ModelConfig, ModelKind, PerturbationKind,
    RawConfig, SWEEP_KNOBS,
};
pub use report::{export_plot_data, read_metrics, PLOT_SERIES};

/// Samples scored per forward pass during evaluation.
const EVAL_CHUNK: usize = 1024;

/// Fraction of labeled samples in `test` whose argmax prediction is correct.
pub fn evaluate(spec: &ClassifierSpec, params: &ModelParams, test: &Dataset) -> Result<f64> {
    let labeled: Vec<_> = test.examples.iter().filter_map(|e| e.label.map(|y| (e, y))).collect();
    if labeled.is_empty() {
        return Err(Error::Contract(
            "evaluation needs at least one labeled test sample".into(),
        ));
    }
    let mut correct = 0usize;
    for chunk in labeled.chunks(EVAL_CHUNK) {
        let xs: Vec<&[f32]> = chunk.iter().map(|(e, _)| e.features.as_slice()).collect();
        let probs = predict_batch(spec, params, &xs)?;
        correct += probs.iter().zip(chunk).filter(|(p, (_, y))| argmax(p) == *y).count();
    }
    Ok(correct as f64 / labeled.len() as f64)
}

/// Training data and the set the global model is scored on.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Dataset,
    pub eval: Dataset,
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    let (mut train, test) = match &cfg.dataset {
        DatasetSource::Blobs {
            n,
            classes,
            dim,
            separation,
            test_n,
        } => {
            let train = make_synthetic_blobs(*n, *classes, *dim, *separation, cfg.seed)?;
            let test = if *test_n > 0 {
                let test_seed = derive_seed(cfg.seed, &[stream::TEST_DATA]);
                Some(make_synthetic_blobs(*test_n, *classes, *dim, *separation, test_seed)?)
            } else {
                None
            };
            (train, test)
        }
        DatasetSource::Sfds { path, test_path } => {
            let train = load_dataset(path)?;
            let test = test_path.as_ref().map(load_dataset).transpose()?;
            if let Some(t) = &test {
                if t.sample_shape != train.sample_shape || t.num_classes != train.num_classes {
                    return Err(Error::Spec(format!(
                        "test set shape {:?}/{} classes does not match training set {:?}/{} classes",
                        t.sample_shape, t.num_classes, train.sample_shape, train.num_classes
                    )));
                }
            }
            (train, test)
        }
    };
    if cfg.holdout == 0 {
        let eval = test.ok_or_else(|| Error::Spec("no evaluation set configured".into()))?;
        return Ok(ExperimentData { train, eval });
    }
    let mut candidates: Vec<usize> = (0..train.len())
        .filter(|&i| train.examples[i].label.is_some())
        .collect();
    if candidates.len() <= cfg.holdout {
        return Err(Error::Spec(format!(
            "holdout of {} leaves no labeled training data ({} labeled samples)",
            cfg.holdout,
            candidates.len()
        )));
    }
    candidates.shuffle(&mut rng_for(cfg.seed, &[stream::SPLIT, 1]));
    let mut held = vec![false; train.len()];
    candidates[..cfg.holdout].iter().for_each(|&i| held[i] = true);
    let (eval_examples, train_examples): (Vec<_>, Vec<_>) = std::mem::take(&mut train.examples)
        .into_iter()
        .enumerate()
        .partition(|(i, _)| held[*i]);
    train.examples = train_examples.into_iter().map(|(_, e)| e).collect();
    let eval = Dataset {
        sample_shape: train.sample_shape.clone(),
        num_classes: train.num_classes,
        examples: eval_examples.into_iter().map(|(_, e)| e).collect(),
    };
    Ok(ExperimentData { train, eval })
}

#[derive(Clone, Debug)]
pub struct ExperimentResult {
    pub records: Vec<MetricsRecord>,
    /// Accuracy of the last global model on the evaluation set.
    pub final_accuracy: f64,
    pub final_params: ModelParams,
    pub metrics_path: Option<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
}

impl ExperimentResult {
    pub fn server_records(&self) -> impl Iterator<Item = &MetricsRecord> {
        self.records
            .iter()
            .filter(|r| r.client_id == crate::flcore::Participant::Server)
    }
}

struct Sink {
    dir: PathBuf,
    metrics: BufWriter<File>,
    checkpoints: Vec<PathBuf>,
}

impl Sink {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let metrics = BufWriter::new(File::create(dir.join("metrics.jsonl"))?);
        Ok(Sink {
            dir: dir.to_path_buf(),
            metrics,
            checkpoints: Vec::new(),
        })
    }

    fn records(&mut self, records: &[MetricsRecord]) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut self.metrics, r).map_err(std::io::Error::from)?;
            self.metrics.write_all(b"\n")?;
        }
        self.metrics.flush()?;
        Ok(())
    }

    fn checkpoint(&mut self, rel: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
        let path = self.dir.join("checkpoints").join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, params.to_bytes())?;
        self.checkpoints.push(path);
        Ok(())
    }
}

/// Runs the configured experiment end to end.
///
/// Metrics go to `<output_dir>/metrics.jsonl`: for each round `t` one record
/// per client and a server record whose `test_acc` scores the model
/// aggregated in that round. With zero rounds the log holds a single server
/// record scoring the initial model. Pseudo-label rounds save the full model
/// dictionary under `checkpoints/round_NNNN/`; the last global model goes to
/// `checkpoints/final.bin`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let data = load_data(cfg)?;
    run_experiment_with(cfg, data)
}

/// [`run_experiment`] on already loaded data.
pub fn run_experiment_with(cfg: &ExperimentConfig, data: ExperimentData) -> Result<ExperimentResult> {
    let spec = cfg.model.classifier(&data.train.sample_shape, data.train.num_classes)?;
    let perturbation = cfg.augment.perturbation(&data.train.sample_shape)?;
    let parts = partition(&data.train, &cfg.partition)?;
    let mut sink = cfg.output_dir.as_deref().map(Sink::create).transpose()?;
    let mut fed =
        Federation::new(spec.clone(), cfg.plan.clone(), perturbation, parts, cfg.seed)?.with_order(cfg.execution)?;

    let mut records = Vec::new();
    if cfg.plan.rounds == 0 {
        let mut r = MetricsRecord::server(0);
        r.test_acc = Some(evaluate(&spec, fed.global(), &data.eval)?);
        if let Some(s) = sink.as_mut() {
            s.records(std::slice::from_ref(&r))?;
        }
        records.push(r);
    }
    for t in 0..cfg.plan.rounds {
        let mut round = fed.run_round()?;
        let acc = evaluate(&spec, fed.global(), &data.eval)?;
        if let Some(server) = round.last_mut() {
            server.test_acc = Some(acc);
        }
        log::info!("{} seed {} round {t}: test_acc {acc:.4}", cfg.method.name(), cfg.seed);
        if let Some(s) = sink.as_mut() {
            s.records(&round)?;
            if cfg.plan.is_pseudo_round(t) {
                for (k, m) in &fed.server.model_dict {
                    s.checkpoint(format!("round_{t:04}/client_{k:03}.bin"), m)?;
                }
                s.checkpoint(format!("round_{t:04}/global.bin"), fed.global())?;
            }
        }
        records.extend(round);
    }
    let final_accuracy = evaluate(&spec, fed.global(), &data.eval)?;
    let (metrics_path, checkpoints) = match sink.as_mut() {
        Some(s) => {
            s.checkpoint("final.bin", fed.global())?;
            (Some(s.dir.join("metrics.jsonl")), std::mem::take(&mut s.checkpoints))
        }
        None => (None, Vec::new()),
    };
    Ok(ExperimentResult {
        records,
        final_accuracy,
        final_params: fed.global().clone(),
        metrics_path,
        checkpoints,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub value: String,
    /// Final accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
}

impl SweepRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub knob: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<SweepRow>,
}

impl std::fmt::Display for SweepTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:<20} {:>9}", self.knob, "mean")?;
        for s in &self.seeds {
            write!(f, " {:>9}", format!("seed {s}"))?;
        }
        writeln!(f)?;
        for row in &self.rows {
            write!(f, "{:<20} {:>9.4}", row.value, row.mean())?;
            for a in &row.accuracies {
                write!(f, " {a:>9.4}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn path_safe(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs one experiment per `(value, seed)` with `knob` set to `value`.
/// Seeds default to the base config's seed. Every config is validated
/// before the first run starts.
pub fn sweep(base: &RawConfig, knob: &str, values: &[String], seeds: &[u64]) -> Result<SweepTable> {
    let key = sweep_key(knob).ok_or_else(|| {
        let names: Vec<&str> = SWEEP_KNOBS.iter().map(|(k, _)| *k).collect();
        Error::Config(vec![format!(
            "unknown sweep knob {knob:?}; choose one of {}",
            names.join(", ")
        )])
    })?;
    if values.is_empty() {
        return Err(Error::Config(vec!["sweep needs at least one value".into()]));
    }
    let base_cfg = ExperimentConfig::resolve(base)?;
    let seeds: Vec<u64> = if seeds.is_empty() {
        vec![base_cfg.seed]
    } else {
        seeds.to_vec()
    };

    let mut planned = Vec::new();
    let mut errors = Vec::new();
    for value in values {
        for &seed in &seeds {
            let mut raw = base.clone();
            raw.set(key, value);
            raw.set("seed", &seed.to_string());
            if let Some(dir) = &base_cfg.output_dir {
                let sub = dir
                    .join(format!("{}={}", path_safe(knob), path_safe(value)))
                    .join(format!("seed-{seed}"));
                raw.set("output_dir", &sub.to_string_lossy());
            }
            match ExperimentConfig::resolve(&raw) {
                Ok(cfg) => planned.push((value.clone(), cfg)),
                Err(Error::Config(msgs)) => errors.extend(msgs.into_iter().map(|m| format!("{knob} = {value}: {m}"))),
                Err(e) => return Err(e),
            }
        }
    }
    if !errors.is_empty() {
        errors.dedup();
        return Err(Error::Config(errors));
    }

    let mut rows: Vec<SweepRow> = Vec::new();
    for (value, cfg) in planned {
        let acc = run_experiment(&cfg)?.final_accuracy;
        match rows.last_mut() {
            Some(row) if row.value == value => row.accuracies.push(acc),
            _ => rows.push(SweepRow {
                value,
                accuracies: vec![acc],
            }),
        }
    }
    Ok(SweepTable {
        knob: knob.to_string(),
        seeds,
        rows,
    })
}
