//! The federated protocol: local training, upload, unweighted FedAvg,
//! broadcast, and pseudo-labeling at the designated rounds.
//!
//! Every model that crosses the client/server boundary is serialized and
//! decoded again, even though everything runs in one process.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::augment::Perturbation;
use crate::data::{ClientDataset, GroundTruth, Partition};
use crate::error::{Error, Result};
use crate::loss::{combined_step, StepBatch};
use crate::model::{init_model, predict_batch, ClassifierSpec, ModelParams};
use crate::optim::OptimState;
use crate::pseudolabel::{pseudo_label_client, pseudo_precision};
use crate::seed::{derive_seed, rng_for, stream, Rng};
use crate::tensor::argmax;

/// Environment variable capping the worker count of parallel execution.
pub const THREADS_ENV: &str = "SEMIFED_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    /// Total rounds `T`.
    pub rounds: usize,
    /// Pseudo-label rounds `T_p`, each with its confidence threshold `γ_t`.
    pub pseudo_rounds: BTreeMap<usize, f64>,
    /// Local epochs `E`.
    pub epochs: usize,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub l2_coeff: f64,
    pub lambda_u: f64,
    /// Agreement count `u`.
    pub agreement: usize,
    /// Maximum samples moved per client per pseudo-label round.
    pub cap: Option<usize>,
    /// Treat the clean prediction as a constant in the consistency term.
    pub stop_gradient: bool,
}

impl Default for RoundPlan {
    fn default() -> Self {
        RoundPlan {
            rounds: 300,
            pseudo_rounds: BTreeMap::new(),
            epochs: 10,
            batch_labeled: 64,
            batch_unlabeled: 64,
            learning_rate: 0.3,
            momentum: 0.9,
            l2_coeff: 1e-4,
            lambda_u: 1.0,
            agreement: 11,
            cap: Some(1000),
            stop_gradient: true,
        }
    }
}

impl RoundPlan {
    /// Every violated constraint, for `clients` participants.
    pub fn problems(&self, clients: usize) -> Vec<String> {
        let mut out = Vec::new();
        for (&t, &gamma) in &self.pseudo_rounds {
            if t >= self.rounds {
                out.push(format!(
                    "pseudo-label round {t} is not below the round count {}",
                    self.rounds
                ));
            }
            if !(gamma > 0.0 && gamma <= 1.0) {
                out.push(format!("confidence threshold {gamma} at round {t} is outside (0, 1]"));
            }
        }
        if self.agreement > clients + 1 {
            out.push(format!(
                "agreement {} exceeds the {} available voters",
                self.agreement,
                clients + 1
            ));
        }
        if self.batch_labeled == 0 || self.batch_unlabeled == 0 {
            out.push("batch sizes must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            out.push(format!(
                "learning rate must be a finite value >= 0, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            out.push(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.l2_coeff >= 0.0 && self.l2_coeff.is_finite()) {
            out.push(format!(
                "l2 coefficient must be a finite value >= 0, got {}",
                self.l2_coeff
            ));
        }
        if !(self.lambda_u >= 0.0 && self.lambda_u.is_finite()) {
            out.push(format!("lambda_u must be a finite value >= 0, got {}", self.lambda_u));
        }
        out
    }

    pub fn validate(&self, clients: usize) -> Result<()> {
        let problems = self.problems(clients);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn is_pseudo_round(&self, t: usize) -> bool {
        self.pseudo_rounds.contains_key(&t)
    }

    /// Iterations per local epoch: one pass over the unlabeled set, or over
    /// the labeled set when there is no unlabeled data.
    pub fn iterations(&self, n_labeled: usize, n_unlabeled: usize) -> usize {
        if n_unlabeled > 0 {
            n_unlabeled.div_ceil(self.batch_unlabeled)
        } else {
            n_labeled.div_ceil(self.batch_labeled)
        }
    }
}

/// Cycles through `0..n` in reshuffled passes, `batch` indices at a time.
/// A batch never straddles two passes, so it never repeats an index.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, rng: &mut Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        BatchSampler {
            order,
            cursor: 0,
            batch: batch.min(n),
        }
    }

    pub fn next_batch(&mut self, rng: &mut Rng) -> &[usize] {
        if self.cursor + self.batch > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let start = self.cursor;
        self.cursor += self.batch;
        &self.order[start..self.cursor]
    }
}

/// Outcome of one client's local training.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LocalReport {
    pub steps: usize,
    /// Mean losses over the steps; `None` when no step ran.
    pub l_s: Option<f64>,
    pub l_u: Option<f64>,
    pub warning: Option<String>,
}

/// `E` epochs of combined steps on one client's data, in place. Batch order
/// comes from `batch_rng`, perturbations from `aug_rng`.
#[allow(clippy::too_many_arguments)]
pub fn train_local(
    spec: &ClassifierSpec,
    params: &mut ModelParams,
    opt: &mut OptimState,
    data: &ClientDataset,
    plan: &RoundPlan,
    perturbation: &Perturbation,
    batch_rng: &mut Rng,
    aug_rng: &mut Rng,
) -> Result<LocalReport> {
    let (n_l, n_u) = (data.labeled.len(), data.unlabeled.len());
    if n_l == 0 && n_u == 0 {
        return Ok(LocalReport {
            warning: Some(format!("client {} has no data; parameters unchanged", data.client_id)),
            ..Default::default()
        });
    }
    let use_unlabeled = plan.lambda_u != 0.0;
    let iterations = plan.iterations(n_l, n_u);
    let mut labeled_sampler = BatchSampler::new(n_l, plan.batch_labeled, batch_rng);
    let mut unlabeled_order: Vec<usize> = (0..n_u).collect();
    let (mut sum_s, mut sum_u, mut steps) = (0.0, 0.0, 0usize);
    for _ in 0..plan.epochs {
        unlabeled_order.shuffle(batch_rng);
        for i in 0..iterations {
            let lab: Vec<usize> = if n_l > 0 {
                labeled_sampler.next_batch(batch_rng).to_vec()
            } else {
                Vec::new()
            };
            let unl: &[usize] = if use_unlabeled && n_u > 0 {
                let start = (i * plan.batch_unlabeled).min(n_u);
                &unlabeled_order[start..(start + plan.batch_unlabeled).min(n_u)]
            } else {
                &[]
            };
            let labeled: Vec<&[f32]> = lab.iter().map(|&j| data.labeled[j].features.as_slice()).collect();
            let labels: Vec<usize> = lab.iter().map(|&j| data.labeled[j].label).collect();
            let unlabeled: Vec<&[f32]> = unl.iter().map(|&j| data.unlabeled[j].features.as_slice()).collect();
            let perturbed_owned: Vec<Vec<f32>> = unlabeled.iter().map(|x| perturbation.apply(x, aug_rng)).collect();
            let perturbed: Vec<&[f32]> = perturbed_owned.iter().map(Vec::as_slice).collect();
            let batch = StepBatch {
                labeled: &labeled,
                labels: &labels,
                unlabeled: &unlabeled,
                perturbed: &perturbed,
            };
            if labeled.is_empty() && unlabeled.is_empty() {
                continue;
            }
            let bundle = combined_step(spec, params, &batch, plan.lambda_u, plan.stop_gradient, opt)?;
            sum_s += bundle.l_s;
            sum_u += bundle.l_u;
            steps += 1;
        }
    }
    let mean = |s: f64| (steps > 0).then(|| s / steps as f64);
    Ok(LocalReport {
        steps,
        l_s: mean(sum_s),
        l_u: mean(sum_u),
        warning: None,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ServerState {
    /// `ω_t`.
    pub global: ModelParams,
    pub round: usize,
    /// Client models uploaded in the last round, keyed by client id.
    pub model_dict: BTreeMap<usize, ModelParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub dataset: ClientDataset,
    pub params: ModelParams,
    pub opt: OptimState,
    /// The K client models plus the global, present after a pseudo-label
    /// round's broadcast.
    pub received: Option<Vec<ModelParams>>,
}

/// Per-round local training of one client. Starts from the client's current
/// (broadcast) parameters with zeroed momentum.
pub fn client_local_training(
    client: &mut ClientState,
    spec: &ClassifierSpec,
    plan: &RoundPlan,
    perturbation: &Perturbation,
    seed: u64,
    round: usize,
) -> Result<LocalReport> {
    let path = |s: u64| [s, client.client_id as u64, round as u64];
    let mut batch_rng = rng_for(seed, &path(stream::BATCH));
    let mut aug_rng = rng_for(seed, &path(stream::AUGMENT));
    client.opt.reset();
    train_local(
        spec,
        &mut client.params,
        &mut client.opt,
        &client.dataset,
        plan,
        perturbation,
        &mut batch_rng,
        &mut aug_rng,
    )
}

/// Unweighted mean of the models, accumulated in `f64` in ascending client
/// id order.
pub fn aggregate(models: &BTreeMap<usize, ModelParams>) -> Result<ModelParams> {
    let mut it = models.values();
    let first = it
        .next()
        .ok_or_else(|| Error::Protocol("cannot aggregate an empty model set".into()))?;
    let mut sums: Vec<Vec<f64>> = first.tensors().map(|t| vec![0.0; t.len()]).collect();
    for m in models.values() {
        if !m.same_layout(first) {
            return Err(Error::Protocol("client models disagree in layout".into()));
        }
        for (acc, t) in sums.iter_mut().zip(m.tensors()) {
            for (a, &v) in acc.iter_mut().zip(t.values()) {
                *a += f64::from(v);
            }
        }
    }
    let k = models.len() as f64;
    let mut out = first.clone();
    for (t, acc) in out.tensors_mut().zip(&sums) {
        for (v, &a) in t.values_mut().iter_mut().zip(acc) {
            *v = (a / k) as f32;
        }
    }
    Ok(out)
}

fn decode_checked(payload: &[u8]) -> Result<ModelParams> {
    let model = ModelParams::from_bytes(payload)?;
    if model.to_bytes() != payload {
        return Err(Error::Protocol(
            "model payload changed across a serialization round trip".into(),
        ));
    }
    Ok(model)
}

/// Sends the global model to every client, plus the whole model dictionary
/// when `with_dictionary` is set. Returns the bytes each client received.
pub fn broadcast_models(server: &ServerState, clients: &mut [ClientState], with_dictionary: bool) -> Result<u64> {
    let global = server.global.to_bytes();
    let mut payloads: Vec<Vec<u8>> = Vec::new();
    if with_dictionary {
        payloads.extend(server.model_dict.values().map(ModelParams::to_bytes));
    }
    payloads.push(global);
    let per_client: usize = payloads.iter().map(Vec::len).sum();
    for client in clients.iter_mut() {
        let mut models = payloads.iter().map(|p| decode_checked(p)).collect::<Result<Vec<_>>>()?;
        client.params = models.last().cloned().expect("global payload always present");
        client.received = if with_dictionary {
            Some(std::mem::take(&mut models))
        } else {
            None
        };
    }
    Ok(per_client as u64)
}

/// The order in which clients run within a round. All orders give bitwise
/// identical results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecutionOrder {
    #[default]
    Sequential,
    Reverse,
    /// A fixed shuffle of the client list.
    Permuted(u64),
    /// Concurrently on a rayon pool sized by [`THREADS_ENV`].
    Parallel,
}

/// Builds the worker pool, honouring [`THREADS_ENV`] when it holds a
/// positive integer.
pub fn worker_pool() -> Result<ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) => n,
            Err(_) => {
                log::warn!("ignoring {THREADS_ENV}={v:?}: not a number");
                0
            }
        },
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Protocol(format!("cannot start worker pool: {e}")))
}

fn run_clients<R: Send>(
    clients: &mut [ClientState],
    order: ExecutionOrder,
    pool: Option<&ThreadPool>,
    f: impl Fn(&mut ClientState) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    let results: Vec<Result<R>> = match (order, pool) {
        (ExecutionOrder::Parallel, Some(pool)) => pool.install(|| clients.par_iter_mut().map(&f).collect()),
        (ExecutionOrder::Parallel, None) => clients.par_iter_mut().map(&f).collect(),
        _ => {
            let mut idx: Vec<usize> = (0..clients.len()).collect();
            match order {
                ExecutionOrder::Reverse => idx.reverse(),
                ExecutionOrder::Permuted(seed) => idx.shuffle(&mut rng_for(seed, &[])),
                _ => {}
            }
            let mut slots: Vec<Option<Result<R>>> = (0..clients.len()).map(|_| None).collect();
            for i in idx {
                slots[i] = Some(f(&mut clients[i]));
            }
            slots.into_iter().map(|s| s.expect("every client ran")).collect()
        }
    };
    results.into_iter().collect()
}

/// Who a metrics record describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Participant {
    Server,
    Client(usize),
}

impl fmt::Display for Participant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Participant::Server => f.write_str("server"),
            Participant::Client(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ParticipantRepr {
    Client(usize),
    Name(String),
}

impl Serialize for Participant {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Participant::Server => s.serialize_str("server"),
            Participant::Client(k) => s.serialize_u64(*k as u64),
        }
    }
}

impl<'de> Deserialize<'de> for Participant {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match ParticipantRepr::deserialize(d)? {
            ParticipantRepr::Client(k) => Ok(Participant::Client(k)),
            ParticipantRepr::Name(s) if s == "server" => Ok(Participant::Server),
            ParticipantRepr::Name(s) => Err(serde::de::Error::custom(format!("unknown participant {s:?}"))),
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub client_id: Participant,
    pub l_s: Option<f64>,
    pub l_u: Option<f64>,
    pub train_acc: Option<f64>,
    pub test_acc: Option<f64>,
    pub n_pseudo_new: usize,
    pub pseudo_precision: Option<f64>,
    pub bytes_up: u64,
    pub bytes_down: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl MetricsRecord {
    pub fn server(round: usize) -> Self {
        MetricsRecord {
            round,
            client_id: Participant::Server,
            l_s: None,
            l_u: None,
            train_acc: None,
            test_acc: None,
            n_pseudo_new: 0,
            pseudo_precision: None,
            bytes_up: 0,
            bytes_down: 0,
            warning: None,
        }
    }
}

/// Fraction of `data`'s labeled samples the model classifies correctly.
fn labeled_accuracy(spec: &ClassifierSpec, params: &ModelParams, data: &ClientDataset) -> Result<Option<f64>> {
    if data.labeled.is_empty() {
        return Ok(None);
    }
    let xs: Vec<&[f32]> = data.labeled.iter().map(|e| e.features.as_slice()).collect();
    let probs = predict_batch(spec, params, &xs)?;
    let correct = probs
        .iter()
        .zip(&data.labeled)
        .filter(|(p, e)| argmax(p) == e.label)
        .count();
    Ok(Some(correct as f64 / data.labeled.len() as f64))
}

struct ClientRound {
    report: LocalReport,
    train_acc: Option<f64>,
}

/// A complete in-process federation: server, clients and the run settings.
#[derive(Debug)]
pub struct Federation {
    pub spec: ClassifierSpec,
    pub plan: RoundPlan,
    pub perturbation: Perturbation,
    pub seed: u64,
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    truth: GroundTruth,
    order: ExecutionOrder,
    pool: Option<ThreadPool>,
}

impl Federation {
    /// Initializes `ω_0` from the seed and broadcasts it to every client.
    pub fn new(
        spec: ClassifierSpec,
        plan: RoundPlan,
        perturbation: Perturbation,
        partition: Partition,
        seed: u64,
    ) -> Result<Self> {
        let global = init_model(&spec, derive_seed(seed, &[stream::INIT]))?;
        Self::from_global(spec, plan, perturbation, partition, global, seed)
    }

    /// Like [`Federation::new`] with a caller-chosen `ω_0`.
    pub fn from_global(
        spec: ClassifierSpec,
        plan: RoundPlan,
        perturbation: Perturbation,
        partition: Partition,
        global: ModelParams,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if partition.clients.is_empty() {
            return Err(Error::Spec("a federation needs at least one client".into()));
        }
        plan.validate(partition.clients.len())?;
        let shapes = global.shapes();
        let opt = OptimState::new(&shapes, plan.learning_rate, plan.momentum, plan.l2_coeff)?;
        let mut clients: Vec<ClientState> = partition
            .clients
            .into_iter()
            .map(|dataset| ClientState {
                client_id: dataset.client_id,
                dataset,
                params: global.clone(),
                opt: opt.clone(),
                received: None,
            })
            .collect();
        clients.sort_by_key(|c| c.client_id);
        let server = ServerState {
            global,
            round: 0,
            model_dict: BTreeMap::new(),
        };
        broadcast_models(&server, &mut clients, false)?;
        Ok(Federation {
            spec,
            plan,
            perturbation,
            seed,
            server,
            clients,
            truth: partition.truth,
            order: ExecutionOrder::Sequential,
            pool: None,
        })
    }

    pub fn with_order(mut self, order: ExecutionOrder) -> Result<Self> {
        self.pool = match order {
            ExecutionOrder::Parallel => Some(worker_pool()?),
            _ => None,
        };
        self.order = order;
        Ok(self)
    }

    pub fn global(&self) -> &ModelParams {
        &self.server.global
    }

    pub fn round(&self) -> usize {
        self.server.round
    }

    pub fn truth(&self) -> &GroundTruth {
        &self.truth
    }

    /// Runs round `t = self.round()`. Returns one record per client, in
    /// client id order, followed by the server record (whose `test_acc` is
    /// left for the caller to fill in). Any client error aborts the round
    /// before aggregation.
    pub fn run_round(&mut self) -> Result<Vec<MetricsRecord>> {
        let t = self.server.round;
        let (spec, plan, perturbation, seed) = (&self.spec, &self.plan, &self.perturbation, self.seed);
        let trained = run_clients(&mut self.clients, self.order, self.pool.as_ref(), |c| {
            let report = client_local_training(c, spec, plan, perturbation, seed, t)?;
            let train_acc = labeled_accuracy(spec, &c.params, &c.dataset)?;
            Ok(ClientRound { report, train_acc })
        })?;

        // Upload.
        let mut model_dict = BTreeMap::new();
        let mut up = Vec::with_capacity(self.clients.len());
        for c in &self.clients {
            let payload = c.params.to_bytes();
            up.push(payload.len() as u64);
            model_dict.insert(c.client_id, decode_checked(&payload)?);
        }
        self.server.model_dict = model_dict;
        self.server.global = aggregate(&self.server.model_dict)?;
        self.server.round = t + 1;

        let pseudo = self.plan.pseudo_rounds.get(&t).copied();
        let down = broadcast_models(&self.server, &mut self.clients, pseudo.is_some())?;

        let labelled: Vec<Vec<(u64, usize)>> = match pseudo {
            Some(gamma) => {
                let (u, cap) = (self.plan.agreement, self.plan.cap);
                run_clients(&mut self.clients, self.order, self.pool.as_ref(), |c| {
                    let models = c
                        .received
                        .as_ref()
                        .ok_or_else(|| Error::Protocol("model dictionary missing at a pseudo-label round".into()))?;
                    Ok(pseudo_label_client(spec, &mut c.dataset, models, gamma, u, cap)?.moved)
                })?
            }
            None => vec![Vec::new(); self.clients.len()],
        };

        let mut records = Vec::with_capacity(self.clients.len() + 1);
        let mut server = MetricsRecord::server(t);
        let mut all_moved = Vec::new();
        for (((c, r), moved), &bytes_up) in self.clients.iter().zip(&trained).zip(&labelled).zip(&up) {
            if let Some(w) = &r.report.warning {
                log::warn!("round {t}: {w}");
            }
            records.push(MetricsRecord {
                round: t,
                client_id: Participant::Client(c.client_id),
                l_s: r.report.l_s,
                l_u: r.report.l_u,
                train_acc: r.train_acc,
                test_acc: None,
                n_pseudo_new: moved.len(),
                pseudo_precision: pseudo.and_then(|_| pseudo_precision(moved, &self.truth)),
                bytes_up,
                bytes_down: down,
                warning: r.report.warning.clone(),
            });
            server.bytes_up += bytes_up;
            server.bytes_down += down;
            all_moved.extend_from_slice(moved);
        }
        server.l_s = mean_of(trained.iter().filter_map(|r| r.report.l_s));
        server.l_u = mean_of(trained.iter().filter_map(|r| r.report.l_u));
        server.n_pseudo_new = all_moved.len();
        server.pseudo_precision = pseudo.and_then(|_| pseudo_precision(&all_moved, &self.truth));
        records.push(server);
        Ok(records)
    }

    /// Ids of every sample held by any client.
    pub fn sample_ids(&self) -> BTreeSet<u64> {
        self.clients
            .iter()
            .flat_map(|c| {
                c.dataset
                    .labeled
                    .iter()
                    .map(|e| e.id)
                    .chain(c.dataset.unlabeled.iter().map(|e| e.id))
            })
            .collect()
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}
