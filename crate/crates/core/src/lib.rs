//! Semi-supervised federated learning simulator.
//!
//! Clients hold a small labeled pool and a large unlabeled pool. Each round
//! every client trains on cross-entropy plus a KL consistency term, the
//! server averages the client models, and at designated rounds the server
//! ships every client model back out so clients can pseudo-label samples on
//! which all models confidently agree.

pub mod augment;
pub mod data;
pub mod error;
pub mod flcore;
pub mod graph;
pub mod harness;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pseudolabel;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use flcore::{
    aggregate, broadcast_models, client_local_training, ClientState, ExecutionOrder, Federation, MetricsRecord,
    Participant, RoundPlan, ServerState,
};
pub use graph::{CompGraph, Gradients, NodeId};
pub use harness::{
    evaluate, export_plot_data, run_experiment, sweep, ExperimentConfig, ExperimentResult, Method, RawConfig,
    SweepTable,
};
pub use loss::{combined_loss, combined_step, consistency_loss, supervised_loss, LossBundle, StepBatch};
pub use model::{init_model, predict, predict_batch, ClassifierKind, ClassifierSpec, ModelParams, NamedTensor};
pub use optim::{sgd_step, OptimState};
pub use pseudolabel::{pseudo_label_client, pseudo_precision, tally_votes, Vote, VoteTally};
pub use tensor::{Real, Tensor};
