use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{ClientDataset, Dataset, GroundTruth, LabeledExample, UnlabeledExample};
use crate::error::{Error, Result};
use crate::seed::{rng_for, stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PartitionMode {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub clients: usize,
    pub n_labeled_total: usize,
    pub seed: u64,
    /// Draw separate Dirichlet proportions for the labeled and unlabeled
    /// pools instead of sharing one draw per class.
    pub independent_draws: bool,
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Spec("partition needs at least one client".into()));
        }
        if let PartitionMode::Dirichlet { alpha } = self.mode {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(Error::Spec(format!("dirichlet alpha must be positive, got {alpha}")));
            }
        }
        Ok(())
    }
}

/// Training-visible labeled and unlabeled pools plus the hidden labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<UnlabeledExample>,
    pub truth: GroundTruth,
}

/// Keeps exactly `n_labeled` labels, balanced across classes (the first
/// `n_labeled mod C` classes take one extra), and hides the rest. Examples
/// that arrive without a label are always unlabeled.
pub fn split_labeled(data: &Dataset, n_labeled: usize, seed: u64) -> Result<LabeledSplit> {
    let c = data.num_classes;
    let labeled_total = data.examples.iter().filter(|e| e.label.is_some()).count();
    if n_labeled > labeled_total {
        return Err(Error::Spec(format!(
            "asked for {n_labeled} labeled samples but only {labeled_total} are labeled"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (i, e) in data.examples.iter().enumerate() {
        if let Some(y) = e.label {
            by_class[y].push(i);
        }
    }
    let mut keep = vec![false; data.examples.len()];
    let mut rng = rng_for(seed, &[stream::SPLIT]);
    for (class, pool) in by_class.iter_mut().enumerate() {
        let want = n_labeled / c + usize::from(class < n_labeled % c);
        if want > pool.len() {
            return Err(Error::Spec(format!(
                "class {class} has {} samples, fewer than the {want} needed for a balanced split",
                pool.len()
            )));
        }
        pool.shuffle(&mut rng);
        for &i in &pool[..want] {
            keep[i] = true;
        }
    }
    let mut split = LabeledSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        truth: GroundTruth::default(),
    };
    for (e, keep) in data.examples.iter().zip(keep) {
        match (e.label, keep) {
            (Some(label), true) => split.labeled.push(LabeledExample {
                id: e.id,
                features: e.features.clone(),
                label,
            }),
            (label, _) => {
                if let Some(y) = label {
                    split.truth.insert(e.id, y);
                }
                split.unlabeled.push(UnlabeledExample {
                    id: e.id,
                    features: e.features.clone(),
                });
            }
        }
    }
    Ok(split)
}

/// Integer counts summing to `total` that follow `props`: floors first, then
/// one extra to the largest fractional parts (ties to the lower index).
pub fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let sum: f64 = props.iter().sum();
    let quotas: Vec<f64> = props.iter().map(|p| p / sum * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(total.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

fn dirichlet(alpha: f64, k: usize, rng: &mut Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("alpha validated positive");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 {
        draws.into_iter().map(|d| d / sum).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// The K clients plus the hidden labels of their unlabeled samples.
#[derive(Clone, Debug)]
pub struct Partition {
    pub clients: Vec<ClientDataset>,
    pub truth: GroundTruth,
    pub warnings: Vec<String>,
}

/// Assigns every example of `split` to one client. Class membership of
/// unlabeled samples comes from the hidden labels; samples with no known
/// class form an extra pool that is dealt round-robin.
pub fn distribute(split: &LabeledSplit, num_classes: usize, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    let k = spec.clients;
    let mut clients: Vec<ClientDataset> = (0..k)
        .map(|client_id| ClientDataset {
            client_id,
            ..Default::default()
        })
        .collect();

    let mut labeled_pools: Vec<Vec<&LabeledExample>> = vec![Vec::new(); num_classes];
    for e in &split.labeled {
        labeled_pools[e.label].push(e);
    }
    // The last pool holds unlabeled samples without a known class.
    let mut unlabeled_pools: Vec<Vec<&UnlabeledExample>> = vec![Vec::new(); num_classes + 1];
    for e in &split.unlabeled {
        let class = split.truth.label_of(e.id).unwrap_or(num_classes);
        unlabeled_pools[class].push(e);
    }

    let mut rng = rng_for(spec.seed, &[stream::PARTITION]);
    // Round-robin position carried across classes in iid mode.
    let mut deal_offset = 0usize;
    for (class, pool) in unlabeled_pools.iter_mut().enumerate() {
        let mut labeled = labeled_pools.get_mut(class).map(std::mem::take).unwrap_or_default();
        let mut unlabeled = std::mem::take(pool);
        labeled.shuffle(&mut rng);
        unlabeled.shuffle(&mut rng);

        match spec.mode {
            PartitionMode::Dirichlet { alpha } if class < num_classes => {
                let shared = dirichlet(alpha, k, &mut rng);
                let other = if spec.independent_draws {
                    dirichlet(alpha, k, &mut rng)
                } else {
                    shared.clone()
                };
                let mut it = labeled.iter();
                for (client, n) in clients.iter_mut().zip(largest_remainder(&shared, labeled.len())) {
                    client.labeled.extend(it.by_ref().take(n).map(|&e| e.clone()));
                }
                let mut it = unlabeled.iter();
                for (client, n) in clients.iter_mut().zip(largest_remainder(&other, unlabeled.len())) {
                    client.unlabeled.extend(it.by_ref().take(n).map(|&e| e.clone()));
                }
            }
            _ => {
                // Labeled then unlabeled as one stream, so each client's
                // per-class total is within one of N_c / K.
                for (j, &e) in labeled.iter().enumerate() {
                    clients[(deal_offset + j) % k].labeled.push(e.clone());
                }
                let base = deal_offset + labeled.len();
                for (j, &e) in unlabeled.iter().enumerate() {
                    clients[(base + j) % k].unlabeled.push(e.clone());
                }
                deal_offset = (base + unlabeled.len()) % k;
            }
        }
    }

    let mut warnings = Vec::new();
    for c in &mut clients {
        c.labeled.sort_by_key(|e| e.id);
        c.unlabeled.sort_by_key(|e| e.id);
        if c.labeled.is_empty() {
            let msg = format!("client {} received no labeled samples", c.client_id);
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }
    Ok(Partition {
        clients,
        truth: split.truth.clone(),
        warnings,
    })
}

/// Splits off `spec.n_labeled_total` labels and distributes both pools.
pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Partition> {
    spec.validate()?;
    let split = split_labeled(data, spec.n_labeled_total, spec.seed)?;
    distribute(&split, data.num_classes, spec)
}
