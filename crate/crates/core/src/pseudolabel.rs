//! Multi-model agreement pseudo-labeling.
//!
//! Each of the K+1 models (K client models plus the aggregated global) votes
//! for its argmax class when its top probability reaches `γ_t`, and abstains
//! otherwise. A sample qualifies when at least `u` votes agree on one class;
//! qualified samples move permanently from the unlabeled to the labeled set.

use std::cmp::Ordering;

use crate::data::{ClientDataset, GroundTruth, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{predict_batch, ClassifierSpec, ModelParams};
use crate::tensor::Real;

/// Samples scored per forward pass.
const CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vote {
    pub model_id: usize,
    /// `None` is an abstention.
    pub class: Option<usize>,
    /// The model's maximum class probability.
    pub confidence: f64,
}

/// Thresholds one probability vector. Ties in the argmax go to the lowest
/// class index.
pub fn vote_from_probs(model_id: usize, probs: &[f64], gamma: f64) -> Vote {
    let mut best = 0;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    let confidence = probs.get(best).copied().unwrap_or(0.0);
    Vote {
        model_id,
        class: (confidence >= gamma).then_some(best),
        confidence,
    }
}

pub fn confident_prediction<T: Real>(
    spec: &ClassifierSpec,
    model: &ModelParams<T>,
    model_id: usize,
    x: &[f32],
    gamma: f64,
) -> Result<Vote> {
    let p = predict_batch(spec, model, &[x])?;
    Ok(vote_from_probs(model_id, &p[0], gamma))
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoteTally {
    pub sample_id: u64,
    pub counts: Vec<usize>,
    /// Size of the largest agreeing group.
    pub s_x: usize,
    /// The modal class; `None` when every model abstained or the mode is tied.
    pub winner: Option<usize>,
    /// Mean confidence of the models that voted for `winner`, 0 without one.
    pub mean_conf: f64,
}

pub fn tally_votes(sample_id: u64, votes: &[Vote], num_classes: usize) -> VoteTally {
    let mut counts = vec![0usize; num_classes];
    for v in votes {
        if let Some(c) = v.class {
            counts[c] += 1;
        }
    }
    let s_x = counts.iter().copied().max().unwrap_or(0);
    let modal = counts.iter().filter(|&&n| n == s_x).count();
    let winner = if s_x > 0 && modal == 1 {
        counts.iter().position(|&n| n == s_x)
    } else {
        None
    };
    let mean_conf = match winner {
        Some(w) => {
            let agreeing: Vec<f64> = votes
                .iter()
                .filter(|v| v.class == Some(w))
                .map(|v| v.confidence)
                .collect();
            agreeing.iter().sum::<f64>() / agreeing.len() as f64
        }
        None => 0.0,
    };
    VoteTally {
        sample_id,
        counts,
        s_x,
        winner,
        mean_conf,
    }
}

/// `(sample_id, label)` pairs that reach agreement `u`, ranked by mean
/// confidence (descending, then id ascending) and truncated to `cap`.
/// The returned list keeps that ranking order.
pub fn select_pseudo_labels(tallies: &[VoteTally], u: usize, cap: Option<usize>) -> Vec<(u64, usize)> {
    let mut chosen: Vec<&VoteTally> = tallies.iter().filter(|t| t.winner.is_some() && t.s_x >= u).collect();
    chosen.sort_by(|a, b| {
        b.mean_conf
            .partial_cmp(&a.mean_conf)
            .unwrap_or(Ordering::Equal)
            .then(a.sample_id.cmp(&b.sample_id))
    });
    if let Some(cap) = cap {
        chosen.truncate(cap);
    }
    chosen.into_iter().map(|t| (t.sample_id, t.winner.unwrap())).collect()
}

/// Tallies for every unlabeled sample of `client`.
pub fn tally_client<T: Real>(
    spec: &ClassifierSpec,
    client: &ClientDataset,
    models: &[ModelParams<T>],
    gamma: f64,
) -> Result<Vec<VoteTally>> {
    let n = client.unlabeled.len();
    let mut votes: Vec<Vec<Vote>> = vec![Vec::with_capacity(models.len()); n];
    for (m, model) in models.iter().enumerate() {
        for (start, chunk) in (0..n).step_by(CHUNK).zip(client.unlabeled.chunks(CHUNK)) {
            let xs: Vec<&[f32]> = chunk.iter().map(|e| e.features.as_slice()).collect();
            for (j, p) in predict_batch(spec, model, &xs)?.iter().enumerate() {
                votes[start + j].push(vote_from_probs(m, p, gamma));
            }
        }
    }
    Ok(client
        .unlabeled
        .iter()
        .zip(&votes)
        .map(|(e, v)| tally_votes(e.id, v, spec.num_classes))
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelStats {
    /// Samples that qualified before the cap was applied.
    pub candidates: usize,
    /// `(sample_id, pseudo-label)` of every moved sample.
    pub moved: Vec<(u64, usize)>,
}

/// Runs one pseudo-labeling pass on `client` with the received model set.
pub fn pseudo_label_client<T: Real>(
    spec: &ClassifierSpec,
    client: &mut ClientDataset,
    models: &[ModelParams<T>],
    gamma: f64,
    u: usize,
    cap: Option<usize>,
) -> Result<PseudoLabelStats> {
    if models.is_empty() {
        return Err(Error::Contract("pseudo-labeling needs at least one model".into()));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Contract(format!(
            "confidence threshold {gamma} is outside (0, 1]"
        )));
    }
    let tallies = tally_client(spec, client, models, gamma)?;
    let candidates = tallies.iter().filter(|t| t.winner.is_some() && t.s_x >= u).count();
    let moved = select_pseudo_labels(&tallies, u, cap);
    if !moved.is_empty() {
        let labels: std::collections::HashMap<u64, usize> = moved.iter().copied().collect();
        let (taken, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut client.unlabeled)
            .into_iter()
            .partition(|e| labels.contains_key(&e.id));
        client.unlabeled = kept;
        client.labeled.extend(taken.into_iter().map(|e| LabeledExample {
            label: labels[&e.id],
            id: e.id,
            features: e.features,
        }));
        client.labeled.sort_by_key(|e| e.id);
    }
    Ok(PseudoLabelStats { candidates, moved })
}

/// Fraction of moved samples whose pseudo-label is correct; `None` when
/// nothing moved.
pub fn pseudo_precision(moved: &[(u64, usize)], truth: &GroundTruth) -> Option<f64> {
    truth.precision(moved)
}
