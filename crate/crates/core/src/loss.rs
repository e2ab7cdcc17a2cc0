//! Supervised cross-entropy, KL consistency, and their weighted combination.

use crate::error::{Error, Result};
use crate::graph::{CompGraph, NodeId};
use crate::model::{ClassifierSpec, ModelParams};
use crate::optim::{sgd_step, OptimState};
use crate::tensor::{Real, Tensor};

/// Batch-mean `-log p(y|x)` from logits `[b, c]`.
pub fn cross_entropy<T: Real>(g: &mut CompGraph<T>, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let lp = g.log_softmax(logits)?;
    let picked = g.gather(lp, labels.to_vec())?;
    let m = g.mean(picked)?;
    Ok(g.scale(m, -1.0))
}

/// Batch-mean `KL(p(·|x) ‖ p(·|x̃))` from clean and perturbed logits.
/// With `stop_gradient` the clean distribution is a constant target.
pub fn kl_consistency<T: Real>(
    g: &mut CompGraph<T>,
    clean_logits: NodeId,
    perturbed_logits: NodeId,
    stop_gradient: bool,
) -> Result<NodeId> {
    let batch = g.value(clean_logits).shape()[0];
    let (mut p, mut lp) = (g.softmax(clean_logits)?, g.log_softmax(clean_logits)?);
    if stop_gradient {
        p = g.detach(p);
        lp = g.detach(lp);
    }
    let lq = g.log_softmax(perturbed_logits)?;
    let diff = g.sub(lp, lq)?;
    let terms = g.mul(p, diff)?;
    let total = g.sum(terms);
    Ok(g.scale(total, 1.0 / batch as f64))
}

/// Loss value plus one gradient per parameter tensor.
#[derive(Clone, Debug)]
pub struct LossEval<T: Real = f32> {
    pub value: f64,
    pub grads: Vec<Tensor<T>>,
}

fn eval<T: Real>(g: &CompGraph<T>, loss: NodeId, params: &ModelParams<T>) -> Result<LossEval<T>> {
    let grads = g.backward(loss)?.into_dense(&params.shapes());
    Ok(LossEval {
        value: g.value(loss).values()[0].as_f64(),
        grads,
    })
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= num_classes) {
        Some(&label) => Err(Error::Label { label, num_classes }),
        None => Ok(()),
    }
}

pub fn supervised_loss<T: Real>(
    spec: &ClassifierSpec,
    params: &ModelParams<T>,
    inputs: &[&[f32]],
    labels: &[usize],
) -> Result<LossEval<T>> {
    if inputs.is_empty() || inputs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "supervised batch needs matching nonempty inputs and labels ({} vs {})",
            inputs.len(),
            labels.len()
        )));
    }
    check_labels(labels, spec.num_classes)?;
    let mut g = CompGraph::new();
    let nodes = params.register(&mut g);
    let x = g.constant(spec.batch_input(inputs)?);
    let z = spec.forward(&mut g, &nodes, x)?;
    let loss = cross_entropy(&mut g, z, labels)?;
    eval(&g, loss, params)
}

pub fn consistency_loss<T: Real>(
    spec: &ClassifierSpec,
    params: &ModelParams<T>,
    inputs: &[&[f32]],
    mut perturb: impl FnMut(&[f32]) -> Vec<f32>,
    stop_gradient: bool,
) -> Result<LossEval<T>> {
    if inputs.is_empty() {
        return Err(Error::Contract("consistency loss needs a nonempty batch".into()));
    }
    let perturbed: Vec<Vec<f32>> = inputs.iter().map(|x| perturb(x)).collect();
    let perturbed: Vec<&[f32]> = perturbed.iter().map(Vec::as_slice).collect();
    let mut g = CompGraph::new();
    let nodes = params.register(&mut g);
    let loss = consistency_node(&mut g, spec, &nodes, inputs, &perturbed, stop_gradient)?;
    eval(&g, loss, params)
}

fn consistency_node<T: Real>(
    g: &mut CompGraph<T>,
    spec: &ClassifierSpec,
    nodes: &[NodeId],
    clean: &[&[f32]],
    perturbed: &[&[f32]],
    stop_gradient: bool,
) -> Result<NodeId> {
    let xc = g.constant(spec.batch_input(clean)?);
    let zc = spec.forward(g, nodes, xc)?;
    let xp = g.constant(spec.batch_input(perturbed)?);
    let zp = spec.forward(g, nodes, xp)?;
    kl_consistency(g, zc, zp, stop_gradient)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub l_s: f64,
    pub l_u: f64,
    pub total: f64,
}

/// One labeled and one unlabeled minibatch for a combined step. Either side
/// may be empty: an empty side contributes no loss term.
#[derive(Clone, Copy, Debug)]
pub struct StepBatch<'a> {
    pub labeled: &'a [&'a [f32]],
    pub labels: &'a [usize],
    pub unlabeled: &'a [&'a [f32]],
    /// Perturbed copies of `unlabeled`, same order.
    pub perturbed: &'a [&'a [f32]],
}

/// Gradient of `l_s + λ_u·l_u` on one batch pair. The unlabeled term is
/// skipped when its batch is empty or `lambda_u` is zero.
pub fn combined_loss<T: Real>(
    spec: &ClassifierSpec,
    params: &ModelParams<T>,
    batch: &StepBatch<'_>,
    lambda_u: f64,
    stop_gradient: bool,
) -> Result<(LossBundle, Vec<Tensor<T>>)> {
    if batch.labeled.len() != batch.labels.len() || batch.unlabeled.len() != batch.perturbed.len() {
        return Err(Error::Contract("combined step batch lengths disagree".into()));
    }
    check_labels(batch.labels, spec.num_classes)?;
    let mut g = CompGraph::new();
    let nodes = params.register(&mut g);
    let mut bundle = LossBundle::default();
    let mut terms = Vec::new();
    if !batch.labeled.is_empty() {
        let x = g.constant(spec.batch_input(batch.labeled)?);
        let z = spec.forward(&mut g, &nodes, x)?;
        let ls = cross_entropy(&mut g, z, batch.labels)?;
        bundle.l_s = g.value(ls).values()[0].as_f64();
        terms.push(ls);
    }
    if !batch.unlabeled.is_empty() && lambda_u != 0.0 {
        let lu = consistency_node(&mut g, spec, &nodes, batch.unlabeled, batch.perturbed, stop_gradient)?;
        // KL is nonnegative; rounding can leave a tiny negative residue.
        bundle.l_u = g.value(lu).values()[0].as_f64().max(0.0);
        let weighted = g.scale(lu, lambda_u);
        terms.push(weighted);
    }
    bundle.total = bundle.l_s + lambda_u * bundle.l_u;
    let shapes = params.shapes();
    let grads = match terms.as_slice() {
        [] => shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        [only] => g.backward(*only)?.into_dense(&shapes),
        [a, b] => {
            let sum = g.add(*a, *b)?;
            g.backward(sum)?.into_dense(&shapes)
        }
        _ => unreachable!("at most two loss terms"),
    };
    Ok((bundle, grads))
}

/// Applies one optimizer step on the combined loss. Returns the losses
/// measured before the update. No step is taken when both sides are empty.
pub fn combined_step<T: Real>(
    spec: &ClassifierSpec,
    params: &mut ModelParams<T>,
    batch: &StepBatch<'_>,
    lambda_u: f64,
    stop_gradient: bool,
    opt: &mut OptimState<T>,
) -> Result<LossBundle> {
    if batch.labeled.is_empty() && batch.unlabeled.is_empty() {
        return Ok(LossBundle::default());
    }
    let (bundle, grads) = combined_loss(spec, params, batch, lambda_u, stop_gradient)?;
    sgd_step(params, &grads, opt)?;
    Ok(bundle)
}

/// `KL(p ‖ q)` of two probability vectors.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).ln())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn spec() -> ClassifierSpec {
        ClassifierSpec::mlp(3, &[5], 4)
    }

    fn samples() -> Vec<Vec<f32>> {
        vec![vec![0.1, -0.4, 1.2], vec![1.0, 0.0, -0.5], vec![-2.0, 0.3, 0.7]]
    }

    fn refs(v: &[Vec<f32>]) -> Vec<&[f32]> {
        v.iter().map(Vec::as_slice).collect()
    }

    #[test]
    fn cross_entropy_zero_on_confident_truth() {
        let mut g = CompGraph::<f64>::new();
        let z = g.constant(Tensor::matrix(1, 3, vec![800.0, 0.0, 0.0]).unwrap());
        let l = cross_entropy(&mut g, z, &[0]).unwrap();
        assert_eq!(g.value(l).values()[0], 0.0);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let mut g = CompGraph::<f64>::new();
        let z = g.constant(Tensor::zeros(&[2, 10]));
        let l = cross_entropy(&mut g, z, &[3, 7]).unwrap();
        assert!((g.value(l).values()[0] - 10f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn batch_loss_is_mean_of_sample_losses() {
        let p = init_model(&spec(), 7).unwrap().cast::<f64>();
        let xs = samples();
        let a = supervised_loss(&spec(), &p, &[&xs[0]], &[1]).unwrap().value;
        let b = supervised_loss(&spec(), &p, &[&xs[1]], &[3]).unwrap().value;
        let ab = supervised_loss(&spec(), &p, &[&xs[0], &xs[1]], &[1, 3]).unwrap().value;
        assert!((ab - (a + b) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let p = init_model(&spec(), 7).unwrap();
        let xs = samples();
        let err = supervised_loss(&spec(), &p, &[&xs[0]], &[4]);
        assert!(matches!(
            err,
            Err(Error::Label {
                label: 4,
                num_classes: 4
            })
        ));
    }

    #[test]
    fn kl_direct_evaluation() {
        let v = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]);
        let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((v - want).abs() < 1e-12);
        assert!((v - 0.510826).abs() < 1e-5);
    }

    #[test]
    fn kl_node_matches_direct_sum() {
        let mut g = CompGraph::<f64>::new();
        let zp = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let zq = g.constant(Tensor::matrix(1, 2, vec![0.9f64.ln(), 0.1f64.ln()]).unwrap());
        let kl = kl_consistency(&mut g, zp, zq, true).unwrap();
        assert!((g.value(kl).values()[0] - 0.510826).abs() < 1e-5);
    }

    #[test]
    fn identity_perturbation_gives_zero_consistency() {
        let p = init_model(&spec(), 11).unwrap().cast::<f64>();
        let xs = samples();
        let l = consistency_loss(&spec(), &p, &refs(&xs), |x| x.to_vec(), true).unwrap();
        assert!(l.value.abs() < 1e-9);
        assert!(l.grads.iter().all(|g| g.values().iter().all(|v| v.abs() < 1e-9)));
    }

    #[test]
    fn stop_gradient_changes_gradient_not_value() {
        let p = init_model(&spec(), 5).unwrap().cast::<f64>();
        let xs = samples();
        let shift = |x: &[f32]| x.iter().map(|v| v + 0.3).collect::<Vec<_>>();
        let a = consistency_loss(&spec(), &p, &refs(&xs), shift, true).unwrap();
        let b = consistency_loss(&spec(), &p, &refs(&xs), shift, false).unwrap();
        assert!(a.value > 0.0);
        assert!((a.value - b.value).abs() < 1e-12);
        assert_ne!(a.grads, b.grads);
    }

    #[test]
    fn zero_lambda_matches_supervised_step() {
        let spec = spec();
        let xs = samples();
        let pert: Vec<Vec<f32>> = xs.iter().map(|x| x.iter().map(|v| v * 1.5).collect()).collect();
        let (xl, xu, xp) = (refs(&xs[..2]), refs(&xs[1..]), refs(&pert[1..]));
        let batch = StepBatch {
            labeled: &xl,
            labels: &[0, 2],
            unlabeled: &xu,
            perturbed: &xp,
        };
        let base = init_model(&spec, 3).unwrap();
        let mut a = base.clone();
        let mut oa = OptimState::new(&a.shapes(), 0.3, 0.9, 1e-4).unwrap();
        combined_step(&spec, &mut a, &batch, 0.0, true, &mut oa).unwrap();

        let mut b = base.clone();
        let mut ob = OptimState::new(&b.shapes(), 0.3, 0.9, 1e-4).unwrap();
        let s = supervised_loss(&spec, &b, &xl, &[0, 2]).unwrap();
        sgd_step(&mut b, &s.grads, &mut ob).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_unlabeled_side_is_skipped() {
        let spec = spec();
        let xs = samples();
        let xl = refs(&xs);
        let batch = StepBatch {
            labeled: &xl,
            labels: &[0, 1, 2],
            unlabeled: &[],
            perturbed: &[],
        };
        let p = init_model(&spec, 3).unwrap();
        let (bundle, _) = combined_loss(&spec, &p, &batch, 1.0, true).unwrap();
        assert_eq!(bundle.l_u, 0.0);
        assert_eq!(bundle.total, bundle.l_s);
    }

    #[test]
    fn combined_gradient_is_sum_of_terms() {
        let spec = spec();
        let p = init_model(&spec, 9).unwrap().cast::<f64>();
        let xs = samples();
        let pert: Vec<Vec<f32>> = xs.iter().map(|x| x.iter().map(|v| -v).collect()).collect();
        let (xl, xu, xp) = (refs(&xs[..2]), refs(&xs), refs(&pert));
        let lam = 0.7;
        let batch = StepBatch {
            labeled: &xl,
            labels: &[3, 1],
            unlabeled: &xu,
            perturbed: &xp,
        };
        let (bundle, grads) = combined_loss(&spec, &p, &batch, lam, true).unwrap();
        let s = supervised_loss(&spec, &p, &xl, &[3, 1]).unwrap();
        let mut it = pert.iter();
        let u = consistency_loss(&spec, &p, &xu, |_| it.next().unwrap().clone(), true).unwrap();
        assert!((bundle.total - (s.value + lam * u.value)).abs() < 1e-12);
        for ((c, gs), gu) in grads.iter().zip(&s.grads).zip(&u.grads) {
            for ((c, gs), gu) in c.values().iter().zip(gs.values()).zip(gu.values()) {
                assert!((c - (gs + lam * gu)).abs() < 1e-6);
            }
        }
    }
}
