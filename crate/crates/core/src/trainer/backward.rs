//! Batch objective and its gradient with respect to router, projections
//! and head.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{ClassifierHead, ProjectionLayer};
use crate::model::{FusionMode, MoeModel, Trace};
use crate::numeric::{dot, relu, sigmoid};
use crate::router::{entropy_regularizer, load_balance_loss, LoadBalanceStats, RouterParams, Strategy};

use super::loss::{cross_entropy, total_loss};
use super::{CachedSample, TrainingConfig};

/// Gradients shaped like the model's trainable blocks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientSet {
    pub router: RouterParams,
    pub projections: ProjectionLayer,
    pub head: ClassifierHead,
}

impl GradientSet {
    pub fn zeros_like(model: &MoeModel) -> Self {
        let dims: Vec<usize> = model.projections.weights.iter().map(|w| w.cols()).collect();
        Self {
            router: RouterParams::zeros(model.router.n_experts(), model.router.weight.cols()),
            projections: ProjectionLayer::zeros(&dims, model.projections.dim),
            head: ClassifierHead::zeros(model.head.input_width(), model.head.hidden_width()),
        }
    }
}

/// Loss terms and per-sample outputs of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    pub loss: f64,
    pub ce: f64,
    pub lb: f64,
    pub entropy: f64,
    pub stats: LoadBalanceStats,
    /// Head logits in batch order.
    pub logits: Vec<f64>,
    /// Most probable expert per sample.
    pub top1: Vec<usize>,
}

pub(crate) fn router_trainable(strategy: Strategy) -> bool {
    matches!(strategy, Strategy::Hard | Strategy::Soft)
}

pub(crate) fn forward(
    model: &MoeModel,
    batch: &[&CachedSample],
    config: &TrainingConfig,
) -> Result<(BatchOutcome, Vec<Trace>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut traces = Vec::with_capacity(batch.len());
    for s in batch {
        let decision = model.decide(&s.request, &s.features)?;
        traces.push(model.trace(decision, |e| s.hidden_of(e))?);
    }
    let n = model.n_experts();
    let stats = LoadBalanceStats::from_probs(traces.iter().map(|t| t.decision.full_probs.as_slice()), n);
    let b = batch.len() as f64;
    let ce = batch
        .iter()
        .zip(&traces)
        .map(|(s, t)| cross_entropy(t.logit, s.label))
        .sum::<f64>()
        / b;
    let lb = load_balance_loss(&stats);
    let entropy = traces
        .iter()
        .map(|t| entropy_regularizer(&t.decision.full_probs))
        .sum::<f64>()
        / b;
    let (lambda_lb, lambda_h) = config.coefficients(model.settings.strategy);
    let loss = total_loss(ce, lb, entropy, lambda_lb, lambda_h);
    if !loss.is_finite() {
        model.check_finite()?;
        return Err(Error::NonFinite {
            block: "loss".into(),
        });
    }
    let outcome = BatchOutcome {
        loss,
        ce,
        lb,
        entropy,
        logits: traces.iter().map(|t| t.logit).collect(),
        top1: traces.iter().map(|t| t.decision.top1()).collect(),
        stats,
    };
    Ok((outcome, traces))
}

/// Batch objective without gradients.
pub fn objective(model: &MoeModel, batch: &[&CachedSample], config: &TrainingConfig) -> Result<BatchOutcome> {
    forward(model, batch, config).map(|(o, _)| o)
}

/// Objective and gradient of one batch.
pub fn backward(
    model: &MoeModel,
    batch: &[&CachedSample],
    config: &TrainingConfig,
) -> Result<(BatchOutcome, GradientSet)> {
    let (outcome, traces) = forward(model, batch, config)?;
    let s = &model.settings;
    let d = s.dim;
    let n = model.n_experts();
    let b = batch.len() as f64;
    let (lambda_lb, lambda_h) = config.coefficients(s.strategy);
    let train_router = router_trainable(s.strategy);
    let mut g = GradientSet::zeros_like(model);

    for (sample, t) in batch.iter().zip(&traces) {
        // Head.
        let d_out = (sigmoid(t.logit) - f64::from(u8::from(sample.label))) / b;
        let r = relu(&t.pre);
        g.head.b_c += d_out;
        for (gw, &ri) in g.head.w_c.iter_mut().zip(&r) {
            *gw += d_out * ri;
        }
        let da: Vec<f64> = t
            .pre
            .iter()
            .zip(&model.head.w_c)
            .map(|(&a, &w)| if a > 0.0 { d_out * w } else { 0.0 })
            .collect();
        g.head.w_p.add_outer(1.0, &da, &t.z);
        for (gb, &v) in g.head.b_p.iter_mut().zip(&da) {
            *gb += v;
        }
        let dz = model.head.w_p.matvec_transposed(&da)?;

        // Fusion and projections.
        let selected = &t.decision.selected;
        let mut d_gate = vec![0.0; selected.len()];
        for (j, &(e, gate)) in selected.iter().enumerate() {
            let hp = &t.projected[j];
            let (dh, dg): (Vec<f64>, f64) = match s.fusion {
                FusionMode::Concat => {
                    let slot = &dz[j * d..(j + 1) * d];
                    if s.gate_scaling {
                        (slot.iter().map(|v| gate * v).collect(), dot(slot, hp))
                    } else {
                        (slot.to_vec(), 0.0)
                    }
                }
                FusionMode::Weighted => (dz.iter().map(|v| gate * v).collect(), dot(&dz, hp)),
            };
            d_gate[j] = dg;
            let dv = if s.l2_normalize {
                let norm = crate::numeric::l2_norm(&t.raw[j]);
                if norm > 0.0 {
                    let proj = dot(hp, &dh);
                    dh.iter().zip(hp).map(|(x, h)| (x - h * proj) / norm).collect()
                } else {
                    dh
                }
            } else {
                dh
            };
            let hidden = sample.hidden_of(e).ok_or(Error::UnknownExpert(e))?;
            g.projections.weights[e].add_outer(1.0, &dv, hidden);
            for (gb, &v) in g.projections.biases[e].iter_mut().zip(&dv) {
                *gb += v;
            }
        }

        if !train_router {
            continue;
        }
        // Gate renormalization g_i = p_i / Σ_S p_j.
        let p = &t.decision.full_probs;
        let mass: f64 = selected.iter().map(|&(e, _)| p[e]).sum();
        let weighted: f64 = selected.iter().zip(&d_gate).map(|(&(_, gate), dg)| gate * dg).sum();
        let mut dp = vec![0.0; n];
        for (&(e, _), dg) in selected.iter().zip(&d_gate) {
            dp[e] = (dg - weighted) / mass;
        }
        for i in 0..n {
            dp[i] += lambda_lb * n as f64 * outcome.stats.dispatch_frac[i] / b;
            if lambda_h > 0.0 {
                dp[i] -= lambda_h * (p[i].max(f64::MIN_POSITIVE).ln() + 1.0) / b;
            }
        }
        // Softmax.
        let inner = dot(p, &dp);
        for i in 0..n {
            let dl = p[i] * (dp[i] - inner);
            g.router.bias[i] += dl;
            let row = g.router.weight.row_mut(i);
            for &(col, x) in sample.features.entries() {
                row[col] += dl * x;
            }
        }
    }
    Ok((outcome, g))
}

/// `θ ← θ − lr·g` over router, projections and head, in that order. The
/// router is left untouched for strategies that do not train it end to
/// end.
pub fn sgd_step(model: &mut MoeModel, grads: &GradientSet, learning_rate: f64) {
    fn step(theta: &mut [f64], g: &[f64], lr: f64) {
        for (t, &gi) in theta.iter_mut().zip(g) {
            *t -= lr * gi;
        }
    }
    if router_trainable(model.settings.strategy) {
        step(model.router.weight.as_mut_slice(), grads.router.weight.as_slice(), learning_rate);
        step(&mut model.router.bias, &grads.router.bias, learning_rate);
    }
    let p = &mut model.projections;
    for e in 0..p.weights.len() {
        step(p.weights[e].as_mut_slice(), grads.projections.weights[e].as_slice(), learning_rate);
        step(&mut p.biases[e], &grads.projections.biases[e], learning_rate);
    }
    let h = &mut model.head;
    step(h.w_p.as_mut_slice(), grads.head.w_p.as_slice(), learning_rate);
    step(&mut h.b_p, &grads.head.b_p, learning_rate);
    step(&mut h.w_c, &grads.head.w_c, learning_rate);
    h.b_c -= learning_rate * grads.head.b_c;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::Request;
    use crate::model::ModelSettings;
    use crate::numeric::Rng;
    use crate::router::{featurize, FeatureConfig, RuleTable};

    fn settings(strategy: Strategy, fusion: FusionMode, n: usize, k: usize) -> ModelSettings {
        ModelSettings {
            strategy,
            fusion,
            k,
            tau: 1.0 / n as f64,
            k_max: k,
            gate_scaling: true,
            l2_normalize: false,
            features: FeatureConfig {
                text_buckets: 8,
                nations: vec!["A".into(), "B".into()],
            },
            dim: 3,
            head_hidden: 4,
        }
    }

    fn batch(n_experts: usize, size: usize, seed: u64) -> Vec<CachedSample> {
        let mut rng = Rng::new(seed);
        let cfg = FeatureConfig {
            text_buckets: 8,
            nations: vec!["A".into(), "B".into()],
        };
        (0..size)
            .map(|i| {
                let request = Request {
                    id: i as u64,
                    query: format!("q{}", rng.below(50)),
                    title: format!("t{} x{}", rng.below(50), rng.below(9)),
                    nation: if i % 2 == 0 { "A" } else { "B" }.into(),
                };
                CachedSample {
                    features: featurize(&request, &cfg).unwrap(),
                    request,
                    hidden: (0..n_experts)
                        .map(|_| (0..5).map(|_| rng.normal()).collect())
                        .collect(),
                    label: i % 2 == 0,
                }
            })
            .collect()
    }

    #[test]
    fn output_bias_gradient_vanishes_on_balanced_batch_with_zero_head() {
        let s = settings(Strategy::Hard, FusionMode::Concat, 3, 2);
        let mut model = MoeModel::init(s, &[5, 5, 5], RuleTable::default(), &mut Rng::new(3)).unwrap();
        model.head = ClassifierHead::zeros(6, 4);
        let data = batch(3, 8, 1);
        let refs: Vec<&CachedSample> = data.iter().collect();
        let (_, g) = backward(&model, &refs, &TrainingConfig::default()).unwrap();
        assert!(g.head.b_c.abs() < 1e-12);
    }

    #[test]
    fn constant_gate_gives_no_task_gradient_to_router() {
        let s = settings(Strategy::Hard, FusionMode::Concat, 1, 1);
        let model = MoeModel::init(s, &[5], RuleTable::default(), &mut Rng::new(4)).unwrap();
        let data = batch(1, 6, 2);
        let refs: Vec<&CachedSample> = data.iter().collect();
        let config = TrainingConfig {
            lambda_lb: 0.0,
            ..TrainingConfig::default()
        };
        let (_, g) = backward(&model, &refs, &config).unwrap();
        assert!(g.router.weight.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.router.bias.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_step_examples() {
        let s = settings(Strategy::Hard, FusionMode::Weighted, 1, 1);
        let mut model = MoeModel::zeros(s, &[5], RuleTable::default()).unwrap();
        model.head.b_c = 1.0;
        let mut g = GradientSet::zeros_like(&model);
        g.head.b_c = 2.0;
        let before = model.clone();
        sgd_step(&mut model, &g, 0.1);
        assert!((model.head.b_c - 0.8).abs() < 1e-15);
        model.head.b_c = 1.0;
        assert_eq!(model, before);
        sgd_step(&mut model, &GradientSet::zeros_like(&before), 0.1);
        assert_eq!(model, before);
    }

    #[test]
    fn rule_strategy_leaves_router_untouched() {
        let s = settings(Strategy::Rule, FusionMode::Concat, 2, 1);
        let table = RuleTable([("A".to_string(), 0), ("B".to_string(), 1)].into_iter().collect());
        let mut model = MoeModel::init(s, &[5, 5], table, &mut Rng::new(8)).unwrap();
        let router = model.router.clone();
        let data = batch(2, 8, 3);
        let refs: Vec<&CachedSample> = data.iter().collect();
        for _ in 0..5 {
            let (_, g) = backward(&model, &refs, &TrainingConfig::default()).unwrap();
            sgd_step(&mut model, &g, 0.5);
        }
        assert_eq!(model.router, router);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let s = settings(Strategy::Hard, FusionMode::Concat, 1, 1);
        let model = MoeModel::zeros(s, &[5], RuleTable::default()).unwrap();
        assert!(matches!(
            backward(&model, &[], &TrainingConfig::default()),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn non_finite_parameters_are_reported_by_block() {
        let s = settings(Strategy::Hard, FusionMode::Concat, 2, 1);
        let mut model = MoeModel::init(s, &[5, 5], RuleTable::default(), &mut Rng::new(1)).unwrap();
        model.head.w_c[0] = f64::INFINITY;
        model.head.b_p = vec![1.0; 4];
        model.head.w_p = crate::numeric::Matrix::zeros(4, 3);
        let data = batch(2, 4, 5);
        let refs: Vec<&CachedSample> = data.iter().collect();
        match backward(&model, &refs, &TrainingConfig::default()) {
            Err(Error::NonFinite { block }) => assert_eq!(block, "head.w_c"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
