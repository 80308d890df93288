//! Training regimes and evaluation.

use log::info;
use serde::Serialize;

use crate::datagen::{Sample, Split};
use crate::error::{Error, Result};
use crate::experts::Registry;
use crate::model::{MoeModel, ModelSettings};
use crate::numeric::{dot, softmax, Matrix, Rng};
use crate::router::{pseudo_label_assign, RuleTable, Strategy};

use super::backward::{backward, objective, sgd_step};
use super::loss::cross_entropy;
use super::metrics::auc;
use super::{cache_samples, CachedSample, TrainingConfig};

/// One row of the per-epoch metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub auc: f64,
    /// Share of requests whose most probable expert is `i`.
    pub dispatch: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub auc: f64,
    pub dispatch: Vec<f64>,
    /// Head logits in input order.
    pub logits: Vec<f64>,
}

/// Logistic readout of a single expert: `w · (P h + b) + c`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Probe {
    pub expert: usize,
    pub projection: Matrix,
    pub bias: Vec<f64>,
    pub weight: Vec<f64>,
    pub offset: f64,
}

impl Probe {
    fn init(expert: usize, hidden_dim: usize, dim: usize, rng: &mut Rng) -> Self {
        let bp = 1.0 / (hidden_dim as f64).sqrt();
        let bw = 1.0 / (dim as f64).sqrt();
        Self {
            expert,
            projection: Matrix::uniform(dim, hidden_dim, bp, rng),
            bias: (0..dim).map(|_| rng.uniform(-bp, bp)).collect(),
            weight: (0..dim).map(|_| rng.uniform(-bw, bw)).collect(),
            offset: 0.0,
        }
    }

    fn projected(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        crate::numeric::affine(&self.projection, hidden, &self.bias)
    }

    pub fn logit(&self, hidden: &[f64]) -> Result<f64> {
        Ok(dot(&self.weight, &self.projected(hidden)?) + self.offset)
    }
}

/// Outcome of the pseudo-label stages.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoReport {
    /// Share of training samples whose pseudo-label names expert `i`.
    pub label_share: Vec<f64>,
    /// Share of training samples the fitted router sends to expert `i`.
    pub routed_share: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MoeModel,
    pub metrics: Vec<EpochMetrics>,
    pub pseudo: Option<PseudoReport>,
}

fn dispatch_share(top1: impl IntoIterator<Item = usize>, n: usize) -> Vec<f64> {
    let mut counts = vec![0usize; n];
    let mut total = 0usize;
    for e in top1 {
        counts[e] += 1;
        total += 1;
    }
    counts
        .into_iter()
        .map(|c| c as f64 / total.max(1) as f64)
        .collect()
}

fn batches<'a>(data: &'a [&'a CachedSample], size: usize) -> impl Iterator<Item = &'a [&'a CachedSample]> {
    data.chunks(size)
}

/// Loss, AUC and top-1 dispatch over `data`, batched as in training.
pub fn evaluate(model: &MoeModel, data: &[&CachedSample], config: &TrainingConfig) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut loss = 0.0;
    let mut logits = Vec::with_capacity(data.len());
    let mut top1 = Vec::with_capacity(data.len());
    for chunk in batches(data, config.batch_size) {
        let out = objective(model, chunk, config)?;
        loss += out.loss * chunk.len() as f64;
        logits.extend(out.logits);
        top1.extend(out.top1);
    }
    let labels: Vec<bool> = data.iter().map(|s| s.label).collect();
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        auc: auc(&logits, &labels)?,
        dispatch: dispatch_share(top1, model.n_experts()),
        logits,
    })
}

fn split_refs(data: &[CachedSample], split: Split) -> Vec<&CachedSample> {
    data.iter().filter(|s| Split::of(s.request.id) == split).collect()
}

fn shuffled<'a>(data: &[&'a CachedSample], rng: &mut Rng) -> Vec<&'a CachedSample> {
    let mut order = data.to_vec();
    rng.shuffle(&mut order);
    order
}

/// Fits one logistic probe per expert on `train`.
pub fn train_probes(
    train: &[&CachedSample],
    hidden_dims: &[usize],
    dim: usize,
    config: &TrainingConfig,
) -> Result<Vec<Probe>> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut probes = Vec::with_capacity(hidden_dims.len());
    for (e, &di) in hidden_dims.iter().enumerate() {
        let mut rng = Rng::derive(config.seed, 0x970b_e000 + e as u64);
        let mut probe = Probe::init(e, di, dim, &mut rng);
        for _ in 0..config.probe_epochs {
            for chunk in batches(&shuffled(train, &mut rng), config.batch_size) {
                let b = chunk.len() as f64;
                let mut g_proj = Matrix::zeros(dim, di);
                let mut g_bias = vec![0.0; dim];
                let mut g_w = vec![0.0; dim];
                let mut g_c = 0.0;
                for s in chunk {
                    let h = s.hidden_of(e).ok_or(Error::UnknownExpert(e))?;
                    let z = probe.projected(h)?;
                    let o = dot(&probe.weight, &z) + probe.offset;
                    let d_out = (crate::numeric::sigmoid(o) - f64::from(u8::from(s.label))) / b;
                    g_c += d_out;
                    for (g, &zi) in g_w.iter_mut().zip(&z) {
                        *g += d_out * zi;
                    }
                    let dz: Vec<f64> = probe.weight.iter().map(|w| d_out * w).collect();
                    g_proj.add_outer(1.0, &dz, h);
                    for (g, &v) in g_bias.iter_mut().zip(&dz) {
                        *g += v;
                    }
                }
                let lr = config.probe_learning_rate;
                for (p, g) in probe.projection.as_mut_slice().iter_mut().zip(g_proj.as_slice()) {
                    *p -= lr * g;
                }
                for (p, g) in probe.bias.iter_mut().zip(&g_bias) {
                    *p -= lr * g;
                }
                for (p, g) in probe.weight.iter_mut().zip(&g_w) {
                    *p -= lr * g;
                }
                probe.offset -= lr * g_c;
            }
        }
        probes.push(probe);
    }
    Ok(probes)
}

/// Test-style AUC of a single probe over `data`.
pub fn probe_auc(probe: &Probe, data: &[&CachedSample]) -> Result<f64> {
    let logits = data
        .iter()
        .map(|s| probe.logit(s.hidden_of(probe.expert).ok_or(Error::UnknownExpert(probe.expert))?))
        .collect::<Result<Vec<f64>>>()?;
    let labels: Vec<bool> = data.iter().map(|s| s.label).collect();
    auc(&logits, &labels)
}

/// Fits the router to per-sample expert labels with softmax cross-entropy.
fn fit_router(
    model: &mut MoeModel,
    train: &[&CachedSample],
    labels: &[usize],
    config: &TrainingConfig,
) -> Result<()> {
    let n = model.n_experts();
    let mut rng = Rng::derive(config.seed, 0x2047);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..config.router_epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let b = chunk.len() as f64;
            let mut g = crate::router::RouterParams::zeros(n, model.router.weight.cols());
            for &i in chunk {
                let x = &train[i].features;
                let p = softmax(&model.router.logits(x)?);
                for e in 0..n {
                    let dl = (p[e] - f64::from(u8::from(e == labels[i]))) / b;
                    g.bias[e] += dl;
                    let row = g.weight.row_mut(e);
                    for &(col, v) in x.entries() {
                        row[col] += dl * v;
                    }
                }
            }
            let lr = config.router_learning_rate;
            for (p, gv) in model.router.weight.as_mut_slice().iter_mut().zip(g.weight.as_slice()) {
                *p -= lr * gv;
            }
            for (p, gv) in model.router.bias.iter_mut().zip(&g.bias) {
                *p -= lr * gv;
            }
        }
    }
    Ok(())
}

fn pseudo_stages(model: &mut MoeModel, train: &[&CachedSample], config: &TrainingConfig) -> Result<PseudoReport> {
    let dims: Vec<usize> = model.projections.weights.iter().map(|w| w.cols()).collect();
    let probes = train_probes(train, &dims, model.settings.dim, config)?;
    let labels = train
        .iter()
        .map(|s| {
            let losses = probes
                .iter()
                .map(|p| {
                    let h = s.hidden_of(p.expert).ok_or(Error::UnknownExpert(p.expert))?;
                    Ok(cross_entropy(p.logit(h)?, s.label))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(pseudo_label_assign(&losses))
        })
        .collect::<Result<Vec<usize>>>()?;
    let n = model.n_experts();
    let label_share = dispatch_share(labels.iter().copied(), n);
    fit_router(model, train, &labels, config)?;
    let routed = train
        .iter()
        .map(|s| Ok(crate::numeric::argmax(&model.router.logits(&s.features)?)))
        .collect::<Result<Vec<usize>>>()?;
    let routed_share = dispatch_share(routed, n);
    info!("pseudo-labels {label_share:?}, router dispatch {routed_share:?}");
    Ok(PseudoReport {
        label_share,
        routed_share,
    })
}

/// Trains on the training split of `data` and logs train and validation
/// metrics after every epoch.
///
/// End-to-end strategies (`hard`, `soft`) optimize router, projections and
/// head jointly. `rule` never touches the router. `pseudo` first fits one
/// probe per expert, labels every training sample with its lowest-loss
/// expert, fits the router to those labels, then trains projections and
/// head with the router frozen.
pub fn train_cached(
    data: &[CachedSample],
    settings: ModelSettings,
    rule_table: RuleTable,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    let first = data.first().ok_or(Error::EmptyDataset)?;
    let dims: Vec<usize> = first.hidden.iter().map(Vec::len).collect();
    let strategy = settings.strategy;
    if strategy == Strategy::Rule {
        rule_table.validate(&settings.features.nations, dims.len())?;
    }
    let mut model = MoeModel::init(settings, &dims, rule_table, &mut Rng::derive(config.seed, 0x1a17))?;
    let train = split_refs(data, Split::Train);
    let val = split_refs(data, Split::Validation);
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let pseudo = if strategy == Strategy::Pseudo {
        Some(pseudo_stages(&mut model, &train, config)?)
    } else {
        None
    };

    let mut rng = Rng::derive(config.seed, 0x0bde);
    let mut metrics = Vec::new();
    for epoch in 1..=config.epochs {
        let order = shuffled(&train, &mut rng);
        let mut loss = 0.0;
        let mut logits = Vec::with_capacity(order.len());
        let mut top1 = Vec::with_capacity(order.len());
        for chunk in batches(&order, config.batch_size) {
            let (out, grads) = backward(&model, chunk, config)?;
            sgd_step(&mut model, &grads, config.learning_rate);
            loss += out.loss * chunk.len() as f64;
            logits.extend(out.logits);
            top1.extend(out.top1);
        }
        model.check_finite()?;
        let labels: Vec<bool> = order.iter().map(|s| s.label).collect();
        let row = EpochMetrics {
            epoch,
            split: Split::Train.as_str(),
            loss: loss / order.len() as f64,
            auc: auc(&logits, &labels)?,
            dispatch: dispatch_share(top1, model.n_experts()),
        };
        info!("epoch {epoch} train loss {:.5} auc {:.4}", row.loss, row.auc);
        metrics.push(row);
        if !val.is_empty() {
            let ev = evaluate(&model, &val, config)?;
            info!("epoch {epoch} validation loss {:.5} auc {:.4}", ev.loss, ev.auc);
            metrics.push(EpochMetrics {
                epoch,
                split: Split::Validation.as_str(),
                loss: ev.loss,
                auc: ev.auc,
                dispatch: ev.dispatch,
            });
        }
    }
    Ok(TrainOutcome {
        model,
        metrics,
        pseudo,
    })
}

/// Caches expert outputs for `samples` and trains.
pub fn train(
    samples: &[Sample],
    settings: ModelSettings,
    rule_table: RuleTable,
    config: &TrainingConfig,
    registry: &Registry,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let data = cache_samples(samples, registry, &settings.features)?;
    train_cached(&data, settings, rule_table, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{default_skill_matrix, generate, DatasetSpec};
    use crate::experts::{ExpertProfile, SignalModel};
    use crate::model::FusionMode;
    use crate::router::FeatureConfig;

    fn registry(nations: &[String]) -> Registry {
        let profiles = default_skill_matrix(3, nations, 0.9, 0.3)
            .into_iter()
            .enumerate()
            .map(|(i, skill)| ExpertProfile {
                id: i,
                name: format!("e{i}"),
                hidden_dim: 12 + 4 * i,
                skill,
                base_latency_us: 100,
                per_item_latency_us: 1,
                seed: 7 + i as u64,
            })
            .collect();
        Registry::build(profiles, &SignalModel::default()).unwrap()
    }

    fn settings(strategy: Strategy, nations: &[String]) -> ModelSettings {
        ModelSettings {
            strategy,
            fusion: FusionMode::Concat,
            k: 2,
            tau: 1.0 / 3.0,
            k_max: 2,
            gate_scaling: true,
            l2_normalize: false,
            features: FeatureConfig {
                text_buckets: 32,
                nations: nations.to_vec(),
            },
            dim: 8,
            head_hidden: 8,
        }
    }

    fn small() -> (Vec<Sample>, Registry, Vec<String>) {
        let spec = DatasetSpec {
            n_samples: 600,
            ..DatasetSpec::default()
        };
        let samples = generate(&spec).unwrap();
        let reg = registry(&spec.nations);
        (samples, reg, spec.nations)
    }

    fn quick() -> TrainingConfig {
        TrainingConfig {
            epochs: 2,
            probe_epochs: 1,
            router_epochs: 1,
            batch_size: 32,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (samples, reg, nations) = small();
        let a = train(&samples, settings(Strategy::Hard, &nations), RuleTable::default(), &quick(), &reg).unwrap();
        let b = train(&samples, settings(Strategy::Hard, &nations), RuleTable::default(), &quick(), &reg).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 4);
    }

    #[test]
    fn experts_stay_frozen() {
        let (samples, reg, nations) = small();
        let probe = &samples[5].request;
        let before: Vec<_> = reg.iter().map(|e| e.forward(probe).unwrap()).collect();
        train(&samples, settings(Strategy::Soft, &nations), RuleTable::default(), &quick(), &reg).unwrap();
        let after: Vec<_> = reg.iter().map(|e| e.forward(probe).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn rule_training_keeps_router_at_initialization() {
        let (samples, reg, nations) = small();
        let table = RuleTable(nations.iter().enumerate().map(|(i, n)| (n.clone(), i / 2)).collect());
        let out = train(&samples, settings(Strategy::Rule, &nations), table.clone(), &quick(), &reg).unwrap();
        let dims = reg.hidden_dims();
        let init = MoeModel::init(
            settings(Strategy::Rule, &nations),
            &dims,
            table,
            &mut Rng::derive(quick().seed, 0x1a17),
        )
        .unwrap();
        assert_eq!(out.model.router, init.router);
        assert_ne!(out.model.head, init.head);
    }

    #[test]
    fn pseudo_training_reports_label_shares() {
        let (samples, reg, nations) = small();
        let out = train(&samples, settings(Strategy::Pseudo, &nations), RuleTable::default(), &quick(), &reg).unwrap();
        let report = out.pseudo.unwrap();
        assert!((report.label_share.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((report.routed_share.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let reg = registry(&["ID".to_string()]);
        let err = train(&[], settings(Strategy::Hard, &["ID".to_string()]), RuleTable::default(), &quick(), &reg);
        assert!(matches!(err, Err(Error::EmptyDataset)));
    }

    #[test]
    fn evaluation_of_zero_model_is_chance() {
        let (samples, reg, nations) = small();
        let model = MoeModel::zeros(settings(Strategy::Hard, &nations), &reg.hidden_dims(), RuleTable::default()).unwrap();
        let data = cache_samples(&samples, &reg, &model.settings.features).unwrap();
        let refs: Vec<&CachedSample> = data.iter().collect();
        let ev = evaluate(&model, &refs, &quick()).unwrap();
        assert_eq!(ev.auc, 0.5);
        assert!((ev.loss - (std::f64::consts::LN_2 + 0.01)).abs() < 1e-12);
    }
}
