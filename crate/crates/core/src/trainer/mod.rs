//! Losses, hand-derived gradients, optimization and evaluation.

mod backward;
mod gradcheck;
mod loss;
mod metrics;
mod train;

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::experts::{Registry, Request};
use crate::router::{FeatureConfig, RouterFeatures, Strategy};

pub use backward::{backward, objective, sgd_step, BatchOutcome, GradientSet};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use loss::{cross_entropy, softmax_cross_entropy, total_loss};
pub use metrics::auc;
pub use train::{
    evaluate, probe_auc, train, train_cached, train_probes, EpochMetrics, Evaluation, Probe, PseudoReport, TrainOutcome,
};

/// Optimization hyperparameters. Architecture and routing settings live in
/// [`crate::model::ModelSettings`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Load-balancing coefficient under hard routing.
    pub lambda_lb: f64,
    /// Entropy coefficient under soft routing.
    pub lambda_entropy: f64,
    /// Load-balancing coefficient under soft routing.
    pub soft_lambda_lb: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs for each single-expert probe.
    pub probe_epochs: usize,
    pub probe_learning_rate: f64,
    /// Epochs for fitting the router to pseudo-labels.
    pub router_epochs: usize,
    pub router_learning_rate: f64,
    /// Set from the engine-wide seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_lb: 0.01,
            lambda_entropy: 0.01,
            soft_lambda_lb: 0.0,
            learning_rate: 0.05,
            batch_size: 128,
            epochs: 12,
            probe_epochs: 4,
            probe_learning_rate: 0.05,
            router_epochs: 4,
            router_learning_rate: 0.5,
            seed: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("training.lambda_lb", self.lambda_lb),
            ("training.lambda_entropy", self.lambda_entropy),
            ("training.soft_lambda_lb", self.soft_lambda_lb),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        let positive = [
            ("training.learning_rate", self.learning_rate),
            ("training.probe_learning_rate", self.probe_learning_rate),
            ("training.router_learning_rate", self.router_learning_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// `(λ_LB, λ_H)` applied under `strategy`. Only the end-to-end
    /// strategies carry router regularizers.
    pub fn coefficients(&self, strategy: Strategy) -> (f64, f64) {
        match strategy {
            Strategy::Hard => (self.lambda_lb, 0.0),
            Strategy::Soft => (self.soft_lambda_lb, self.lambda_entropy),
            Strategy::Rule | Strategy::Pseudo => (0.0, 0.0),
        }
    }
}

/// A sample with its router features and every expert's output
/// precomputed. Experts are frozen, so the cache stays valid for a whole
/// training run.
#[derive(Debug, Clone, PartialEq)]
pub struct CachedSample {
    pub request: Request,
    pub features: RouterFeatures,
    /// Indexed by expert id.
    pub hidden: Vec<Vec<f64>>,
    pub label: bool,
}

impl CachedSample {
    pub fn hidden_of(&self, expert: usize) -> Option<&[f64]> {
        self.hidden.get(expert).map(Vec::as_slice)
    }
}

pub fn cache_samples(
    samples: &[Sample],
    registry: &Registry,
    features: &FeatureConfig,
) -> Result<Vec<CachedSample>> {
    registry.ensure_dense_ids()?;
    samples
        .iter()
        .map(|s| {
            let hidden = registry
                .iter()
                .map(|e| e.forward(&s.request).map(|o| o.hidden))
                .collect::<Result<Vec<_>>>()?;
            Ok(CachedSample {
                features: crate::router::featurize(&s.request, features)?,
                request: s.request.clone(),
                hidden,
                label: s.label,
            })
        })
        .collect()
}
