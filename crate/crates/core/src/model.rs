//! The complete routed model: router, rule table, projections and head,
//! with the single forward path used by training, evaluation and the batch
//! pipeline.
//!
//! # Checkpoint file
//!
//! A checkpoint is one JSON object:
//!
//! ```text
//! {"format":"moe-checkpoint","version":1,"model":{
//!   "settings":{...},
//!   "router":{"weight":{"rows":N,"cols":F,"data":[...]},"bias":[...]},
//!   "rule_table":{"ID":0,...},
//!   "projections":{"dim":d,"weights":[{"rows":d,"cols":d_i,"data":[...]},...],"biases":[[...],...]},
//!   "head":{"w_p":{"rows":m,"cols":w,"data":[...]},"b_p":[...],"w_c":[...],"b_c":x}}}
//! ```
//!
//! Matrices are row-major with their shape stored next to the data. Floats
//! are written in shortest round-trip form and parsed exactly, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{Registry, Request};
use crate::fusion::{concat_fuse, weighted_fuse, ClassifierHead, ProjectionLayer};
use crate::numeric::{dot, l2_norm, relu, sigmoid, Rng};
use crate::router::{
    featurize, route_hard_topk, route_pseudo, route_rule, route_soft, FeatureConfig,
    RouterFeatures, RouterParams, RoutingDecision, RuleTable, Strategy,
};

pub const CHECKPOINT_FORMAT: &str = "moe-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Concat,
    Weighted,
}

impl FusionMode {
    pub const ALL: [FusionMode; 2] = [FusionMode::Weighted, FusionMode::Concat];

    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Weighted => "weighted",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown fusion mode `{s}`")))
    }
}

/// Architecture and routing hyperparameters of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub strategy: Strategy,
    pub fusion: FusionMode,
    /// Slot budget: experts per request under hard routing.
    pub k: usize,
    /// Soft-routing activation threshold.
    pub tau: f64,
    /// Soft-routing cap on active experts.
    pub k_max: usize,
    pub gate_scaling: bool,
    pub l2_normalize: bool,
    pub features: FeatureConfig,
    /// Shared projection width `d`.
    pub dim: usize,
    /// Head hidden width `m`.
    pub head_hidden: usize,
}

impl ModelSettings {
    pub fn validate(&self, n_experts: usize) -> Result<()> {
        if n_experts == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        if self.k == 0 || self.k > n_experts {
            return Err(Error::Config(format!(
                "router.k = {} must lie in 1..={n_experts}",
                self.k
            )));
        }
        if self.k_max == 0 || self.k_max > self.k {
            return Err(Error::Config(format!(
                "router.k_max = {} must lie in 1..={} (the slot budget)",
                self.k_max, self.k
            )));
        }
        if self.strategy == Strategy::Soft && !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("router.tau = {} must lie in (0, 1)", self.tau)));
        }
        if self.dim == 0 || self.head_hidden == 0 || self.features.text_buckets == 0 {
            return Err(Error::Config(
                "fusion.dim, fusion.head_hidden and router.text_buckets must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Width of the head input.
    pub fn fused_width(&self) -> usize {
        match self.fusion {
            FusionMode::Concat => self.k * self.dim,
            FusionMode::Weighted => self.dim,
        }
    }
}

/// Everything the forward pass computed for one request, kept for the
/// backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub decision: RoutingDecision,
    /// Affine projection of each selected expert, before optional L2
    /// normalization, in selection order.
    pub raw: Vec<Vec<f64>>,
    /// The vectors actually fused.
    pub projected: Vec<Vec<f64>>,
    pub z: Vec<f64>,
    /// Head hidden pre-activation.
    pub pre: Vec<f64>,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeModel {
    pub settings: ModelSettings,
    pub router: RouterParams,
    pub rule_table: RuleTable,
    pub projections: ProjectionLayer,
    pub head: ClassifierHead,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    model: MoeModel,
}

impl MoeModel {
    /// Seeded initialization. Draw order: router, projections, head.
    pub fn init(
        settings: ModelSettings,
        hidden_dims: &[usize],
        rule_table: RuleTable,
        rng: &mut Rng,
    ) -> Result<Self> {
        settings.validate(hidden_dims.len())?;
        let router = RouterParams::init(hidden_dims.len(), settings.features.width(), rng);
        let projections = ProjectionLayer::init(hidden_dims, settings.dim, rng);
        let head = ClassifierHead::init(settings.fused_width(), settings.head_hidden, rng);
        Ok(Self {
            settings,
            router,
            rule_table,
            projections,
            head,
        })
    }

    /// All parameters zero.
    pub fn zeros(settings: ModelSettings, hidden_dims: &[usize], rule_table: RuleTable) -> Result<Self> {
        settings.validate(hidden_dims.len())?;
        Ok(Self {
            router: RouterParams::zeros(hidden_dims.len(), settings.features.width()),
            projections: ProjectionLayer::zeros(hidden_dims, settings.dim),
            head: ClassifierHead::zeros(settings.fused_width(), settings.head_hidden),
            settings,
            rule_table,
        })
    }

    pub fn n_experts(&self) -> usize {
        self.projections.n_experts()
    }

    pub fn fused_width(&self) -> usize {
        self.settings.fused_width()
    }

    pub fn featurize(&self, request: &Request) -> Result<RouterFeatures> {
        featurize(request, &self.settings.features)
    }

    /// Routing decision under the model's strategy.
    pub fn decide(&self, request: &Request, features: &RouterFeatures) -> Result<RoutingDecision> {
        self.decide_as(self.settings.strategy, request, features)
    }

    pub fn decide_as(
        &self,
        strategy: Strategy,
        request: &Request,
        features: &RouterFeatures,
    ) -> Result<RoutingDecision> {
        let s = &self.settings;
        match strategy {
            Strategy::Rule => route_rule(request, &self.rule_table, self.n_experts()),
            Strategy::Pseudo => route_pseudo(features, &self.router),
            Strategy::Soft => route_soft(features, &self.router, s.tau, s.k_max),
            Strategy::Hard => route_hard_topk(features, &self.router, s.k),
        }
    }

    pub fn route(&self, request: &Request) -> Result<RoutingDecision> {
        let features = self.featurize(request)?;
        self.decide(request, &features)
    }

    /// Projection, fusion and head for one routed request. `hidden` yields
    /// the expert's output vector, or `None` when it is unavailable.
    pub fn trace<'a>(
        &self,
        decision: RoutingDecision,
        hidden: impl Fn(usize) -> Option<&'a [f64]>,
    ) -> Result<Trace> {
        let s = &self.settings;
        let mut raw = Vec::with_capacity(decision.selected.len());
        let mut projected = Vec::with_capacity(decision.selected.len());
        let mut by_id = BTreeMap::new();
        for &(e, _) in &decision.selected {
            let h = hidden(e).ok_or(Error::UnknownExpert(e))?;
            let v = self.projections.project_hidden(e, h)?;
            let p = if s.l2_normalize {
                let n = l2_norm(&v);
                if n > 0.0 {
                    v.iter().map(|x| x / n).collect()
                } else {
                    v.clone()
                }
            } else {
                v.clone()
            };
            by_id.insert(e, p.clone());
            raw.push(v);
            projected.push(p);
        }
        let z = match s.fusion {
            FusionMode::Concat => concat_fuse(&decision, &by_id, s.k, s.gate_scaling)?.z,
            FusionMode::Weighted => weighted_fuse(&decision, &by_id)?,
        };
        let pre = self.head.hidden_pre(&z)?;
        let logit = dot(&self.head.w_c, &relu(&pre)) + self.head.b_c;
        Ok(Trace {
            decision,
            raw,
            projected,
            z,
            pre,
            logit,
        })
    }

    /// Runs the registry's experts for the routed set and traces the result.
    pub fn trace_request(&self, request: &Request, registry: &Registry) -> Result<Trace> {
        let decision = self.route(request)?;
        let outputs = decision
            .selected
            .iter()
            .map(|&(e, _)| Ok((e, registry.get(e)?.forward(request)?.hidden)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        self.trace(decision, |e| outputs.get(&e).map(Vec::as_slice))
    }

    /// Relevance probability for one request.
    pub fn predict(&self, request: &Request, registry: &Registry) -> Result<f64> {
        Ok(sigmoid(self.trace_request(request, registry)?.logit))
    }

    /// The fused representation fed to the head.
    pub fn embed_request(&self, request: &Request, registry: &Registry) -> Result<Vec<f64>> {
        Ok(self.trace_request(request, registry)?.z)
    }

    /// Shape and finiteness checks over every parameter block.
    pub fn validate(&self) -> Result<()> {
        let s = &self.settings;
        let n = self.n_experts();
        s.validate(n)?;
        let shape = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Checkpoint(format!("inconsistent shape for {what}")))
            }
        };
        let r = &self.router;
        shape(
            r.weight.shape_is_consistent()
                && r.weight.rows() == n
                && r.weight.cols() == s.features.width()
                && r.bias.len() == n,
            "router",
        )?;
        let p = &self.projections;
        shape(p.dim == s.dim && p.biases.len() == n, "projections")?;
        for (w, b) in p.weights.iter().zip(&p.biases) {
            shape(
                w.shape_is_consistent() && w.rows() == s.dim && b.len() == s.dim,
                "projections",
            )?;
        }
        let h = &self.head;
        shape(
            h.w_p.shape_is_consistent()
                && h.w_p.rows() == s.head_hidden
                && h.w_p.cols() == s.fused_width()
                && h.b_p.len() == s.head_hidden
                && h.w_c.len() == s.head_hidden,
            "head",
        )?;
        for &e in self.rule_table.0.values() {
            if e >= n {
                return Err(Error::UnknownExpert(e));
            }
        }
        self.check_finite()
    }

    pub fn check_finite(&self) -> Result<()> {
        let bad = |block: String| Err(Error::NonFinite { block });
        if !self.router.weight.is_finite() {
            return bad("router.weight".into());
        }
        if !self.router.bias.iter().all(|v| v.is_finite()) {
            return bad("router.bias".into());
        }
        for (e, (w, b)) in self
            .projections
            .weights
            .iter()
            .zip(&self.projections.biases)
            .enumerate()
        {
            if !w.is_finite() {
                return bad(format!("projections.weight[{e}]"));
            }
            if !b.iter().all(|v| v.is_finite()) {
                return bad(format!("projections.bias[{e}]"));
            }
        }
        let h = &self.head;
        if !h.w_p.is_finite() {
            return bad("head.w_p".into());
        }
        if !h.b_p.iter().all(|v| v.is_finite()) {
            return bad("head.b_p".into());
        }
        if !h.w_c.iter().all(|v| v.is_finite()) {
            return bad("head.w_c".into());
        }
        if !h.b_c.is_finite() {
            return bad("head.b_c".into());
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        };
        serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unexpected format `{}`", ckpt.format)));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.model.validate()?;
        Ok(ckpt.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::DEFAULT_NATIONS;
    use crate::fusion::classify;
    use crate::numeric::Matrix;

    pub(crate) fn settings(strategy: Strategy, fusion: FusionMode) -> ModelSettings {
        ModelSettings {
            strategy,
            fusion,
            k: 2,
            tau: 1.0 / 3.0,
            k_max: 2,
            gate_scaling: true,
            l2_normalize: false,
            features: FeatureConfig {
                text_buckets: 32,
                nations: DEFAULT_NATIONS.iter().map(|s| s.to_string()).collect(),
            },
            dim: 4,
            head_hidden: 5,
        }
    }

    fn rules() -> RuleTable {
        RuleTable(
            DEFAULT_NATIONS
                .iter()
                .enumerate()
                .map(|(i, n)| (n.to_string(), i / 2))
                .collect(),
        )
    }

    fn request() -> Request {
        Request {
            id: 3,
            query: "bako dibe".into(),
            title: "kodu bako".into(),
            nation: "TH".into(),
        }
    }

    #[test]
    fn fused_width_follows_fusion_mode() {
        assert_eq!(settings(Strategy::Hard, FusionMode::Concat).fused_width(), 8);
        assert_eq!(settings(Strategy::Hard, FusionMode::Weighted).fused_width(), 4);
    }

    #[test]
    fn settings_validation() {
        let mut s = settings(Strategy::Hard, FusionMode::Concat);
        assert!(s.validate(3).is_ok());
        assert!(s.validate(1).is_err());
        s.k_max = 3;
        assert!(s.validate(3).is_err());
        s.k_max = 2;
        s.tau = 1.0;
        assert!(s.validate(3).is_ok(), "tau only matters for soft routing");
        s.strategy = Strategy::Soft;
        assert!(s.validate(3).is_err());
    }

    #[test]
    fn rule_routing_uses_table() {
        let model = MoeModel::zeros(settings(Strategy::Rule, FusionMode::Concat), &[6, 6, 6], rules()).unwrap();
        let d = model.route(&request()).unwrap();
        assert_eq!(d.selected, vec![(2, 1.0)]);
    }

    #[test]
    fn single_expert_trace_matches_direct_classify() {
        let mut s = settings(Strategy::Hard, FusionMode::Weighted);
        s.k = 1;
        s.k_max = 1;
        let model = MoeModel::init(s, &[6], RuleTable::default(), &mut Rng::new(5)).unwrap();
        let h = vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25];
        let feats = model.featurize(&request()).unwrap();
        let d = model.decide(&request(), &feats).unwrap();
        let t = model.trace(d, |_| Some(h.as_slice())).unwrap();
        let direct = classify(&model.projections.project_hidden(0, &h).unwrap(), &model.head).unwrap();
        assert_eq!(sigmoid(t.logit), direct);
    }

    #[test]
    fn trace_reports_missing_output() {
        let model = MoeModel::init(
            settings(Strategy::Hard, FusionMode::Concat),
            &[6, 6, 6],
            rules(),
            &mut Rng::new(1),
        )
        .unwrap();
        let feats = model.featurize(&request()).unwrap();
        let d = model.decide(&request(), &feats).unwrap();
        assert!(matches!(model.trace(d, |_| None), Err(Error::UnknownExpert(_))));
    }

    #[test]
    fn l2_normalization_yields_unit_slots() {
        let mut s = settings(Strategy::Hard, FusionMode::Concat);
        s.l2_normalize = true;
        s.gate_scaling = false;
        let model = MoeModel::init(s, &[6, 6, 6], rules(), &mut Rng::new(2)).unwrap();
        let h = vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0];
        let feats = model.featurize(&request()).unwrap();
        let d = model.decide(&request(), &feats).unwrap();
        let t = model.trace(d, |_| Some(h.as_slice())).unwrap();
        for slot in t.z.chunks(4) {
            assert!((l2_norm(slot) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = MoeModel::init(
            settings(Strategy::Soft, FusionMode::Concat),
            &[6, 7, 8],
            rules(),
            &mut Rng::new(9),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        model.save(&path).unwrap();
        let back = MoeModel::load(&path).unwrap();
        let bits = |m: &MoeModel| -> Vec<u64> {
            let mut v: Vec<u64> = m.router.weight.as_slice().iter().map(|x| x.to_bits()).collect();
            for w in &m.projections.weights {
                v.extend(w.as_slice().iter().map(|x| x.to_bits()));
            }
            v.extend(m.head.w_p.as_slice().iter().map(|x| x.to_bits()));
            v.extend(m.head.w_c.iter().map(|x| x.to_bits()));
            v.push(m.head.b_c.to_bits());
            v
        };
        assert_eq!(bits(&model), bits(&back));
        assert_eq!(model, back);
    }

    #[test]
    fn checkpoint_rejects_bad_input() {
        let mut model = MoeModel::zeros(
            settings(Strategy::Hard, FusionMode::Weighted),
            &[6, 6, 6],
            rules(),
        )
        .unwrap();
        let text = model.to_json().unwrap();
        assert!(MoeModel::from_json(&text.replace("moe-checkpoint", "other")).is_err());
        assert!(MoeModel::from_json(&text.replace("\"version\":1", "\"version\":7")).is_err());
        assert!(MoeModel::from_json("{").is_err());

        model.head.w_p = Matrix::zeros(5, 3);
        assert!(MoeModel::from_json(&model.to_json().unwrap()).is_err());
    }

    #[test]
    fn non_finite_parameters_are_named() {
        let mut model = MoeModel::zeros(
            settings(Strategy::Hard, FusionMode::Weighted),
            &[6, 6, 6],
            rules(),
        )
        .unwrap();
        model.projections.biases[1][2] = f64::NAN;
        match model.check_finite() {
            Err(Error::NonFinite { block }) => assert_eq!(block, "projections.bias[1]"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
