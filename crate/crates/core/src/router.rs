//! Request featurization, the four routing strategies and the auxiliary
//! routing losses.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::Request;
use crate::numeric::{argmax, hash_bytes, softmax, Matrix, Rng};

const NGRAM: usize = 3;
const NGRAM_SEED: u64 = 0x3_6a3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Rule,
    Pseudo,
    Soft,
    Hard,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Rule, Strategy::Pseudo, Strategy::Soft, Strategy::Hard];

    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Rule => "rule",
            Strategy::Pseudo => "pseudo",
            Strategy::Soft => "soft",
            Strategy::Hard => "hard",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown routing strategy `{s}`")))
    }
}

/// Layout of the router input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub text_buckets: usize,
    pub nations: Vec<String>,
}

impl FeatureConfig {
    pub fn width(&self) -> usize {
        self.text_buckets + self.nations.len()
    }

    pub fn nation_index(&self, nation: &str) -> Option<usize> {
        self.nations.iter().position(|n| n == nation)
    }
}

/// Sparse router input: hashed character 3-gram counts of
/// `lower(q) | lower(t)` normalized to unit L2, followed by a nation one-hot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterFeatures {
    width: usize,
    /// Ascending column indices with their values.
    entries: Vec<(usize, f64)>,
}

impl RouterFeatures {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        for &(i, x) in &self.entries {
            v[i] = x;
        }
        v
    }
}

pub fn featurize(request: &Request, config: &FeatureConfig) -> Result<RouterFeatures> {
    let nation = config.nation_index(&request.nation).ok_or_else(|| {
        Error::Config(format!("nation {} is not in the feature layout", request.nation))
    })?;
    let text = format!(
        "{}|{}",
        request.query.to_lowercase(),
        request.title.to_lowercase()
    );
    let chars: Vec<char> = text.chars().collect();
    let mut counts: BTreeMap<usize, f64> = BTreeMap::new();
    let mut buf = String::new();
    for window in chars.windows(NGRAM) {
        buf.clear();
        buf.extend(window);
        let bucket = (hash_bytes(NGRAM_SEED, buf.as_bytes()) % config.text_buckets as u64) as usize;
        *counts.entry(bucket).or_insert(0.0) += 1.0;
    }
    let norm = counts.values().map(|c| c * c).sum::<f64>().sqrt();
    let mut entries: Vec<(usize, f64)> = counts
        .into_iter()
        .map(|(i, c)| (i, c / norm))
        .collect();
    entries.push((config.text_buckets + nation, 1.0));
    Ok(RouterFeatures {
        width: config.width(),
        entries,
    })
}

/// Single linear layer producing one logit per expert.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouterParams {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl RouterParams {
    pub fn zeros(n_experts: usize, width: usize) -> Self {
        Self {
            weight: Matrix::zeros(n_experts, width),
            bias: vec![0.0; n_experts],
        }
    }

    /// Uniform in `±1/√width`.
    pub fn init(n_experts: usize, width: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (width as f64).sqrt();
        Self {
            weight: Matrix::uniform(n_experts, width, bound, rng),
            bias: (0..n_experts).map(|_| rng.uniform(-bound, bound)).collect(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &RouterFeatures) -> Result<Vec<f64>> {
        if x.width() != self.weight.cols() {
            return Err(Error::Dimension {
                context: "router features",
                expected: self.weight.cols(),
                actual: x.width(),
            });
        }
        Ok((0..self.n_experts())
            .map(|e| {
                let row = self.weight.row(e);
                self.bias[e] + x.entries.iter().map(|&(i, v)| row[i] * v).sum::<f64>()
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    /// `(expert id, gate weight)` in ascending id order.
    pub selected: Vec<(usize, f64)>,
    pub full_probs: Vec<f64>,
    pub strategy: Strategy,
}

impl RoutingDecision {
    pub fn expert_ids(&self) -> Vec<usize> {
        self.selected.iter().map(|&(e, _)| e).collect()
    }

    pub fn contains(&self, expert: usize) -> bool {
        self.selected.iter().any(|&(e, _)| e == expert)
    }

    /// Argmax of the full distribution (ties to the lower id).
    pub fn top1(&self) -> usize {
        argmax(&self.full_probs)
    }
}

/// Nation code to expert id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RuleTable(pub BTreeMap<String, usize>);

impl RuleTable {
    pub fn validate(&self, nations: &[String], n_experts: usize) -> Result<()> {
        for n in nations {
            match self.0.get(n) {
                None => return Err(Error::Config(format!("rule table has no entry for nation {n}"))),
                Some(&e) if e >= n_experts => return Err(Error::UnknownExpert(e)),
                _ => {}
            }
        }
        Ok(())
    }
}

pub fn route_rule(request: &Request, table: &RuleTable, n_experts: usize) -> Result<RoutingDecision> {
    let &expert = table.0.get(&request.nation).ok_or_else(|| {
        Error::Config(format!("rule table has no entry for nation {}", request.nation))
    })?;
    if expert >= n_experts {
        return Err(Error::UnknownExpert(expert));
    }
    let mut full_probs = vec![0.0; n_experts];
    full_probs[expert] = 1.0;
    Ok(RoutingDecision {
        selected: vec![(expert, 1.0)],
        full_probs,
        strategy: Strategy::Rule,
    })
}

/// Indices ordered by probability descending, ties to the lower id.
fn ranked(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

fn renormalized(mut ids: Vec<usize>, probs: Vec<f64>, strategy: Strategy) -> RoutingDecision {
    ids.sort_unstable();
    let total: f64 = ids.iter().map(|&i| probs[i]).sum();
    let selected = ids.iter().map(|&i| (i, probs[i] / total)).collect();
    RoutingDecision {
        selected,
        full_probs: probs,
        strategy,
    }
}

/// Top-`k` selection over an already-normalized distribution.
pub fn select_top_k(probs: Vec<f64>, k: usize, strategy: Strategy) -> Result<RoutingDecision> {
    if k == 0 || k > probs.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must lie in 1..={}",
            probs.len()
        )));
    }
    let ids = ranked(&probs).into_iter().take(k).collect();
    Ok(renormalized(ids, probs, strategy))
}

/// Threshold selection: experts with `p > tau`, at most `k_max` of them
/// (highest first), falling back to the argmax when none qualifies.
pub fn select_threshold(probs: Vec<f64>, tau: f64, k_max: usize) -> Result<RoutingDecision> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau = {tau} must lie in (0, 1)")));
    }
    if k_max == 0 {
        return Err(Error::InvalidArgument("k_max must be at least 1".into()));
    }
    let order = ranked(&probs);
    let mut ids: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| probs[i] > tau)
        .take(k_max)
        .collect();
    if ids.is_empty() {
        ids.push(order[0]);
    }
    Ok(renormalized(ids, probs, Strategy::Soft))
}

pub fn route_hard_topk(
    features: &RouterFeatures,
    params: &RouterParams,
    k: usize,
) -> Result<RoutingDecision> {
    let probs = softmax(&params.logits(features)?);
    select_top_k(probs, k, Strategy::Hard)
}

pub fn route_soft(
    features: &RouterFeatures,
    params: &RouterParams,
    tau: f64,
    k_max: usize,
) -> Result<RoutingDecision> {
    let probs = softmax(&params.logits(features)?);
    select_threshold(probs, tau, k_max)
}

/// Router trained on pseudo-labels activates its single most likely expert.
pub fn route_pseudo(features: &RouterFeatures, params: &RouterParams) -> Result<RoutingDecision> {
    let probs = softmax(&params.logits(features)?);
    select_top_k(probs, 1, Strategy::Pseudo)
}

/// Argmin of per-expert losses, ties to the lower id.
pub fn pseudo_label_assign(per_expert_losses: &[f64]) -> usize {
    let mut best = 0;
    for (i, &l) in per_expert_losses.iter().enumerate().skip(1) {
        if l < per_expert_losses[best] {
            best = i;
        }
    }
    best
}

/// Batch statistics for the load-balancing loss.
///
/// `dispatch_frac[i]` counts top-1 assignments only, so it sums to 1 for
/// any `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadBalanceStats {
    pub dispatch_frac: Vec<f64>,
    pub mean_prob: Vec<f64>,
}

impl LoadBalanceStats {
    pub fn from_probs<'a>(probs: impl IntoIterator<Item = &'a [f64]>, n_experts: usize) -> Self {
        let mut counts = vec![0usize; n_experts];
        let mut sums = vec![0.0; n_experts];
        let mut n = 0usize;
        for p in probs {
            counts[argmax(p)] += 1;
            for (s, &v) in sums.iter_mut().zip(p) {
                *s += v;
            }
            n += 1;
        }
        let denom = n.max(1) as f64;
        Self {
            dispatch_frac: counts.into_iter().map(|c| c as f64 / denom).collect(),
            mean_prob: sums.into_iter().map(|s| s / denom).collect(),
        }
    }

    pub fn n_experts(&self) -> usize {
        self.mean_prob.len()
    }
}

/// `N · Σ f_i · P_i`.
pub fn load_balance_loss(stats: &LoadBalanceStats) -> f64 {
    let n = stats.n_experts() as f64;
    n * stats
        .dispatch_frac
        .iter()
        .zip(&stats.mean_prob)
        .map(|(f, p)| f * p)
        .sum::<f64>()
}

/// Shannon entropy in nats with `0 · ln 0 = 0`.
pub fn entropy_regularizer(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}
