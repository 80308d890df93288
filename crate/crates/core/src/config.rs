//! Engine configuration file (TOML) and command-line overrides.
//!
//! Every key has a default, so an empty file is a valid configuration;
//! `EngineConfig::default().to_toml()` prints the full schema. Overrides use
//! dotted paths, with numeric segments indexing arrays:
//! `router.k=1`, `experts.0.base_latency_us=5000`, `fusion.mode=weighted`.
//! An override value is parsed as a TOML literal when possible and taken as
//! a bare string otherwise.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{default_skill_matrix, DatasetSpec};
use crate::error::{Error, Result};
use crate::experts::{ExpertProfile, Registry, SignalModel};
use crate::model::{FusionMode, ModelSettings};
use crate::pipeline::BenchConfig;
use crate::router::{FeatureConfig, RuleTable, Strategy};
use crate::trainer::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertConfig {
    pub name: String,
    pub hidden_dim: usize,
    pub base_latency_us: u64,
    pub per_item_latency_us: u64,
    pub seed: u64,
    /// Explicit nation → skill map; defaults to the complementary matrix.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skill: Option<BTreeMap<String, f64>>,
}

/// Skill levels of the default complementary matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SkillConfig {
    pub strong: f64,
    pub weak: f64,
}

impl Default for SkillConfig {
    fn default() -> Self {
        Self {
            strong: 0.9,
            weak: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterConfig {
    pub strategy: Strategy,
    pub k: usize,
    /// Soft-routing threshold; `1/N` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    /// Soft-routing cap; `k` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    pub text_buckets: usize,
    /// Nation → expert name for rule routing; each nation goes to the
    /// expert owning it in the default skill matrix when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rules: Option<BTreeMap<String, String>>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Hard,
            k: 2,
            tau: None,
            k_max: None,
            text_buckets: 256,
            rules: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub dim: usize,
    pub head_hidden: usize,
    pub gate_scaling: bool,
    pub l2_normalize: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            mode: FusionMode::Concat,
            dim: 32,
            head_hidden: 64,
            gate_scaling: true,
            l2_normalize: false,
        }
    }
}

/// Default file locations, used when a command is not given explicit
/// paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub model: PathBuf,
    pub metrics: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data: "data.jsonl".into(),
            model: "model.json".into(),
            metrics: "metrics.csv".into(),
            out_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    /// Seeds data generation, parameter initialization, batch order and
    /// latency jitter.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub signal: SignalModel,
    pub skills: SkillConfig,
    pub experts: Vec<ExpertConfig>,
    pub router: RouterConfig,
    pub fusion: FusionConfig,
    pub training: TrainingConfig,
    pub pipeline: BenchConfig,
    pub paths: PathsConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        let expert = |name: &str, hidden_dim, base, per_item, seed| ExpertConfig {
            name: name.into(),
            hidden_dim,
            base_latency_us: base,
            per_item_latency_us: per_item,
            seed,
            skill: None,
        };
        Self {
            seed: 1,
            dataset: DatasetSpec::default(),
            signal: SignalModel::default(),
            skills: SkillConfig::default(),
            experts: vec![
                expert("alpha", 32, 1600, 16, 101),
                expert("beta", 48, 2400, 24, 202),
                expert("gamma", 64, 3200, 32, 303),
            ],
            router: RouterConfig::default(),
            fusion: FusionConfig::default(),
            training: TrainingConfig::default(),
            pipeline: BenchConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{text}` is not of the form key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{text}` has an empty key")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    Ok((key.split('.').map(str::to_string).collect(), value))
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value, full: &str) -> Result<()> {
    let (head, rest) = path.split_first().expect("non-empty path");
    let slot: &mut toml::Value = match root {
        toml::Value::Table(t) => {
            if rest.is_empty() {
                t.insert(head.clone(), value);
                return Ok(());
            }
            t.entry(head.clone())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        }
        toml::Value::Array(a) => {
            let i: usize = head
                .parse()
                .map_err(|_| Error::Config(format!("`{full}`: `{head}` is not an array index")))?;
            let len = a.len();
            let item = a
                .get_mut(i)
                .ok_or_else(|| Error::Config(format!("`{full}`: index {i} out of range ({len} entries)")))?;
            if rest.is_empty() {
                *item = value;
                return Ok(());
            }
            item
        }
        _ => return Err(Error::Config(format!("`{full}`: `{head}` is not inside a table"))),
    };
    set_path(slot, rest, value, full)
}

/// Overlays `top` on `base`: tables merge key by key, anything else
/// (arrays included) replaces the base value.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl EngineConfig {
    /// Parses a TOML document, applies `key=value` overrides, then
    /// validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let file = toml::from_str::<toml::Table>(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut root = toml::Value::try_from(EngineConfig::default()).expect("defaults serialize");
        merge(&mut root, toml::Value::Table(file));
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut root, &path, value, o)?;
        }
        let mut config: EngineConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.apply_seed(config.seed);
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Sets the engine seed and propagates it to every seeded section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.dataset.seed = seed;
        self.training.seed = seed;
        self.pipeline.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.training.validate()?;
        self.pipeline.validate()?;
        if self.experts.is_empty() {
            return Err(Error::Config("experts: at least one expert is required".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for e in &self.experts {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Config(format!("experts: duplicate name `{}`", e.name)));
            }
            if e.hidden_dim == 0 {
                return Err(Error::Config(format!("experts.{}.hidden_dim must be positive", e.name)));
            }
            if let Some(skill) = &e.skill {
                for n in &self.dataset.nations {
                    if !skill.contains_key(n) {
                        return Err(Error::Config(format!("experts.{}.skill has no entry for {n}", e.name)));
                    }
                }
            }
        }
        for (name, v) in [("skills.strong", self.skills.strong), ("skills.weak", self.skills.weak)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if let Some(rules) = &self.router.rules {
            for (nation, expert) in rules {
                if !names.contains(expert.as_str()) {
                    return Err(Error::Config(format!("router.rules.{nation}: unknown expert `{expert}`")));
                }
            }
        }
        self.model_settings()?.validate(self.experts.len())?;
        self.rule_table()?.validate(&self.dataset.nations, self.experts.len())
    }

    pub fn profiles(&self) -> Vec<ExpertProfile> {
        let defaults = default_skill_matrix(
            self.experts.len(),
            &self.dataset.nations,
            self.skills.strong,
            self.skills.weak,
        );
        self.experts
            .iter()
            .zip(defaults)
            .enumerate()
            .map(|(id, (e, default_skill))| ExpertProfile {
                id,
                name: e.name.clone(),
                hidden_dim: e.hidden_dim,
                skill: e.skill.clone().unwrap_or(default_skill),
                base_latency_us: e.base_latency_us,
                per_item_latency_us: e.per_item_latency_us,
                seed: e.seed,
            })
            .collect()
    }

    pub fn registry(&self) -> Result<Registry> {
        Registry::build(self.profiles(), &self.signal)
    }

    pub fn model_settings(&self) -> Result<ModelSettings> {
        let n = self.experts.len();
        let r = &self.router;
        Ok(ModelSettings {
            strategy: r.strategy,
            fusion: self.fusion.mode,
            k: r.k,
            tau: r.tau.unwrap_or(1.0 / n as f64),
            k_max: r.k_max.unwrap_or(r.k),
            gate_scaling: self.fusion.gate_scaling,
            l2_normalize: self.fusion.l2_normalize,
            features: FeatureConfig {
                text_buckets: r.text_buckets,
                nations: self.dataset.nations.clone(),
            },
            dim: self.fusion.dim,
            head_hidden: self.fusion.head_hidden,
        })
    }

    pub fn rule_table(&self) -> Result<RuleTable> {
        let n_experts = self.experts.len();
        let nations = &self.dataset.nations;
        match &self.router.rules {
            Some(rules) => rules
                .iter()
                .map(|(nation, name)| {
                    let id = self
                        .experts
                        .iter()
                        .position(|e| &e.name == name)
                        .ok_or_else(|| Error::Config(format!("router.rules.{nation}: unknown expert `{name}`")))?;
                    Ok((nation.clone(), id))
                })
                .collect::<Result<_>>()
                .map(RuleTable),
            None => Ok(RuleTable(
                nations
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (n.clone(), i * n_experts / nations.len()))
                    .collect(),
            )),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let c = EngineConfig::default();
        let text = c.to_toml();
        let back = EngineConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(EngineConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn overrides_reach_nested_and_indexed_keys() {
        let c = EngineConfig::from_toml_with(
            "",
            &[
                "router.k=1".into(),
                "fusion.mode=weighted".into(),
                "experts.2.base_latency_us=9".into(),
                "router.tau=0.4".into(),
                "seed=7".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.router.k, 1);
        assert_eq!(c.fusion.mode, FusionMode::Weighted);
        assert_eq!(c.experts[2].base_latency_us, 9);
        assert_eq!(c.model_settings().unwrap().tau, 0.4);
        assert_eq!((c.dataset.seed, c.training.seed, c.pipeline.seed), (7, 7, 7));
    }

    #[test]
    fn invalid_values_are_rejected_with_field_names() {
        let err = |o: &str| EngineConfig::from_toml_with("", &[o.to_string()]).unwrap_err().to_string();
        assert!(err("router.k=4").contains("router.k"));
        assert!(err("training.batch_size=0").contains("training.batch_size"));
        assert!(err("router.strategy=greedy").contains("greedy"));
        assert!(err("fusion.bogus=1").contains("bogus"));
        assert!(err("experts.9.seed=1").contains("out of range"));
        assert!(err("noequals").contains("key=value"));
        assert!(err("router.rules.ID=nobody").contains("nobody"));
    }

    #[test]
    fn default_rules_follow_skill_owners() {
        let c = EngineConfig::default();
        let table = c.rule_table().unwrap();
        let ids: Vec<usize> = c.dataset.nations.iter().map(|n| table.0[n]).collect();
        assert_eq!(ids, vec![0, 0, 1, 1, 2, 2]);
        let profiles = c.profiles();
        for (i, n) in c.dataset.nations.iter().enumerate() {
            assert_eq!(profiles[ids[i]].skill[n], 0.9);
        }
    }

    #[test]
    fn explicit_skills_override_defaults() {
        let c = EngineConfig::from_toml_with(
            "",
            &["experts.0.skill={ID=0.9,MY=0.9,PH=0.9,SG=0.9,TH=0.9,VN=0.9}".into()],
        )
        .unwrap();
        assert!(c.profiles()[0].skill.values().all(|&s| s == 0.9));
        let err = EngineConfig::from_toml_with("", &["experts.0.skill={ID=0.9}".into()]).unwrap_err();
        assert!(err.to_string().contains("no entry"));
    }
}
