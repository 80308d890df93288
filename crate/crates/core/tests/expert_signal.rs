use std::collections::BTreeSet;

use moe_core::config::EngineConfig;
use moe_core::datagen::{generate, DatasetSpec, Split};
use moe_core::experts::relevance_evidence;
use moe_core::trainer::{auc, cache_samples, probe_auc, train_probes, CachedSample};

fn small_config(n: usize) -> EngineConfig {
    let mut c = EngineConfig::default();
    c.dataset.n_samples = n;
    c.apply_seed(3);
    c
}

fn by_split<'a>(data: &'a [CachedSample], s: Split, nation: Option<&str>) -> Vec<&'a CachedSample> {
    data.iter()
        .filter(|x| Split::of(x.request.id) == s && nation.is_none_or(|n| x.request.nation == n))
        .collect()
}

#[test]
fn planted_overlap_recovers_labels() {
    let samples = generate(&DatasetSpec {
        n_samples: 5000,
        ..DatasetSpec::default()
    })
    .unwrap();
    let scores: Vec<f64> = samples
        .iter()
        .map(|s| relevance_evidence(&s.request.query, &s.request.title))
        .collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label).collect();
    let a = auc(&scores, &labels).unwrap();
    assert!(a > 0.9, "overlap AUC {a}");
}

#[test]
fn probe_auc_grows_with_skill() {
    let nation = "TH";
    let mut aucs = Vec::new();
    for skill in [0.1, 0.9] {
        let mut c = small_config(12_000);
        let mut table = c.profiles()[0].skill.clone();
        table.insert(nation.to_string(), skill);
        c.experts[0].skill = Some(table);
        let registry = c.registry().unwrap();
        let samples = generate(&c.dataset).unwrap();
        let data = cache_samples(&samples, &registry, &c.model_settings().unwrap().features).unwrap();
        let train = by_split(&data, Split::Train, Some(nation));
        let test = by_split(&data, Split::Test, Some(nation));
        let probes = train_probes(&train, &registry.hidden_dims(), c.fusion.dim, &c.training).unwrap();
        aucs.push(probe_auc(&probes[0], &test).unwrap());
    }
    assert!(aucs[1] > aucs[0], "skill 0.1 → {}, skill 0.9 → {}", aucs[0], aucs[1]);
}

#[test]
fn best_single_expert_differs_across_nations() {
    let c = small_config(20_000);
    let registry = c.registry().unwrap();
    let samples = generate(&c.dataset).unwrap();
    let data = cache_samples(&samples, &registry, &c.model_settings().unwrap().features).unwrap();
    let probes = train_probes(
        &by_split(&data, Split::Train, None),
        &registry.hidden_dims(),
        c.fusion.dim,
        &c.training,
    )
    .unwrap();
    let profiles = c.profiles();
    let mut best_ids = BTreeSet::new();
    for nation in &c.dataset.nations {
        let test = by_split(&data, Split::Test, Some(nation));
        let aucs: Vec<f64> = probes.iter().map(|p| probe_auc(p, &test).unwrap()).collect();
        let best = (0..aucs.len()).max_by(|&a, &b| aucs[a].total_cmp(&aucs[b])).unwrap();
        assert_eq!(profiles[best].skill[nation], c.skills.strong, "{nation}: {aucs:?}");
        best_ids.insert(best);
    }
    assert_eq!(best_ids.len(), 3);
}
