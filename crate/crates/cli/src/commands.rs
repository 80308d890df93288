use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::info;

use moe_core::config::EngineConfig;
use moe_core::datagen::{self, Sample, Split};
use moe_core::experts::Registry;
use moe_core::model::{FusionMode, MoeModel};
use moe_core::pipeline::{qps_bench, ClockKind, ExecMode};
use moe_core::router::Strategy;
use moe_core::trainer::{self, cache_samples, CachedSample, EpochMetrics};
use moe_core::Error;

/// A bad invocation or configuration, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::InvalidArgument(_)) => 1,
        _ => 2,
    }
}

pub fn default_config_text() -> String {
    EngineConfig::default().to_toml()
}

pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> anyhow::Result<EngineConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut config = EngineConfig::from_toml_with(&text, overrides)?;
    if let Some(seed) = seed {
        config.apply_seed(seed);
    }
    Ok(config)
}

fn write_file(path: &Path, contents: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn read_data(config: &EngineConfig, data: Option<PathBuf>) -> anyhow::Result<Vec<Sample>> {
    let path = data.unwrap_or_else(|| config.paths.data.clone());
    let samples = datagen::read_jsonl(&path)?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    Ok(samples)
}

fn load_model(config: &EngineConfig, model: Option<PathBuf>, registry: &Registry) -> anyhow::Result<MoeModel> {
    let path = model.unwrap_or_else(|| config.paths.model.clone());
    let model = MoeModel::load(&path)?;
    if model.projections.weights.iter().map(|w| w.cols()).ne(registry.hidden_dims()) {
        return Err(UsageError(format!(
            "{} was trained for different experts than the configured ones",
            path.display()
        ))
        .into());
    }
    Ok(model)
}

fn split_refs(data: &[CachedSample], split: Split) -> Vec<&CachedSample> {
    data.iter().filter(|s| Split::of(s.request.id) == split).collect()
}

pub fn gen_data(config: &EngineConfig, out: Option<PathBuf>) -> anyhow::Result<()> {
    let path = out.unwrap_or_else(|| config.paths.data.clone());
    let samples = datagen::generate(&config.dataset)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    datagen::write_jsonl(&samples, &path)?;
    info!("wrote {} samples to {}", samples.len(), path.display());
    Ok(())
}

fn metrics_csv(rows: &[EpochMetrics], registry: &Registry) -> String {
    let mut s = String::from("epoch,split,loss,auc");
    for e in registry.iter() {
        write!(s, ",dispatch_{}", e.profile().name).unwrap();
    }
    s.push('\n');
    for r in rows {
        write!(s, "{},{},{},{}", r.epoch, r.split, r.loss, r.auc).unwrap();
        for d in &r.dispatch {
            write!(s, ",{d}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn train(
    config: &EngineConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    metrics: Option<PathBuf>,
    untrained: bool,
) -> anyhow::Result<()> {
    let registry = config.registry()?;
    let settings = config.model_settings()?;
    let model_path = out.unwrap_or_else(|| config.paths.model.clone());
    let model = if untrained {
        MoeModel::zeros(settings, &registry.hidden_dims(), config.rule_table()?)?
    } else {
        let samples = read_data(config, data)?;
        let outcome = trainer::train(&samples, settings, config.rule_table()?, &config.training, &registry)?;
        let metrics_path = metrics.unwrap_or_else(|| config.paths.metrics.clone());
        write_file(&metrics_path, &metrics_csv(&outcome.metrics, &registry))?;
        outcome.model
    };
    if let Some(dir) = model_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    model.save(&model_path)?;
    info!("wrote model to {}", model_path.display());
    Ok(())
}

fn fmt_auc(a: Option<f64>) -> String {
    a.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"))
}

pub fn eval(
    config: &EngineConfig,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let registry = config.registry()?;
    let model = load_model(config, model, &registry)?;
    let samples = read_data(config, data)?;
    let cached = cache_samples(&samples, &registry, &model.settings.features)?;
    let test = split_refs(&cached, Split::Test);
    if test.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let ev = trainer::evaluate(&model, &test, &config.training)?;

    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<bool>)> = BTreeMap::new();
    for (s, &logit) in test.iter().zip(&ev.logits) {
        let g = groups.entry(s.request.nation.as_str()).or_default();
        g.0.push(logit);
        g.1.push(s.label);
    }
    let mut rows = vec![("all".to_string(), test.len(), Some(ev.auc))];
    for (nation, (scores, labels)) in &groups {
        let auc = match trainer::auc(scores, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e.into()),
        };
        rows.push((nation.to_string(), scores.len(), auc));
    }

    let mut table = format!("{:<8} {:>7} {:>8}\n", "nation", "n", "auc");
    let mut csv = String::from("nation,n,auc\n");
    for (nation, n, auc) in &rows {
        writeln!(table, "{nation:<8} {n:>7} {:>8}", fmt_auc(*auc)).unwrap();
        writeln!(csv, "{nation},{n},{}", auc.map_or_else(|| "nan".to_string(), |v| v.to_string())).unwrap();
    }
    print!("{table}");
    if let Some(path) = out {
        write_file(&path, &csv)?;
    }
    Ok(())
}

pub fn bench(
    config: &EngineConfig,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let registry = config.registry()?;
    let model = load_model(config, model, &registry)?;
    let samples = read_data(config, data)?;
    let requests: Vec<_> = samples.into_iter().map(|s| s.request).collect();
    let report = qps_bench(&requests, &model, &registry, &config.pipeline)?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        write_file(&path, &report.to_csv())?;
    }
    Ok(())
}

/// Routing column of the ablation grid: a strategy plus the execution mode
/// used for its throughput measurement.
const CELLS: [(&str, Strategy, ExecMode); 5] = [
    ("rule", Strategy::Rule, ExecMode::Parallel),
    ("pseudo", Strategy::Pseudo, ExecMode::Parallel),
    ("soft", Strategy::Soft, ExecMode::Parallel),
    ("hard", Strategy::Hard, ExecMode::Parallel),
    ("serial-hard", Strategy::Hard, ExecMode::Serial),
];

pub fn ablate(config: &EngineConfig, data: Option<PathBuf>, out: Option<PathBuf>) -> anyhow::Result<()> {
    let dir = out.unwrap_or_else(|| config.paths.out_dir.clone());
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let registry = config.registry()?;
    let samples = read_data(config, data)?;
    let base = config.model_settings()?;
    let cached = cache_samples(&samples, &registry, &base.features)?;
    let test = split_refs(&cached, Split::Test);
    if test.is_empty() {
        return Err(Error::EmptyDataset.into());
    }
    let requests: Vec<_> = samples.into_iter().map(|s| s.request).collect();
    let mut bench = config.pipeline.clone();
    bench.clock = ClockKind::Virtual;

    let mut csv = String::from("fusion,routing,test_auc,qps\n");
    let mut table = format!("{:<9} {:<12} {:>9} {:>12}\n", "fusion", "routing", "test_auc", "qps");
    for fusion in [FusionMode::Weighted, FusionMode::Concat] {
        let mut trained: BTreeMap<&str, (MoeModel, f64)> = BTreeMap::new();
        for (name, strategy, mode) in CELLS {
            let key = strategy.as_str();
            if !trained.contains_key(key) {
                info!("training {fusion}/{strategy}");
                let mut settings = base.clone();
                settings.fusion = fusion;
                settings.strategy = strategy;
                let outcome = trainer::train_cached(&cached, settings, config.rule_table()?, &config.training)?;
                let auc = trainer::evaluate(&outcome.model, &test, &config.training)?.auc;
                trained.insert(key, (outcome.model, auc));
            }
            let (model, auc) = &trained[key];
            bench.mode = mode;
            let qps = qps_bench(&requests, model, &registry, &bench)?.qps;
            writeln!(csv, "{fusion},{name},{auc},{qps}").unwrap();
            writeln!(table, "{:<9} {name:<12} {auc:>9.4} {qps:>12.2}", fusion.as_str()).unwrap();
        }
    }

    let probes = trainer::train_probes(
        &split_refs(&cached, Split::Train),
        &registry.hidden_dims(),
        base.dim,
        &config.training,
    )?;
    let mut probe_csv = String::from("expert,test_auc\n");
    for p in &probes {
        let auc = trainer::probe_auc(p, &test)?;
        let name = &registry.profile(p.expert)?.name;
        writeln!(probe_csv, "{name},{auc}").unwrap();
        writeln!(table, "{:<9} {:<12} {auc:>9.4}", "single", name).unwrap();
    }

    print!("{table}");
    write_file(&dir.join("ablation.csv"), &csv)?;
    write_file(&dir.join("single_experts.csv"), &probe_csv)?;
    Ok(())
}

pub fn dump_embeddings(
    config: &EngineConfig,
    model: Option<PathBuf>,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let registry = config.registry()?;
    let model = load_model(config, model, &registry)?;
    let samples = read_data(config, data)?;
    let test = datagen::split_samples(&samples, Split::Test);
    let path = out.unwrap_or_else(|| config.paths.out_dir.join("embeddings.csv"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    datagen::dump_embeddings(&test, &model, &registry, &path)?;
    info!("wrote {} embeddings to {}", test.len(), path.display());
    Ok(())
}
