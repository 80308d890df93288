use std::fs;

use moe_core::config::EngineConfig;
use moe_core::datagen::{dump_embeddings, generate, read_jsonl, write_jsonl};
use moe_core::model::{FusionMode, MoeModel};
use moe_core::numeric::Rng;
use moe_core::pipeline::{registry_backends, run_batch, ExecMode, ExecOptions, StageCosts};
use moe_core::trainer::train;

fn config() -> EngineConfig {
    let mut c = EngineConfig::default();
    c.dataset.n_samples = 3000;
    c.training.epochs = 2;
    c
}

fn header_width(path: &std::path::Path) -> (usize, usize) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let cols = lines.next().unwrap().split(',').count();
    let rows = lines.count();
    (rows, cols)
}

#[test]
fn embedding_dump_layout() {
    let dir = tempfile::tempdir().unwrap();
    let c = config();
    let registry = c.registry().unwrap();
    let samples: Vec<_> = generate(&c.dataset).unwrap().into_iter().take(100).collect();
    let mut widths = Vec::new();
    for fusion in [FusionMode::Concat, FusionMode::Weighted] {
        let mut settings = c.model_settings().unwrap();
        settings.fusion = fusion;
        let model = MoeModel::init(settings, &registry.hidden_dims(), c.rule_table().unwrap(), &mut Rng::new(4)).unwrap();
        let a = dir.path().join(format!("{fusion}-a.csv"));
        let b = dir.path().join(format!("{fusion}-b.csv"));
        dump_embeddings(&samples, &model, &registry, &a).unwrap();
        dump_embeddings(&samples, &model, &registry, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        let (rows, cols) = header_width(&a);
        assert_eq!(rows, 100);
        widths.push(cols - 3);
    }
    assert_eq!(widths, vec![64, 32]);
}

#[test]
fn dataset_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let samples = generate(&config().dataset).unwrap();
    write_jsonl(&samples, &path).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), samples);
}

#[test]
fn checkpoint_and_pipeline_agree_with_direct_scoring() {
    let dir = tempfile::tempdir().unwrap();
    let c = config();
    let registry = c.registry().unwrap();
    let samples = generate(&c.dataset).unwrap();
    let model = train(&samples, c.model_settings().unwrap(), c.rule_table().unwrap(), &c.training, &registry)
        .unwrap()
        .model;
    let path = dir.path().join("model.json");
    model.save(&path).unwrap();
    let loaded = MoeModel::load(&path).unwrap();
    assert_eq!(loaded, model);

    let requests: Vec<_> = samples.iter().take(500).map(|s| s.request.clone()).collect();
    let backends = registry_backends(&registry);
    for (mode, shuffle) in [(ExecMode::Serial, None), (ExecMode::Parallel, Some(11))] {
        let options = ExecOptions {
            mode,
            shuffle_seed: shuffle,
            ..ExecOptions::default()
        };
        let mut rng = Rng::new(2);
        for chunk in requests.chunks(64) {
            let run = run_batch(chunk, &loaded, &backends, &options, &StageCosts::default(), &mut rng).unwrap();
            for r in chunk {
                let direct = model.predict(r, &registry).unwrap();
                assert_eq!(run.scores[&r.id].to_bits(), direct.to_bits(), "request {}", r.id);
            }
        }
    }
}

#[test]
fn default_config_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("engine.toml");
    fs::write(&path, EngineConfig::default().to_toml()).unwrap();
    let loaded = EngineConfig::load(&path, &["fusion.mode=weighted".to_string()]).unwrap();
    let mut expected = EngineConfig::default();
    expected.fusion.mode = FusionMode::Weighted;
    assert_eq!(loaded, expected);
}
