//! Synthetic multilingual relevance corpus.
//!
//! Every nation writes in its own "language": tokens are consonant–vowel
//! syllables whose consonants come from a per-nation slice of the alphabet, so
//! the nation of a request is recoverable from its surface form. A relevant
//! pair plants a run of query tokens inside the title; an irrelevant title
//! avoids every query token.
//!
//! # Dataset file (JSON lines)
//!
//! One object per line, fields in this order, UTF-8, `\n` terminated:
//!
//! ```text
//! {"id":0,"query":"bako dibe","title":"kodu bako dibe kiba","nation":"ID","label":1}
//! ```
//!
//! `label` is `0` or `1`; ids are unique.
//!
//! # Embedding dump (CSV)
//!
//! Header `id,label,nation,e0,e1,…`, then one row per sample. The embedding
//! columns are the fused representation fed to the classifier head: `k·d`
//! values for concatenation fusion, `d` for weighted fusion. Floats use the
//! shortest representation that round-trips.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{Registry, Request};
use crate::model::MoeModel;
use crate::numeric::{hash_bytes, mix64, Rng};

pub const DEFAULT_NATIONS: [&str; 6] = ["ID", "MY", "PH", "SG", "TH", "VN"];

const CONSONANTS: &[u8] = b"bcdfghjklmnpqrstvwxyz";
const VOWELS: &[u8] = b"aeiou";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub request: Request,
    pub label: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_samples: usize,
    pub nations: Vec<String>,
    pub positive_rate: f64,
    /// Base seed for the per-nation vocabularies.
    pub vocab_seed: u64,
    pub vocab_size: usize,
    /// Probability that a sample's text agrees with its label.
    pub signal_strength: f64,
    /// Set from the engine-wide seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_samples: 50_000,
            nations: DEFAULT_NATIONS.iter().map(|s| s.to_string()).collect(),
            positive_rate: 0.5,
            vocab_seed: 17,
            vocab_size: 300,
            signal_strength: 1.0,
            seed: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("dataset.n_samples must be at least 1".into()));
        }
        if self.nations.is_empty() {
            return Err(Error::Config("dataset.nations must not be empty".into()));
        }
        if self.nations.len() > CONSONANTS.len() {
            return Err(Error::Config(format!(
                "at most {} nations are supported",
                CONSONANTS.len()
            )));
        }
        let unique: BTreeSet<_> = self.nations.iter().collect();
        if unique.len() != self.nations.len() {
            return Err(Error::Config("dataset.nations contains duplicates".into()));
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return Err(Error::Config("dataset.positive_rate must lie in (0, 1)".into()));
        }
        if !(self.signal_strength > 0.0 && self.signal_strength <= 1.0) {
            return Err(Error::Config("dataset.signal_strength must lie in (0, 1]".into()));
        }
        if self.vocab_size < 16 {
            return Err(Error::Config("dataset.vocab_size must be at least 16".into()));
        }
        Ok(())
    }
}

/// Skill matrix with complementary strengths: nation `i` of `n` is owned by
/// expert `i·N/n`, which gets `strong` there and `weak` everywhere else.
pub fn default_skill_matrix(
    n_experts: usize,
    nations: &[String],
    strong: f64,
    weak: f64,
) -> Vec<BTreeMap<String, f64>> {
    let n = nations.len();
    (0..n_experts)
        .map(|e| {
            nations
                .iter()
                .enumerate()
                .map(|(i, nation)| {
                    let owner = i * n_experts / n;
                    (nation.clone(), if owner == e { strong } else { weak })
                })
                .collect()
        })
        .collect()
}

fn nation_vocabulary(spec: &DatasetSpec, index: usize) -> Vec<String> {
    let n = spec.nations.len();
    let consonants: Vec<u8> = CONSONANTS
        .iter()
        .enumerate()
        .filter(|(j, _)| j % n == index)
        .map(|(_, &c)| c)
        .collect();
    let mut rng = Rng::derive(
        spec.vocab_seed,
        hash_bytes(0x70c, spec.nations[index].as_bytes()),
    );
    let mut seen = BTreeSet::new();
    let mut vocab = Vec::with_capacity(spec.vocab_size);
    while vocab.len() < spec.vocab_size {
        let syllables = 2 + rng.below(2);
        let mut tok = String::with_capacity(syllables * 2);
        for _ in 0..syllables {
            tok.push(consonants[rng.below(consonants.len())] as char);
            tok.push(VOWELS[rng.below(VOWELS.len())] as char);
        }
        if seen.insert(tok.clone()) {
            vocab.push(tok);
        }
    }
    vocab
}

fn draw_excluding(rng: &mut Rng, vocab: &[String], exclude: &BTreeSet<usize>) -> usize {
    loop {
        let i = rng.below(vocab.len());
        if !exclude.contains(&i) {
            return i;
        }
    }
}

/// Generates `spec.n_samples` samples with dense ids from 0.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    let vocabs: Vec<Vec<String>> = (0..spec.nations.len())
        .map(|i| nation_vocabulary(spec, i))
        .collect();
    let mut rng = Rng::derive(spec.seed, 0xda7a);
    let mut samples = Vec::with_capacity(spec.n_samples);
    for id in 0..spec.n_samples {
        let nation_idx = id % spec.nations.len();
        let vocab = &vocabs[nation_idx];
        let label = rng.bernoulli(spec.positive_rate);
        let faithful = spec.signal_strength >= 1.0 || rng.bernoulli(spec.signal_strength);
        let planted = label == faithful;

        let q_len = 2 + rng.below(3);
        let mut q_set = BTreeSet::new();
        let mut query = Vec::with_capacity(q_len);
        while query.len() < q_len {
            let i = draw_excluding(&mut rng, vocab, &q_set);
            q_set.insert(i);
            query.push(i);
        }

        let t_len = 4 + rng.below(4);
        let mut title: Vec<usize> = Vec::with_capacity(t_len + 2);
        if planted {
            let run = 1 + rng.below(2.min(q_len));
            let start = rng.below(q_len - run + 1);
            let fill = t_len.saturating_sub(run);
            for _ in 0..fill {
                title.push(draw_excluding(&mut rng, vocab, &q_set));
            }
            let at = rng.below(title.len() + 1);
            for (off, &tok) in query[start..start + run].iter().enumerate() {
                title.insert(at + off, tok);
            }
        } else {
            for _ in 0..t_len {
                title.push(draw_excluding(&mut rng, vocab, &q_set));
            }
        }

        let join = |ids: &[usize]| {
            ids.iter()
                .map(|&i| vocab[i].as_str())
                .collect::<Vec<_>>()
                .join(" ")
        };
        samples.push(Sample {
            request: Request {
                id: id as u64,
                query: join(&query),
                title: join(&title),
                nation: spec.nations[nation_idx].clone(),
            },
            label,
        });
    }
    Ok(samples)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    /// 80/10/10 assignment from a hash of the request id.
    pub fn of(request_id: u64) -> Split {
        match mix64(request_id ^ 0x5917_7a17) % 10 {
            0..=7 => Split::Train,
            8 => Split::Validation,
            _ => Split::Test,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

pub fn split_samples(samples: &[Sample], split: Split) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| Split::of(s.request.id) == split)
        .cloned()
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: u64,
    query: String,
    title: String,
    nation: String,
    label: u8,
}

pub fn write_jsonl(samples: &[Sample], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let rec = Record {
            id: s.request.id,
            query: s.request.query.clone(),
            title: s.request.title.clone(),
            nation: s.request.nation.clone(),
            label: u8::from(s.label),
        };
        let line = serde_json::to_string(&rec).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    let mut ids = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let rec: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let label = match rec.label {
            0 => false,
            1 => true,
            other => return Err(parse_err(format!("label must be 0 or 1, got {other}"))),
        };
        if !ids.insert(rec.id) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: duplicate id {}",
                path.display(),
                rec.id
            )));
        }
        samples.push(Sample {
            request: Request {
                id: rec.id,
                query: rec.query,
                title: rec.title,
                nation: rec.nation,
            },
            label,
        });
    }
    Ok(samples)
}

/// Writes the fused representation of every sample (see module docs).
pub fn dump_embeddings(
    samples: &[Sample],
    model: &MoeModel,
    registry: &Registry,
    path: &Path,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let width = model.fused_width();
    let mut header = String::from("id,label,nation");
    for j in 0..width {
        header.push_str(&format!(",e{j}"));
    }
    writeln!(w, "{header}").map_err(|e| Error::io(path, e))?;
    for s in samples {
        let z = model.embed_request(&s.request, registry)?;
        let mut row = format!("{},{},{}", s.request.id, u8::from(s.label), s.request.nation);
        for v in z {
            row.push(',');
            row.push_str(&v.to_string());
        }
        writeln!(w, "{row}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
