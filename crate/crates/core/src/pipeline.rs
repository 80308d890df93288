//! Three-stage batch inference: bulk routing, expert-specific batch
//! execution, late fusion.
//!
//! Stage 2 runs each expert's batch on its own worker (parallel mode) or
//! all batches one after another on the calling thread (serial mode).
//! Outputs land in per-expert buffers and are merged at a barrier in
//! `(expert id, request id)` order, so stage 3 sees the same inputs in the
//! same order whichever mode or completion order occurred.
//!
//! Time is measured on one of two clocks. The virtual clock charges every
//! expert batch its affine latency, taking the maximum across experts in
//! parallel mode (one device per expert) and the sum in serial mode, plus a
//! per-item cost for routing and for fusion. The wall clock measures real
//! elapsed time, optionally sleeping for the modeled latency.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{simulate_latency, simulate_latency_jittered, MockExpert, Registry, Request};
use crate::model::MoeModel;
use crate::numeric::{sigmoid, Rng};
use crate::router::RoutingDecision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    Parallel,
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    Virtual,
    Wall,
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $name:literal),* }) => {
        impl $ty {
            pub fn as_str(&self) -> &'static str {
                match self { $($ty::$variant => $name),* }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    _ => Err(Error::Config(format!(concat!("unknown ", stringify!($ty), " `{}`"), s))),
                }
            }
        }
    };
}

string_enum!(ExecMode { Parallel => "parallel", Serial => "serial" });
string_enum!(ClockKind { Virtual => "virtual", Wall => "wall" });

/// One routing decision per request of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTable {
    pub decisions: BTreeMap<u64, RoutingDecision>,
}

pub fn bulk_route(batch: &[Request], model: &MoeModel) -> Result<RoutingTable> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("cannot route an empty batch".into()));
    }
    let mut decisions = BTreeMap::new();
    for r in batch {
        if decisions.insert(r.id, model.route(r)?).is_some() {
            return Err(Error::Validation(format!("request id {} appears twice in a batch", r.id)));
        }
    }
    Ok(RoutingTable { decisions })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertBatch {
    pub expert_id: usize,
    /// Ascending.
    pub request_ids: Vec<u64>,
}

/// Groups requests by selected expert; batches come out in ascending
/// expert id.
pub fn build_expert_batches(table: &RoutingTable) -> Vec<ExpertBatch> {
    let mut groups: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (&id, decision) in &table.decisions {
        for &(e, _) in &decision.selected {
            groups.entry(e).or_default().push(id);
        }
    }
    groups
        .into_iter()
        .map(|(expert_id, request_ids)| ExpertBatch {
            expert_id,
            request_ids,
        })
        .collect()
}

/// Something that turns a batch of requests into hidden vectors.
pub trait ExpertBackend: Sync {
    fn id(&self) -> usize;

    /// One hidden vector per request, in input order.
    fn run_batch(&self, requests: &[&Request]) -> Result<Vec<Vec<f64>>>;

    /// Modeled latency of a batch, in microseconds.
    fn latency_us(&self, batch_size: usize) -> Result<u64>;

    /// Modeled latency with a seeded relative perturbation.
    fn jittered_latency_us(&self, batch_size: usize, jitter: f64, rng: &mut Rng) -> Result<u64> {
        let _ = (jitter, rng);
        self.latency_us(batch_size)
    }
}

impl ExpertBackend for MockExpert {
    fn id(&self) -> usize {
        MockExpert::id(self)
    }

    fn run_batch(&self, requests: &[&Request]) -> Result<Vec<Vec<f64>>> {
        requests.iter().map(|r| self.forward(r).map(|o| o.hidden)).collect()
    }

    fn latency_us(&self, batch_size: usize) -> Result<u64> {
        simulate_latency(self.profile(), batch_size)
    }

    fn jittered_latency_us(&self, batch_size: usize, jitter: f64, rng: &mut Rng) -> Result<u64> {
        simulate_latency_jittered(self.profile(), batch_size, jitter, rng)
    }
}

/// Stage-2 execution settings.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecOptions {
    pub mode: ExecMode,
    pub clock: ClockKind,
    /// Relative latency jitter; 0 disables it.
    pub jitter: f64,
    /// Sleep for the modeled latency (wall clock only).
    pub emulate_latency: bool,
    /// When set, dispatch order is shuffled and workers stall for seeded
    /// random intervals, exercising arbitrary completion orders.
    pub shuffle_seed: Option<u64>,
}

impl Default for ExecOptions {
    fn default() -> Self {
        Self {
            mode: ExecMode::Parallel,
            clock: ClockKind::Virtual,
            jitter: 0.0,
            emulate_latency: false,
            shuffle_seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutcome {
    pub outputs: BTreeMap<(u64, usize), Vec<f64>>,
    /// `(request id, expert id, reason)` for every failed pair.
    pub failed: Vec<(u64, usize, String)>,
    /// Stage-2 duration: virtual microseconds or measured wall microseconds.
    pub elapsed_us: f64,
    /// Modeled latency of each expert's batch, by expert id.
    pub busy_us: BTreeMap<usize, u64>,
}

struct BatchResult {
    expert_id: usize,
    request_ids: Vec<u64>,
    outputs: Result<Vec<Vec<f64>>>,
}

fn run_one(
    batch: &ExpertBatch,
    backend: &dyn ExpertBackend,
    requests: &BTreeMap<u64, &Request>,
    sleep: Option<Duration>,
    stall: Option<Duration>,
) -> BatchResult {
    if let Some(d) = stall {
        thread::sleep(d);
    }
    let outputs = batch
        .request_ids
        .iter()
        .map(|id| {
            requests
                .get(id)
                .copied()
                .ok_or_else(|| Error::Validation(format!("request {id} missing from batch")))
        })
        .collect::<Result<Vec<&Request>>>()
        .and_then(|rs| backend.run_batch(&rs));
    if let Some(d) = sleep {
        thread::sleep(d);
    }
    BatchResult {
        expert_id: batch.expert_id,
        request_ids: batch.request_ids.clone(),
        outputs,
    }
}

/// Runs every expert batch and merges the outputs.
pub fn execute(
    batches: &[ExpertBatch],
    requests: &[Request],
    backends: &[&dyn ExpertBackend],
    options: &ExecOptions,
    rng: &mut Rng,
) -> Result<ExecOutcome> {
    let by_id: BTreeMap<u64, &Request> = requests.iter().map(|r| (r.id, r)).collect();
    let backend_of = |e: usize| -> Result<&dyn ExpertBackend> {
        backends
            .iter()
            .copied()
            .find(|b| b.id() == e)
            .ok_or(Error::UnknownExpert(e))
    };

    let mut busy_us = BTreeMap::new();
    for b in batches {
        let backend = backend_of(b.expert_id)?;
        let lat = if options.jitter > 0.0 {
            backend.jittered_latency_us(b.request_ids.len(), options.jitter, rng)?
        } else {
            backend.latency_us(b.request_ids.len())?
        };
        busy_us.insert(b.expert_id, lat);
    }
    let virtual_us = match options.mode {
        ExecMode::Parallel => busy_us.values().copied().max().unwrap_or(0),
        ExecMode::Serial => busy_us.values().sum(),
    };

    let mut order: Vec<usize> = (0..batches.len()).collect();
    let mut stalls = vec![None; batches.len()];
    if let Some(seed) = options.shuffle_seed {
        let mut srng = Rng::derive(seed, rng.next_u64());
        srng.shuffle(&mut order);
        for s in stalls.iter_mut() {
            *s = Some(Duration::from_micros(srng.below(300) as u64));
        }
    }
    let sleep_for = |b: &ExpertBatch| -> Option<Duration> {
        (options.emulate_latency && options.clock == ClockKind::Wall)
            .then(|| Duration::from_micros(busy_us[&b.expert_id]))
    };

    let started = Instant::now();
    let mut results: Vec<BatchResult> = match options.mode {
        ExecMode::Serial => order
            .iter()
            .map(|&i| {
                let b = &batches[i];
                Ok(run_one(b, backend_of(b.expert_id)?, &by_id, sleep_for(b), stalls[i]))
            })
            .collect::<Result<_>>()?,
        ExecMode::Parallel => {
            let jobs = order
                .iter()
                .map(|&i| Ok((i, backend_of(batches[i].expert_id)?)))
                .collect::<Result<Vec<_>>>()?;
            thread::scope(|scope| {
                let handles: Vec<_> = jobs
                    .into_iter()
                    .map(|(i, backend)| {
                        let b = &batches[i];
                        let by_id = &by_id;
                        let sleep = sleep_for(b);
                        let stall = stalls[i];
                        scope.spawn(move || run_one(b, backend, by_id, sleep, stall))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("expert worker panicked"))
                    .collect()
            })
        }
    };
    let wall_us = started.elapsed().as_secs_f64() * 1e6;

    // Barrier passed: merge in (expert id, request id) order.
    results.sort_by_key(|r| r.expert_id);
    let mut outputs = BTreeMap::new();
    let mut failed = Vec::new();
    for r in results {
        match r.outputs {
            Ok(vectors) => {
                for (id, h) in r.request_ids.into_iter().zip(vectors) {
                    outputs.insert((id, r.expert_id), h);
                }
            }
            Err(e) => {
                let reason = e.to_string();
                failed.extend(r.request_ids.into_iter().map(|id| (id, r.expert_id, reason.clone())));
            }
        }
    }
    failed.sort_by_key(|f| (f.0, f.1));
    Ok(ExecOutcome {
        outputs,
        failed,
        elapsed_us: match options.clock {
            ClockKind::Virtual => virtual_us as f64,
            ClockKind::Wall => wall_us,
        },
        busy_us,
    })
}

/// Scores every request whose selected experts all produced outputs.
pub fn late_fuse(
    table: &RoutingTable,
    outputs: &BTreeMap<(u64, usize), Vec<f64>>,
    model: &MoeModel,
) -> Result<BTreeMap<u64, f64>> {
    let mut scores = BTreeMap::new();
    for (&id, decision) in &table.decisions {
        for &(e, _) in &decision.selected {
            if !outputs.contains_key(&(id, e)) {
                return Err(Error::IncompleteResults {
                    request_id: id,
                    expert_id: e,
                });
            }
        }
        let trace = model.trace(decision.clone(), |e| outputs.get(&(id, e)).map(Vec::as_slice))?;
        scores.insert(id, sigmoid(trace.logit));
    }
    Ok(scores)
}

/// Per-item overheads of the cheap stages, in virtual microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCosts {
    pub routing_us: u64,
    pub fusion_us: u64,
}

impl Default for StageCosts {
    fn default() -> Self {
        Self {
            routing_us: 1,
            fusion_us: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub routing_us: f64,
    pub experts_us: f64,
    pub fusion_us: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.routing_us + self.experts_us + self.fusion_us
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub scores: BTreeMap<u64, f64>,
    pub failed: Vec<(u64, usize, String)>,
    pub times: StageTimes,
    pub busy_us: BTreeMap<usize, u64>,
    /// Expert-item computations, `Σ |selected|`.
    pub expert_items: u64,
}

/// The three stages over one batch of requests. Requests whose expert
/// outputs failed are reported and left unscored.
pub fn run_batch(
    batch: &[Request],
    model: &MoeModel,
    backends: &[&dyn ExpertBackend],
    options: &ExecOptions,
    costs: &StageCosts,
    rng: &mut Rng,
) -> Result<PipelineRun> {
    let wall = options.clock == ClockKind::Wall;
    let t0 = Instant::now();
    let mut table = bulk_route(batch, model)?;
    let routing_wall = t0.elapsed().as_secs_f64() * 1e6;

    let batches = build_expert_batches(&table);
    let expert_items = batches.iter().map(|b| b.request_ids.len() as u64).sum();
    let exec = execute(&batches, batch, backends, options, rng)?;

    let t1 = Instant::now();
    for &(id, _, _) in &exec.failed {
        table.decisions.remove(&id);
    }
    let scores = late_fuse(&table, &exec.outputs, model)?;
    let fusion_wall = t1.elapsed().as_secs_f64() * 1e6;

    let n = batch.len() as u64;
    let times = if wall {
        StageTimes {
            routing_us: routing_wall,
            experts_us: exec.elapsed_us,
            fusion_us: fusion_wall,
        }
    } else {
        StageTimes {
            routing_us: (n * costs.routing_us) as f64,
            experts_us: exec.elapsed_us,
            fusion_us: (n * costs.fusion_us) as f64,
        }
    };
    Ok(PipelineRun {
        scores,
        failed: exec.failed,
        times,
        busy_us: exec.busy_us,
        expert_items,
    })
}

pub fn registry_backends(registry: &Registry) -> Vec<&dyn ExpertBackend> {
    registry.iter().map(|e| e as &dyn ExpertBackend).collect()
}

/// Settings of a throughput measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub mode: ExecMode,
    pub clock: ClockKind,
    pub n_batches: usize,
    pub batch_size: usize,
    pub routing_cost_us: u64,
    pub fusion_cost_us: u64,
    pub jitter: f64,
    pub emulate_latency: bool,
    /// Set from the engine-wide seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mode: ExecMode::Parallel,
            clock: ClockKind::Virtual,
            n_batches: 1000,
            batch_size: 128,
            routing_cost_us: 1,
            fusion_cost_us: 1,
            jitter: 0.0,
            emulate_latency: false,
            seed: 1,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_batches == 0 || self.batch_size == 0 {
            return Err(Error::Config("pipeline.n_batches and pipeline.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Config("pipeline.jitter must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputReport {
    pub mode: ExecMode,
    pub clock: ClockKind,
    pub batches_run: usize,
    pub requests: u64,
    pub failed_requests: u64,
    pub expert_items: u64,
    pub total_time_us: f64,
    pub qps: f64,
    pub stage: StageTimes,
    /// Summed modeled busy time per expert id.
    pub busy_us: Vec<u64>,
}

impl ThroughputReport {
    pub fn csv_header(&self) -> String {
        let mut h = String::from(
            "mode,clock,batches_run,requests,failed_requests,expert_items,total_time_us,qps,routing_us,experts_us,fusion_us",
        );
        for e in 0..self.busy_us.len() {
            h.push_str(&format!(",busy_us_e{e}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.mode,
            self.clock,
            self.batches_run,
            self.requests,
            self.failed_requests,
            self.expert_items,
            self.total_time_us,
            self.qps,
            self.stage.routing_us,
            self.stage.experts_us,
            self.stage.fusion_us
        );
        for b in &self.busy_us {
            r.push_str(&format!(",{b}"));
        }
        r
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", self.csv_header(), self.csv_row())
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| s.push_str(&format!("{k:<18} {v}\n"));
        line("mode", self.mode.to_string());
        line("clock", self.clock.to_string());
        line("batches", self.batches_run.to_string());
        line("requests", self.requests.to_string());
        line("failed requests", self.failed_requests.to_string());
        line("expert items", self.expert_items.to_string());
        line("total time (us)", format!("{:.1}", self.total_time_us));
        line("  routing", format!("{:.1}", self.stage.routing_us));
        line("  experts", format!("{:.1}", self.stage.experts_us));
        line("  fusion", format!("{:.1}", self.stage.fusion_us));
        line("QPS", format!("{:.2}", self.qps));
        for (e, b) in self.busy_us.iter().enumerate() {
            line(&format!("busy e{e} (us)"), b.to_string());
        }
        s
    }
}

/// Runs `n_batches` consecutive batches drawn cyclically from `requests`.
pub fn qps_bench(
    requests: &[Request],
    model: &MoeModel,
    registry: &Registry,
    config: &BenchConfig,
) -> Result<ThroughputReport> {
    config.validate()?;
    if requests.len() < config.batch_size {
        return Err(Error::InvalidArgument(format!(
            "{} requests cannot fill a batch of {}",
            requests.len(),
            config.batch_size
        )));
    }
    let backends = registry_backends(registry);
    let options = ExecOptions {
        mode: config.mode,
        clock: config.clock,
        jitter: config.jitter,
        emulate_latency: config.emulate_latency,
        shuffle_seed: None,
    };
    let costs = StageCosts {
        routing_us: config.routing_cost_us,
        fusion_us: config.fusion_cost_us,
    };
    let mut rng = Rng::derive(config.seed, 0xbe4c);
    let mut stage = StageTimes::default();
    let mut busy = vec![0u64; registry.len()];
    let mut failed = 0u64;
    let mut expert_items = 0u64;
    let mut cursor = 0usize;
    let mut batch = Vec::with_capacity(config.batch_size);
    for _ in 0..config.n_batches {
        batch.clear();
        for _ in 0..config.batch_size {
            batch.push(requests[cursor].clone());
            cursor = (cursor + 1) % requests.len();
        }
        let run = run_batch(&batch, model, &backends, &options, &costs, &mut rng)?;
        stage.routing_us += run.times.routing_us;
        stage.experts_us += run.times.experts_us;
        stage.fusion_us += run.times.fusion_us;
        for (e, b) in run.busy_us {
            busy[e] += b;
        }
        failed += run.failed.iter().map(|f| f.0).collect::<std::collections::BTreeSet<_>>().len() as u64;
        expert_items += run.expert_items;
    }
    let requests_run = (config.n_batches * config.batch_size) as u64;
    let total = stage.total();
    Ok(ThroughputReport {
        mode: config.mode,
        clock: config.clock,
        batches_run: config.n_batches,
        requests: requests_run,
        failed_requests: failed,
        expert_items,
        total_time_us: total,
        qps: if total > 0.0 { requests_run as f64 / (total * 1e-6) } else { f64::INFINITY },
        stage,
        busy_us: busy,
    })
}
