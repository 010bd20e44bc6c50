//! Measurement harness behind the `vmshortcut` CLI.
//!
//! Every experiment returns CSV rows plus two kinds of checks: correctness
//! checks (answers compared against an oracle, always binding) and trend
//! checks (orderings and ratio bands over medians, hardware dependent).
//!
//! Row schema: `experiment,variant,phase,parameter,repetition,nanos,normalized_nanos`.
//! `nanos` is the raw duration of the measured phase; `normalized_nanos`
//! divides it per page for setup phases and per access for access phases.
//! Version rows of the mixed workload store the version in both columns.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash_common::IndexError;
use crate::page_pool::{Backend, PoolError};
use crate::rewiring::MapError;

pub mod creation;
pub mod fanin;
pub mod motivation;
pub mod shootdown;
pub mod workloads;
mod leaves;

pub const CSV_HEADER: [&str; 7] = [
    "experiment",
    "variant",
    "phase",
    "parameter",
    "repetition",
    "nanos",
    "normalized_nanos",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Experiment {
    Motivation,
    Creation,
    Fanin,
    Shootdown,
    Workloads,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::Motivation,
        Experiment::Creation,
        Experiment::Fanin,
        Experiment::Shootdown,
        Experiment::Workloads,
    ];

    pub fn id(self) -> &'static str {
        match self {
            Experiment::Motivation => "motivation",
            Experiment::Creation => "creation",
            Experiment::Fanin => "fanin",
            Experiment::Shootdown => "shootdown",
            Experiment::Workloads => "workloads",
        }
    }

    /// Whether the experiment measures page mappings and so cannot run on the
    /// emulated backend.
    pub fn needs_real_backend(self) -> bool {
        !matches!(self, Experiment::Workloads)
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Scale {
    /// Sizes of the original measurements; needs tens of GB of memory.
    Paper,
    /// Laptop-sized defaults.
    #[default]
    Desk,
}

impl FromStr for Scale {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            _ => Err(format!("unknown scale {s:?} (expected paper or desk)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub experiment: Experiment,
    pub scale: Scale,
    pub backend: Backend,
    pub seed: u64,
    /// Cores to pin threads to, in order of thread creation.
    pub cores: Vec<usize>,
    pub fanin_threshold: u32,
    /// Mapper poll interval; `None` picks the per-experiment default.
    pub poll_interval: Option<Duration>,
    pub hti_batch: usize,
    pub repetitions: usize,
    /// Run the shootdown experiment even with fewer than two cores.
    pub force: bool,
    /// Overrides the experiment's main size (slots, leaves or entries).
    pub size: Option<usize>,
    /// Overrides the number of accesses or remaps.
    pub accesses: Option<usize>,
}

impl BenchConfig {
    pub fn new(experiment: Experiment) -> Self {
        BenchConfig {
            experiment,
            scale: Scale::Desk,
            backend: Backend::Real,
            seed: 42,
            cores: Vec::new(),
            fanin_threshold: crate::shortcut_eh::DEFAULT_FANIN_THRESHOLD,
            poll_interval: None,
            hti_batch: crate::baselines::DEFAULT_MIGRATE_BATCH,
            repetitions: 3,
            force: false,
            size: None,
            accesses: None,
        }
    }

    pub fn scale(mut self, scale: Scale) -> Self {
        self.scale = scale;
        self
    }

    pub fn backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn repetitions(mut self, reps: usize) -> Self {
        self.repetitions = reps.max(1);
        self
    }

    pub fn size(mut self, size: usize) -> Self {
        self.size = Some(size);
        self
    }

    pub fn accesses(mut self, accesses: usize) -> Self {
        self.accesses = Some(accesses);
        self
    }

    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn poll_interval(mut self, interval: Duration) -> Self {
        self.poll_interval = Some(interval);
        self
    }

    pub fn cores(mut self, cores: Vec<usize>) -> Self {
        self.cores = cores;
        self
    }

    fn pick<T: Copy>(&self, paper: T, desk: T) -> T {
        match self.scale {
            Scale::Paper => paper,
            Scale::Desk => desk,
        }
    }

    /// Deterministic generator for one named stream of this run.
    pub fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Pins the calling thread to the `index`-th configured core, if any.
    pub(crate) fn pin(&self, index: usize) {
        if let Some(&core) = self.cores.get(index) {
            if let Err(e) = crate::sys::pin_current_thread(core) {
                log::warn!("could not pin to core {core}: {e}");
            }
        }
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchResult {
    pub experiment: String,
    pub variant: String,
    pub phase: String,
    pub parameter: u64,
    pub repetition: u32,
    pub nanos: u64,
    pub normalized_nanos: f64,
}

impl BenchResult {
    pub fn new(experiment: Experiment, variant: &str, phase: &str, parameter: u64, repetition: usize, nanos: u64, per: u64) -> Self {
        BenchResult {
            experiment: experiment.id().to_string(),
            variant: variant.to_string(),
            phase: phase.to_string(),
            parameter,
            repetition: repetition as u32,
            nanos,
            normalized_nanos: nanos as f64 / per.max(1) as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "ok" } else { "FAILED" };
        write!(f, "{verdict}: {} ({})", self.name, self.detail)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub rows: Vec<BenchResult>,
    /// Oracle comparisons. Any failure means a wrong answer.
    pub correctness: Vec<Check>,
    /// Orderings and ratios over medians.
    pub trends: Vec<Check>,
    /// Set when the experiment did not run, with the reason.
    pub skipped: Option<String>,
}

impl Outcome {
    pub fn correct(&self) -> bool {
        self.correctness.iter().all(|c| c.passed)
    }

    pub fn trends_hold(&self) -> bool {
        self.trends.iter().all(|c| c.passed)
    }

    pub fn trend(&self, name: &str) -> Option<&Check> {
        self.trends.iter().find(|c| c.name == name)
    }

    fn skip(reason: String) -> Self {
        log::warn!("{reason}");
        Outcome {
            skipped: Some(reason),
            ..Outcome::default()
        }
    }

    /// Medians of `nanos` or `normalized_nanos` over repetitions, for rows
    /// matching `variant` and `phase`, keyed by parameter.
    pub fn medians(&self, variant: &str, phase: &str, normalized: bool) -> Vec<(u64, f64)> {
        let mut params: Vec<u64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.phase == phase)
            .map(|r| r.parameter)
            .collect();
        params.sort_unstable();
        params.dedup();
        params
            .into_iter()
            .map(|p| {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.variant == variant && r.phase == phase && r.parameter == p)
                    .map(|r| if normalized { r.normalized_nanos } else { r.nanos as f64 })
                    .collect();
                (p, median(&vals))
            })
            .collect()
    }

    /// Median for a single parameter value.
    pub fn median_at(&self, variant: &str, phase: &str, parameter: u64, normalized: bool) -> Option<f64> {
        self.medians(variant, phase, normalized)
            .into_iter()
            .find(|&(p, _)| p == parameter)
            .map(|(_, m)| m)
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("the {0} experiment measures page mappings and needs the real backend")]
    NeedsRealBackend(Experiment),
    #[error("the real backend is unavailable on this system (memfd_create/mmap rewiring not supported); use --backend emulated where allowed")]
    RealUnavailable,
    #[error("vm.max_map_count is {have}, the {experiment} experiment needs at least {need}; raise it with `sysctl vm.max_map_count={need}` or pass a smaller --size")]
    MapCountTooLow { experiment: Experiment, have: usize, need: usize },
    #[error("bad configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error("shortcut maintenance failed: {0}")]
    Mapper(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Runs the configured experiment.
pub fn run(config: &BenchConfig) -> Result<Outcome, BenchError> {
    if config.backend == Backend::Real && !Backend::real_available() {
        return Err(BenchError::RealUnavailable);
    }
    if config.experiment.needs_real_backend() && config.backend != Backend::Real {
        return Err(BenchError::NeedsRealBackend(config.experiment));
    }
    match config.experiment {
        Experiment::Motivation => motivation::run(config),
        Experiment::Creation => creation::run(config),
        Experiment::Fanin => fanin::run(config),
        Experiment::Shootdown => shootdown::run(config),
        Experiment::Workloads => workloads::run(config),
    }
}

pub fn write_csv<W: Write>(rows: &[BenchResult], out: W) -> Result<(), BenchError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads rows back, rejecting files whose header differs from [`CSV_HEADER`].
pub fn read_csv<R: Read>(input: R) -> Result<Vec<BenchResult>, BenchError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CSV_HEADER {
        return Err(BenchError::Config(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(BenchError::from)).collect()
}

pub(crate) fn elapsed(since: std::time::Instant) -> u64 {
    since.elapsed().as_nanos() as u64
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    }
}

/// `n` uniform nonzero 64-bit keys without repeats.
pub fn unique_keys(rng: &mut impl Rng, n: usize) -> Vec<u64> {
    let mut seen = std::collections::HashSet::with_capacity(n);
    let mut keys = Vec::with_capacity(n);
    while keys.len() < n {
        let k: u64 = rng.random();
        if k != 0 && seen.insert(k) {
            keys.push(k);
        }
    }
    keys
}

/// Value stored for `key` by the workloads; lets lookups be checked
/// without a side table.
#[inline(always)]
pub fn value_of(key: u64) -> u64 {
    key.rotate_left(17) ^ 0xA5A5_A5A5_A5A5_A5A5
}
