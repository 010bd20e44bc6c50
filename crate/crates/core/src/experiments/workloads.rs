//! Insert, lookup and mixed workloads over HT, HTI, CH, EH and Shortcut-EH.
//!
//! Keys are uniform nonzero 64-bit values; each key maps to [`value_of`].
//!
//! Rows (variant = index name):
//! - `insert-cumulative`: parameter = entries inserted so far, nanos since
//!   the first insert, normalized per insert;
//! - `insert-total`: parameter = N;
//! - `mapper-busy` (Shortcut-EH only): mapper time spent on batches while
//!   loading and catching up, parameter = N;
//! - `lookup`: N hit lookups after loading, parameter = N, per lookup. The
//!   shortcut is in sync before these start;
//! - `mixed`: after a bulk load of 0.92 N, four waves of 0.02 N accesses
//!   whose first 1% are inserts and the rest hit lookups. One row per
//!   checkpoint window, parameter = accesses so far, per access;
//! - `version-traditional`, `version-shortcut` (Shortcut-EH only): both
//!   versions sampled at the end of each checkpoint window.

use std::time::{Duration, Instant};

use rand::Rng;

use super::{elapsed, median, unique_keys, value_of, BenchConfig, BenchError, BenchResult, Check, Experiment, Scale};
use super::Outcome;
use crate::baselines::{ChainedTable, IncrementalTable, OpenTable, DEFAULT_CHAINED_BYTES};
use crate::extendible::{EhConfig, ExtendibleIndex};
use crate::hash_common::IndexError;
use crate::shortcut_eh::{SehConfig, ShortcutEh, DEFAULT_POLL_INTERVAL};

pub const INSERT_CUMULATIVE: &str = "insert-cumulative";
pub const INSERT_TOTAL: &str = "insert-total";
pub const MAPPER_BUSY: &str = "mapper-busy";
pub const LOOKUP: &str = "lookup";
pub const MIXED: &str = "mixed";
pub const VERSION_TRADITIONAL: &str = "version-traditional";
pub const VERSION_SHORTCUT: &str = "version-shortcut";

pub const WAVES: usize = 4;

const SYNC_TIMEOUT: Duration = Duration::from_secs(120);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Ht,
    Hti,
    Ch,
    Eh,
    Seh,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Ht, Variant::Hti, Variant::Ch, Variant::Eh, Variant::Seh];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Ht => "HT",
            Variant::Hti => "HTI",
            Variant::Ch => "CH",
            Variant::Eh => "EH",
            Variant::Seh => "Shortcut-EH",
        }
    }
}

/// Sizes derived from the configuration.
#[derive(Clone, Copy, Debug)]
pub struct WorkloadPlan {
    pub entries: usize,
    pub bulk: usize,
    pub wave_len: usize,
    pub wave_inserts: usize,
    pub checkpoint: usize,
    pub ch_bytes: usize,
    pub mixed_poll: Duration,
    pub poll: Duration,
}

impl WorkloadPlan {
    pub fn new(config: &BenchConfig) -> Self {
        let entries = config.size.unwrap_or(config.pick(100_000_000, 1_000_000)).max(1000);
        let wave_len = entries / 50;
        let scale = entries as f64 / 1e8;
        WorkloadPlan {
            entries,
            bulk: entries * 92 / 100,
            wave_len,
            wave_inserts: (wave_len / 100).max(1),
            checkpoint: match config.scale {
                Scale::Paper => 10_000,
                Scale::Desk => (wave_len / 200).max(1),
            },
            ch_bytes: ((DEFAULT_CHAINED_BYTES as f64 * scale) as usize).max(4096),
            // The mapper's poll interval shrinks with the wave length so
            // that a wave spans the same number of polls at every scale.
            mixed_poll: config
                .poll_interval
                .unwrap_or_else(|| DEFAULT_POLL_INTERVAL.mul_f64(scale.min(1.0)).max(Duration::from_micros(50))),
            poll: config.poll_interval.unwrap_or(DEFAULT_POLL_INTERVAL),
        }
    }
}

enum Table {
    Ht(OpenTable),
    Hti(IncrementalTable),
    Ch(ChainedTable),
    Eh(ExtendibleIndex),
    Seh(ShortcutEh),
}

impl Table {
    fn build(variant: Variant, config: &BenchConfig, plan: &WorkloadPlan, poll: Duration) -> Result<Table, BenchError> {
        let eh = EhConfig::new(config.backend).validate_splits(false);
        Ok(match variant {
            Variant::Ht => Table::Ht(OpenTable::new()),
            Variant::Hti => Table::Hti(IncrementalTable::new(config.hti_batch)),
            Variant::Ch => Table::Ch(ChainedTable::with_bytes(plan.ch_bytes)),
            Variant::Eh => Table::Eh(ExtendibleIndex::with_config(eh)?),
            Variant::Seh => Table::Seh(ShortcutEh::with_config(
                SehConfig::new(config.backend)
                    .eh(eh)
                    .fanin_threshold(config.fanin_threshold)
                    .poll_interval(poll)
                    .mapper_core(config.cores.get(1).copied()),
            )?),
        })
    }

    #[inline(always)]
    fn insert(&mut self, key: u64, value: u64) -> Result<(), IndexError> {
        match self {
            Table::Ht(t) => t.insert(key, value),
            Table::Hti(t) => t.insert(key, value),
            Table::Ch(t) => t.insert(key, value),
            Table::Eh(t) => t.insert(key, value).map(|_| ()),
            Table::Seh(t) => t.insert(key, value).map(|_| ()),
        }
    }

    #[inline(always)]
    fn get(&mut self, key: u64) -> Option<u64> {
        match self {
            Table::Ht(t) => t.lookup(key),
            Table::Hti(t) => t.get(key),
            Table::Ch(t) => t.lookup(key),
            Table::Eh(t) => t.lookup(key),
            Table::Seh(t) => t.lookup(key),
        }
    }

    /// Waits for the shortcut to catch up; true for the other variants.
    fn settle(&mut self) -> Result<bool, BenchError> {
        if let Table::Seh(t) = self {
            let synced = t.wait_for_sync(SYNC_TIMEOUT);
            if let Some(e) = t.mapper_failure() {
                return Err(BenchError::Mapper(e));
            }
            return Ok(synced);
        }
        Ok(true)
    }

    fn versions(&self) -> Option<(u64, u64)> {
        match self {
            Table::Seh(t) => Some((t.traditional_version(), t.shortcut_version())),
            _ => None,
        }
    }
}

/// Pre-drawn access sequence of the mixed workload.
struct MixedPlan {
    /// `(key, is_insert)` for every access of every wave, in order.
    accesses: Vec<(u64, bool)>,
}

fn mixed_plan(config: &BenchConfig, plan: &WorkloadPlan, keys: &[u64], extra: &[u64]) -> MixedPlan {
    let mut rng = config.rng(12);
    let mut known = plan.bulk;
    let mut next_extra = 0;
    let mut accesses = Vec::with_capacity(WAVES * plan.wave_len);
    for _ in 0..WAVES {
        for j in 0..plan.wave_len {
            if j < plan.wave_inserts {
                accesses.push((extra[next_extra], true));
                next_extra += 1;
                known += 1;
            } else {
                let i = rng.random_range(0..known);
                let k = if i < plan.bulk { keys[i] } else { extra[i - plan.bulk] };
                accesses.push((k, false));
            }
        }
    }
    MixedPlan { accesses }
}

pub fn run(config: &BenchConfig) -> Result<Outcome, BenchError> {
    const E: Experiment = Experiment::Workloads;
    let plan = WorkloadPlan::new(config);
    log::info!("workloads: {plan:?}");
    config.pin(0);
    let n = plan.entries;
    let all = unique_keys(&mut config.rng(10), n + WAVES * plan.wave_inserts);
    let (keys, extra) = all.split_at(n);
    let mut rng = config.rng(11);
    let probes: Vec<u64> = (0..n).map(|_| keys[rng.random_range(0..n)]).collect();
    let mixed = mixed_plan(config, &plan, keys, extra);

    let mut out = Outcome::default();
    let mut wrong: Vec<String> = Vec::new();
    let mut unsynced: Vec<String> = Vec::new();
    let step = (n / 100).max(1);

    for rep in 0..config.repetitions {
        // Insertion, then lookups on the filled index.
        for variant in Variant::ALL {
            let name = variant.name();
            let mut table = Table::build(variant, config, &plan, plan.poll)?;
            let t = Instant::now();
            for (i, chunk) in keys.chunks(step).enumerate() {
                for &k in chunk {
                    table.insert(k, value_of(k))?;
                }
                let done = (i * step + chunk.len()) as u64;
                out.rows.push(BenchResult::new(E, name, INSERT_CUMULATIVE, done, rep, elapsed(t), done));
            }
            let total = elapsed(t);
            out.rows.push(BenchResult::new(E, name, INSERT_TOTAL, n as u64, rep, total, n as u64));
            if !table.settle()? {
                unsynced.push(format!("{name} after loading, rep {rep}"));
            }
            if let Table::Seh(seh) = &table {
                let busy = seh.mapper_stats().busy_nanos;
                out.rows.push(BenchResult::new(E, name, MAPPER_BUSY, n as u64, rep, busy, n as u64));
            }
            let mut misses = 0usize;
            let t = Instant::now();
            for &k in &probes {
                misses += usize::from(table.get(k) != Some(value_of(k)));
            }
            out.rows.push(BenchResult::new(E, name, LOOKUP, n as u64, rep, elapsed(t), n as u64));
            if misses > 0 {
                wrong.push(format!("{name}: {misses} wrong lookups, rep {rep}"));
            }
            if let Table::Seh(seh) = &table {
                log::info!(
                    "workloads: Shortcut-EH route {:?}, fan-in {:.2}, {:?}",
                    seh.route(),
                    seh.average_fanin(),
                    seh.mapper_stats()
                );
            }
        }

        // Mixed.
        for variant in Variant::ALL {
            let name = variant.name();
            let mut table = Table::build(variant, config, &plan, plan.mixed_poll)?;
            for &k in &keys[..plan.bulk] {
                table.insert(k, value_of(k))?;
            }
            if !table.settle()? {
                unsynced.push(format!("{name} after bulk load, rep {rep}"));
            }
            let mut misses = 0usize;
            for (w, window) in mixed.accesses.chunks(plan.checkpoint).enumerate() {
                let t = Instant::now();
                for &(k, insert) in window {
                    if insert {
                        table.insert(k, value_of(k))?;
                    } else {
                        misses += usize::from(table.get(k) != Some(value_of(k)));
                    }
                }
                let nanos = elapsed(t);
                let done = (w * plan.checkpoint + window.len()) as u64;
                out.rows.push(BenchResult::new(E, name, MIXED, done, rep, nanos, window.len() as u64));
                if let Some((tv, sv)) = table.versions() {
                    out.rows.push(BenchResult::new(E, name, VERSION_TRADITIONAL, done, rep, tv, 1));
                    out.rows.push(BenchResult::new(E, name, VERSION_SHORTCUT, done, rep, sv, 1));
                }
            }
            if misses > 0 {
                wrong.push(format!("{name} mixed: {misses} wrong lookups, rep {rep}"));
            }
            if let Table::Seh(seh) = &table {
                if let Some(e) = seh.mapper_failure() {
                    return Err(BenchError::Mapper(e));
                }
            }
        }
    }

    out.correctness.push(Check::new(
        "workloads: every lookup returns the inserted value",
        wrong.is_empty(),
        if wrong.is_empty() { "no wrong answers".to_string() } else { wrong.join("; ") },
    ));
    out.correctness.push(Check::new(
        "workloads: the shortcut catches up after loading",
        unsynced.is_empty(),
        if unsynced.is_empty() { "in sync".to_string() } else { format!("timed out: {}", unsynced.join("; ")) },
    ));
    out.trends = trends(&out, &plan, config.repetitions);
    Ok(out)
}

fn trends(out: &Outcome, plan: &WorkloadPlan, reps: usize) -> Vec<Check> {
    let n = plan.entries as u64;
    let m = |variant: Variant, phase: &str| out.median_at(variant.name(), phase, n, false).unwrap_or(f64::NAN);
    let mut checks = Vec::new();
    let (seh, eh) = (m(Variant::Seh, INSERT_TOTAL), m(Variant::Eh, INSERT_TOTAL));
    checks.push(Check::new(
        "workloads: Shortcut-EH insertion <= 1.25x EH",
        seh <= 1.25 * eh,
        format!(
            "{:.1} vs {:.1} ms, {:.3}x; mapper busy {:.1} ms on {} core(s)",
            seh / 1e6,
            eh / 1e6,
            seh / eh,
            m(Variant::Seh, MAPPER_BUSY) / 1e6,
            crate::sys::available_cores()
        ),
    ));
    let (seh, eh, ht) = (m(Variant::Seh, LOOKUP), m(Variant::Eh, LOOKUP), m(Variant::Ht, LOOKUP));
    checks.push(Check::new(
        "workloads: Shortcut-EH lookups faster than EH",
        seh < eh,
        format!("{:.1} vs {:.1} ns per lookup", seh / n as f64, eh / n as f64),
    ));
    checks.push(Check::new(
        "workloads: HT lookups faster than Shortcut-EH",
        ht < seh,
        format!("{:.1} vs {:.1} ns per lookup", ht / n as f64, seh / n as f64),
    ));
    checks.push(mixed_trend(out, plan, reps));
    checks
}

/// Per wave: the first checkpoint after the insert burst at which both
/// versions agree marks convergence. The Shortcut-EH checkpoints after it
/// are compared, by median, with the median EH checkpoint of the wave.
fn mixed_trend(out: &Outcome, plan: &WorkloadPlan, reps: usize) -> Check {
    let series = |variant: &str, phase: &str, rep: usize| -> Vec<(u64, f64)> {
        out.rows
            .iter()
            .filter(|r| r.variant == variant && r.phase == phase && r.repetition as usize == rep)
            .map(|r| (r.parameter, r.normalized_nanos))
            .collect()
    };
    let seh_name = Variant::Seh.name();
    let mut ratios = vec![Vec::new(); WAVES];
    let mut missing = Vec::new();
    let mut diverged = [0usize; WAVES];
    for rep in 0..reps {
        let seh = series(seh_name, MIXED, rep);
        let eh = series(Variant::Eh.name(), MIXED, rep);
        let tv = series(seh_name, VERSION_TRADITIONAL, rep);
        let sv = series(seh_name, VERSION_SHORTCUT, rep);
        for (wave, ratio_list) in ratios.iter_mut().enumerate() {
            let start = (wave * plan.wave_len) as u64;
            let end = start + plan.wave_len as u64;
            let burst_end = start + plan.wave_inserts as u64;
            let in_wave = |p: u64| p > start && p <= end;
            let idx: Vec<usize> = (0..seh.len()).filter(|&i| in_wave(seh[i].0)).collect();
            if idx.iter().any(|&i| tv[i].1 != sv[i].1) {
                diverged[wave] += 1;
            }
            let converged = idx.iter().copied().find(|&i| seh[i].0 >= burst_end && tv[i].1 == sv[i].1);
            let Some(c) = converged else {
                missing.push(format!("wave {} rep {rep}", wave + 1));
                continue;
            };
            let after: Vec<f64> = idx.iter().filter(|&&i| i > c).map(|&i| seh[i].1).collect();
            let after = if after.is_empty() { vec![seh[c].1] } else { after };
            let eh_wave: Vec<f64> = eh.iter().filter(|(p, _)| in_wave(*p)).map(|&(_, v)| v).collect();
            ratio_list.push(median(&after) / median(&eh_wave));
        }
    }
    let per_wave: Vec<f64> = ratios.iter().map(|r| median(r)).collect();
    let below = per_wave.iter().all(|&r| r < 1.0);
    Check::new(
        "workloads: mixed versions re-converge in every wave and Shortcut-EH then beats EH's median",
        missing.is_empty() && below,
        format!(
            "{}post-convergence Shortcut-EH / EH median per wave: {}; waves with out-of-sync checkpoints (reps): {:?}",
            if missing.is_empty() { String::new() } else { format!("no convergence in {}; ", missing.join(", ")) },
            per_wave.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join(", "),
            diverged
        ),
    )
}
