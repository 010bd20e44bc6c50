//! Cost of remapping pages of a region that other threads keep reading.
//!
//! One shooter thread remaps randomly chosen pages of a populated shortcut
//! region onto random pool pages (each remap populates its page-table entry).
//! Meanwhile `r` reader threads read the region sequentially, one word per
//! cache line, until the shooter is done. Afterwards the readers read the
//! same number of pages again with no shooter.
//!
//! Rows, parameter = reader count `r`:
//! - `shooter`/`remap`: per remap;
//! - `reader`/`read-during-shooting`: per page, over all readers;
//! - `reader`/`read-alone`: per page, over all readers.
//!
//! With fewer than two cores the experiment is skipped unless forced.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Barrier;
use std::time::Instant;

use rand::Rng;

use super::leaves::{decode_leaf_word, Leaves};
use super::{median, BenchConfig, BenchError, BenchResult, Check, Experiment, Outcome};
use crate::page_pool::PAGE_SIZE;
use crate::rewiring::ShortcutNode;

pub const SHOOTER: &str = "shooter";
pub const READER: &str = "reader";
pub const REMAP: &str = "remap";
pub const READ_DURING: &str = "read-during-shooting";
pub const READ_ALONE: &str = "read-alone";

const LINE_WORDS: usize = 64 / 8;

/// Reads one word per cache line of `page` and counts words that are not
/// the expected word of some leaf.
#[inline(always)]
fn read_page(page: *const u64, leaves: usize) -> usize {
    let mut bad = 0;
    for w in (0..PAGE_SIZE / 8).step_by(LINE_WORDS) {
        // SAFETY: `page` is a mapped page of the region.
        let v = unsafe { page.add(w).read_volatile() };
        let (leaf, word) = decode_leaf_word(v);
        bad += usize::from(leaf >= leaves || word != w);
    }
    bad
}

struct ReadStats {
    pages: u64,
    nanos: u64,
    bad: usize,
}

/// Reads pages sequentially from `start` until `stop` is set or `limit`
/// pages were read.
fn read_loop(node: &ShortcutNode, leaves: usize, start: usize, stop: Option<&AtomicBool>, limit: u64) -> ReadStats {
    let base = node.base().cast_const();
    let n = node.slot_count();
    let mut slot = start % n;
    let mut pages = 0u64;
    let mut bad = 0;
    let t = Instant::now();
    while pages < limit {
        if let Some(stop) = stop {
            if pages % 64 == 0 && stop.load(Ordering::Relaxed) {
                break;
            }
        }
        // SAFETY: slot < n; every slot stays mapped throughout.
        bad += read_page(unsafe { base.add(slot * PAGE_SIZE).cast::<u64>() }, leaves);
        pages += 1;
        slot += 1;
        if slot == n {
            slot = 0;
        }
    }
    ReadStats {
        pages,
        nanos: t.elapsed().as_nanos() as u64,
        bad,
    }
}

pub fn run(config: &BenchConfig) -> Result<Outcome, BenchError> {
    const E: Experiment = Experiment::Shootdown;
    let cores = crate::sys::available_cores();
    if cores < 2 && !config.force {
        return Ok(Outcome::skip(format!(
            "shootdown: needs at least 2 cores, found {cores}; skipped (pass --force to run anyway)"
        )));
    }
    let pages = config.size.unwrap_or(config.pick(1 << 21, 1 << 16));
    let remaps = config.accesses.unwrap_or(config.pick(1 << 19, 1 << 14));
    let max_readers = match config.scale {
        super::Scale::Paper => 7,
        super::Scale::Desk => (cores - 1).max(usize::from(config.force)),
    };

    let leaves = Leaves::new(pages)?;
    let node = ShortcutNode::reserve(&leaves.pool, pages)?;
    node.set_indirections_batch(0, &leaves.offsets)?;
    node.populate()?;
    let mut rng = config.rng(1);
    let targets: Vec<(usize, u64)> = (0..remaps)
        .map(|_| (rng.random_range(0..pages), leaves.offsets[rng.random_range(0..pages)]))
        .collect();

    let mut out = Outcome::default();
    let mut bad_words = 0usize;
    let mut failures = Vec::new();
    for readers in 0..=max_readers {
        for rep in 0..config.repetitions {
            let barrier = Barrier::new(readers + 1);
            let stop = AtomicBool::new(false);
            let (shot, during) = std::thread::scope(|s| {
                let handles: Vec<_> = (0..readers)
                    .map(|i| {
                        let (node, barrier, stop) = (&node, &barrier, &stop);
                        s.spawn(move || {
                            config.pin(i + 1);
                            barrier.wait();
                            read_loop(node, pages, i * pages / readers.max(1), Some(stop), u64::MAX)
                        })
                    })
                    .collect();
                config.pin(0);
                barrier.wait();
                let t = Instant::now();
                let mut result = Ok(());
                for &(slot, off) in &targets {
                    if let Err(e) = node.set_indirection_populated(slot, off) {
                        result = Err(e);
                        break;
                    }
                }
                let nanos = t.elapsed().as_nanos() as u64;
                stop.store(true, Ordering::Relaxed);
                let during: Vec<ReadStats> = handles.into_iter().map(|h| h.join().expect("reader panicked")).collect();
                (result.map(|_| nanos), during)
            });
            let shot = shot?;
            out.rows.push(BenchResult::new(E, SHOOTER, REMAP, readers as u64, rep, shot, remaps as u64));
            if readers == 0 {
                continue;
            }
            let barrier = Barrier::new(readers);
            let alone: Vec<ReadStats> = std::thread::scope(|s| {
                let handles: Vec<_> = during
                    .iter()
                    .enumerate()
                    .map(|(i, d)| {
                        let (node, barrier, limit) = (&node, &barrier, d.pages);
                        s.spawn(move || {
                            config.pin(i + 1);
                            barrier.wait();
                            read_loop(node, pages, i * pages / readers, None, limit)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("reader panicked")).collect()
            });
            for (phase, stats) in [(READ_DURING, &during), (READ_ALONE, &alone)] {
                let pages_read: u64 = stats.iter().map(|s| s.pages).sum();
                let nanos: u64 = stats.iter().map(|s| s.nanos).sum();
                bad_words += stats.iter().map(|s| s.bad).sum::<usize>();
                if pages_read == 0 {
                    failures.push(format!("{phase} with {readers} readers read no pages"));
                }
                out.rows.push(BenchResult::new(E, READER, phase, readers as u64, rep, nanos, pages_read));
            }
        }
    }
    node.destroy();

    out.correctness.push(Check::new(
        "shootdown: readers only ever see whole leaf pages",
        bad_words == 0 && failures.is_empty(),
        if failures.is_empty() { format!("{bad_words} bad words") } else { failures.join("; ") },
    ));

    let shooter = out.medians(SHOOTER, REMAP, true);
    let during = out.medians(READER, READ_DURING, true);
    let alone = out.medians(READER, READ_ALONE, true);
    if let (Some(&(_, zero)), Some(&(r, max))) = (shooter.first(), shooter.last()) {
        out.trends.push(Check::new(
            "shootdown: remap cost at max readers >= 1.2x zero readers",
            r > 0 && max >= 1.2 * zero,
            format!("{max:.0} ns with {r} readers vs {zero:.0} ns alone, {:.2}x", max / zero),
        ));
    }
    if !during.is_empty() {
        let vals: Vec<f64> = during.iter().map(|&(_, v)| v).collect();
        let (min, max) = vals.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
        out.trends.push(Check::new(
            "shootdown: reader per-page cost flat within 1.3x across reader counts",
            max <= 1.3 * min,
            format!("{min:.0}..{max:.0} ns, median {:.0}", median(&vals)),
        ));
        let off: Vec<String> = during
            .iter()
            .zip(&alone)
            .filter(|((_, d), (_, a))| d / a > 1.3 || a / d > 1.3)
            .map(|((r, d), (_, a))| format!("{r} readers: {d:.0} vs {a:.0} ns"))
            .collect();
        out.trends.push(Check::new(
            "shootdown: reader per-page cost with shooter within 1.3x of without",
            off.is_empty(),
            if off.is_empty() { format!("{} reader counts", during.len()) } else { off.join("; ") },
        ));
    }
    Ok(out)
}
