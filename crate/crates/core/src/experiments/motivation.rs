//! Lookup time through a traditional node and through a shortcut as the
//! number of leaves grows, at fan-in 1.
//!
//! Variants `traditional` and `shortcut`, phase `lookup`, parameter = leaf
//! count, normalized per access. Shortcuts are populated before timing and
//! each variant gets one untimed warm-up pass.

use std::time::Instant;

use super::leaves::{expected_sum, random_accesses, shortcut_access, Leaves, TraditionalNode};
use super::{elapsed, BenchConfig, BenchError, BenchResult, Check, Experiment, Outcome};
use crate::rewiring::ShortcutNode;

pub const TRADITIONAL: &str = "traditional";
pub const SHORTCUT: &str = "shortcut";
pub const LOOKUP: &str = "lookup";

/// Leaf counts measured: powers of two from 2^10 up to the scale maximum.
pub fn leaf_counts(config: &BenchConfig) -> Vec<usize> {
    let max = config.size.unwrap_or(config.pick(1 << 22, 1 << 17)).max(1);
    let min = (1usize << 10).min(max);
    let mut v = Vec::new();
    let mut k = min;
    while k <= max {
        v.push(k);
        k *= 2;
    }
    v
}

pub fn run(config: &BenchConfig) -> Result<Outcome, BenchError> {
    const E: Experiment = Experiment::Motivation;
    let counts = leaf_counts(config);
    let accesses = config.accesses.unwrap_or(config.pick(10_000_000, 1_000_000));
    config.pin(0);
    let leaves = Leaves::new(*counts.last().unwrap())?;
    let mut out = Outcome::default();
    let mut wrong = Vec::new();

    for (i, &k) in counts.iter().enumerate() {
        let mut trad = TraditionalNode::allocate(k);
        for (slot, p) in trad.slots.iter_mut().enumerate() {
            *p = leaves.ptr(slot);
        }
        let node = ShortcutNode::reserve(&leaves.pool, k)?;
        node.set_indirections_batch(0, &leaves.offsets[..k])?;
        node.populate()?;
        let acc = random_accesses(&mut config.rng(100 + i as u64), k, accesses);
        let want = expected_sum(&acc, |s| s);
        trad.access(&acc);
        shortcut_access(&node, &acc);
        for rep in 0..config.repetitions {
            let t = Instant::now();
            let got = trad.access(&acc);
            out.rows.push(BenchResult::new(E, TRADITIONAL, LOOKUP, k as u64, rep, elapsed(t), accesses as u64));
            if got != want {
                wrong.push(format!("{TRADITIONAL}/{k}/rep {rep}"));
            }
            let t = Instant::now();
            let got = shortcut_access(&node, &acc);
            out.rows.push(BenchResult::new(E, SHORTCUT, LOOKUP, k as u64, rep, elapsed(t), accesses as u64));
            if got != want {
                wrong.push(format!("{SHORTCUT}/{k}/rep {rep}"));
            }
        }
    }

    out.correctness.push(Check::new(
        "motivation: both variants read the expected leaf words",
        wrong.is_empty(),
        if wrong.is_empty() { format!("{} leaf counts", counts.len()) } else { wrong.join(", ") },
    ));
    let trad = out.medians(TRADITIONAL, LOOKUP, true);
    let short = out.medians(SHORTCUT, LOOKUP, true);
    let losses: Vec<String> = trad
        .iter()
        .zip(&short)
        .filter(|((_, t), (_, s))| s >= t)
        .map(|((k, t), (_, s))| format!("{k}: {s:.1} vs {t:.1} ns"))
        .collect();
    out.trends.push(Check::new(
        "motivation: shortcut faster than traditional at every leaf count",
        losses.is_empty(),
        if losses.is_empty() { "all faster".to_string() } else { losses.join("; ") },
    ));
    for (name, series) in [(TRADITIONAL, &trad), (SHORTCUT, &short)] {
        let (first, last) = (series.first().unwrap().1, series.last().unwrap().1);
        out.trends.push(Check::new(
            format!("motivation: {name} lookup time grows with leaf count"),
            counts.len() < 2 || last > first,
            format!("{first:.1} ns at {} leaves, {last:.1} ns at {}", counts[0], counts.last().unwrap()),
        ));
    }
    Ok(out)
}
