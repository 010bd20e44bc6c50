//! Cost of building an inner node and accessing it twice.
//!
//! Variants: `traditional`, `shortcut-lazy`, `shortcut-eager`. Phases:
//! `allocate`, `set-indirections`, `populate` (eager only), `first-access`,
//! `second-access`. Setup phases are normalized per slot, access phases per
//! access. Every slot points at its own leaf, assigned through a random
//! permutation by default, and every shortcut slot is mapped by a separate
//! call.
//!
//! The in-order layout lets the kernel merge neighbouring slot mappings into
//! one VMA, and fault-around then maps up to 16 pages per lazy fault, which
//! hides most of the first-access penalty.

use std::time::Instant;

use rand::seq::SliceRandom;

use super::leaves::{expected_sum, random_accesses, shortcut_access, Leaves, TraditionalNode};
use super::{elapsed, BenchConfig, BenchError, BenchResult, Check, Experiment, Outcome};
use crate::rewiring::ShortcutNode;

pub const TRADITIONAL: &str = "traditional";
pub const SHORTCUT_LAZY: &str = "shortcut-lazy";
pub const SHORTCUT_EAGER: &str = "shortcut-eager";

pub const ALLOCATE: &str = "allocate";
pub const SET_INDIRECTIONS: &str = "set-indirections";
pub const POPULATE: &str = "populate";
pub const FIRST_ACCESS: &str = "first-access";
pub const SECOND_ACCESS: &str = "second-access";

/// How slots are assigned to leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafLayout {
    /// Slot `i` → leaf `i`; neighbouring slots map neighbouring pool pages.
    InOrder,
    /// Slot `i` → leaf `perm(i)` for a random permutation.
    Shuffled,
}

pub const DEFAULT_LAYOUT: LeafLayout = LeafLayout::Shuffled;

pub fn run(config: &BenchConfig) -> Result<Outcome, BenchError> {
    run_with_layout(config, DEFAULT_LAYOUT)
}

pub fn run_with_layout(config: &BenchConfig, layout: LeafLayout) -> Result<Outcome, BenchError> {
    const E: Experiment = Experiment::Creation;
    let n = config.size.unwrap_or(config.pick(1 << 22, 1 << 16));
    let accesses = config.accesses.unwrap_or(config.pick(10_000_000, 1_000_000));
    let per_slot = n as u64;
    let per_access = accesses as u64;
    if let Some(have) = crate::sys::max_map_count() {
        let need = n + 4096;
        if layout == LeafLayout::Shuffled && have < need {
            return Err(BenchError::MapCountTooLow { experiment: E, have, need });
        }
    }
    config.pin(0);

    let leaves = Leaves::new(n)?;
    let mut leaf_of: Vec<usize> = (0..n).collect();
    if layout == LeafLayout::Shuffled {
        leaf_of.shuffle(&mut config.rng(1));
    }
    let leaf_ptrs: Vec<*const u8> = leaf_of.iter().map(|&l| leaves.ptr(l)).collect();
    let leaf_offsets: Vec<u64> = leaf_of.iter().map(|&l| leaves.offsets[l]).collect();
    let acc = random_accesses(&mut config.rng(2), n, accesses);
    let want = expected_sum(&acc, |s| leaf_of[s]);

    let mut out = Outcome::default();
    let mut wrong = Vec::new();
    let mut check = |variant: &str, phase: &str, rep: usize, got: u64| {
        if got != want {
            wrong.push(format!("{variant}/{phase}/rep {rep}"));
        }
    };
    let row = |variant: &str, phase: &str, rep: usize, nanos: u64, per: u64| {
        BenchResult::new(E, variant, phase, n as u64, rep, nanos, per)
    };

    for rep in 0..config.repetitions {
        // Traditional.
        let t = Instant::now();
        let mut node = TraditionalNode::allocate(n);
        out.rows.push(row(TRADITIONAL, ALLOCATE, rep, elapsed(t), per_slot));
        let t = Instant::now();
        for (slot, &p) in node.slots.iter_mut().zip(&leaf_ptrs) {
            *slot = p;
        }
        std::hint::black_box(&node.slots);
        out.rows.push(row(TRADITIONAL, SET_INDIRECTIONS, rep, elapsed(t), per_slot));
        for phase in [FIRST_ACCESS, SECOND_ACCESS] {
            let t = Instant::now();
            let sum = node.access(&acc);
            out.rows.push(row(TRADITIONAL, phase, rep, elapsed(t), per_access));
            check(TRADITIONAL, phase, rep, sum);
        }
        drop(node);

        // Shortcuts.
        for (variant, eager) in [(SHORTCUT_LAZY, false), (SHORTCUT_EAGER, true)] {
            let t = Instant::now();
            let node = ShortcutNode::reserve(&leaves.pool, n)?;
            out.rows.push(row(variant, ALLOCATE, rep, elapsed(t), per_slot));
            let t = Instant::now();
            for (slot, &off) in leaf_offsets.iter().enumerate() {
                node.set_indirection(slot, off)?;
            }
            out.rows.push(row(variant, SET_INDIRECTIONS, rep, elapsed(t), per_slot));
            if eager {
                let t = Instant::now();
                node.populate()?;
                out.rows.push(row(variant, POPULATE, rep, elapsed(t), per_slot));
            }
            for phase in [FIRST_ACCESS, SECOND_ACCESS] {
                let t = Instant::now();
                let sum = shortcut_access(&node, &acc);
                out.rows.push(row(variant, phase, rep, elapsed(t), per_access));
                check(variant, phase, rep, sum);
            }
            node.destroy();
        }
    }

    out.correctness.push(Check::new(
        "creation: every access pass reads the expected leaf words",
        wrong.is_empty(),
        if wrong.is_empty() {
            format!("{} passes", 6 * config.repetitions)
        } else {
            format!("mismatch in {}", wrong.join(", "))
        },
    ));

    let m = |variant: &str, phase: &str| out.median_at(variant, phase, n as u64, true).unwrap_or(f64::NAN);
    let trad_set = m(TRADITIONAL, SET_INDIRECTIONS);
    let mut trends = Vec::new();
    for variant in [SHORTCUT_LAZY, SHORTCUT_EAGER] {
        let set = m(variant, SET_INDIRECTIONS);
        trends.push(Check::new(
            format!("creation: {variant} set-indirections >= 10x traditional per page"),
            set >= 10.0 * trad_set,
            format!("{set:.1} ns vs {trad_set:.2} ns, {:.0}x", set / trad_set),
        ));
    }
    let (lf, ls) = (m(SHORTCUT_LAZY, FIRST_ACCESS), m(SHORTCUT_LAZY, SECOND_ACCESS));
    trends.push(Check::new(
        "creation: lazy first access >= 1.5x second access",
        lf >= 1.5 * ls,
        format!("{lf:.1} ns vs {ls:.1} ns, {:.2}x", lf / ls),
    ));
    let (ef, es) = (m(SHORTCUT_EAGER, FIRST_ACCESS), m(SHORTCUT_EAGER, SECOND_ACCESS));
    trends.push(Check::new(
        "creation: eager first access <= 1.5x second access",
        ef <= 1.5 * es,
        format!("{ef:.1} ns vs {es:.1} ns, {:.2}x", ef / es),
    ));
    out.trends = trends;
    Ok(out)
}
