//! Lookup time through a node of fixed slot count whose neighbouring slots
//! share leaves.
//!
//! Variants `traditional` and `shortcut`, phase `lookup`, parameter = fan-in
//! (slots per leaf), normalized per access. Slot `i` points at leaf
//! `i / fan-in`. Mapping `n` slots onto fewer leaves needs about `n` VMAs, so
//! `vm.max_map_count` is checked first.

use std::time::Instant;

use super::leaves::{expected_sum, random_accesses, shortcut_access, Leaves, TraditionalNode};
use super::{elapsed, BenchConfig, BenchError, BenchResult, Check, Experiment, Outcome};
use crate::rewiring::ShortcutNode;

pub const TRADITIONAL: &str = "traditional";
pub const SHORTCUT: &str = "shortcut";
pub const LOOKUP: &str = "lookup";

pub const FANINS: [usize; 10] = [512, 256, 128, 64, 32, 16, 8, 4, 2, 1];

pub fn run(config: &BenchConfig) -> Result<Outcome, BenchError> {
    const E: Experiment = Experiment::Fanin;
    let n = config.size.unwrap_or(config.pick(1 << 22, 1 << 18));
    let accesses = config.accesses.unwrap_or(config.pick(10_000_000, 1_000_000));
    let fanins: Vec<usize> = FANINS.iter().copied().filter(|&f| f <= n && n % f == 0).collect();
    if let Some(have) = crate::sys::max_map_count() {
        let need = n + 4096;
        if have < need {
            return Err(BenchError::MapCountTooLow { experiment: E, have, need });
        }
    }
    config.pin(0);
    let leaves = Leaves::new(n)?;
    let acc = random_accesses(&mut config.rng(1), n, accesses);
    let mut out = Outcome::default();
    let mut wrong = Vec::new();

    for &f in &fanins {
        let mut trad = TraditionalNode::allocate(n);
        let offsets: Vec<u64> = (0..n).map(|s| leaves.offsets[s / f]).collect();
        for (slot, p) in trad.slots.iter_mut().enumerate() {
            *p = leaves.ptr(slot / f);
        }
        let node = ShortcutNode::reserve(&leaves.pool, n)?;
        node.set_indirections_batch(0, &offsets)?;
        node.populate()?;
        let want = expected_sum(&acc, |s| s / f);
        trad.access(&acc);
        shortcut_access(&node, &acc);
        for rep in 0..config.repetitions {
            let t = Instant::now();
            let got = trad.access(&acc);
            out.rows.push(BenchResult::new(E, TRADITIONAL, LOOKUP, f as u64, rep, elapsed(t), accesses as u64));
            if got != want {
                wrong.push(format!("{TRADITIONAL}/{f}/rep {rep}"));
            }
            let t = Instant::now();
            let got = shortcut_access(&node, &acc);
            out.rows.push(BenchResult::new(E, SHORTCUT, LOOKUP, f as u64, rep, elapsed(t), accesses as u64));
            if got != want {
                wrong.push(format!("{SHORTCUT}/{f}/rep {rep}"));
            }
        }
        node.destroy();
    }

    out.correctness.push(Check::new(
        "fanin: both variants read the expected leaf words",
        wrong.is_empty(),
        if wrong.is_empty() { format!("{} fan-ins", fanins.len()) } else { wrong.join(", ") },
    ));
    let mut trends = Vec::new();
    let m = |variant: &str, f: usize| out.median_at(variant, LOOKUP, f as u64, true).unwrap_or(f64::NAN);
    let (hi, lo) = (*fanins.first().unwrap(), *fanins.last().unwrap());
    let (t1, s1) = (m(TRADITIONAL, lo), m(SHORTCUT, lo));
    trends.push(Check::new(
        format!("fanin: shortcut faster at fan-in {lo}"),
        s1 < t1,
        format!("{s1:.1} vs {t1:.1} ns"),
    ));
    let (th, sh) = (m(TRADITIONAL, hi), m(SHORTCUT, hi));
    trends.push(Check::new(
        format!("fanin: traditional faster at fan-in {hi}"),
        th < sh,
        format!("{th:.1} vs {sh:.1} ns"),
    ));
    let short: Vec<f64> = out.medians(SHORTCUT, LOOKUP, true).into_iter().map(|(_, v)| v).collect();
    let (min, max) = short.iter().fold((f64::MAX, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    trends.push(Check::new(
        "fanin: shortcut time within 2x across fan-ins",
        max <= 2.0 * min,
        format!("{min:.1}..{max:.1} ns"),
    ));
    let crossover = FANINS
        .iter()
        .rev()
        .find(|&&f| m(TRADITIONAL, f) < m(SHORTCUT, f))
        .map_or("none".to_string(), |f| f.to_string());
    log::info!("fanin: smallest fan-in where traditional wins: {crossover}");
    out.trends = trends;
    Ok(out)
}
