//! Acceptance run: one PASS / FAIL / NOT RUN line per criterion.
//!
//! Exits nonzero when an exact criterion fails, or an experiment reports a
//! wrong answer. Timing trends are printed with their measurements; set
//! `VMSHORTCUT_ACCEPTANCE_STRICT=1` to make their failures fatal as well.

mod common;

use std::time::{Duration, Instant};

use vmshortcut::experiments::{self, BenchConfig, Experiment, Outcome};
use vmshortcut::sys::available_cores;
use vmshortcut::Backend;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    NotRun,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Exact,
    Trend,
}

struct Line {
    name: &'static str,
    kind: Kind,
    status: Status,
    detail: String,
}

fn timed(limit: Duration, f: impl FnOnce() -> common::Suite) -> (Status, String) {
    let t = Instant::now();
    let result = f();
    let took = t.elapsed();
    match result {
        Ok(detail) if took <= limit => (Status::Pass, format!("{detail}; {took:.1?} of {limit:?}")),
        Ok(detail) => (Status::Fail, format!("{detail}; took {took:.1?}, limit {limit:?}")),
        Err(e) => (Status::Fail, e),
    }
}

fn experiment(config: BenchConfig, limit: Option<Duration>) -> (Status, String, bool) {
    let t = Instant::now();
    let outcome: Outcome = match experiments::run(&config) {
        Ok(o) => o,
        Err(e @ experiments::BenchError::MapCountTooLow { .. }) => return (Status::NotRun, e.to_string(), true),
        Err(e) => return (Status::Fail, e.to_string(), false),
    };
    let took = t.elapsed();
    if let Some(reason) = outcome.skipped {
        return (Status::NotRun, reason, true);
    }
    let mut detail: Vec<String> = outcome.correctness.iter().chain(&outcome.trends).map(|c| c.to_string()).collect();
    let in_time = limit.is_none_or(|l| took <= l);
    detail.push(match limit {
        Some(l) => format!("{took:.1?} of {l:?}"),
        None => format!("{took:.1?}"),
    });
    let status = if outcome.correct() && outcome.trends_hold() && in_time { Status::Pass } else { Status::Fail };
    (status, detail.join("; "), outcome.correct())
}

fn main() {
    let strict = std::env::var("VMSHORTCUT_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let real = Backend::real_available();
    let cores = available_cores();
    let pinning: Vec<usize> = if cores >= 2 { (0..cores).collect() } else { Vec::new() };
    let mut lines = Vec::new();
    let mut wrong_answers = false;
    let not_real = || (Status::NotRun, "real backend unavailable".to_string());

    let (status, detail) = timed(Duration::from_secs(60), || {
        let mut forced = 0;
        for seed in 1..=20 {
            forced += common::oracle(seed, 100_000, Backend::Emulated)?.1;
        }
        Ok(format!("seeds 1-20, 10^5 ops each, {forced} lookups forced through the shortcut"))
    });
    lines.push(Line { name: "oracle equivalence", kind: Kind::Exact, status, detail });

    let (status, detail) = if !real {
        not_real()
    } else {
        timed(Duration::from_secs(30), || {
            let mut largest = String::new();
            for seed in 1..=24u64 {
                let slots = if seed <= 4 { 1 << (seed * 3) } else { 1 + (seed as usize * 2_654_435_761) % (1 << 12) };
                let d = common::aliasing(seed, slots, 20_000)?;
                if slots == 1 << 12 {
                    largest = d;
                }
            }
            Ok(format!("24 tables of 1 to 2^12 slots; largest: {largest}"))
        })
    };
    lines.push(Line { name: "rewiring aliasing", kind: Kind::Exact, status, detail });

    let (status, detail) = timed(Duration::from_secs(60), || {
        common::eh_invariants(1, 100_000, if real { Backend::Real } else { Backend::Emulated })
    });
    lines.push(Line { name: "EH structural invariants", kind: Kind::Exact, status, detail });

    let (status, detail) = if !real {
        not_real()
    } else {
        timed(Duration::from_secs(120), || {
            common::sync_protocol(&common::SyncParams {
                seed: 1,
                poll: Duration::from_millis(5),
                splitting_inserts: 10_000,
                lookups_per_split: 100,
                max_delay: Duration::from_millis(3),
                idle_checks: 20,
            })
        })
    };
    lines.push(Line { name: "sync protocol", kind: Kind::Exact, status, detail });

    let trend = |e: Experiment, limit: Option<Duration>, wrong: &mut bool| {
        if !real {
            return not_real();
        }
        let (status, detail, correct) = experiment(BenchConfig::new(e).cores(pinning.clone()), limit);
        *wrong |= !correct;
        (status, detail)
    };

    let (status, detail) = trend(Experiment::Creation, None, &mut wrong_answers);
    lines.push(Line { name: "creation trends", kind: Kind::Trend, status, detail });

    let (status, detail) = trend(Experiment::Fanin, Some(Duration::from_secs(180)), &mut wrong_answers);
    lines.push(Line { name: "fan-in crossover", kind: Kind::Trend, status, detail });

    let (status, detail) = if cores < 4 {
        (Status::NotRun, format!("needs at least 4 cores, host has {cores}"))
    } else {
        trend(Experiment::Shootdown, None, &mut wrong_answers)
    };
    lines.push(Line { name: "shootdown trends", kind: Kind::Trend, status, detail });

    let (status, detail) = trend(Experiment::Workloads, None, &mut wrong_answers);
    lines.push(Line { name: "workload headline", kind: Kind::Trend, status, detail });

    let mut fatal = wrong_answers;
    for line in &lines {
        let tag = match line.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::NotRun => "NOT RUN",
        };
        println!("{tag:<7}  {}: {}", line.name, line.detail);
        if line.status == Status::Fail && (line.kind == Kind::Exact || strict) {
            fatal = true;
        }
    }
    let count = |s: Status| lines.iter().filter(|l| l.status == s).count();
    println!(
        "acceptance: {} passed, {} failed, {} not run ({} cores, real backend {})",
        count(Status::Pass),
        count(Status::Fail),
        count(Status::NotRun),
        cores,
        if real { "available" } else { "unavailable" }
    );
    if fatal {
        std::process::exit(1);
    }
}
