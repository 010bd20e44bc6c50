//! Correctness suites shared by the integration tests and the acceptance
//! binary. Each returns a one-line summary or the first disagreement found.

#![allow(dead_code)]

use std::collections::HashMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmshortcut::{
    Backend, ChainedTable, EhConfig, ExtendibleIndex, HashIndex, IncrementalTable, OpenTable, PagePool, PoolConfig,
    SehConfig, ShortcutEh, ShortcutNode, PAGE_SIZE,
};

pub type Suite = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `ops` mixed inserts and lookups, half of them on keys seen before, run
/// against every index and a `HashMap`. Shortcut-EH is maintained inline so
/// that every lookup can also be forced through the shortcut. Returns the
/// final key count and the number of forced shortcut lookups.
pub fn oracle(seed: u64, ops: usize, backend: Backend) -> Result<(usize, usize), String> {
    let mut r = rng(seed);
    let mut model: HashMap<u64, u64> = HashMap::new();
    let mut keys: Vec<u64> = Vec::new();
    let eh_config = EhConfig::new(backend).validate_splits(false);
    let mut indexes: Vec<Box<dyn HashIndex>> = vec![
        Box::new(OpenTable::new()),
        Box::new(IncrementalTable::new(8)),
        Box::new(ChainedTable::with_slots(1024)),
        Box::new(ExtendibleIndex::with_config(eh_config.clone()).map_err(|e| e.to_string())?),
    ];
    let mut seh = ShortcutEh::with_config(SehConfig::new(backend).eh(eh_config).manual()).map_err(|e| e.to_string())?;
    let mut forced = 0usize;

    for op in 0..ops {
        let key = if !keys.is_empty() && r.random_bool(0.5) {
            keys[r.random_range(0..keys.len())]
        } else {
            r.random_range(1..=u64::MAX)
        };
        if r.random_bool(0.5) {
            let value = r.random::<u64>();
            if model.insert(key, value).is_none() {
                keys.push(key);
            }
            for index in &mut indexes {
                index.insert(key, value).map_err(|e| format!("seed {seed} op {op}: {} insert: {e}", index.name()))?;
            }
            seh.insert(key, value).map_err(|e| format!("seed {seed} op {op}: Shortcut-EH insert: {e}"))?;
            continue;
        }
        let want = model.get(&key).copied();
        for index in &mut indexes {
            let got = index.get(key);
            if got != want {
                return Err(format!("seed {seed} op {op}: {} returned {got:?} for {key}, expected {want:?}", index.name()));
            }
        }
        let routed = seh.get(key);
        let traditional = seh.lookup_traditional(key);
        if !seh.in_sync() {
            seh.poll_maintenance().map_err(|e| format!("seed {seed} op {op}: maintenance: {e}"))?;
        }
        let shortcut = seh.lookup_shortcut(key);
        if shortcut.is_some() {
            forced += 1;
        } else if seh.traditional().directory().len() > 1 {
            return Err(format!("seed {seed} op {op}: shortcut not in sync after maintenance"));
        }
        if routed != want || traditional != want || shortcut.is_some_and(|s| s != want) {
            return Err(format!(
                "seed {seed} op {op}: Shortcut-EH routed {routed:?}, traditional {traditional:?}, shortcut {shortcut:?} for {key}, expected {want:?}"
            ));
        }
    }
    for index in &indexes {
        if index.len() != model.len() {
            return Err(format!("seed {seed}: {} holds {} keys, expected {}", index.name(), index.len(), model.len()));
        }
    }
    if seh.len() != model.len() {
        return Err(format!("seed {seed}: Shortcut-EH holds {} keys, expected {}", seh.len(), model.len()));
    }
    Ok((model.len(), forced))
}

/// Maps `slots` shortcut slots onto random pool pages twice, slot by slot
/// and in one batch, then checks that both nodes and the pool view show the
/// same bytes while random writes go through any of the three.
pub fn aliasing(seed: u64, slots: usize, writes: usize) -> Suite {
    let mut r = rng(seed);
    let pages = r.random_range(1..=slots);
    let mut pool = PagePool::with_config(PoolConfig::new(Backend::Real, pages).max_pages(pages))
        .map_err(|e| e.to_string())?;
    let offsets: Vec<u64> = (0..pages).map(|_| pool.acquire_page()).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    for (i, &off) in offsets.iter().enumerate() {
        let page = pool.view_address(off);
        // SAFETY: every offset names a live page of the pool view.
        unsafe { std::ptr::write_bytes(page, i as u8, PAGE_SIZE) };
    }

    // Runs of consecutive pages mixed with random picks, so batching merges
    // some slots and not others.
    let mut table = Vec::with_capacity(slots);
    while table.len() < slots {
        let start = r.random_range(0..pages);
        let run = r.random_range(1..=8).min(slots - table.len());
        for i in 0..run {
            table.push(offsets[(start + i) % pages]);
        }
    }
    let sequential = ShortcutNode::reserve(&pool, slots).map_err(|e| e.to_string())?;
    for (slot, &off) in table.iter().enumerate() {
        sequential.set_indirection(slot, off).map_err(|e| e.to_string())?;
    }
    let batch = ShortcutNode::reserve(&pool, slots).map_err(|e| e.to_string())?;
    batch.set_indirections_batch(0, &table).map_err(|e| e.to_string())?;
    if sequential.slot_offsets() != batch.slot_offsets() || batch.slot_offsets() != table {
        return Err(format!("seed {seed}: batch and sequential indirection tables differ"));
    }
    if batch.remap_calls() > sequential.remap_calls() {
        return Err(format!("seed {seed}: batch used {} calls, sequential {}", batch.remap_calls(), sequential.remap_calls()));
    }

    let compare = |slot: usize| -> Result<(), String> {
        let view = pool.view_address(table[slot]);
        // SAFETY: live pool page.
        let want = unsafe { std::slice::from_raw_parts(view, PAGE_SIZE) };
        for (name, node) in [("sequential", &sequential), ("batch", &batch)] {
            if node.read_bytes(slot, 0, PAGE_SIZE) != want {
                return Err(format!("seed {seed}: {name} slot {slot} differs from pool page {:#x}", table[slot]));
            }
        }
        Ok(())
    };
    for _ in 0..writes {
        let slot = r.random_range(0..slots);
        let pos = r.random_range(0..PAGE_SIZE);
        let len = r.random_range(1..=(PAGE_SIZE - pos).min(64));
        let data: Vec<u8> = (0..len).map(|_| r.random()).collect();
        match r.random_range(0..3) {
            0 => sequential.write_bytes(slot, pos, &data),
            1 => batch.write_bytes(slot, pos, &data),
            _ => {
                let page = pool.view_address(table[slot]);
                // SAFETY: pos + len <= PAGE_SIZE inside a live page.
                unsafe { std::ptr::copy_nonoverlapping(data.as_ptr(), page.add(pos), len) };
            }
        }
        // Every slot aliasing the written page must see the write.
        compare(slot)?;
        compare(r.random_range(0..slots))?;
    }
    for slot in 0..slots {
        compare(slot)?;
    }
    let calls = (sequential.remap_calls(), batch.remap_calls());
    sequential.destroy();
    batch.destroy();
    Ok(format!("{slots} slots over {pages} pages, {} vs {} remap calls", calls.0, calls.1))
}

/// `inserts` uniform keys into an index that validates the whole directory
/// after every split.
pub fn eh_invariants(seed: u64, inserts: usize, backend: Backend) -> Suite {
    let mut r = rng(seed);
    let mut eh = ExtendibleIndex::with_config(EhConfig::new(backend).validate_splits(true)).map_err(|e| e.to_string())?;
    let outcome = catch_unwind(AssertUnwindSafe(|| -> Result<(), String> {
        for i in 0..inserts {
            let key = r.random_range(1..=u64::MAX);
            eh.insert(key, i as u64).map_err(|e| e.to_string())?;
        }
        Ok(())
    }));
    match outcome {
        Ok(Ok(())) => {}
        Ok(Err(e)) => return Err(format!("seed {seed}: insert failed: {e}")),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            return Err(format!("seed {seed}: {msg}"));
        }
    }
    eh.validate().map_err(|e| format!("seed {seed}: {e}"))?;
    Ok(format!(
        "{} splits, {} doublings, global depth {}, all validated",
        eh.total_splits(),
        eh.total_doublings(),
        eh.global_depth()
    ))
}

pub struct SyncParams {
    pub seed: u64,
    pub poll: Duration,
    pub splitting_inserts: usize,
    pub lookups_per_split: usize,
    /// Largest injected publish delay.
    pub max_delay: Duration,
    /// Idle episodes in which convergence time is measured.
    pub idle_checks: usize,
}

/// Writer inserts until `splitting_inserts` inserts have split a bucket,
/// with a background mapper and random publish delays. After each
/// splitting insert it runs `lookups_per_split` lookups, each compared
/// across routed, traditional, forced shortcut and a model. The writer
/// pauses now and then so that the shortcut gets used. Every so often
/// the writer idles and the time until the shortcut catches up is checked
/// against two polls plus the mapper's last batch.
pub fn sync_protocol(p: &SyncParams) -> Suite {
    let mut r = rng(p.seed);
    let mut seh = ShortcutEh::with_config(
        SehConfig::new(Backend::Real)
            .eh(EhConfig::new(Backend::Real).validate_splits(false))
            .poll_interval(p.poll),
    )
    .map_err(|e| e.to_string())?;
    let mut model: HashMap<u64, u64> = HashMap::new();
    let mut keys: Vec<u64> = Vec::new();
    let (mut splits, mut lookups, mut via_shortcut, mut forced) = (0usize, 0usize, 0usize, 0usize);
    let idle_every = (p.splitting_inserts / p.idle_checks.max(1)).max(1);
    let mut worst = (0.0f64, Duration::ZERO, Duration::ZERO);
    let mut idles = 0usize;

    while splits < p.splitting_inserts {
        let key = r.random_range(1..=u64::MAX);
        let value = r.random::<u64>();
        let report = seh.insert(key, value).map_err(|e| e.to_string())?;
        if model.insert(key, value).is_none() {
            keys.push(key);
        }
        if report.is_empty() {
            continue;
        }
        splits += 1;
        if r.random_range(0..50) == 0 {
            let nanos = r.random_range(0..=p.max_delay.as_nanos() as u64);
            seh.set_publish_delay(Duration::from_nanos(nanos));
        }
        // Occasional writer pauses let the mapper publish between and during
        // lookup batches.
        if r.random_range(0..10) == 0 {
            std::thread::sleep(p.poll.mul_f64(r.random_range(0.0..3.0)));
        }
        for _ in 0..p.lookups_per_split {
            let key = keys[r.random_range(0..keys.len())];
            let want = model.get(&key).copied();
            let before = seh.route_counts().shortcut;
            let routed = seh.get(key);
            via_shortcut += (seh.route_counts().shortcut - before) as usize;
            let traditional = seh.lookup_traditional(key);
            let shortcut = seh.lookup_shortcut(key);
            forced += usize::from(shortcut.is_some());
            lookups += 1;
            if routed != want || traditional != want || shortcut.is_some_and(|s| s != want) {
                return Err(format!(
                    "split {splits}: routed {routed:?}, traditional {traditional:?}, shortcut {shortcut:?}, expected {want:?}"
                ));
            }
        }
        if splits % idle_every == 0 {
            let idle = Instant::now();
            while !seh.in_sync() {
                if let Some(e) = seh.mapper_failure() {
                    return Err(format!("mapper failed: {e}"));
                }
                if idle.elapsed() > Duration::from_secs(10) {
                    return Err(format!("no convergence 10 s after split {splits}"));
                }
                std::thread::sleep(Duration::from_micros(50));
            }
            let took = idle.elapsed();
            let bound = 2 * p.poll + Duration::from_nanos(seh.mapper_stats().last_batch_nanos);
            idles += 1;
            let ratio = took.as_secs_f64() / bound.as_secs_f64();
            if ratio > worst.0 {
                worst = (ratio, took, bound);
            }
            if took > bound {
                return Err(format!("converged in {took:?} after split {splits}, bound {bound:?}"));
            }
        }
    }
    if let Some(e) = seh.mapper_failure() {
        return Err(format!("mapper failed: {e}"));
    }
    if via_shortcut == 0 {
        return Err("no lookup was routed through the shortcut".into());
    }
    Ok(format!(
        "{splits} splitting inserts, {lookups} lookups ({via_shortcut} routed and {forced} forced through the shortcut), {idles} idle checks, slowest {:?} of {:?} bound",
        worst.1, worst.2
    ))
}
