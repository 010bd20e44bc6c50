//! Hit lookups on every index after loading the same keys.

use std::time::Duration;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmshortcut::experiments::{unique_keys, value_of};
use vmshortcut::{
    Backend, ChainedTable, EhConfig, ExtendibleIndex, HashIndex, IncrementalTable, OpenTable, SehConfig, ShortcutEh,
};

const ENTRIES: usize = 200_000;
const PROBES: usize = 4_096;

fn lookups(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let keys = unique_keys(&mut rng, ENTRIES);
    let probes: Vec<u64> = (0..PROBES).map(|_| keys[rng.random_range(0..ENTRIES)]).collect();
    let backend = if Backend::real_available() { Backend::Real } else { Backend::Emulated };
    let eh = EhConfig::new(backend).validate_splits(false);

    let mut seh = ShortcutEh::with_config(SehConfig::new(backend).eh(eh.clone()).manual()).unwrap();
    let mut tables: Vec<Box<dyn HashIndex>> = vec![
        Box::new(OpenTable::new()),
        Box::new(IncrementalTable::new(vmshortcut::baselines::DEFAULT_MIGRATE_BATCH)),
        Box::new(ChainedTable::with_slots(ENTRIES.next_power_of_two() / 4)),
        Box::new(ExtendibleIndex::with_config(eh).unwrap()),
    ];
    for &k in &keys {
        for t in &mut tables {
            t.insert(k, value_of(k)).unwrap();
        }
        seh.insert(k, value_of(k)).unwrap();
    }
    assert!(seh.wait_for_sync(Duration::from_secs(60)));

    let mut group = c.benchmark_group("lookup");
    group.throughput(Throughput::Elements(PROBES as u64));
    for t in &mut tables {
        let name = t.name();
        group.bench_function(name, |b| {
            b.iter(|| probes.iter().fold(0u64, |acc, &k| acc ^ t.get(k).unwrap()))
        });
    }
    group.bench_function("Shortcut-EH/routed", |b| {
        b.iter(|| probes.iter().fold(0u64, |acc, &k| acc ^ seh.lookup(k).unwrap()))
    });
    group.bench_function("Shortcut-EH/traditional", |b| {
        b.iter(|| probes.iter().fold(0u64, |acc, &k| acc ^ seh.lookup_traditional(k).unwrap()))
    });
    group.bench_function("Shortcut-EH/shortcut", |b| {
        b.iter(|| probes.iter().fold(0u64, |acc, &k| acc ^ seh.lookup_shortcut(k).unwrap().unwrap()))
    });
    group.finish();

    c.bench_function("insert/Shortcut-EH-manual/10k", |b| {
        b.iter_batched(
            || ShortcutEh::with_config(SehConfig::new(backend).manual()).unwrap(),
            |mut s| {
                for &k in &keys[..10_000] {
                    s.insert(k, k).unwrap();
                }
                s
            },
            BatchSize::PerIteration,
        )
    });
}

criterion_group!(benches, lookups);
criterion_main!(benches);
