//! Remapping one slot, mapping a node slot by slot vs batched, and populating.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use vmshortcut::{Backend, PagePool, PoolConfig, ShortcutNode};

const SLOTS: usize = 1 << 10;

fn pool(pages: usize) -> (PagePool, Vec<u64>) {
    let mut pool = PagePool::with_config(PoolConfig::new(Backend::Real, pages).max_pages(pages)).unwrap();
    let offsets = (0..pages).map(|_| pool.acquire_page().unwrap()).collect();
    (pool, offsets)
}

fn rewiring(c: &mut Criterion) {
    if !Backend::real_available() {
        eprintln!("rewiring benches need the real backend; skipped");
        return;
    }
    let (pool, offsets) = pool(SLOTS);
    let mut reversed = offsets.clone();
    reversed.reverse();

    let node = ShortcutNode::reserve(&pool, SLOTS).unwrap();
    let mut i = 0usize;
    c.bench_function("set_indirection/one-slot", |b| {
        b.iter(|| {
            i = i.wrapping_add(1);
            node.set_indirection(i % SLOTS, offsets[(i * 7) % SLOTS]).unwrap();
        })
    });
    node.destroy();

    let mut group = c.benchmark_group("map-node");
    group.throughput(Throughput::Elements(SLOTS as u64));
    for (name, table) in [("contiguous", &offsets), ("scattered", &reversed)] {
        group.bench_function(format!("sequential/{name}"), |b| {
            b.iter_batched(
                || ShortcutNode::reserve(&pool, SLOTS).unwrap(),
                |n| {
                    for (slot, &off) in table.iter().enumerate() {
                        n.set_indirection(slot, off).unwrap();
                    }
                    n
                },
                BatchSize::PerIteration,
            )
        });
        group.bench_function(format!("batch/{name}"), |b| {
            b.iter_batched(
                || ShortcutNode::reserve(&pool, SLOTS).unwrap(),
                |n| {
                    n.set_indirections_batch(0, table).unwrap();
                    n
                },
                BatchSize::PerIteration,
            )
        });
    }
    group.bench_function("populate/scattered", |b| {
        b.iter_batched(
            || {
                let n = ShortcutNode::reserve(&pool, SLOTS).unwrap();
                n.set_indirections_batch(0, &reversed).unwrap();
                n
            },
            |n| {
                n.populate().unwrap();
                n
            },
            BatchSize::PerIteration,
        )
    });
    group.finish();
}

criterion_group!(benches, rewiring);
criterion_main!(benches);
