//! Classical extendible hashing over pool-resident 4 KiB buckets.
//!
//! The directory holds `2^global_depth` pool offsets and is indexed by the
//! most significant hash bits. A bucket of local depth `d` is referenced by
//! the `2^(global_depth - d)` consecutive slots sharing its `d`-bit prefix.
//! An overflowing bucket is split into two fresh buckets of depth `d + 1`;
//! when `d == global_depth` the directory doubles first.

use std::collections::HashSet;

use crate::hash_common::{dir_slot, hash, BucketFull, BucketPage, Entry, HashIndex, IndexError, InsertOutcome};
use crate::page_pool::{Backend, PagePool, PoolConfig, PoolHandle};

/// Deepest directory supported by [`dir_slot`].
pub const MAX_GLOBAL_DEPTH: u32 = 62;

/// Doublings a single insert may trigger before it gives up.
pub const MAX_DOUBLINGS_PER_INSERT: u32 = 16;

#[derive(Clone, Debug)]
pub struct EhConfig {
    pub backend: Backend,
    /// Re-check the directory after every split.
    pub validate_splits: bool,
    pub initial_pool_pages: usize,
}

impl EhConfig {
    pub fn new(backend: Backend) -> Self {
        EhConfig {
            backend,
            validate_splits: cfg!(debug_assertions),
            initial_pool_pages: 1,
        }
    }

    pub fn validate_splits(mut self, on: bool) -> Self {
        self.validate_splits = on;
        self
    }

    pub fn initial_pool_pages(mut self, pages: usize) -> Self {
        self.initial_pool_pages = pages.max(1);
        self
    }
}

/// A directory slot that now points at a different bucket.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SlotUpdate {
    pub slot: usize,
    pub offset: u64,
}

/// What an insert did to the directory.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitReport {
    pub doublings: u32,
    pub splits: u32,
    /// Slot rewrites in the order they happened. Indices refer to the
    /// directory as it was at the time of the rewrite.
    pub slot_updates: Vec<SlotUpdate>,
}

impl SplitReport {
    pub fn doubled(&self) -> bool {
        self.doublings > 0
    }

    pub fn is_empty(&self) -> bool {
        self.doublings == 0 && self.slot_updates.is_empty()
    }
}

#[derive(Debug)]
pub struct ExtendibleIndex {
    pool: PagePool,
    directory: Vec<u64>,
    global_depth: u32,
    num_buckets: usize,
    len: usize,
    validate_splits: bool,
    total_splits: u64,
    total_doublings: u64,
}

impl ExtendibleIndex {
    pub fn new(backend: Backend) -> Result<Self, IndexError> {
        Self::with_config(EhConfig::new(backend))
    }

    pub fn with_config(config: EhConfig) -> Result<Self, IndexError> {
        // Buckets are never deleted, so the pool never needs to shrink; a
        // shrink could also cut pages out from under a lagging shortcut.
        let mut pool =
            PagePool::with_config(PoolConfig::new(config.backend, config.initial_pool_pages).shrink_threshold(usize::MAX))?;
        let first = pool.acquire_page()?;
        // SAFETY: freshly acquired page, exclusively ours.
        unsafe { BucketPage::from_page_mut(pool.view_address(first)) }.clear(0);
        Ok(ExtendibleIndex {
            pool,
            directory: vec![first],
            global_depth: 0,
            num_buckets: 1,
            len: 0,
            validate_splits: config.validate_splits,
            total_splits: 0,
            total_doublings: 0,
        })
    }

    pub fn global_depth(&self) -> u32 {
        self.global_depth
    }

    pub fn num_buckets(&self) -> usize {
        self.num_buckets
    }

    pub fn directory(&self) -> &[u64] {
        &self.directory
    }

    pub fn pool(&self) -> &PagePool {
        &self.pool
    }

    pub fn pool_handle(&self) -> PoolHandle {
        self.pool.handle()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn total_splits(&self) -> u64 {
        self.total_splits
    }

    pub fn total_doublings(&self) -> u64 {
        self.total_doublings
    }

    /// `2^global_depth / num_buckets`.
    pub fn average_fanin(&self) -> f64 {
        self.directory.len() as f64 / self.num_buckets as f64
    }

    /// The bucket behind directory slot `slot`.
    pub fn bucket(&self, slot: usize) -> &BucketPage {
        // SAFETY: directory entries are live bucket pages.
        unsafe { BucketPage::from_page(self.pool.view_address(self.directory[slot])) }
    }

    #[inline(always)]
    fn bucket_at(&self, offset: u64) -> &BucketPage {
        // SAFETY: `offset` comes from the directory and names a live bucket.
        unsafe { BucketPage::from_page(self.pool.view_address_unchecked(offset)) }
    }

    #[inline(always)]
    #[allow(clippy::mut_from_ref)]
    fn bucket_at_mut(&mut self, offset: u64) -> &mut BucketPage {
        // SAFETY: as above; `&mut self` gives exclusive access.
        unsafe { BucketPage::from_page_mut(self.pool.view_address_unchecked(offset)) }
    }

    /// Directory → offset → pool view → bucket.
    #[inline]
    pub fn lookup(&self, key: u64) -> Option<u64> {
        if key == 0 {
            return None;
        }
        let h = hash(key);
        let slot = dir_slot(h, self.global_depth);
        debug_assert!(slot < self.directory.len());
        // SAFETY: dir_slot(h, gd) < 2^gd == directory.len().
        let offset = unsafe { *self.directory.get_unchecked(slot) };
        self.bucket_at(offset).lookup(key, h)
    }

    /// Inserts or overwrites `key`, splitting (and doubling) as needed.
    pub fn insert(&mut self, key: u64, value: u64) -> Result<SplitReport, IndexError> {
        if key == 0 {
            return Err(IndexError::ReservedKey);
        }
        let h = hash(key);
        let entry = Entry { key, value };
        let mut report = SplitReport::default();
        loop {
            let slot = dir_slot(h, self.global_depth);
            let offset = self.directory[slot];
            let bucket = self.bucket_at_mut(offset);
            match bucket.insert(entry, h) {
                Ok(InsertOutcome::Inserted) => {
                    self.len += 1;
                    return Ok(report);
                }
                Ok(InsertOutcome::Updated) => return Ok(report),
                Err(BucketFull) => {
                    if bucket.local_depth == self.global_depth {
                        if report.doublings == MAX_DOUBLINGS_PER_INSERT {
                            return Err(IndexError::SkewedSplit {
                                doublings: report.doublings,
                            });
                        }
                        self.double()?;
                        report.doublings += 1;
                    }
                    self.split(dir_slot(h, self.global_depth), &mut report)?;
                }
            }
        }
    }

    fn double(&mut self) -> Result<(), IndexError> {
        if self.global_depth == MAX_GLOBAL_DEPTH {
            return Err(IndexError::DepthLimit(MAX_GLOBAL_DEPTH));
        }
        let doubled: Vec<u64> = self.directory.iter().flat_map(|&o| [o, o]).collect();
        self.directory = doubled;
        self.global_depth += 1;
        self.total_doublings += 1;
        Ok(())
    }

    /// Splits the bucket behind `slot` into two new buckets one bit deeper and
    /// releases the old page.
    fn split(&mut self, slot: usize, report: &mut SplitReport) -> Result<(), IndexError> {
        let old = self.directory[slot];
        let depth = self.bucket_at(old).local_depth;
        debug_assert!(depth < self.global_depth);

        let low = self.pool.acquire_page()?;
        let high = self.pool.acquire_page()?;
        self.bucket_at_mut(low).clear(depth + 1);
        self.bucket_at_mut(high).clear(depth + 1);

        let entries: Vec<Entry> = self.bucket_at(old).iter().collect();
        for e in entries {
            let h = hash(e.key);
            let target = if (h >> (63 - depth)) & 1 == 0 { low } else { high };
            self.bucket_at_mut(target)
                .insert(e, h)
                .expect("half of a full bucket fits in a fresh one");
        }

        let span = 1usize << (self.global_depth - depth);
        let start = (slot >> (self.global_depth - depth)) << (self.global_depth - depth);
        for i in start..start + span {
            let target = if i < start + span / 2 { low } else { high };
            self.directory[i] = target;
            report.slot_updates.push(SlotUpdate { slot: i, offset: target });
        }
        self.pool.release_page(old)?;
        self.num_buckets += 1;
        self.total_splits += 1;
        report.splits += 1;

        if self.validate_splits {
            if let Err(msg) = self.validate() {
                panic!("directory invariant broken after split: {msg}");
            }
        }
        Ok(())
    }

    /// Full scan of the directory: prefix consistency, the fan-in law, and
    /// bookkeeping counters.
    pub fn validate(&self) -> Result<(), String> {
        let gd = self.global_depth;
        if self.directory.len() != 1usize << gd {
            return Err(format!("directory has {} slots at depth {gd}", self.directory.len()));
        }
        let mut seen = HashSet::new();
        let mut fanin_sum = 0usize;
        let mut entries = 0usize;
        let mut i = 0;
        while i < self.directory.len() {
            let off = self.directory[i];
            let bucket = self.bucket_at(off);
            let d = bucket.local_depth;
            if d > gd {
                return Err(format!("slot {i}: local depth {d} > global depth {gd}"));
            }
            let span = 1usize << (gd - d);
            if i % span != 0 {
                return Err(format!("slot {i}: bucket of depth {d} starts at unaligned slot"));
            }
            if let Some(j) = (i..i + span).find(|&j| self.directory[j] != off) {
                return Err(format!("slot {j}: expected bucket {off:#x} for prefix run at {i}"));
            }
            if !seen.insert(off) {
                return Err(format!("bucket {off:#x} referenced by two separate runs"));
            }
            let prefix = i >> (gd - d);
            let mut count = 0;
            for e in bucket.iter() {
                if dir_slot(hash(e.key), d) != prefix {
                    return Err(format!("key {} in bucket with prefix {prefix:#b}/{d}", e.key));
                }
                count += 1;
            }
            if count != bucket.len() {
                return Err(format!("bucket {off:#x} count {} but holds {count}", bucket.len()));
            }
            entries += count;
            fanin_sum += span;
            i += span;
        }
        if fanin_sum != 1usize << gd {
            return Err(format!("fan-in sum {fanin_sum} != 2^{gd}"));
        }
        if seen.len() != self.num_buckets {
            return Err(format!("{} distinct buckets, counter says {}", seen.len(), self.num_buckets));
        }
        if entries != self.len {
            return Err(format!("{entries} entries, counter says {}", self.len));
        }
        Ok(())
    }
}

impl HashIndex for ExtendibleIndex {
    fn name(&self) -> &'static str {
        "EH"
    }

    fn insert(&mut self, key: u64, value: u64) -> Result<(), IndexError> {
        ExtendibleIndex::insert(self, key, value).map(|_| ())
    }

    fn get(&mut self, key: u64) -> Option<u64> {
        self.lookup(key)
    }

    fn len(&self) -> usize {
        self.len
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::hash_common::BUCKET_CAPACITY;
    use rand::{Rng, SeedableRng};
    use std::collections::HashMap;

    /// Keys whose hashes start with the bit string `prefix` of length `bits`.
    pub(crate) fn keys_with_prefix(prefix: u64, bits: u32, n: usize, start: u64) -> Vec<u64> {
        (start..)
            .filter(|&k| k != 0 && dir_slot(hash(k), bits) as u64 == prefix)
            .take(n)
            .collect()
    }

    fn index() -> ExtendibleIndex {
        ExtendibleIndex::with_config(EhConfig::new(Backend::Emulated).validate_splits(true)).unwrap()
    }

    #[test]
    fn fresh_index() {
        let eh = index();
        assert_eq!(eh.directory().len(), 1);
        assert_eq!(eh.num_buckets(), 1);
        assert_eq!(eh.average_fanin(), 1.0);
        assert_eq!(eh.lookup(42), None);
    }

    #[test]
    fn single_insert() {
        let mut eh = index();
        let r = eh.insert(42, 4242).unwrap();
        assert!(r.is_empty());
        assert_eq!(eh.lookup(42), Some(4242));
        assert!(matches!(eh.insert(0, 1), Err(IndexError::ReservedKey)));
        assert_eq!(eh.lookup(0), None);
    }

    /// Depth 1 with buckets 0xxx and 1xxx, each half full.
    fn two_bucket_state() -> (ExtendibleIndex, Vec<u64>, Vec<u64>) {
        let mut eh = index();
        let zeros = keys_with_prefix(0, 1, 128, 1);
        let ones = keys_with_prefix(1, 1, 128, 1);
        for (&a, &b) in zeros.iter().zip(&ones) {
            eh.insert(a, a).unwrap();
            eh.insert(b, b).unwrap();
        }
        assert_eq!(eh.global_depth(), 1);
        assert_eq!(eh.num_buckets(), 2);
        (eh, zeros, ones)
    }

    #[test]
    fn overflow_of_one_bucket_doubles_directory() {
        let (mut eh, zeros, _) = two_bucket_state();
        let b0 = eh.directory()[0];
        // Fill bucket 1xxx with keys from both 10xx and 11xx until it splits.
        let more = keys_with_prefix(1, 1, BUCKET_CAPACITY, 1_000_000);
        let mut report = SplitReport::default();
        for &k in &more {
            report = eh.insert(k, k).unwrap();
            if report.doubled() {
                break;
            }
        }
        assert_eq!(report.doublings, 1);
        assert_eq!(report.splits, 1);
        assert_eq!(eh.global_depth(), 2);
        assert_eq!(eh.num_buckets(), 3);
        let dir = eh.directory();
        assert_eq!(dir[0], b0);
        assert_eq!(dir[1], b0);
        assert_ne!(dir[2], dir[3]);
        assert_eq!(eh.bucket(2).local_depth, 2);
        assert_eq!(eh.bucket(3).local_depth, 2);
        assert_eq!(eh.bucket(0).local_depth, 1);
        assert!((eh.average_fanin() - 4.0 / 3.0).abs() < 1e-12);
        // A 0xxx key resolves through either slot 00 or 01 to the same bucket.
        let k = zeros[0];
        assert!(dir_slot(hash(k), 2) < 2);
        assert_eq!(eh.lookup(k), Some(k));
        eh.validate().unwrap();
    }

    #[test]
    fn split_of_shared_bucket_does_not_double() {
        let (mut eh, _, _) = two_bucket_state();
        for &k in &keys_with_prefix(1, 1, BUCKET_CAPACITY, 1_000_000) {
            if eh.insert(k, k).unwrap().doubled() {
                break;
            }
        }
        assert_eq!(eh.global_depth(), 2);
        let mut report = SplitReport::default();
        for &k in &keys_with_prefix(0, 1, BUCKET_CAPACITY, 2_000_000) {
            report = eh.insert(k, k).unwrap();
            if report.splits > 0 {
                break;
            }
        }
        assert_eq!(report.doublings, 0);
        assert_eq!(report.slot_updates.len(), 2);
        assert_eq!(eh.global_depth(), 2);
        assert_eq!(eh.num_buckets(), 4);
        eh.validate().unwrap();
    }

    #[test]
    fn two_buckets_worth_plus_one() {
        let mut eh = index();
        let n = BUCKET_CAPACITY * 2 + 1;
        for k in 1..=n as u64 {
            eh.insert(k, k * 3).unwrap();
        }
        assert!(eh.num_buckets() >= 2);
        for k in 1..=n as u64 {
            assert_eq!(eh.lookup(k), Some(k * 3));
        }
    }

    #[test]
    fn skewed_keys_hit_the_doubling_cap() {
        // 256 keys sharing a 20-bit hash prefix need 20 doublings to separate.
        let mut eh = index();
        let keys = keys_with_prefix(0x5_A5A5, 20, BUCKET_CAPACITY + 1, 1);
        let mut result = Ok(SplitReport::default());
        for &k in &keys {
            result = eh.insert(k, k);
            if result.is_err() {
                break;
            }
        }
        assert!(matches!(result, Err(IndexError::SkewedSplit { doublings: 16 })));
        eh.validate().unwrap();
    }

    #[test]
    fn model_equivalence_and_reachability() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut eh = ExtendibleIndex::with_config(EhConfig::new(Backend::Real).validate_splits(false)).unwrap();
        let mut model = HashMap::new();
        for _ in 0..100_000 {
            let k = rng.random_range(1..50_000u64);
            if rng.random_bool(0.6) {
                let v = rng.random();
                let report = eh.insert(k, v).unwrap();
                model.insert(k, v);
                if report.doubled() {
                    for (&mk, &mv) in model.iter().take(500) {
                        assert_eq!(eh.lookup(mk), Some(mv));
                    }
                }
            } else {
                assert_eq!(eh.lookup(k), model.get(&k).copied());
            }
        }
        eh.validate().unwrap();
        assert_eq!(eh.len(), model.len());
    }

    #[test]
    fn uniform_keys_keep_fanin_low() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut eh = ExtendibleIndex::with_config(EhConfig::new(Backend::Real).validate_splits(false)).unwrap();
        while eh.global_depth() < 12 {
            eh.insert(rng.random_range(1..u64::MAX), 1).unwrap();
        }
        assert!(eh.average_fanin() < 2.0, "fan-in {}", eh.average_fanin());
    }
}
