//! Comparison hash tables: a rehashing open-addressing table (HT), its
//! incrementally migrating variant (HTI) and a fixed-size chained table (CH).
//!
//! All three take the slot from the low hash bits.

use crate::hash_common::{hash, Entry, HashIndex, IndexError};

/// Slots in a 4 KiB table of 16-byte entries.
pub const INITIAL_SLOTS: usize = 4096 / std::mem::size_of::<Entry>();

pub const DEFAULT_MAX_LOAD: f64 = 0.35;

pub const DEFAULT_MIGRATE_BATCH: usize = 128;

/// Table size used for CH when nothing else is given.
pub const DEFAULT_CHAINED_BYTES: usize = 1 << 30;

#[inline(always)]
fn home(h: u64, mask: usize) -> usize {
    h as usize & mask
}

/// Open addressing with linear probing over a power-of-two slot array.
#[derive(Clone, Debug)]
pub struct OpenTable {
    slots: Box<[Entry]>,
    mask: usize,
    count: usize,
    max_load: f64,
    rehashes: u64,
}

impl Default for OpenTable {
    fn default() -> Self {
        Self::new()
    }
}

impl OpenTable {
    pub fn new() -> Self {
        Self::with_slots(INITIAL_SLOTS, DEFAULT_MAX_LOAD)
    }

    /// `slots` is rounded up to a power of two.
    pub fn with_slots(slots: usize, max_load: f64) -> Self {
        assert!(max_load > 0.0 && max_load < 1.0, "max_load must be in (0, 1)");
        let n = slots.max(1).next_power_of_two();
        OpenTable {
            slots: vec![Entry::default(); n].into_boxed_slice(),
            mask: n - 1,
            count: 0,
            max_load,
            rehashes: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn max_load(&self) -> f64 {
        self.max_load
    }

    /// Full rehashes performed so far.
    pub fn rehashes(&self) -> u64 {
        self.rehashes
    }

    #[inline]
    fn would_overload(&self, count: usize) -> bool {
        count as f64 > self.max_load * self.slots.len() as f64
    }

    /// Position of `key`, or of the empty slot ending its probe sequence.
    #[inline]
    fn probe(&self, key: u64, h: u64) -> Result<usize, usize> {
        let mut pos = home(h, self.mask);
        loop {
            let k = self.slots[pos].key;
            if k == key {
                return Ok(pos);
            }
            if k == 0 {
                return Err(pos);
            }
            pos = (pos + 1) & self.mask;
        }
    }

    #[inline]
    pub fn lookup(&self, key: u64) -> Option<u64> {
        if key == 0 {
            return None;
        }
        self.probe(key, hash(key)).ok().map(|p| self.slots[p].value)
    }

    pub fn contains(&self, key: u64) -> bool {
        self.lookup(key).is_some()
    }

    pub fn insert(&mut self, key: u64, value: u64) -> Result<(), IndexError> {
        if key == 0 {
            return Err(IndexError::ReservedKey);
        }
        let h = hash(key);
        match self.probe(key, h) {
            Ok(p) => self.slots[p].value = value,
            Err(mut p) => {
                if self.would_overload(self.count + 1) {
                    self.rehash(self.slots.len() * 2);
                    p = self.probe(key, h).unwrap_err();
                }
                self.slots[p] = Entry { key, value };
                self.count += 1;
            }
        }
        Ok(())
    }

    fn rehash(&mut self, slots: usize) {
        let mut bigger = OpenTable::with_slots(slots, self.max_load);
        for e in self.slots.iter().filter(|e| e.key != 0) {
            bigger.place_new(*e);
        }
        bigger.rehashes = self.rehashes + 1;
        *self = bigger;
    }

    /// Stores an entry known to be absent, without a load check.
    #[inline]
    fn place_new(&mut self, e: Entry) {
        let p = self.probe(e.key, hash(e.key)).expect_err("duplicate key");
        self.slots[p] = e;
        self.count += 1;
    }

    pub fn iter(&self) -> impl Iterator<Item = Entry> + '_ {
        self.slots.iter().copied().filter(|e| e.key != 0)
    }
}

impl HashIndex for OpenTable {
    fn name(&self) -> &'static str {
        "HT"
    }

    fn insert(&mut self, key: u64, value: u64) -> Result<(), IndexError> {
        OpenTable::insert(self, key, value)
    }

    fn get(&mut self, key: u64) -> Option<u64> {
        self.lookup(key)
    }

    fn len(&self) -> usize {
        self.count
    }
}

/// Open addressing that grows by migrating a batch of entries per access
/// instead of rehashing everything at once.
#[derive(Clone, Debug)]
pub struct IncrementalTable {
    old: OpenTable,
    new: Option<OpenTable>,
    // Slots of `old` below this index have been migrated and cleared.
    cursor: usize,
    batch: usize,
    migrations: u64,
}

impl Default for IncrementalTable {
    fn default() -> Self {
        Self::new(DEFAULT_MIGRATE_BATCH)
    }
}

impl IncrementalTable {
    pub fn new(batch: usize) -> Self {
        Self::with_table(OpenTable::new(), batch)
    }

    pub fn with_table(table: OpenTable, batch: usize) -> Self {
        assert!(table.is_empty());
        IncrementalTable {
            old: table,
            new: None,
            cursor: 0,
            batch: batch.max(1),
            migrations: 0,
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn is_migrating(&self) -> bool {
        self.new.is_some()
    }

    /// Completed migrations.
    pub fn migrations(&self) -> u64 {
        self.migrations
    }

    /// Entries still in the table being migrated away from (or all entries
    /// when idle), and entries in the target table.
    pub fn table_counts(&self) -> (usize, usize) {
        (self.old.count, self.new.as_ref().map_or(0, |t| t.count))
    }

    pub fn len(&self) -> usize {
        let (a, b) = self.table_counts();
        a + b
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lookup in the old table. Every slot below the cursor has been
    /// migrated and is empty, so a probe sequence that starts there resumes
    /// at the cursor, and one that wraps into it has already been moved.
    #[inline]
    fn old_probe(&self, key: u64, h: u64) -> Option<usize> {
        let t = &self.old;
        let mut pos = home(h, t.mask).max(self.cursor);
        loop {
            if pos == t.slots.len() {
                if self.cursor > 0 {
                    return None;
                }
                pos = 0;
            }
            let k = t.slots[pos].key;
            if k == key {
                return Some(pos);
            }
            if k == 0 {
                return None;
            }
            pos += 1;
        }
    }

    #[inline]
    fn find(&self, key: u64, h: u64) -> Option<u64> {
        let Some(new) = &self.new else {
            return self.old.probe(key, h).ok().map(|p| self.old.slots[p].value);
        };
        let in_old = || self.old_probe(key, h).map(|p| self.old.slots[p].value);
        let in_new = || new.probe(key, h).ok().map(|p| new.slots[p].value);
        if new.count >= self.old.count {
            in_new().or_else(in_old)
        } else {
            in_old().or_else(in_new)
        }
    }

    /// Moves up to `batch` entries; finishes the migration once the cursor
    /// passes the end.
    fn migrate_step(&mut self, batch: usize) {
        let Some(new) = self.new.as_mut() else {
            return;
        };
        let mut moved = 0;
        while self.cursor < self.old.slots.len() {
            let e = self.old.slots[self.cursor];
            if e.key != 0 {
                if moved == batch {
                    return;
                }
                new.place_new(e);
                self.old.slots[self.cursor] = Entry::default();
                self.old.count -= 1;
                moved += 1;
            }
            self.cursor += 1;
        }
        debug_assert_eq!(self.old.count, 0);
        self.old = self.new.take().unwrap();
        self.cursor = 0;
        self.migrations += 1;
    }

    fn finish_migration(&mut self) {
        self.migrate_step(usize::MAX);
    }

    pub fn insert(&mut self, key: u64, value: u64) -> Result<(), IndexError> {
        if key == 0 {
            return Err(IndexError::ReservedKey);
        }
        let h = hash(key);
        if self.new.is_none() {
            match self.old.probe(key, h) {
                Ok(p) => self.old.slots[p].value = value,
                Err(p) if !self.old.would_overload(self.old.count + 1) => {
                    self.old.slots[p] = Entry { key, value };
                    self.old.count += 1;
                }
                Err(_) => {
                    let n = self.old.slots.len();
                    self.new = Some(OpenTable::with_slots(2 * n, self.old.max_load));
                    self.cursor = 0;
                    self.new.as_mut().unwrap().place_new(Entry { key, value });
                    self.migrate_step(self.batch);
                }
            }
            return Ok(());
        }
        if let Some(p) = self.old_probe(key, h) {
            self.old.slots[p].value = value;
        } else {
            let new = self.new.as_mut().unwrap();
            match new.probe(key, h) {
                Ok(p) => new.slots[p].value = value,
                Err(_) => {
                    if new.would_overload(self.old.count + new.count + 1) {
                        // The target would be overfull: complete this round
                        // and grow again through the idle path.
                        self.finish_migration();
                        return self.insert(key, value);
                    }
                    new.place_new(Entry { key, value });
                }
            }
        }
        self.migrate_step(self.batch);
        Ok(())
    }

    /// Looks `key` up, advancing any running migration.
    pub fn get(&mut self, key: u64) -> Option<u64> {
        if key == 0 {
            return None;
        }
        let found = self.find(key, hash(key));
        self.migrate_step(self.batch);
        found
    }

    /// Looks `key` up without migrating.
    pub fn peek(&self, key: u64) -> Option<u64> {
        if key == 0 {
            return None;
        }
        self.find(key, hash(key))
    }

    /// Keys in the old and the new table.
    pub fn keys_per_table(&self) -> (Vec<u64>, Vec<u64>) {
        (
            self.old.iter().map(|e| e.key).collect(),
            self.new.iter().flat_map(|t| t.iter().map(|e| e.key)).collect(),
        )
    }
}

impl HashIndex for IncrementalTable {
    fn name(&self) -> &'static str {
        "HTI"
    }

    fn insert(&mut self, key: u64, value: u64) -> Result<(), IndexError> {
        IncrementalTable::insert(self, key, value)
    }

    fn get(&mut self, key: u64) -> Option<u64> {
        IncrementalTable::get(self, key)
    }

    fn len(&self) -> usize {
        IncrementalTable::len(self)
    }
}

/// Entries per overflow bucket.
pub const CHAIN_BUCKET_ENTRIES: usize = 7;

/// 128-byte overflow bucket: next pointer, count, seven entries.
#[repr(C)]
#[derive(Debug)]
pub struct ChainBucket {
    next: Option<Box<ChainBucket>>,
    count: u64,
    entries: [Entry; CHAIN_BUCKET_ENTRIES],
}

const _: () = assert!(std::mem::size_of::<ChainBucket>() == 128);

impl ChainBucket {
    fn new() -> Box<Self> {
        Box::new(ChainBucket {
            next: None,
            count: 0,
            entries: [Entry::default(); CHAIN_BUCKET_ENTRIES],
        })
    }

    fn live(&self) -> &[Entry] {
        &self.entries[..self.count as usize]
    }
}

#[derive(Debug, Default)]
struct ChainSlot {
    inline: Entry,
    chain: Option<Box<ChainBucket>>,
}

/// Fixed slot array; the first entry of a slot lives inline and later ones
/// go to a chain of overflow buckets in insertion order. Never resizes.
#[derive(Debug)]
pub struct ChainedTable {
    slots: Box<[ChainSlot]>,
    mask: usize,
    count: usize,
    buckets: usize,
}

impl ChainedTable {
    /// Largest power-of-two slot array fitting in `table_bytes`.
    pub fn with_bytes(table_bytes: usize) -> Self {
        let fit = (table_bytes / std::mem::size_of::<ChainSlot>()).max(1);
        Self::with_slots(1 << fit.ilog2())
    }

    /// `slots` is rounded up to a power of two.
    pub fn with_slots(slots: usize) -> Self {
        let n = slots.max(1).next_power_of_two();
        let mut v = Vec::with_capacity(n);
        v.resize_with(n, ChainSlot::default);
        ChainedTable {
            slots: v.into_boxed_slice(),
            mask: n - 1,
            count: 0,
            buckets: 0,
        }
    }

    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Overflow buckets allocated in total.
    pub fn overflow_buckets(&self) -> usize {
        self.buckets
    }

    /// Bytes of the slot array plus all overflow buckets.
    pub fn footprint_bytes(&self) -> usize {
        self.slots.len() * std::mem::size_of::<ChainSlot>() + self.buckets * 128
    }

    /// Entry counts of the overflow buckets behind `key`'s slot.
    pub fn chain_of(&self, key: u64) -> Vec<usize> {
        let mut out = Vec::new();
        let mut b = self.slots[home(hash(key), self.mask)].chain.as_deref();
        while let Some(bucket) = b {
            out.push(bucket.count as usize);
            b = bucket.next.as_deref();
        }
        out
    }

    /// Keys of `key`'s slot in storage order, inline entry first.
    pub fn slot_keys(&self, key: u64) -> Vec<u64> {
        let slot = &self.slots[home(hash(key), self.mask)];
        let mut out = Vec::new();
        if slot.inline.key != 0 {
            out.push(slot.inline.key);
        }
        let mut b = slot.chain.as_deref();
        while let Some(bucket) = b {
            out.extend(bucket.live().iter().map(|e| e.key));
            b = bucket.next.as_deref();
        }
        out
    }

    #[inline]
    pub fn lookup(&self, key: u64) -> Option<u64> {
        if key == 0 {
            return None;
        }
        let slot = &self.slots[home(hash(key), self.mask)];
        if slot.inline.key == key {
            return Some(slot.inline.value);
        }
        let mut b = slot.chain.as_deref();
        while let Some(bucket) = b {
            if let Some(e) = bucket.live().iter().find(|e| e.key == key) {
                return Some(e.value);
            }
            b = bucket.next.as_deref();
        }
        None
    }

    pub fn insert(&mut self, key: u64, value: u64) -> Result<(), IndexError> {
        if key == 0 {
            return Err(IndexError::ReservedKey);
        }
        let slot = &mut self.slots[home(hash(key), self.mask)];
        if slot.inline.key == 0 {
            slot.inline = Entry { key, value };
            self.count += 1;
            return Ok(());
        }
        if slot.inline.key == key {
            slot.inline.value = value;
            return Ok(());
        }
        let mut link = &mut slot.chain;
        loop {
            match link {
                None => {
                    let mut bucket = ChainBucket::new();
                    bucket.entries[0] = Entry { key, value };
                    bucket.count = 1;
                    *link = Some(bucket);
                    self.buckets += 1;
                    self.count += 1;
                    return Ok(());
                }
                Some(bucket) => {
                    let n = bucket.count as usize;
                    if let Some(e) = bucket.entries[..n].iter_mut().find(|e| e.key == key) {
                        e.value = value;
                        return Ok(());
                    }
                    if n < CHAIN_BUCKET_ENTRIES && bucket.next.is_none() {
                        bucket.entries[n] = Entry { key, value };
                        bucket.count += 1;
                        self.count += 1;
                        return Ok(());
                    }
                    link = &mut bucket.next;
                }
            }
        }
    }
}

impl Drop for ChainedTable {
    fn drop(&mut self) {
        // Unlink iteratively so long chains do not recurse.
        for slot in self.slots.iter_mut() {
            let mut next = slot.chain.take();
            while let Some(mut b) = next {
                next = b.next.take();
            }
        }
    }
}

impl HashIndex for ChainedTable {
    fn name(&self) -> &'static str {
        "CH"
    }

    fn insert(&mut self, key: u64, value: u64) -> Result<(), IndexError> {
        ChainedTable::insert(self, key, value)
    }

    fn get(&mut self, key: u64) -> Option<u64> {
        self.lookup(key)
    }

    fn len(&self) -> usize {
        self.count
    }
}
