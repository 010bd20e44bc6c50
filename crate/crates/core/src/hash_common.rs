//! Hashing and bucket machinery shared by every index variant.
//!
//! Bucket page layout (4096 bytes, little endian, `repr(C)`):
//!
//! | bytes      | field                                  |
//! |------------|----------------------------------------|
//! | 0..4       | `local_depth: u32`                     |
//! | 4..8       | `count: u32`                           |
//! | 8..16      | reserved, zero in live buckets         |
//! | 16..4096   | 255 entries of `key: u64, value: u64`  |
//!
//! Key 0 marks an empty entry.

use thiserror::Error;

use crate::page_pool::{PoolError, PAGE_SIZE};
use crate::rewiring::MapError;

/// Multiplier of the shared multiplicative hash (2^64 / golden ratio).
pub const HASH_MULTIPLIER: u64 = 0x9E37_79B9_7F4A_7C15;

/// Entries per bucket page.
pub const BUCKET_CAPACITY: usize = (PAGE_SIZE - 16) / 16;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("key 0 is reserved")]
    ReservedKey,
    #[error("bucket keeps overflowing after {doublings} directory doublings")]
    SkewedSplit { doublings: u32 },
    #[error("directory depth limit {0} reached")]
    DepthLimit(u32),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Map(#[from] MapError),
}

/// `key * HASH_MULTIPLIER` with wraparound.
#[inline(always)]
pub fn hash(key: u64) -> u64 {
    key.wrapping_mul(HASH_MULTIPLIER)
}

/// Top `global_depth` bits of `h`.
#[inline(always)]
pub fn dir_slot(h: u64, global_depth: u32) -> usize {
    debug_assert!(global_depth <= 62);
    if global_depth == 0 {
        0
    } else {
        (h >> (64 - global_depth)) as usize
    }
}

/// In-bucket home position, from the low 32 hash bits so that it does not
/// correlate with the directory prefix.
#[inline(always)]
fn bucket_home(h: u64) -> usize {
    (((h & 0xFFFF_FFFF) * BUCKET_CAPACITY as u64) >> 32) as usize
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
#[repr(C)]
pub struct Entry {
    pub key: u64,
    pub value: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InsertOutcome {
    Inserted,
    Updated,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BucketFull;

/// One bucket, laid out to fill exactly one pool page.
#[repr(C, align(4096))]
pub struct BucketPage {
    pub local_depth: u32,
    pub count: u32,
    pub reserved: u64,
    pub entries: [Entry; BUCKET_CAPACITY],
}

const _: () = assert!(std::mem::size_of::<BucketPage>() == PAGE_SIZE);

impl BucketPage {
    /// Views a page as a bucket.
    ///
    /// # Safety
    /// `page` must point to a live, page-aligned, 4096-byte region that is
    /// not mutated elsewhere for `'a`.
    #[inline(always)]
    pub unsafe fn from_page<'a>(page: *const u8) -> &'a BucketPage {
        &*page.cast::<BucketPage>()
    }

    /// # Safety
    /// As [`BucketPage::from_page`], plus exclusive access for `'a`.
    #[inline(always)]
    pub unsafe fn from_page_mut<'a>(page: *mut u8) -> &'a mut BucketPage {
        &mut *page.cast::<BucketPage>()
    }

    pub fn clear(&mut self, local_depth: u32) {
        self.local_depth = local_depth;
        self.count = 0;
        self.reserved = 0;
        self.entries = [Entry::default(); BUCKET_CAPACITY];
    }

    pub fn len(&self) -> usize {
        self.count as usize
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_full(&self) -> bool {
        self.len() == BUCKET_CAPACITY
    }

    /// Upserts `entry` with the precomputed hash `h` of its key.
    #[inline]
    pub fn insert(&mut self, entry: Entry, h: u64) -> Result<InsertOutcome, BucketFull> {
        debug_assert_ne!(entry.key, 0);
        let mut pos = bucket_home(h);
        for _ in 0..BUCKET_CAPACITY {
            let slot = &mut self.entries[pos];
            if slot.key == entry.key {
                slot.value = entry.value;
                return Ok(InsertOutcome::Updated);
            }
            if slot.key == 0 {
                *slot = entry;
                self.count += 1;
                return Ok(InsertOutcome::Inserted);
            }
            pos += 1;
            if pos == BUCKET_CAPACITY {
                pos = 0;
            }
        }
        Err(BucketFull)
    }

    #[inline]
    pub fn lookup(&self, key: u64, h: u64) -> Option<u64> {
        let mut pos = bucket_home(h);
        for _ in 0..BUCKET_CAPACITY {
            let slot = &self.entries[pos];
            if slot.key == key {
                return Some(slot.value);
            }
            if slot.key == 0 {
                return None;
            }
            pos += 1;
            if pos == BUCKET_CAPACITY {
                pos = 0;
            }
        }
        None
    }

    pub fn iter(&self) -> impl Iterator<Item = Entry> + '_ {
        self.entries.iter().copied().filter(|e| e.key != 0)
    }

    pub fn as_bytes(&self) -> &[u8; PAGE_SIZE] {
        // SAFETY: BucketPage is repr(C), PAGE_SIZE bytes, no padding holes.
        unsafe { &*(self as *const BucketPage).cast::<[u8; PAGE_SIZE]>() }
    }
}

/// Common surface of every index variant, used by the oracle tests and the
/// workload harness.
pub trait HashIndex {
    fn name(&self) -> &'static str;

    /// Inserts or overwrites `key`.
    fn insert(&mut self, key: u64, value: u64) -> Result<(), IndexError>;

    /// Looks `key` up. Takes `&mut self` because some variants do
    /// housekeeping on every access.
    fn get(&mut self, key: u64) -> Option<u64>;

    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
