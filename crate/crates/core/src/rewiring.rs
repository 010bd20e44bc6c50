//! Shortcut nodes: a consecutive virtual region of `k` pages whose per-page
//! mappings stand in for the `k` slot pointers of an inner node.
//!
//! Building a node takes two steps. [`ShortcutNode::reserve`] takes an
//! anonymous private region of `k` pages. [`ShortcutNode::set_indirection`]
//! then maps page `i` of the region onto the pool page that slot `i` points
//! to (`mmap` with `MAP_SHARED | MAP_FIXED` over the pool's file). Reading
//! slot `i` afterwards reads the leaf directly, with no pointer load.
//!
//! Unmapped slots stay anonymous and read as zeros.
//!
//! Remapping is done by one thread at a time per node. Other threads may read
//! mapped slots meanwhile; a slot read concurrently with its own remap sees
//! either the old or the new page.

use std::io;
use std::ptr;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use thiserror::Error;

use crate::page_pool::{PagePool, PoolHandle, PAGE_SIZE};
use crate::sys;

/// Marker stored in the shadow array for a slot with no indirection.
pub const UNMAPPED: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum MapError {
    #[error("failed to {op}: {source}")]
    Os {
        op: &'static str,
        #[source]
        source: io::Error,
    },
    #[error("a shortcut node needs at least one slot")]
    Empty,
    #[error("slots {start}..{end} out of range for a node with {slot_count} slots")]
    SlotOutOfRange { start: usize, end: usize, slot_count: usize },
    #[error("offset {0:#x} is not a pool page")]
    BadOffset(u64),
}

#[repr(C, align(4096))]
struct ZeroPage([u8; PAGE_SIZE]);

static ZERO_PAGE: ZeroPage = ZeroPage([0; PAGE_SIZE]);

/// A reserved region whose page mappings encode slot → leaf indirections.
#[derive(Debug)]
pub struct ShortcutNode {
    // Start of the region; null for the emulated backend.
    base: *mut u8,
    slot_count: usize,
    // slot_offsets[i] is the pool offset mapped at page i, or UNMAPPED. The
    // page table is the materialization of this array.
    slot_offsets: Box<[AtomicU64]>,
    populated: AtomicBool,
    remap_calls: AtomicU64,
    pool: PoolHandle,
}

// SAFETY: `base` points at a mapping owned by this node; all mutation goes
// through the kernel or through atomics.
unsafe impl Send for ShortcutNode {}
unsafe impl Sync for ShortcutNode {}

impl ShortcutNode {
    /// Reserves a node of `slot_count` unmapped slots over `pool`'s pages.
    pub fn reserve(pool: &PagePool, slot_count: usize) -> Result<Self, MapError> {
        Self::reserve_with(pool.handle(), slot_count)
    }

    /// Like [`ShortcutNode::reserve`], but from a pool handle so that it can be
    /// called away from the thread that owns the pool.
    pub fn reserve_with(pool: PoolHandle, slot_count: usize) -> Result<Self, MapError> {
        if slot_count == 0 {
            return Err(MapError::Empty);
        }
        let base = match &pool {
            PoolHandle::File(_) => sys::reserve_anonymous(slot_count * PAGE_SIZE).map_err(|source| MapError::Os {
                op: "reserve shortcut region",
                source,
            })?,
            PoolHandle::Emulated(_) => ptr::null_mut(),
        };
        Ok(ShortcutNode {
            base,
            slot_count,
            slot_offsets: (0..slot_count).map(|_| AtomicU64::new(UNMAPPED)).collect(),
            populated: AtomicBool::new(false),
            remap_calls: AtomicU64::new(0),
            pool,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn len_bytes(&self) -> usize {
        self.slot_count * PAGE_SIZE
    }

    /// Start of the region (null for the emulated backend).
    pub fn base(&self) -> *mut u8 {
        self.base
    }

    pub fn slot_offset(&self, slot: usize) -> Option<u64> {
        match self.slot_offsets[slot].load(Ordering::Acquire) {
            UNMAPPED => None,
            off => Some(off),
        }
    }

    pub fn slot_offsets(&self) -> Vec<u64> {
        self.slot_offsets.iter().map(|s| s.load(Ordering::Acquire)).collect()
    }

    /// Underlying remap calls issued so far.
    pub fn remap_calls(&self) -> u64 {
        self.remap_calls.load(Ordering::Relaxed)
    }

    pub fn is_populated(&self) -> bool {
        self.populated.load(Ordering::Acquire)
    }

    /// Address of the first byte of slot `slot`.
    ///
    /// For the real backend this is pure arithmetic on the region base. The
    /// emulated backend resolves the shadow offset through the pool table and
    /// hands out a shared zero page for unmapped slots, which must not be
    /// written.
    #[inline(always)]
    pub fn slot_ptr(&self, slot: usize) -> *const u8 {
        debug_assert!(slot < self.slot_count);
        if !self.base.is_null() {
            // SAFETY: slot < slot_count, so the address is inside the region.
            return unsafe { self.base.add(slot * PAGE_SIZE) };
        }
        self.emulated_slot_ptr(slot)
    }

    #[cold]
    fn emulated_slot_ptr(&self, slot: usize) -> *const u8 {
        let PoolHandle::Emulated(pages) = &self.pool else {
            unreachable!("emulated node without emulated pool");
        };
        match self.slot_offsets[slot].load(Ordering::Acquire) {
            UNMAPPED => ZERO_PAGE.0.as_ptr(),
            off => pages.resolve(off),
        }
    }

    /// Copies `len` bytes starting at byte `pos` of slot `slot`.
    pub fn read_bytes(&self, slot: usize, pos: usize, len: usize) -> Vec<u8> {
        assert!(slot < self.slot_count && pos + len <= PAGE_SIZE);
        let mut out = vec![0; len];
        // SAFETY: in-bounds read of a mapped or zero page.
        unsafe { ptr::copy_nonoverlapping(self.slot_ptr(slot).add(pos), out.as_mut_ptr(), len) };
        out
    }

    /// Writes `data` at byte `pos` of a mapped slot.
    pub fn write_bytes(&self, slot: usize, pos: usize, data: &[u8]) {
        assert!(slot < self.slot_count && pos + data.len() <= PAGE_SIZE);
        assert!(self.slot_offset(slot).is_some(), "slot {slot} is not mapped");
        // SAFETY: the slot is mapped to a writable pool page.
        unsafe { ptr::copy_nonoverlapping(data.as_ptr(), self.slot_ptr(slot).cast_mut().add(pos), data.len()) };
    }

    fn check_range(&self, start: usize, len: usize) -> Result<(), MapError> {
        if start.checked_add(len).is_none_or(|end| end > self.slot_count) {
            return Err(MapError::SlotOutOfRange {
                start,
                end: start.saturating_add(len),
                slot_count: self.slot_count,
            });
        }
        Ok(())
    }

    fn check_offset(&self, offset: u64) -> Result<(), MapError> {
        if offset % PAGE_SIZE as u64 != 0 || offset == UNMAPPED {
            return Err(MapError::BadOffset(offset));
        }
        if let PoolHandle::Emulated(pages) = &self.pool {
            if pages.resolve(offset).is_null() {
                return Err(MapError::BadOffset(offset));
            }
        }
        Ok(())
    }

    /// Maps `pages` consecutive slots starting at `slot` onto consecutive pool
    /// pages starting at `offset`, in one call.
    fn remap_run(&self, slot: usize, offset: u64, pages: usize, populate: bool) -> Result<(), MapError> {
        if let PoolHandle::File(fd) = &self.pool {
            // SAFETY: the range is inside our region; readers may observe the
            // old or the new page, both of which stay valid.
            unsafe {
                sys::map_shared_fixed(self.base.add(slot * PAGE_SIZE), pages * PAGE_SIZE, fd, offset, populate)
            }
            .map_err(|source| MapError::Os {
                op: "remap shortcut slot",
                source,
            })?;
        }
        for i in 0..pages {
            self.slot_offsets[slot + i].store(offset + (i * PAGE_SIZE) as u64, Ordering::Release);
        }
        self.remap_calls.fetch_add(1, Ordering::Relaxed);
        if !populate {
            self.populated.store(false, Ordering::Release);
        }
        Ok(())
    }

    /// Points slot `slot` at the pool page at `offset`.
    pub fn set_indirection(&self, slot: usize, offset: u64) -> Result<(), MapError> {
        self.check_range(slot, 1)?;
        self.check_offset(offset)?;
        self.remap_run(slot, offset, 1, false)
    }

    /// Like [`ShortcutNode::set_indirection`], but the page-table entry is
    /// created by the remap itself (`MAP_POPULATE`).
    pub fn set_indirection_populated(&self, slot: usize, offset: u64) -> Result<(), MapError> {
        self.check_range(slot, 1)?;
        self.check_offset(offset)?;
        self.remap_run(slot, offset, 1, true)
    }

    /// Same result as calling [`ShortcutNode::set_indirection`] for every slot
    /// from `start_slot`, but runs of consecutive pool pages are mapped with a
    /// single call.
    pub fn set_indirections_batch(&self, start_slot: usize, offsets: &[u64]) -> Result<(), MapError> {
        self.check_range(start_slot, offsets.len())?;
        for &off in offsets {
            self.check_offset(off)?;
        }
        let mut i = 0;
        while i < offsets.len() {
            let mut run = 1;
            while i + run < offsets.len() && offsets[i + run] == offsets[i] + (run * PAGE_SIZE) as u64 {
                run += 1;
            }
            self.remap_run(start_slot + i, offsets[i], run, false)?;
            i += run;
        }
        Ok(())
    }

    /// Creates page-table entries for every mapped slot.
    pub fn populate(&self) -> Result<(), MapError> {
        let mut slot = 0;
        while slot < self.slot_count {
            if self.slot_offset(slot).is_none() {
                slot += 1;
                continue;
            }
            let start = slot;
            while slot < self.slot_count && self.slot_offset(slot).is_some() {
                slot += 1;
            }
            self.populate_run(start, slot - start)?;
        }
        self.populated.store(true, Ordering::Release);
        Ok(())
    }

    /// Creates page-table entries for the given slots only.
    pub fn populate_slots(&self, slots: impl IntoIterator<Item = usize>) -> Result<(), MapError> {
        for slot in slots {
            if slot < self.slot_count && self.slot_offset(slot).is_some() {
                self.populate_run(slot, 1)?;
            }
        }
        Ok(())
    }

    fn populate_run(&self, slot: usize, pages: usize) -> Result<(), MapError> {
        if self.base.is_null() {
            return Ok(());
        }
        // SAFETY: the run is inside our region and mapped.
        unsafe {
            let addr = self.base.add(slot * PAGE_SIZE);
            let len = pages * PAGE_SIZE;
            let hinted = sys::populate_hint(addr, len, sys::Populate::Read).map_err(|source| MapError::Os {
                op: "populate shortcut",
                source,
            })?;
            if !hinted {
                sys::touch_pages(addr, len);
            }
        }
        Ok(())
    }

    /// Unmaps the region. Pool pages are left alone.
    pub fn destroy(self) {
        drop(self)
    }
}

impl Drop for ShortcutNode {
    fn drop(&mut self) {
        if !self.base.is_null() {
            // SAFETY: the region was reserved by `reserve_with` and is ours.
            if let Err(e) = unsafe { sys::unmap(self.base, self.len_bytes()) } {
                log::warn!("unmapping shortcut region failed: {e}");
            }
        }
    }
}
