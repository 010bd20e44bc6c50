//! A self-managed pool of physical pages.
//!
//! The pool is a single main-memory file (`memfd_create`) that is grown and
//! shrunk with `ftruncate`. The whole file is additionally mapped into one
//! linear virtual view so that the owner can reach any page with an add.
//! Pages are identified by their byte offset into the file; those offsets are
//! what shortcut nodes map.
//!
//! The linear view lives inside an address-space reservation of
//! `max_pages` pages taken at creation. Resizes re-map the file into the same
//! reservation, so the view base never moves, but callers must still treat
//! addresses as valid only until the next resize.
//!
//! An emulated backend keeps the same offset-based contract on top of plain
//! heap allocations. It satisfies every functional invariant and none of the
//! timing ones.

use std::collections::VecDeque;
use std::io;
use std::os::fd::OwnedFd;
use std::ptr;
use std::sync::atomic::{AtomicPtr, Ordering};
use std::sync::Arc;

use thiserror::Error;

use crate::sys;

/// Bytes per page. Fixed; buckets and shortcut slots are exactly one page.
pub const PAGE_SIZE: usize = sys::PAGE_SIZE;

/// Default size below which the pool file is never shrunk.
pub const DEFAULT_SHRINK_THRESHOLD: usize = 64;

/// Default address-space reservation for the linear view (64 GiB).
pub const DEFAULT_MAX_PAGES: usize = 1 << 24;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("failed to {op}: {source}")]
    Os {
        op: &'static str,
        #[source]
        source: io::Error,
    },
    #[error("pool cannot grow beyond {max_pages} pages")]
    Exhausted { max_pages: usize },
    #[error("a pool needs at least one page")]
    Empty,
    #[error("offset {0:#x} is not a page-aligned offset inside the pool")]
    BadOffset(u64),
    #[error("offset {0:#x} is already free")]
    DoubleRelease(u64),
}

fn os(op: &'static str) -> impl FnOnce(io::Error) -> PoolError {
    move |source| PoolError::Os { op, source }
}

/// Which implementation backs pools and shortcuts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Backend {
    /// `memfd_create` + `mmap` rewiring. Linux only.
    #[default]
    Real,
    /// Heap pages plus an offset table. Functional behaviour only.
    Emulated,
}

impl Backend {
    /// Whether the OS supports the real backend.
    pub fn real_available() -> bool {
        cfg!(target_os = "linux")
    }
}

#[derive(Clone, Debug)]
pub struct PoolConfig {
    pub backend: Backend,
    pub initial_pages: usize,
    pub shrink_threshold: usize,
    /// Upper bound on the pool size; sizes the view reservation.
    pub max_pages: usize,
}

impl PoolConfig {
    pub fn new(backend: Backend, initial_pages: usize) -> Self {
        PoolConfig {
            backend,
            initial_pages,
            shrink_threshold: DEFAULT_SHRINK_THRESHOLD,
            max_pages: DEFAULT_MAX_PAGES,
        }
    }

    pub fn shrink_threshold(mut self, pages: usize) -> Self {
        self.shrink_threshold = pages;
        self
    }

    pub fn max_pages(mut self, pages: usize) -> Self {
        self.max_pages = pages;
        self
    }
}

/// A shareable handle to the pool's backing store. Shortcut nodes hold one so
/// they can map pool pages without access to the pool itself.
#[derive(Clone, Debug)]
pub enum PoolHandle {
    File(Arc<OwnedFd>),
    Emulated(Arc<EmulatedPages>),
}

impl PoolHandle {
    pub fn backend(&self) -> Backend {
        match self {
            PoolHandle::File(_) => Backend::Real,
            PoolHandle::Emulated(_) => Backend::Emulated,
        }
    }
}

#[repr(C, align(4096))]
struct RawPage([u8; PAGE_SIZE]);

const CHUNK_PAGES: usize = 256;

/// Heap-backed page store for the emulated backend. Pages live in fixed-size
/// chunks that never move, so resolved addresses stay valid until the chunk
/// is released by a shrink.
#[derive(Debug)]
pub struct EmulatedPages {
    chunks: Box<[AtomicPtr<RawPage>]>,
}

impl EmulatedPages {
    fn new(max_pages: usize) -> Self {
        let n = max_pages.div_ceil(CHUNK_PAGES);
        EmulatedPages {
            chunks: (0..n).map(|_| AtomicPtr::new(ptr::null_mut())).collect(),
        }
    }

    fn chunk_layout() -> std::alloc::Layout {
        std::alloc::Layout::array::<RawPage>(CHUNK_PAGES).expect("chunk layout")
    }

    /// Makes sure pages `[0, pages)` exist.
    fn ensure(&self, pages: usize) {
        for slot in &self.chunks[..pages.div_ceil(CHUNK_PAGES)] {
            if slot.load(Ordering::Acquire).is_null() {
                // SAFETY: non-zero-sized layout.
                let chunk = unsafe { std::alloc::alloc_zeroed(Self::chunk_layout()) };
                if chunk.is_null() {
                    std::alloc::handle_alloc_error(Self::chunk_layout());
                }
                slot.store(chunk.cast(), Ordering::Release);
            }
        }
    }

    /// Frees chunks lying entirely at or beyond page `pages`.
    fn release_from(&self, pages: usize) {
        for slot in &self.chunks[pages.div_ceil(CHUNK_PAGES)..] {
            let chunk = slot.swap(ptr::null_mut(), Ordering::AcqRel);
            if !chunk.is_null() {
                // SAFETY: allocated in `ensure` with the same layout.
                unsafe { std::alloc::dealloc(chunk.cast(), Self::chunk_layout()) };
            }
        }
    }

    /// Address of the byte at `offset`. Null if that page does not exist.
    pub fn resolve(&self, offset: u64) -> *mut u8 {
        let page = (offset as usize) / PAGE_SIZE;
        let Some(slot) = self.chunks.get(page / CHUNK_PAGES) else {
            return ptr::null_mut();
        };
        let chunk = slot.load(Ordering::Acquire);
        if chunk.is_null() {
            return ptr::null_mut();
        }
        // SAFETY: the chunk holds CHUNK_PAGES pages.
        unsafe {
            chunk
                .add(page % CHUNK_PAGES)
                .cast::<u8>()
                .add(offset as usize % PAGE_SIZE)
        }
    }
}

impl Drop for EmulatedPages {
    fn drop(&mut self) {
        self.release_from(0);
    }
}

#[derive(Debug)]
struct MappedFile {
    fd: Arc<OwnedFd>,
    base: *mut u8,
    reserved: usize,
}

impl Drop for MappedFile {
    fn drop(&mut self) {
        // SAFETY: `base..base+reserved` is the reservation created in `create`.
        if let Err(e) = unsafe { sys::unmap(self.base, self.reserved) } {
            log::warn!("unmapping pool view failed: {e}");
        }
    }
}

#[derive(Debug)]
enum Storage {
    Mapped(MappedFile),
    Emulated(Arc<EmulatedPages>),
}

/// Resizable pool of 4 KiB pages addressed by byte offset.
#[derive(Debug)]
pub struct PagePool {
    storage: Storage,
    size_pages: usize,
    max_pages: usize,
    shrink_threshold: usize,
    // FIFO of candidate free page indices; entries whose `is_free` bit is
    // clear (or that lie past the end after a shrink) are stale and skipped.
    free_queue: VecDeque<usize>,
    is_free: Vec<bool>,
    free_count: usize,
}

// SAFETY: the raw view pointer is only dereferenced through methods that
// follow the single-writer contract documented on the type.
unsafe impl Send for PagePool {}
unsafe impl Sync for PagePool {}

impl PagePool {
    /// Creates a pool of `initial_pages` zeroed pages, all of them free.
    pub fn create(backend: Backend, initial_pages: usize, shrink_threshold: usize) -> Result<Self, PoolError> {
        Self::with_config(PoolConfig::new(backend, initial_pages).shrink_threshold(shrink_threshold))
    }

    pub fn with_config(config: PoolConfig) -> Result<Self, PoolError> {
        if config.initial_pages == 0 {
            return Err(PoolError::Empty);
        }
        let max_pages = config.max_pages.max(config.initial_pages);
        let storage = match config.backend {
            Backend::Real => {
                let fd = sys::memfd_create(c"pool").map_err(os("create memory file"))?;
                let reserved = max_pages * PAGE_SIZE;
                let base = sys::reserve_inaccessible(reserved).map_err(os("reserve pool view"))?;
                Storage::Mapped(MappedFile {
                    fd: Arc::new(fd),
                    base,
                    reserved,
                })
            }
            Backend::Emulated => Storage::Emulated(Arc::new(EmulatedPages::new(max_pages))),
        };
        let mut pool = PagePool {
            storage,
            size_pages: 0,
            max_pages,
            shrink_threshold: config.shrink_threshold,
            free_queue: VecDeque::new(),
            is_free: Vec::new(),
            free_count: 0,
        };
        pool.resize(config.initial_pages)?;
        for page in 0..config.initial_pages {
            pool.mark_free(page);
        }
        Ok(pool)
    }

    pub fn backend(&self) -> Backend {
        match self.storage {
            Storage::Mapped(_) => Backend::Real,
            Storage::Emulated(_) => Backend::Emulated,
        }
    }

    pub fn handle(&self) -> PoolHandle {
        match &self.storage {
            Storage::Mapped(m) => PoolHandle::File(Arc::clone(&m.fd)),
            Storage::Emulated(e) => PoolHandle::Emulated(Arc::clone(e)),
        }
    }

    pub fn page_size(&self) -> usize {
        PAGE_SIZE
    }

    pub fn size_pages(&self) -> usize {
        self.size_pages
    }

    pub fn size_bytes(&self) -> u64 {
        (self.size_pages * PAGE_SIZE) as u64
    }

    pub fn shrink_threshold(&self) -> usize {
        self.shrink_threshold
    }

    pub fn free_count(&self) -> usize {
        self.free_count
    }

    /// Free offsets in ascending order.
    pub fn free_offsets(&self) -> Vec<u64> {
        self.is_free
            .iter()
            .enumerate()
            .filter(|(_, &f)| f)
            .map(|(p, _)| (p * PAGE_SIZE) as u64)
            .collect()
    }

    pub fn is_free(&self, offset: u64) -> bool {
        offset % PAGE_SIZE as u64 == 0 && self.is_free.get(offset as usize / PAGE_SIZE).copied().unwrap_or(false)
    }

    /// Start of the linear view. For the emulated backend this is the address
    /// of page 0 only; other pages are not contiguous with it.
    pub fn linear_view_base(&self) -> *mut u8 {
        match &self.storage {
            Storage::Mapped(m) => m.base,
            Storage::Emulated(e) => e.resolve(0),
        }
    }

    /// Address of the byte at `offset` in the linear view.
    ///
    /// Panics if `offset` is outside the pool.
    #[inline]
    pub fn view_address(&self, offset: u64) -> *mut u8 {
        assert!(
            offset < self.size_bytes(),
            "offset {offset:#x} outside pool of {} pages",
            self.size_pages
        );
        // SAFETY: bounds checked above.
        unsafe { self.view_address_unchecked(offset) }
    }

    /// # Safety
    /// `offset` must lie inside the pool.
    #[inline(always)]
    pub(crate) unsafe fn view_address_unchecked(&self, offset: u64) -> *mut u8 {
        match &self.storage {
            Storage::Mapped(m) => m.base.add(offset as usize),
            Storage::Emulated(e) => e.resolve(offset),
        }
    }

    pub fn try_view_address(&self, offset: u64) -> Result<*mut u8, PoolError> {
        if offset >= self.size_bytes() {
            return Err(PoolError::BadOffset(offset));
        }
        Ok(self.view_address(offset))
    }

    /// Hands out a zeroed page, growing the file (by doubling) when no free
    /// page is left.
    pub fn acquire_page(&mut self) -> Result<u64, PoolError> {
        let page = match self.pop_free() {
            Some(page) => page,
            None => {
                let old = self.size_pages;
                let target = (old * 2).max(old + 1).min(self.max_pages);
                if target <= old {
                    return Err(PoolError::Exhausted {
                        max_pages: self.max_pages,
                    });
                }
                self.resize(target)?;
                for p in old + 1..target {
                    self.mark_free(p);
                }
                old
            }
        };
        let offset = (page * PAGE_SIZE) as u64;
        // SAFETY: page < size_pages and nobody else references it.
        unsafe { ptr::write_bytes(self.view_address_unchecked(offset), 0, PAGE_SIZE) };
        Ok(offset)
    }

    /// Returns a page to the pool. A trailing page shrinks the file (together
    /// with any free pages that become trailing) as long as the pool stays
    /// above the shrink threshold.
    pub fn release_page(&mut self, offset: u64) -> Result<(), PoolError> {
        if offset % PAGE_SIZE as u64 != 0 || offset >= self.size_bytes() {
            return Err(PoolError::BadOffset(offset));
        }
        let page = offset as usize / PAGE_SIZE;
        if self.is_free[page] {
            return Err(PoolError::DoubleRelease(offset));
        }
        if page + 1 == self.size_pages && self.size_pages > self.shrink_threshold {
            let mut new_size = page;
            while new_size > 0 && new_size > self.shrink_threshold && self.is_free[new_size - 1] {
                new_size -= 1;
                self.is_free[new_size] = false;
                self.free_count -= 1;
            }
            self.resize(new_size)?;
        } else {
            self.mark_free(page);
        }
        Ok(())
    }

    fn mark_free(&mut self, page: usize) {
        debug_assert!(!self.is_free[page]);
        self.is_free[page] = true;
        self.free_count += 1;
        self.free_queue.push_back(page);
    }

    fn pop_free(&mut self) -> Option<usize> {
        while let Some(page) = self.free_queue.pop_front() {
            if self.is_free.get(page).copied().unwrap_or(false) {
                self.is_free[page] = false;
                self.free_count -= 1;
                return Some(page);
            }
        }
        None
    }

    /// Sets the file to `pages` pages and re-establishes the view over it.
    /// New pages are zero and get page-table entries right away.
    fn resize(&mut self, pages: usize) -> Result<(), PoolError> {
        let old = self.size_pages;
        match &self.storage {
            Storage::Mapped(m) => {
                sys::ftruncate(&m.fd, pages * PAGE_SIZE).map_err(os("resize memory file"))?;
                if pages > old {
                    let len = (pages - old) * PAGE_SIZE;
                    // SAFETY: the range lies inside our reservation, past the
                    // end of the previously mapped file.
                    unsafe {
                        let addr = m.base.add(old * PAGE_SIZE);
                        sys::map_shared_fixed(addr, len, &m.fd, (old * PAGE_SIZE) as u64, false)
                            .map_err(os("map pool view"))?;
                        if !sys::populate_hint(addr, len, sys::Populate::Write).map_err(os("populate pool view"))? {
                            for off in (0..len).step_by(PAGE_SIZE) {
                                ptr::write_volatile(addr.add(off), 0);
                            }
                        }
                    }
                } else if pages < old {
                    // SAFETY: the range lies inside our reservation and the
                    // released pages are no longer referenced.
                    unsafe {
                        sys::rereserve_fixed(m.base.add(pages * PAGE_SIZE), (old - pages) * PAGE_SIZE)
                            .map_err(os("trim pool view"))?;
                    }
                }
            }
            Storage::Emulated(e) => {
                if pages > old {
                    e.ensure(pages);
                } else {
                    e.release_from(pages);
                }
            }
        }
        self.size_pages = pages;
        self.is_free.resize(pages, false);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn backends() -> [Backend; 2] {
        [Backend::Real, Backend::Emulated]
    }

    #[test]
    fn create_four_pages_all_free() {
        for b in backends() {
            let pool = PagePool::create(b, 4, 2).unwrap();
            assert_eq!(pool.size_pages(), 4);
            assert_eq!(pool.free_offsets(), vec![0, 4096, 8192, 12288]);
        }
    }

    #[test]
    fn create_single_page() {
        let pool = PagePool::create(Backend::Real, 1, 1).unwrap();
        assert_eq!(pool.free_offsets(), vec![0]);
    }

    #[test]
    fn create_sum_of_offsets() {
        let pool = PagePool::create(Backend::Real, 1024, 16).unwrap();
        let sum: u64 = pool.free_offsets().iter().sum();
        assert_eq!(sum, 4096 * (1024 * 1023 / 2));
    }

    #[test]
    fn zero_pages_rejected() {
        assert!(matches!(PagePool::create(Backend::Real, 0, 1), Err(PoolError::Empty)));
    }

    #[test]
    fn acquire_last_free_page() {
        let mut pool = PagePool::create(Backend::Real, 1, 1).unwrap();
        assert_eq!(pool.acquire_page().unwrap(), 0);
        assert_eq!(pool.free_count(), 0);
    }

    #[test]
    fn acquire_grows_by_doubling() {
        for b in backends() {
            let mut pool = PagePool::create(b, 2, 1).unwrap();
            pool.acquire_page().unwrap();
            pool.acquire_page().unwrap();
            assert_eq!(pool.acquire_page().unwrap(), 8192);
            assert_eq!(pool.size_pages(), 4);
            assert_eq!(pool.free_offsets(), vec![12288]);
        }
    }

    #[test]
    fn acquired_pages_are_zeroed_and_distinct() {
        for b in backends() {
            let mut pool = PagePool::create(b, 2, 64).unwrap();
            let a = pool.acquire_page().unwrap();
            let c = pool.acquire_page().unwrap();
            assert_ne!(a, c);
            unsafe { ptr::write_bytes(pool.view_address(a), 0xEE, PAGE_SIZE) };
            pool.release_page(a).unwrap();
            let again = pool.acquire_page().unwrap();
            assert_eq!(again, a);
            let page = unsafe { std::slice::from_raw_parts(pool.view_address(again), PAGE_SIZE) };
            assert!(page.iter().all(|&x| x == 0));
        }
    }

    #[test]
    fn release_trailing_page_shrinks() {
        for b in backends() {
            let mut pool = PagePool::create(b, 4, 2).unwrap();
            for _ in 0..4 {
                pool.acquire_page().unwrap();
            }
            pool.release_page(12288).unwrap();
            assert_eq!(pool.size_pages(), 3);
            assert!(pool.free_offsets().is_empty());
        }
    }

    #[test]
    fn release_interior_page_queues_it() {
        let mut pool = PagePool::create(Backend::Real, 4, 2).unwrap();
        for _ in 0..4 {
            pool.acquire_page().unwrap();
        }
        pool.release_page(0).unwrap();
        assert_eq!(pool.free_offsets(), vec![0]);
        assert_eq!(pool.size_pages(), 4);
    }

    #[test]
    fn release_cascades_over_trailing_free_pages() {
        for b in backends() {
            let mut pool = PagePool::create(b, 4, 1).unwrap();
            for _ in 0..4 {
                pool.acquire_page().unwrap();
            }
            pool.release_page(8192).unwrap();
            assert_eq!(pool.free_offsets(), vec![8192]);
            pool.release_page(12288).unwrap();
            assert_eq!(pool.size_pages(), 2);
            assert!(pool.free_offsets().is_empty());
            // Regrowth after the shrink hands out the reclaimed range again.
            assert_eq!(pool.acquire_page().unwrap(), 8192);
        }
    }

    #[test]
    fn threshold_stops_shrinking() {
        let mut pool = PagePool::create(Backend::Real, 4, 4).unwrap();
        for _ in 0..4 {
            pool.acquire_page().unwrap();
        }
        pool.release_page(12288).unwrap();
        assert_eq!(pool.size_pages(), 4);
        assert_eq!(pool.free_offsets(), vec![12288]);
    }

    #[test]
    fn bad_releases_rejected() {
        let mut pool = PagePool::create(Backend::Real, 4, 2).unwrap();
        assert!(matches!(pool.release_page(0), Err(PoolError::DoubleRelease(0))));
        assert!(matches!(pool.release_page(100), Err(PoolError::BadOffset(100))));
        assert!(matches!(pool.release_page(4 * 4096), Err(PoolError::BadOffset(_))));
    }

    #[test]
    fn view_address_is_linear() {
        let pool = PagePool::create(Backend::Real, 4, 2).unwrap();
        let base = pool.linear_view_base();
        assert_eq!(pool.view_address(0), base);
        assert_eq!(pool.view_address(4096), unsafe { base.add(4096) });
        assert!(pool.try_view_address(4 * 4096).is_err());
    }

    #[test]
    #[should_panic]
    fn view_address_out_of_range_panics() {
        let pool = PagePool::create(Backend::Emulated, 1, 1).unwrap();
        pool.view_address(4096);
    }

    #[test]
    fn exhaustion_reported() {
        let mut pool = PagePool::with_config(PoolConfig::new(Backend::Real, 2).max_pages(2)).unwrap();
        pool.acquire_page().unwrap();
        pool.acquire_page().unwrap();
        assert!(matches!(pool.acquire_page(), Err(PoolError::Exhausted { max_pages: 2 })));
    }

    #[test]
    fn data_survives_growth() {
        for b in backends() {
            let mut pool = PagePool::create(b, 1, 1).unwrap();
            let first = pool.acquire_page().unwrap();
            unsafe { pool.view_address(first).write(0x5A) };
            for _ in 0..100 {
                pool.acquire_page().unwrap();
            }
            assert_eq!(unsafe { pool.view_address(first).read() }, 0x5A);
        }
    }

    #[derive(Debug, Clone)]
    enum Op {
        Acquire,
        Release(usize),
    }

    fn ops() -> impl Strategy<Value = Vec<Op>> {
        prop::collection::vec(
            prop_oneof![3 => Just(Op::Acquire), 2 => any::<usize>().prop_map(Op::Release)],
            1..300,
        )
    }

    proptest! {
        // acquired ∪ free partitions the pool, against a set model.
        #[test]
        fn conservation(ops in ops(), threshold in 0usize..8, emulated in any::<bool>()) {
            let backend = if emulated { Backend::Emulated } else { Backend::Real };
            let mut pool = PagePool::create(backend, 1, threshold).unwrap();
            let mut held: BTreeSet<u64> = BTreeSet::new();
            for op in ops {
                match op {
                    Op::Acquire => {
                        let o = pool.acquire_page().unwrap();
                        prop_assert!(held.insert(o), "offset {o} handed out twice");
                    }
                    Op::Release(i) => {
                        if held.is_empty() { continue; }
                        let o = *held.iter().nth(i % held.len()).unwrap();
                        held.remove(&o);
                        pool.release_page(o).unwrap();
                    }
                }
                let free: BTreeSet<u64> = pool.free_offsets().into_iter().collect();
                prop_assert!(free.is_disjoint(&held));
                prop_assert_eq!(free.len() + held.len(), pool.size_pages());
                prop_assert_eq!(pool.free_count(), free.len());
                prop_assert!(held.iter().all(|&o| o < pool.size_bytes()));
            }
        }
    }
}
