//! Shortcut-EH: extendible hashing whose directory is mirrored by a shortcut
//! node that a background mapper keeps up to date.
//!
//! The writer thread owns the traditional directory and applies every change
//! to it synchronously. Each change is also described as a
//! [`MaintenanceRequest`] on a lock-free FIFO:
//!
//! * a split that rewrites directory slots produces one `Update` per slot;
//! * an insert that doubled the directory first pops every pending request
//!   (they are outdated) and then pushes one `Create` carrying the complete
//!   offset vector.
//!
//! The mapper thread wakes every `poll_interval`, drains the queue, replays
//! the requests onto its shortcut node, populates the touched page-table
//! entries and only then publishes the version the node has reached.
//!
//! Every request is stamped with the traditional version it brings the
//! shortcut up to. A lookup takes the shortcut route only if the versions are
//! equal and the average fan-in is at most `fanin_threshold`; otherwise it
//! goes through the traditional directory. Both routes return the same
//! answers.
//!
//! Readers on other threads are only safe while no insert is running. The
//! writer itself may interleave inserts and lookups freely while the mapper
//! works in the background.

use std::sync::atomic::{AtomicBool, AtomicPtr, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_queue::SegQueue;

use crate::extendible::{EhConfig, ExtendibleIndex, SplitReport};
use crate::hash_common::{dir_slot, hash, BucketPage, HashIndex, IndexError};
use crate::page_pool::{Backend, PoolHandle};
use crate::rewiring::{MapError, ShortcutNode};

pub const DEFAULT_FANIN_THRESHOLD: u32 = 8;
pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_millis(25);

/// Work item for the mapper.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum MaintenanceRequest {
    /// Point shortcut slot `slot` at the bucket page at `offset`.
    Update { slot: usize, offset: u64, target_version: u64 },
    /// Replace the shortcut with a fresh node of `slot_count` slots.
    Create {
        slot_count: usize,
        offsets: Vec<u64>,
        target_version: u64,
    },
}

impl MaintenanceRequest {
    pub fn target_version(&self) -> u64 {
        match self {
            MaintenanceRequest::Update { target_version, .. } | MaintenanceRequest::Create { target_version, .. } => {
                *target_version
            }
        }
    }

    pub fn is_create(&self) -> bool {
        matches!(self, MaintenanceRequest::Create { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Shortcut,
    Traditional,
}

/// How the shortcut gets maintained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Maintenance {
    /// A dedicated mapper thread polling every `poll_interval`.
    Background { poll_interval: Duration },
    /// No thread; the owner calls [`ShortcutEh::poll_maintenance`].
    Manual,
}

#[derive(Clone, Debug)]
pub struct SehConfig {
    pub eh: EhConfig,
    pub fanin_threshold: u32,
    pub maintenance: Maintenance,
    /// Core to pin the mapper thread to.
    pub mapper_core: Option<usize>,
}

impl SehConfig {
    pub fn new(backend: Backend) -> Self {
        SehConfig {
            eh: EhConfig::new(backend),
            fanin_threshold: DEFAULT_FANIN_THRESHOLD,
            maintenance: Maintenance::Background {
                poll_interval: DEFAULT_POLL_INTERVAL,
            },
            mapper_core: None,
        }
    }

    pub fn eh(mut self, eh: EhConfig) -> Self {
        self.eh = eh;
        self
    }

    pub fn fanin_threshold(mut self, t: u32) -> Self {
        self.fanin_threshold = t;
        self
    }

    pub fn poll_interval(mut self, interval: Duration) -> Self {
        self.maintenance = Maintenance::Background {
            poll_interval: interval,
        };
        self
    }

    pub fn manual(mut self) -> Self {
        self.maintenance = Maintenance::Manual;
        self
    }

    pub fn mapper_core(mut self, core: Option<usize>) -> Self {
        self.mapper_core = core;
        self
    }
}

/// Counters kept by the mapper.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MapperStats {
    pub polls: u64,
    pub batches: u64,
    pub creates_applied: u64,
    pub updates_applied: u64,
    /// Requests dropped because a later `Create` in the same batch, or the
    /// live node's creation version, superseded them.
    pub requests_skipped: u64,
    pub remap_calls: u64,
    /// Wall time of the last non-empty batch, population included.
    pub last_batch_nanos: u64,
    /// Wall time of all non-empty batches.
    pub busy_nanos: u64,
}

#[derive(Default)]
struct AtomicStats {
    polls: AtomicU64,
    batches: AtomicU64,
    creates_applied: AtomicU64,
    updates_applied: AtomicU64,
    requests_skipped: AtomicU64,
    remap_calls: AtomicU64,
    last_batch_nanos: AtomicU64,
    busy_nanos: AtomicU64,
}

struct Shared {
    queue: SegQueue<MaintenanceRequest>,
    traditional_version: AtomicU64,
    shortcut_version: AtomicU64,
    node: AtomicPtr<ShortcutNode>,
    stop: AtomicBool,
    publish_delay_nanos: AtomicU64,
    failure: Mutex<Option<String>>,
    stats: AtomicStats,
}


/// Consumer side: owns the live shortcut node.
struct Mapper {
    shared: Arc<Shared>,
    pool: PoolHandle,
    node: Option<Box<ShortcutNode>>,
    // Version reached by the Create that built `node`.
    created_at: u64,
}

impl Mapper {
    /// Drains and applies every pending request. Returns whether anything
    /// was pending.
    fn poll_once(&mut self) -> Result<bool, MapError> {
        let stats = &self.shared.stats;
        stats.polls.fetch_add(1, Ordering::Relaxed);
        let mut batch = Vec::new();
        while let Some(req) = self.shared.queue.pop() {
            batch.push(req);
        }
        let Some(last) = batch.last() else {
            return Ok(false);
        };
        let target = last.target_version();
        let started = Instant::now();

        // Anything before the last Create is superseded by it.
        let first = batch.iter().rposition(MaintenanceRequest::is_create).unwrap_or(0);
        stats.requests_skipped.fetch_add(first as u64, Ordering::Relaxed);

        let mut fresh: Option<(Box<ShortcutNode>, u64)> = None;
        let mut touched = Vec::new();
        for req in batch.drain(first..) {
            match req {
                MaintenanceRequest::Create {
                    slot_count,
                    offsets,
                    target_version,
                } => {
                    debug_assert_eq!(slot_count, offsets.len());
                    let node = ShortcutNode::reserve_with(self.pool.clone(), slot_count)?;
                    node.set_indirections_batch(0, &offsets)?;
                    fresh = Some((Box::new(node), target_version));
                    stats.creates_applied.fetch_add(1, Ordering::Relaxed);
                }
                MaintenanceRequest::Update {
                    slot,
                    offset,
                    target_version,
                } => {
                    let (node, created_at) = match (&fresh, &self.node) {
                        (Some((n, v)), _) => (n.as_ref(), *v),
                        (None, Some(n)) => (n.as_ref(), self.created_at),
                        (None, None) => {
                            stats.requests_skipped.fetch_add(1, Ordering::Relaxed);
                            continue;
                        }
                    };
                    // Only reachable when the writer's drain raced with us.
                    if target_version < created_at {
                        stats.requests_skipped.fetch_add(1, Ordering::Relaxed);
                        continue;
                    }
                    node.set_indirection(slot, offset)?;
                    touched.push(slot);
                    stats.updates_applied.fetch_add(1, Ordering::Relaxed);
                }
            }
        }

        // Page-table entries must exist before the version is published.
        match (&fresh, &self.node) {
            (Some((node, _)), _) => {
                node.populate()?;
                stats.remap_calls.fetch_add(node.remap_calls(), Ordering::Relaxed);
            }
            (None, Some(node)) => {
                node.populate_slots(touched.iter().copied())?;
                stats.remap_calls.fetch_add(touched.len() as u64, Ordering::Relaxed);
            }
            (None, None) => {}
        }
        let delay = self.shared.publish_delay_nanos.load(Ordering::Relaxed);
        if delay > 0 {
            thread::sleep(Duration::from_nanos(delay));
        }

        if let Some((node, version)) = fresh {
            self.shared
                .node
                .store(node.as_ref() as *const ShortcutNode as *mut ShortcutNode, Ordering::Release);
            // Nobody can be reading the old node: readers follow the node
            // pointer only when versions match, and they cannot match while
            // this Create is unpublished.
            drop(self.node.replace(node));
            self.created_at = version;
        }
        self.shared.shortcut_version.store(target, Ordering::Release);
        stats.batches.fetch_add(1, Ordering::Relaxed);
        let nanos = started.elapsed().as_nanos() as u64;
        stats.last_batch_nanos.store(nanos, Ordering::Relaxed);
        stats.busy_nanos.fetch_add(nanos, Ordering::Relaxed);
        Ok(true)
    }

    fn run(mut self, poll_interval: Duration) {
        while !self.shared.stop.load(Ordering::Acquire) {
            if let Err(e) = self.poll_once() {
                log::error!("shortcut maintenance failed: {e}");
                *self.shared.failure.lock().unwrap() = Some(e.to_string());
                break;
            }
            let deadline = Instant::now() + poll_interval;
            loop {
                let now = Instant::now();
                if now >= deadline || self.shared.stop.load(Ordering::Acquire) {
                    break;
                }
                thread::park_timeout(deadline - now);
            }
        }
        self.retire();
    }

    fn retire(&mut self) {
        self.shared.node.store(std::ptr::null_mut(), Ordering::Release);
        self.node = None;
    }
}

enum Worker {
    Thread(JoinHandle<()>),
    Inline(Box<Mapper>),
}

/// Result of [`ShortcutEh::validate_sync`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyncCheck {
    /// Versions differ; nothing to check.
    OutOfSync,
    /// Versions match and every shortcut page is the page the directory
    /// names.
    Verified { slots: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RouteCounts {
    pub shortcut: u64,
    pub traditional: u64,
}

/// Extendible hashing with an asynchronously maintained shortcut directory.
pub struct ShortcutEh {
    eh: ExtendibleIndex,
    shared: Arc<Shared>,
    worker: Option<Worker>,
    fanin_threshold: u64,
    routes: RouteCounts,
    drained: u64,
}

// SAFETY: the raw node pointer in `Shared` is only dereferenced under the
// version protocol described in the module docs.
unsafe impl Send for ShortcutEh {}
unsafe impl Sync for ShortcutEh {}

impl ShortcutEh {
    pub fn new(backend: Backend) -> Result<Self, IndexError> {
        Self::with_config(SehConfig::new(backend))
    }

    pub fn with_config(config: SehConfig) -> Result<Self, IndexError> {
        let eh = ExtendibleIndex::with_config(config.eh)?;
        let shared = Arc::new(Shared {
            queue: SegQueue::new(),
            traditional_version: AtomicU64::new(0),
            shortcut_version: AtomicU64::new(0),
            node: AtomicPtr::new(std::ptr::null_mut()),
            stop: AtomicBool::new(false),
            publish_delay_nanos: AtomicU64::new(0),
            failure: Mutex::new(None),
            stats: AtomicStats::default(),
        });
        let mapper = Mapper {
            shared: Arc::clone(&shared),
            pool: eh.pool_handle(),
            node: None,
            created_at: 0,
        };
        let worker = match config.maintenance {
            Maintenance::Manual => Worker::Inline(Box::new(mapper)),
            Maintenance::Background { poll_interval } => {
                let core = config.mapper_core;
                let handle = thread::Builder::new()
                    .name("shortcut-mapper".into())
                    .spawn(move || {
                        if let Some(core) = core {
                            if let Err(e) = crate::sys::pin_current_thread(core) {
                                log::warn!("could not pin mapper to core {core}: {e}");
                            }
                        }
                        mapper.run(poll_interval)
                    })
                    .map_err(|source| MapError::Os {
                        op: "spawn mapper thread",
                        source,
                    })?;
                Worker::Thread(handle)
            }
        };
        Ok(ShortcutEh {
            eh,
            shared,
            worker: Some(worker),
            fanin_threshold: config.fanin_threshold as u64,
            routes: RouteCounts::default(),
            drained: 0,
        })
    }

    /// The traditional side.
    pub fn traditional(&self) -> &ExtendibleIndex {
        &self.eh
    }

    pub fn len(&self) -> usize {
        self.eh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eh.is_empty()
    }

    pub fn traditional_version(&self) -> u64 {
        self.shared.traditional_version.load(Ordering::Acquire)
    }

    pub fn shortcut_version(&self) -> u64 {
        self.shared.shortcut_version.load(Ordering::Acquire)
    }

    pub fn in_sync(&self) -> bool {
        self.shortcut_version() == self.traditional_version() && !self.shared.node.load(Ordering::Acquire).is_null()
    }

    pub fn average_fanin(&self) -> f64 {
        self.eh.average_fanin()
    }

    pub fn fanin_threshold(&self) -> u64 {
        self.fanin_threshold
    }

    pub fn pending_requests(&self) -> usize {
        self.shared.queue.len()
    }

    /// Requests the writer popped as outdated before pushing a `Create`.
    pub fn drained_requests(&self) -> u64 {
        self.drained
    }

    pub fn mapper_stats(&self) -> MapperStats {
        let s = &self.shared.stats;
        MapperStats {
            polls: s.polls.load(Ordering::Relaxed),
            batches: s.batches.load(Ordering::Relaxed),
            creates_applied: s.creates_applied.load(Ordering::Relaxed),
            updates_applied: s.updates_applied.load(Ordering::Relaxed),
            requests_skipped: s.requests_skipped.load(Ordering::Relaxed),
            remap_calls: s.remap_calls.load(Ordering::Relaxed),
            last_batch_nanos: s.last_batch_nanos.load(Ordering::Relaxed),
            busy_nanos: s.busy_nanos.load(Ordering::Relaxed),
        }
    }

    /// Error that stopped the mapper, if any.
    pub fn mapper_failure(&self) -> Option<String> {
        self.shared.failure.lock().unwrap().clone()
    }

    /// Delay the mapper sleeps between populating and publishing. For tests
    /// that widen the out-of-sync window.
    pub fn set_publish_delay(&self, delay: Duration) {
        self.shared
            .publish_delay_nanos
            .store(delay.as_nanos() as u64, Ordering::Relaxed);
    }

    pub fn route_counts(&self) -> RouteCounts {
        self.routes
    }

    /// Copy of the queued requests. Manual maintenance only; returns `None`
    /// when a mapper thread could be consuming concurrently.
    pub fn pending_snapshot(&self) -> Option<Vec<MaintenanceRequest>> {
        if !matches!(self.worker, Some(Worker::Inline(_))) {
            return None;
        }
        let mut out = Vec::new();
        while let Some(r) = self.shared.queue.pop() {
            out.push(r);
        }
        for r in &out {
            self.shared.queue.push(r.clone());
        }
        Some(out)
    }

    /// Runs one mapper poll on the calling thread (manual maintenance).
    /// Returns `Ok(false)` if nothing was pending or a mapper thread exists.
    pub fn poll_maintenance(&mut self) -> Result<bool, MapError> {
        match &mut self.worker {
            Some(Worker::Inline(mapper)) => mapper.poll_once(),
            _ => Ok(false),
        }
    }

    /// Waits until the shortcut has caught up. Returns whether it did within
    /// `timeout`.
    pub fn wait_for_sync(&mut self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if self.in_sync() || (self.traditional_version() == 0 && self.eh.directory().len() == 1) {
                return true;
            }
            if self.poll_maintenance().is_err() || self.mapper_failure().is_some() {
                return false;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_micros(100));
        }
    }

    /// Inserts into the traditional index and queues the matching shortcut
    /// maintenance.
    pub fn insert(&mut self, key: u64, value: u64) -> Result<SplitReport, IndexError> {
        let report = self.eh.insert(key, value)?;
        if report.is_empty() {
            return Ok(report);
        }
        let mut version = self.shared.traditional_version.load(Ordering::Relaxed);
        if report.doubled() {
            version += u64::from(report.doublings) + report.slot_updates.len() as u64;
            while self.shared.queue.pop().is_some() {
                self.drained += 1;
            }
            self.shared.traditional_version.store(version, Ordering::Release);
            let offsets = self.eh.directory().to_vec();
            self.shared.queue.push(MaintenanceRequest::Create {
                slot_count: offsets.len(),
                offsets,
                target_version: version,
            });
        } else {
            version += report.slot_updates.len() as u64;
            self.shared.traditional_version.store(version, Ordering::Release);
            let first = version - report.slot_updates.len() as u64 + 1;
            for (v, u) in (first..).zip(&report.slot_updates) {
                self.shared.queue.push(MaintenanceRequest::Update {
                    slot: u.slot,
                    offset: u.offset,
                    target_version: v,
                });
            }
        }
        Ok(report)
    }

    /// The shortcut node, if it is in sync with the directory.
    #[inline(always)]
    fn synced_node(&self) -> Option<&ShortcutNode> {
        let sv = self.shared.shortcut_version.load(Ordering::Acquire);
        if sv != self.shared.traditional_version.load(Ordering::Relaxed) {
            return None;
        }
        let node = self.shared.node.load(Ordering::Acquire);
        // SAFETY: published nodes stay alive until the mapper replaces them,
        // which only happens after the versions diverge.
        unsafe { node.as_ref() }
    }

    #[inline(always)]
    fn fanin_ok(&self) -> bool {
        self.eh.directory().len() as u64 <= self.fanin_threshold * self.eh.num_buckets() as u64
    }

    /// Which route a lookup would take right now.
    pub fn route(&self) -> Route {
        if self.fanin_ok() && self.synced_node().is_some() {
            Route::Shortcut
        } else {
            Route::Traditional
        }
    }

    #[inline(always)]
    fn lookup_in_node(&self, node: &ShortcutNode, key: u64, h: u64) -> Option<Option<u64>> {
        let slot = dir_slot(h, self.eh.global_depth());
        if slot >= node.slot_count() {
            return None;
        }
        // SAFETY: the node is in sync, so slot `slot` maps the live bucket
        // the directory names.
        let bucket = unsafe { BucketPage::from_page(node.slot_ptr(slot)) };
        Some(bucket.lookup(key, h))
    }

    /// Looks `key` up through the cheaper route available.
    #[inline]
    pub fn lookup(&self, key: u64) -> Option<u64> {
        self.lookup_routed(key).0
    }

    #[inline]
    fn lookup_routed(&self, key: u64) -> (Option<u64>, Route) {
        if key == 0 {
            return (None, Route::Traditional);
        }
        if self.fanin_ok() {
            if let Some(node) = self.synced_node() {
                let h = hash(key);
                if let Some(found) = self.lookup_in_node(node, key, h) {
                    return (found, Route::Shortcut);
                }
            }
        }
        (self.eh.lookup(key), Route::Traditional)
    }

    /// Forces the traditional route.
    pub fn lookup_traditional(&self, key: u64) -> Option<u64> {
        self.eh.lookup(key)
    }

    /// Forces the shortcut route regardless of fan-in. `None` if the shortcut
    /// is not in sync.
    pub fn lookup_shortcut(&self, key: u64) -> Option<Option<u64>> {
        if key == 0 {
            return Some(None);
        }
        let node = self.synced_node()?;
        self.lookup_in_node(node, key, hash(key))
    }

    /// Stop-the-world check that every shortcut page is the bucket page the
    /// directory names. Writes a per-page stamp through the pool view and
    /// reads it back through the shortcut.
    pub fn validate_sync(&mut self) -> Result<SyncCheck, String> {
        let Some(node) = self.synced_node() else {
            return Ok(SyncCheck::OutOfSync);
        };
        let dir = self.eh.directory();
        if node.slot_count() != dir.len() {
            return Err(format!("shortcut has {} slots, directory {}", node.slot_count(), dir.len()));
        }
        const STAMP: u64 = 0x5EED_0000_0000_0000;
        let pool = self.eh.pool();
        let stamp_ptr = |off: u64| pool.view_address(off).wrapping_add(8).cast::<u64>();
        for &off in dir {
            // SAFETY: header word of a live bucket; the mapper is idle while
            // in sync and we hold `&mut self`.
            unsafe { stamp_ptr(off).write_volatile(STAMP | (off >> 12)) };
        }
        let mut result = Ok(SyncCheck::Verified { slots: dir.len() });
        for (slot, &off) in dir.iter().enumerate() {
            if node.slot_offset(slot) != Some(off) {
                result = Err(format!("slot {slot}: shadow {:?}, directory {off:#x}", node.slot_offset(slot)));
                break;
            }
            // SAFETY: mapped slot of an in-sync node.
            let seen = unsafe { node.slot_ptr(slot).add(8).cast::<u64>().read_volatile() };
            if seen != STAMP | (off >> 12) {
                result = Err(format!("slot {slot}: reads page stamp {seen:#x}, directory says {off:#x}"));
                break;
            }
        }
        for &off in dir {
            // SAFETY: as above.
            unsafe { stamp_ptr(off).write_volatile(0) };
        }
        result
    }
}

impl Drop for ShortcutEh {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        match self.worker.take() {
            Some(Worker::Thread(handle)) => {
                handle.thread().unpark();
                if handle.join().is_err() {
                    log::error!("shortcut mapper panicked");
                }
            }
            Some(Worker::Inline(mut mapper)) => mapper.retire(),
            None => {}
        }
    }
}

impl HashIndex for ShortcutEh {
    fn name(&self) -> &'static str {
        "Shortcut-EH"
    }

    fn insert(&mut self, key: u64, value: u64) -> Result<(), IndexError> {
        ShortcutEh::insert(self, key, value).map(|_| ())
    }

    fn get(&mut self, key: u64) -> Option<u64> {
        let (found, route) = self.lookup_routed(key);
        match route {
            Route::Shortcut => self.routes.shortcut += 1,
            Route::Traditional => self.routes.traditional += 1,
        }
        found
    }

    fn len(&self) -> usize {
        self.eh.len()
    }
}
