//! Page-table shortcuts over a memfd page pool, an extendible hash index
//! that routes lookups through them, and the baseline hash tables used to
//! compare against it.

pub mod baselines;
pub mod experiments;
pub mod extendible;
pub mod hash_common;
pub mod page_pool;
pub mod rewiring;
pub mod shortcut_eh;
pub mod sys;

pub use baselines::{ChainedTable, IncrementalTable, OpenTable};
pub use extendible::{EhConfig, ExtendibleIndex, SlotUpdate, SplitReport};
pub use hash_common::{hash, BucketPage, Entry, HashIndex, IndexError, BUCKET_CAPACITY};
pub use page_pool::{Backend, PagePool, PoolConfig, PoolError, PAGE_SIZE};
pub use rewiring::{MapError, ShortcutNode};
pub use shortcut_eh::{MaintenanceRequest, MapperStats, Route, SehConfig, ShortcutEh};
