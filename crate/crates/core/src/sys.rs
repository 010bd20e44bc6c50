//! Thin wrappers over the handful of Linux memory-management calls the crate
//! relies on. Every function returns `io::Result` carrying the OS error code.

use std::ffi::CStr;
use std::io;
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::ptr;

pub(crate) const PAGE_SIZE: usize = 4096;

fn check(ret: libc::c_int) -> io::Result<()> {
    if ret == -1 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

/// Creates an anonymous main-memory file.
pub(crate) fn memfd_create(name: &CStr) -> io::Result<OwnedFd> {
    // SAFETY: `name` is a valid NUL-terminated string.
    let fd = unsafe { libc::memfd_create(name.as_ptr(), libc::MFD_CLOEXEC) };
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: `fd` was just returned by the kernel and is owned by nobody else.
    Ok(unsafe { OwnedFd::from_raw_fd(fd) })
}

pub(crate) fn ftruncate(fd: &OwnedFd, len: usize) -> io::Result<()> {
    // SAFETY: plain syscall on a descriptor we own.
    check(unsafe { libc::ftruncate(fd.as_raw_fd(), len as libc::off_t) })
}

/// Reserves `len` bytes of address space that must not be touched.
pub(crate) fn reserve_inaccessible(len: usize) -> io::Result<*mut u8> {
    // SAFETY: anonymous mapping at a kernel-chosen address.
    let addr = unsafe {
        libc::mmap(
            ptr::null_mut(),
            len,
            libc::PROT_NONE,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
            -1,
            0,
        )
    };
    if addr == libc::MAP_FAILED {
        return Err(io::Error::last_os_error());
    }
    Ok(addr.cast())
}

/// Reserves `len` bytes backed by anonymous private memory (readable, reads
/// yield zeros until something is mapped over it).
pub(crate) fn reserve_anonymous(len: usize) -> io::Result<*mut u8> {
    // SAFETY: anonymous mapping at a kernel-chosen address.
    let addr = unsafe {
        libc::mmap(
            ptr::null_mut(),
            len,
            libc::PROT_READ | libc::PROT_WRITE,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE,
            -1,
            0,
        )
    };
    if addr == libc::MAP_FAILED {
        return Err(io::Error::last_os_error());
    }
    Ok(addr.cast())
}

/// Replaces whatever is mapped at `[addr, addr + len)` with an inaccessible
/// anonymous reservation.
///
/// # Safety
/// The range must lie inside a reservation owned by the caller.
pub(crate) unsafe fn rereserve_fixed(addr: *mut u8, len: usize) -> io::Result<()> {
    let ret = libc::mmap(
        addr.cast(),
        len,
        libc::PROT_NONE,
        libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE | libc::MAP_FIXED,
        -1,
        0,
    );
    if ret == libc::MAP_FAILED {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// Maps `len` bytes of `fd` starting at `offset` over `addr` with shared,
/// fixed-address semantics.
///
/// # Safety
/// The range must lie inside a reservation owned by the caller, and nothing
/// may hold references into the bytes being replaced.
pub(crate) unsafe fn map_shared_fixed(
    addr: *mut u8,
    len: usize,
    fd: &OwnedFd,
    offset: u64,
    populate: bool,
) -> io::Result<()> {
    let mut flags = libc::MAP_SHARED | libc::MAP_FIXED;
    if populate {
        flags |= libc::MAP_POPULATE;
    }
    let ret = libc::mmap(
        addr.cast(),
        len,
        libc::PROT_READ | libc::PROT_WRITE,
        flags,
        fd.as_raw_fd(),
        offset as libc::off_t,
    );
    if ret == libc::MAP_FAILED {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}

/// # Safety
/// `[addr, addr + len)` must be a mapping owned by the caller that nobody
/// accesses afterwards.
pub(crate) unsafe fn unmap(addr: *mut u8, len: usize) -> io::Result<()> {
    check(libc::munmap(addr.cast(), len))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Populate {
    Read,
    Write,
}

/// Asks the kernel to create page-table entries for a range. Returns
/// `Ok(false)` when the kernel does not support the hint.
///
/// # Safety
/// The range must be mapped and owned by the caller.
pub(crate) unsafe fn populate_hint(addr: *mut u8, len: usize, mode: Populate) -> io::Result<bool> {
    let advice = match mode {
        Populate::Read => libc::MADV_POPULATE_READ,
        Populate::Write => libc::MADV_POPULATE_WRITE,
    };
    if libc::madvise(addr.cast(), len, advice) == 0 {
        return Ok(true);
    }
    let err = io::Error::last_os_error();
    match err.raw_os_error() {
        Some(libc::EINVAL) | Some(libc::ENOSYS) => Ok(false),
        _ => Err(err),
    }
}

/// Reads one byte per page so that every page gets a translation.
///
/// # Safety
/// The range must be mapped and readable.
pub(crate) unsafe fn touch_pages(addr: *const u8, len: usize) {
    let mut off = 0;
    while off < len {
        ptr::read_volatile(addr.add(off));
        off += PAGE_SIZE;
    }
}

/// Current `vm.max_map_count`, if readable.
pub fn max_map_count() -> Option<usize> {
    std::fs::read_to_string("/proc/sys/vm/max_map_count")
        .ok()
        .and_then(|s| s.trim().parse().ok())
}

/// Whether `[addr, addr + len)` overlaps any mapping listed in
/// `/proc/self/maps`.
pub fn is_mapped(addr: usize, len: usize) -> io::Result<bool> {
    let maps = std::fs::read_to_string("/proc/self/maps")?;
    let end = addr + len;
    for line in maps.lines() {
        let Some(range) = line.split_whitespace().next() else {
            continue;
        };
        let Some((lo, hi)) = range.split_once('-') else {
            continue;
        };
        let (Ok(lo), Ok(hi)) = (usize::from_str_radix(lo, 16), usize::from_str_radix(hi, 16)) else {
            continue;
        };
        if lo < end && addr < hi {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Number of CPUs this process may run on.
pub fn available_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Pins the calling thread to `core`.
pub fn pin_current_thread(core: usize) -> io::Result<()> {
    // SAFETY: cpu_set_t is plain data; the calls only read/write it.
    unsafe {
        let mut set: libc::cpu_set_t = std::mem::zeroed();
        libc::CPU_SET(core, &mut set);
        check(libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set))
    }
}
