//! Batch allocation API over the heap: amortizes per-call overhead across
//! many requests and exposes relocation-inhibited resizing.
//!
//! `batch_alloc` dry-runs its arena placements against a clone of the free
//! structure first, so an out-of-memory outcome is detected before anything
//! mutates; a failing batch performs no allocation at all.

use thiserror::Error;

use crate::frame::{ProcessId, PAGE_SIZE};
use crate::gp::{
    arena_alloc, arena_free, arena_grow_in_place, bump_coalesce_pass, heap_align16,
    heap_chunk_bytes, heap_direct_size, heap_is_direct, heap_threshold, locate_arena_block,
    plan_new_chunks, ArenaBlock, GpError, PageProvider,
};
use crate::machine::Machine;
use crate::umpa::{AllocFlags, UmpaError};

#[derive(Debug, Clone, Copy)]
pub struct AllocationRequest {
    pub size: u64,
    /// Power of two, 16..=4096; divides the returned address.
    pub alignment: u64,
    pub flags: AllocFlags,
}

impl AllocationRequest {
    pub fn of_size(size: u64) -> Self {
        AllocationRequest {
            size,
            alignment: 16,
            flags: AllocFlags::default(),
        }
    }

    pub fn aligned(size: u64, alignment: u64) -> Self {
        AllocationRequest {
            size,
            alignment,
            flags: AllocFlags::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocationResult {
    pub address: u64,
    /// Usable bytes behind the address; at least the requested size.
    pub actual_size: u64,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BatchError {
    #[error("zero-byte request in batch")]
    InvalidSize,
    #[error("alignment must be a power of two in 16..=4096")]
    UnsupportedAlignment,
    #[error("batch contains an address that is not a live allocation")]
    UnknownAddress,
    #[error("batch exceeds free physical memory")]
    OutOfPhysicalMemory,
    #[error(transparent)]
    Gp(GpError),
}

impl From<GpError> for BatchError {
    fn from(e: GpError) -> Self {
        match e {
            GpError::InvalidSize => BatchError::InvalidSize,
            GpError::UnsupportedAlignment => BatchError::UnsupportedAlignment,
            GpError::UnknownAddress | GpError::DoubleFree => BatchError::UnknownAddress,
            GpError::OutOfPhysicalMemory => BatchError::OutOfPhysicalMemory,
            other => BatchError::Gp(other),
        }
    }
}

enum Located {
    Direct,
    Arena(ArenaBlock),
}

impl Machine {
    /// Allocates every request, in order, or nothing at all.
    pub fn batch_alloc(
        &mut self,
        pid: ProcessId,
        requests: &[AllocationRequest],
    ) -> Result<Vec<AllocationResult>, BatchError> {
        for r in requests {
            if r.size == 0 {
                return Err(BatchError::InvalidSize);
            }
            if !r.alignment.is_power_of_two() || !(16..=PAGE_SIZE).contains(&r.alignment) {
                return Err(BatchError::UnsupportedAlignment);
            }
        }
        self.with_heap_state(pid, |m, heap| {
            let threshold = heap_threshold(heap);
            let chunk_pages = heap_chunk_bytes(heap) / PAGE_SIZE;
            let mut arena_payloads = Vec::new();
            let mut direct_pages = 0u64;
            for r in requests {
                if heap_align16(r.size) + 16 > threshold {
                    direct_pages += r.size.div_ceil(PAGE_SIZE);
                } else {
                    arena_payloads.push((heap_align16(r.size), r.alignment));
                }
            }
            // Eager providers take physical frames up front; verify the
            // whole batch fits before touching anything.
            if heap.provider() == PageProvider::Umpa {
                let new_chunks = plan_new_chunks(heap, &arena_payloads);
                let frames_needed = new_chunks * chunk_pages + direct_pages;
                let available = m.umpa_cache_small_equiv(pid) + m.kernel().free_small_equiv();
                if frames_needed > available {
                    return Err(BatchError::OutOfPhysicalMemory);
                }
            }
            let mut out = Vec::with_capacity(requests.len());
            for r in requests {
                let attempt = if heap_align16(r.size) + 16 > threshold {
                    direct_alloc(m, pid, heap, r)
                } else {
                    arena_alloc(m, pid, heap, r.size, r.alignment).and_then(|(addr, usable)| {
                        if r.flags.zeroed {
                            zero_range(m, pid, addr, r.size)?;
                        }
                        Ok((addr, usable))
                    })
                };
                match attempt {
                    Ok((address, actual_size)) => out.push(AllocationResult {
                        address,
                        actual_size,
                    }),
                    Err(e) => {
                        // Unwind partial work; the capacity precheck makes
                        // this path unreachable for physical exhaustion.
                        for done in out.iter().rev() {
                            let _ = rollback_free(m, pid, heap, done.address);
                        }
                        return Err(e.into());
                    }
                }
            }
            Ok(out)
        })
    }

    /// Frees every address or none; coalescing runs as a single pass at
    /// the end of the batch.
    pub fn batch_free(&mut self, pid: ProcessId, addresses: &[u64]) -> Result<(), BatchError> {
        self.with_heap_state(pid, |m, heap| {
            let mut located = Vec::with_capacity(addresses.len());
            let mut seen = std::collections::HashSet::new();
            for &addr in addresses {
                if !seen.insert(addr) {
                    return Err(BatchError::UnknownAddress);
                }
                if heap_direct_size(heap, addr).is_some() {
                    located.push((addr, Located::Direct));
                } else {
                    let block = locate_arena_block(m, pid, heap, addr)?;
                    located.push((addr, Located::Arena(block)));
                }
            }
            for (addr, what) in &located {
                match what {
                    Located::Direct => {
                        crate::gp::free_direct(m, pid, heap, *addr)?;
                    }
                    Located::Arena(block) => {
                        arena_free(m, pid, heap, *addr, block, false)?;
                    }
                }
            }
            bump_coalesce_pass(heap);
            Ok(())
        })
    }

    /// Resizes without moving the base address. `Ok(false)` means the block
    /// could not grow in place and was left untouched.
    pub fn try_resize_in_place(
        &mut self,
        pid: ProcessId,
        addr: u64,
        new_size: u64,
    ) -> Result<bool, BatchError> {
        if new_size == 0 {
            return Err(BatchError::InvalidSize);
        }
        self.with_heap_state(pid, |m, heap| {
            if let Some(old_size) = heap_direct_size(heap, addr) {
                return resize_direct(m, pid, heap, addr, old_size, new_size);
            }
            if !heap_is_direct(heap, addr) {
                let block = locate_arena_block(m, pid, heap, addr)?;
                let grown = arena_grow_in_place(m, pid, heap, addr, &block, new_size)?;
                return Ok(grown);
            }
            Err(BatchError::UnknownAddress)
        })
    }
}

fn direct_alloc(
    m: &mut Machine,
    pid: ProcessId,
    heap: &mut crate::gp::Heap,
    r: &AllocationRequest,
) -> Result<(u64, u64), GpError> {
    let (addr, usable) = crate::gp::direct_alloc_raw(m, pid, heap, r.size)?;
    Ok((addr, usable))
}

fn rollback_free(
    m: &mut Machine,
    pid: ProcessId,
    heap: &mut crate::gp::Heap,
    addr: u64,
) -> Result<(), GpError> {
    if heap_direct_size(heap, addr).is_some() {
        crate::gp::free_direct(m, pid, heap, addr)
    } else {
        let block = locate_arena_block(m, pid, heap, addr)?;
        arena_free(m, pid, heap, addr, &block, true)
    }
}

fn resize_direct(
    m: &mut Machine,
    pid: ProcessId,
    heap: &mut crate::gp::Heap,
    addr: u64,
    old_size: u64,
    new_size: u64,
) -> Result<bool, BatchError> {
    match heap.provider() {
        PageProvider::Umpa => {
            let flags = AllocFlags {
                zeroed: false,
                no_relocate: true,
            };
            match m.userpage_realloc(pid, addr, old_size, new_size, flags) {
                Ok(base) => {
                    debug_assert_eq!(base, addr);
                    crate::gp::update_direct_size(heap, addr, new_size);
                    Ok(true)
                }
                Err(UmpaError::CannotGrowInPlace) | Err(UmpaError::OutOfPhysicalMemory) => {
                    Ok(false)
                }
                Err(e) => Err(BatchError::Gp(GpError::Umpa(e))),
            }
        }
        PageProvider::KernelLazy => {
            let vpn = addr / PAGE_SIZE;
            let old_pages = old_size.div_ceil(PAGE_SIZE);
            let new_pages = new_size.div_ceil(PAGE_SIZE);
            if new_pages == old_pages {
                crate::gp::update_direct_size(heap, addr, new_size);
                return Ok(true);
            }
            if new_pages < old_pages {
                let mut freed = Vec::new();
                for p in vpn + new_pages..vpn + old_pages {
                    if m.space(pid).is_present(p) {
                        freed.extend(m.unmap_pages(pid, p, 1).map_err(GpError::Mmu)?);
                    }
                }
                m.tlb_flush(pid, Some((vpn + new_pages, old_pages - new_pages)));
                if !freed.is_empty() {
                    m.sys_exchange_pages(pid, &freed, &[])
                        .expect("unmapped held frames release cleanly");
                }
                m.space_mut(pid)
                    .release_reservation(vpn + new_pages, old_pages - new_pages)
                    .map_err(GpError::Mmu)?;
                crate::gp::update_direct_size(heap, addr, new_size);
                return Ok(true);
            }
            if m.space_mut(pid)
                .try_extend_reservation(vpn, old_pages, new_pages)
            {
                crate::gp::update_direct_size(heap, addr, new_size);
                Ok(true)
            } else {
                Ok(false)
            }
        }
    }
}

fn zero_range(m: &mut Machine, pid: ProcessId, addr: u64, len: u64) -> Result<(), GpError> {
    for i in 0..len {
        m.write_byte(pid, addr + i, 0)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModelParams;
    use crate::gp::GpConfig;
    use crate::machine::{Machine, MachineConfig};
    use crate::umpa::UmpaConfig;

    fn machine(frames: u64) -> (Machine, ProcessId) {
        let mut m = Machine::new(MachineConfig {
            total_small_frames: frames,
            vspace_pages: 1 << 22,
            params: CostModelParams::default(),
        });
        let pid = m.create_process();
        m.attach_umpa(pid, UmpaConfig::default());
        m.attach_gp(pid, GpConfig::default());
        (m, pid)
    }

    #[test]
    fn thousand_small_requests_in_one_umpa_call() {
        let (mut m, pid) = machine(1 << 15);
        let reqs = vec![AllocationRequest::of_size(64); 1000];
        let calls_before = m.umpa_api_calls(pid);
        let got = m.batch_alloc(pid, &reqs).unwrap();
        assert_eq!(got.len(), 1000);
        assert!(m.umpa_api_calls(pid) - calls_before <= 1);
        let mut intervals: Vec<(u64, u64)> = got
            .iter()
            .map(|r| (r.address, r.address + r.actual_size))
            .collect();
        intervals.sort();
        for w in intervals.windows(2) {
            assert!(
                w[0].1 <= w[1].0,
                "overlap between {:?} and {:?}",
                w[0],
                w[1]
            );
        }
        for r in &got {
            assert!(r.actual_size >= 64);
            assert_eq!(r.address % 16, 0);
        }
    }

    #[test]
    fn empty_batch_is_empty() {
        let (mut m, pid) = machine(256);
        assert!(m.batch_alloc(pid, &[]).unwrap().is_empty());
    }

    #[test]
    fn single_request_matches_plain_malloc_shape() {
        let (mut m, pid) = machine(1 << 12);
        let got = m
            .batch_alloc(pid, &[AllocationRequest::of_size(100)])
            .unwrap();
        assert_eq!(got.len(), 1);
        assert!(got[0].actual_size >= 100);
        m.gp_free(pid, got[0].address).unwrap();
    }

    #[test]
    fn alignment_divides_returned_addresses() {
        let (mut m, pid) = machine(1 << 12);
        for align in [16u64, 64, 256, 4096] {
            let got = m
                .batch_alloc(pid, &[AllocationRequest::aligned(50, align)])
                .unwrap();
            assert_eq!(got[0].address % align, 0, "alignment {align}");
        }
        assert_eq!(
            m.batch_alloc(pid, &[AllocationRequest::aligned(50, 8192)]),
            Err(BatchError::UnsupportedAlignment)
        );
        assert_eq!(
            m.batch_alloc(pid, &[AllocationRequest::of_size(0)]),
            Err(BatchError::InvalidSize)
        );
    }

    #[test]
    fn batch_free_restores_bytes_with_one_coalesce_pass() {
        let (mut m, pid) = machine(1 << 15);
        let warm = m.gp_malloc(pid, 64).unwrap();
        m.gp_free(pid, warm).unwrap();
        let bytes_before = m.gp_free_list_bytes(pid);
        let got = m
            .batch_alloc(pid, &vec![AllocationRequest::of_size(64); 500])
            .unwrap();
        let addrs: Vec<u64> = got.iter().map(|r| r.address).collect();
        let passes_before = m.gp_coalesce_passes(pid);
        m.batch_free(pid, &addrs).unwrap();
        assert_eq!(m.gp_coalesce_passes(pid) - passes_before, 1);
        assert_eq!(m.gp_free_list_bytes(pid), bytes_before);
        assert_eq!(m.gp_free_spans(pid), 1);
    }

    #[test]
    fn batch_free_validates_before_freeing_anything() {
        let (mut m, pid) = machine(1 << 12);
        let got = m
            .batch_alloc(pid, &[AllocationRequest::of_size(64); 3])
            .unwrap();
        let mut addrs: Vec<u64> = got.iter().map(|r| r.address).collect();
        addrs.push(0x7777_0000);
        let bytes_before = m.gp_free_list_bytes(pid);
        assert_eq!(m.batch_free(pid, &addrs), Err(BatchError::UnknownAddress));
        assert_eq!(m.gp_free_list_bytes(pid), bytes_before);
        // All three still live and freeable afterwards.
        m.batch_free(pid, &addrs[..3]).unwrap();
    }

    #[test]
    fn failing_batch_changes_nothing() {
        let (mut m, pid) = machine(300);
        let live = m.gp_malloc(pid, 64).unwrap();
        let ledger_before = m.ledger(pid);
        let bytes_before = m.gp_free_list_bytes(pid);
        // 300 frames total cannot back the three extra chunks this needs.
        let reqs = vec![AllocationRequest::of_size(200 * 1024); 16];
        assert_eq!(
            m.batch_alloc(pid, &reqs),
            Err(BatchError::OutOfPhysicalMemory)
        );
        let after = m.ledger(pid);
        assert_eq!(after.pte_writes, ledger_before.pte_writes);
        assert_eq!(after.bytes_zeroed, ledger_before.bytes_zeroed);
        assert_eq!(after.byte_accesses, ledger_before.byte_accesses);
        assert_eq!(m.gp_free_list_bytes(pid), bytes_before);
        m.gp_free(pid, live).unwrap();
    }

    #[test]
    fn shrink_in_place_always_succeeds() {
        let (mut m, pid) = machine(1 << 12);
        let a = m.gp_malloc(pid, 4096).unwrap();
        assert_eq!(m.try_resize_in_place(pid, a, 100), Ok(true));
        let d = m.gp_malloc(pid, 400 * 1024).unwrap();
        assert_eq!(m.try_resize_in_place(pid, d, 300 * 1024), Ok(true));
        m.gp_free(pid, d).unwrap();
        m.gp_free(pid, a).unwrap();
    }

    #[test]
    fn arena_grow_blocked_by_live_neighbor_is_a_clean_false() {
        let (mut m, pid) = machine(1 << 12);
        let a = m.gp_malloc(pid, 64).unwrap();
        let _neighbor = m.gp_malloc(pid, 64).unwrap();
        let bytes_before = m.gp_free_list_bytes(pid);
        assert_eq!(m.try_resize_in_place(pid, a, 4096), Ok(false));
        assert_eq!(m.gp_free_list_bytes(pid), bytes_before);
        // Still usable at the old size.
        m.write_byte(pid, a + 63, 9).unwrap();
    }

    #[test]
    fn arena_grow_into_free_neighbor_succeeds() {
        let (mut m, pid) = machine(1 << 12);
        let a = m.gp_malloc(pid, 64).unwrap();
        assert_eq!(m.try_resize_in_place(pid, a, 4096), Ok(true));
        for i in 0..4096u64 {
            m.write_byte(pid, a + i, (i % 251) as u8).unwrap();
        }
        m.gp_free(pid, a).unwrap();
    }

    #[test]
    fn direct_grow_with_free_reservation_space_succeeds() {
        let (mut m, pid) = machine(1 << 13);
        let d = m.gp_malloc(pid, 400 * 1024).unwrap();
        assert_eq!(m.try_resize_in_place(pid, d, 800 * 1024), Ok(true));
        m.write_byte(pid, d + 700 * 1024, 1).unwrap();
        assert_eq!(
            m.try_resize_in_place(pid, 0x4444_0000, 64),
            Err(BatchError::UnknownAddress)
        );
    }
}
