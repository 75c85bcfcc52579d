//! The user mode page allocator: `userpage_malloc`/`free`/`realloc`/
//! `commit`/`release` plus block swap and anonymous-mmap wrappers, backed
//! by a lookaside cache of unmapped frames.
//!
//! All mapping is eager, so code running over this allocator never takes a
//! page fault, and resizing moves page-table entries instead of bytes.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::frame::{FrameId, ProcessId, SizeClass, PAGE_SIZE};
use crate::kernel::{KernelError, Severity};
use crate::machine::Machine;
use crate::mmu::{MmuError, Vpn};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AllocFlags {
    /// Caller requires zero-filled memory.
    pub zeroed: bool,
    /// Resizing must keep the base address.
    pub no_relocate: bool,
}

impl AllocFlags {
    pub fn zeroed() -> Self {
        AllocFlags {
            zeroed: true,
            no_relocate: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct UmpaConfig {
    /// Cache capacity in small-page equivalents (default 32768 = 128Mb).
    pub capacity_cap: u64,
    /// Cache size that triggers a trim back to `low_watermark`.
    pub high_watermark: u64,
    pub low_watermark: u64,
}

impl Default for UmpaConfig {
    fn default() -> Self {
        Self::with_cap(32768)
    }
}

impl UmpaConfig {
    pub fn with_cap(cap: u64) -> Self {
        UmpaConfig {
            capacity_cap: cap,
            high_watermark: cap,
            low_watermark: cap,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UmpaError {
    #[error("zero-byte request")]
    InvalidSize,
    #[error("no live block matches that base and size")]
    UnknownBlock,
    #[error("block cannot grow in place and relocation is inhibited")]
    CannotGrowInPlace,
    #[error("blocks differ in page count")]
    SizeMismatch,
    #[error("ranges overlap")]
    RangeOverlap,
    #[error("range is not reserved")]
    NotReserved,
    #[error("page already committed")]
    AlreadyCommitted,
    #[error("page not committed")]
    NotCommitted,
    #[error("out of physical memory")]
    OutOfPhysicalMemory,
    #[error("virtual address space exhausted")]
    AddressSpaceExhausted,
    #[error(transparent)]
    Mmu(MmuError),
    #[error(transparent)]
    Kernel(KernelError),
}

impl From<KernelError> for UmpaError {
    fn from(e: KernelError) -> Self {
        match e {
            KernelError::OutOfPhysicalMemory => UmpaError::OutOfPhysicalMemory,
            other => UmpaError::Kernel(other),
        }
    }
}

impl From<MmuError> for UmpaError {
    fn from(e: MmuError) -> Self {
        match e {
            MmuError::AddressSpaceExhausted => UmpaError::AddressSpaceExhausted,
            other => UmpaError::Mmu(other),
        }
    }
}

struct Block {
    pages: u64,
    committed: Vec<bool>,
}

impl Block {
    fn fully_committed(&self) -> bool {
        self.committed.iter().all(|&c| c)
    }
}

/// Per-process allocator state: the lookaside cache and the block table.
pub struct UmpaState {
    config: UmpaConfig,
    dirty: VecDeque<FrameId>,
    zeroed: VecDeque<FrameId>,
    blocks: BTreeMap<Vpn, Block>,
    api_calls: u64,
}

impl UmpaState {
    fn new(config: UmpaConfig) -> Self {
        UmpaState {
            config,
            dirty: VecDeque::new(),
            zeroed: VecDeque::new(),
            blocks: BTreeMap::new(),
            api_calls: 0,
        }
    }

    pub fn cache_small_equiv(&self) -> u64 {
        (self.dirty.len() + self.zeroed.len()) as u64
    }

    pub(crate) fn cached_frames(&self) -> impl Iterator<Item = FrameId> + '_ {
        self.dirty.iter().chain(self.zeroed.iter()).copied()
    }
}

fn with_state<R>(
    m: &mut Machine,
    pid: ProcessId,
    f: impl FnOnce(&mut Machine, &mut UmpaState) -> R,
) -> R {
    let mut st = m
        .procs
        .get_mut(&pid)
        .expect("unknown process")
        .umpa
        .take()
        .expect("user mode page allocator not attached");
    let out = f(m, &mut st);
    m.procs.get_mut(&pid).expect("unknown process").umpa = Some(st);
    out
}

fn pages_for(size: u64) -> u64 {
    size.div_ceil(PAGE_SIZE)
}

/// Frames handed to a caller, with whether each still needs clearing to
/// satisfy a zeroed request.
type Acquired = Vec<(FrameId, bool)>;

/// Pops `n` small frames, cache first, any shortfall fetched with a single
/// kernel exchange. Dirty frames are preferred unless the caller wants
/// zero-filled memory, where clean cached frames are worth more.
fn acquire_frames(
    m: &mut Machine,
    pid: ProcessId,
    st: &mut UmpaState,
    n: u64,
    prefer_zeroed: bool,
) -> Result<Acquired, UmpaError> {
    let mut out: Acquired = Vec::with_capacity(n as usize);
    while (out.len() as u64) < n {
        let popped = if prefer_zeroed {
            st.zeroed
                .pop_front()
                .map(|f| (f, false))
                .or_else(|| st.dirty.pop_front().map(|f| (f, true)))
        } else {
            st.dirty
                .pop_front()
                .map(|f| (f, true))
                .or_else(|| st.zeroed.pop_front().map(|f| (f, false)))
        };
        match popped {
            Some(pair) => out.push(pair),
            None => break,
        }
    }
    let shortfall = n - out.len() as u64;
    if shortfall > 0 {
        let request = vec![SizeClass::Small; shortfall as usize];
        match m.sys_exchange_pages(pid, &[], &request) {
            Ok(frames) => {
                for f in frames {
                    let dirty = !m.kernel().frame_reads_zero(f);
                    out.push((f, dirty));
                }
            }
            Err(e) => {
                // Undo the cache pops; nothing else has happened yet.
                for (f, dirty) in out.into_iter().rev() {
                    if dirty {
                        st.dirty.push_front(f);
                    } else {
                        st.zeroed.push_front(f);
                    }
                }
                return Err(e.into());
            }
        }
    }
    Ok(out)
}

/// Pushes freed frames into the cache as dirty and trims back to the low
/// watermark with one kernel exchange if the high watermark is crossed.
fn stash_frames(m: &mut Machine, pid: ProcessId, st: &mut UmpaState, frames: Vec<FrameId>) {
    st.dirty.extend(frames);
    if st.cache_small_equiv() > st.config.high_watermark {
        let excess = st.cache_small_equiv() - st.config.low_watermark;
        let mut give = Vec::with_capacity(excess as usize);
        for _ in 0..excess {
            if let Some(f) = st.dirty.pop_front() {
                give.push(f);
            } else if let Some(f) = st.zeroed.pop_front() {
                give.push(f);
            }
        }
        m.sys_exchange_pages(pid, &give, &[])
            .expect("cached frames are held and unmapped");
    }
}

fn zero_if_requested(m: &mut Machine, pid: ProcessId, frames: &Acquired, flags: AllocFlags) {
    if !flags.zeroed {
        return;
    }
    for &(f, dirty) in frames {
        if dirty {
            m.zero_frame_charged(pid, f);
        }
    }
}

fn malloc_inner(
    m: &mut Machine,
    pid: ProcessId,
    st: &mut UmpaState,
    size: u64,
    flags: AllocFlags,
) -> Result<u64, UmpaError> {
    if size == 0 {
        return Err(UmpaError::InvalidSize);
    }
    let pages = pages_for(size);
    let base = m.space_mut(pid).reserve(pages)?;
    let frames = match acquire_frames(m, pid, st, pages, flags.zeroed) {
        Ok(f) => f,
        Err(e) => {
            m.space_mut(pid)
                .release_reservation(base, pages)
                .expect("fresh reservation");
            return Err(e);
        }
    };
    zero_if_requested(m, pid, &frames, flags);
    let ids: Vec<FrameId> = frames.iter().map(|&(f, _)| f).collect();
    m.map_pages(pid, base, &ids, true)?;
    st.blocks.insert(
        base,
        Block {
            pages,
            committed: vec![true; pages as usize],
        },
    );
    Ok(base * PAGE_SIZE)
}

fn free_inner(
    m: &mut Machine,
    pid: ProcessId,
    st: &mut UmpaState,
    base: u64,
    size: u64,
) -> Result<(), UmpaError> {
    let vpn = block_vpn(base)?;
    let block = st.blocks.get(&vpn).ok_or(UmpaError::UnknownBlock)?;
    if block.pages != pages_for(size) {
        return Err(UmpaError::UnknownBlock);
    }
    let pages = block.pages;
    let committed = block.committed.clone();
    let mut freed = Vec::new();
    let mut i = 0usize;
    while i < pages as usize {
        if committed[i] {
            let run_start = i;
            while i < pages as usize && committed[i] {
                i += 1;
            }
            let got = m.unmap_pages(pid, vpn + run_start as u64, (i - run_start) as u64)?;
            freed.extend(got);
        } else {
            i += 1;
        }
    }
    m.tlb_flush(pid, Some((vpn, pages)));
    stash_frames(m, pid, st, freed);
    m.space_mut(pid).release_reservation(vpn, pages)?;
    st.blocks.remove(&vpn);
    Ok(())
}

fn realloc_inner(
    m: &mut Machine,
    pid: ProcessId,
    st: &mut UmpaState,
    base: u64,
    old_size: u64,
    new_size: u64,
    flags: AllocFlags,
) -> Result<u64, UmpaError> {
    if new_size == 0 {
        return Err(UmpaError::InvalidSize);
    }
    let vpn = block_vpn(base)?;
    let old_pages = pages_for(old_size);
    let new_pages = pages_for(new_size);
    {
        let block = st.blocks.get(&vpn).ok_or(UmpaError::UnknownBlock)?;
        if block.pages != old_pages {
            return Err(UmpaError::UnknownBlock);
        }
        if !block.fully_committed() {
            return Err(UmpaError::NotCommitted);
        }
    }

    if new_pages == old_pages {
        return Ok(base);
    }

    if new_pages < old_pages {
        let tail = old_pages - new_pages;
        let freed = m.unmap_pages(pid, vpn + new_pages, tail)?;
        m.tlb_flush(pid, Some((vpn + new_pages, tail)));
        stash_frames(m, pid, st, freed);
        m.space_mut(pid)
            .shrink_reservation(vpn, old_pages, new_pages);
        let block = st.blocks.get_mut(&vpn).unwrap();
        block.pages = new_pages;
        block.committed.truncate(new_pages as usize);
        return Ok(base);
    }

    let extra = new_pages - old_pages;
    if m.space_mut(pid)
        .try_extend_reservation(vpn, old_pages, new_pages)
    {
        let frames = match acquire_frames(m, pid, st, extra, flags.zeroed) {
            Ok(f) => f,
            Err(e) => {
                m.space_mut(pid)
                    .shrink_reservation(vpn, new_pages, old_pages);
                return Err(e);
            }
        };
        zero_if_requested(m, pid, &frames, flags);
        let ids: Vec<FrameId> = frames.iter().map(|&(f, _)| f).collect();
        m.map_pages(pid, vpn + old_pages, &ids, true)?;
        let block = st.blocks.get_mut(&vpn).unwrap();
        block.pages = new_pages;
        block.committed.resize(new_pages as usize, true);
        return Ok(base);
    }

    if flags.no_relocate {
        return Err(UmpaError::CannotGrowInPlace);
    }

    // Relocate: move the page-table entries, never the bytes.
    let new_vpn = m.space_mut(pid).reserve(new_pages)?;
    let frames = match acquire_frames(m, pid, st, extra, flags.zeroed) {
        Ok(f) => f,
        Err(e) => {
            m.space_mut(pid)
                .release_reservation(new_vpn, new_pages)
                .expect("fresh reservation");
            return Err(e);
        }
    };
    m.remap_pages(pid, vpn, new_vpn, old_pages)?;
    m.tlb_flush(pid, Some((vpn, old_pages)));
    zero_if_requested(m, pid, &frames, flags);
    let ids: Vec<FrameId> = frames.iter().map(|&(f, _)| f).collect();
    m.map_pages(pid, new_vpn + old_pages, &ids, true)?;
    m.space_mut(pid).release_reservation(vpn, old_pages)?;
    st.blocks.remove(&vpn);
    st.blocks.insert(
        new_vpn,
        Block {
            pages: new_pages,
            committed: vec![true; new_pages as usize],
        },
    );
    Ok(new_vpn * PAGE_SIZE)
}

fn commit_inner(
    m: &mut Machine,
    pid: ProcessId,
    st: &mut UmpaState,
    base: u64,
    size: u64,
    flags: AllocFlags,
) -> Result<(), UmpaError> {
    if size == 0 {
        return Err(UmpaError::InvalidSize);
    }
    let vpn = block_vpn(base)?;
    let pages = pages_for(size);
    if !m.space(pid).is_range_reserved(vpn, pages) {
        return Err(UmpaError::NotReserved);
    }
    for p in vpn..vpn + pages {
        if m.space(pid).is_present(p) {
            return Err(UmpaError::AlreadyCommitted);
        }
    }
    let frames = acquire_frames(m, pid, st, pages, flags.zeroed)?;
    zero_if_requested(m, pid, &frames, flags);
    let ids: Vec<FrameId> = frames.iter().map(|&(f, _)| f).collect();
    m.map_pages(pid, vpn, &ids, true)?;
    set_committed_flags(st, vpn, pages, true);
    Ok(())
}

fn release_inner(
    m: &mut Machine,
    pid: ProcessId,
    st: &mut UmpaState,
    base: u64,
    size: u64,
) -> Result<(), UmpaError> {
    if size == 0 {
        return Err(UmpaError::InvalidSize);
    }
    let vpn = block_vpn(base)?;
    let pages = pages_for(size);
    if !m.space(pid).is_range_reserved(vpn, pages) {
        return Err(UmpaError::NotReserved);
    }
    for p in vpn..vpn + pages {
        if !m.space(pid).is_present(p) {
            return Err(UmpaError::NotCommitted);
        }
    }
    let freed = m.unmap_pages(pid, vpn, pages)?;
    m.tlb_flush(pid, Some((vpn, pages)));
    stash_frames(m, pid, st, freed);
    set_committed_flags(st, vpn, pages, false);
    Ok(())
}

fn swap_inner(
    m: &mut Machine,
    pid: ProcessId,
    st: &mut UmpaState,
    base_a: u64,
    base_b: u64,
    size: u64,
) -> Result<(), UmpaError> {
    let a = block_vpn(base_a)?;
    let b = block_vpn(base_b)?;
    let pages = pages_for(size);
    let block_a = st.blocks.get(&a).ok_or(UmpaError::UnknownBlock)?;
    let block_b = st.blocks.get(&b).ok_or(UmpaError::UnknownBlock)?;
    if block_a.pages != block_b.pages || block_a.pages != pages {
        return Err(UmpaError::SizeMismatch);
    }
    if a < b + pages && b < a + pages {
        return Err(UmpaError::RangeOverlap);
    }
    if !block_a.fully_committed() || !block_b.fully_committed() {
        return Err(UmpaError::NotCommitted);
    }
    let params = m.params;
    m.space_mut(pid).swap_ranges(&params, a, b, pages)?;
    m.tlb_flush(pid, Some((a, pages)));
    m.tlb_flush(pid, Some((b, pages)));
    Ok(())
}

fn set_committed_flags(st: &mut UmpaState, vpn: Vpn, pages: u64, value: bool) {
    for (&bvpn, block) in st.blocks.range_mut(..vpn + pages) {
        let bend = bvpn + block.pages;
        if bend <= vpn {
            continue;
        }
        let from = vpn.max(bvpn) - bvpn;
        let to = (vpn + pages).min(bend) - bvpn;
        for i in from..to {
            block.committed[i as usize] = value;
        }
    }
}

fn block_vpn(base: u64) -> Result<Vpn, UmpaError> {
    if base == 0 || !base.is_multiple_of(PAGE_SIZE) {
        return Err(UmpaError::UnknownBlock);
    }
    Ok(base / PAGE_SIZE)
}

/// Default pressure response: give back `ceil(25% x level)` of the cached
/// small-page equivalents, dirty frames first since clean ones are the most
/// valuable to keep.
pub fn pressure_release(m: &mut Machine, pid: ProcessId, severity: Severity) -> Vec<FrameId> {
    with_state(m, pid, |_, st| {
        let cached = st.cache_small_equiv();
        let target = (cached * severity.level() as u64).div_ceil(4);
        let mut out = Vec::with_capacity(target as usize);
        for _ in 0..target {
            if let Some(f) = st.dirty.pop_front() {
                out.push(f);
            } else if let Some(f) = st.zeroed.pop_front() {
                out.push(f);
            }
        }
        out
    })
}

impl Machine {
    /// Attaches the user mode page allocator to `pid` and registers its
    /// memory-pressure handler.
    pub fn attach_umpa(&mut self, pid: ProcessId, config: UmpaConfig) {
        self.procs.get_mut(&pid).expect("unknown process").umpa = Some(UmpaState::new(config));
        self.register_pressure_handler(pid, Box::new(pressure_release));
    }

    /// Test fixture: fills the lookaside cache with `frames` small frames
    /// using a single kernel exchange.
    pub fn umpa_preload(&mut self, pid: ProcessId, frames: u64) -> Result<(), UmpaError> {
        let got = self.sys_exchange_pages(pid, &[], &vec![SizeClass::Small; frames as usize])?;
        with_state(self, pid, |m, st| {
            for f in got {
                if m.kernel().frame_reads_zero(f) {
                    st.zeroed.push_back(f);
                } else {
                    st.dirty.push_back(f);
                }
            }
        });
        Ok(())
    }

    pub fn umpa_cache_small_equiv(&self, pid: ProcessId) -> u64 {
        self.procs
            .get(&pid)
            .and_then(|p| p.umpa.as_ref())
            .map(|st| st.cache_small_equiv())
            .unwrap_or(0)
    }

    /// Public userpage calls made so far, for amortization comparisons.
    pub fn umpa_api_calls(&self, pid: ProcessId) -> u64 {
        self.procs
            .get(&pid)
            .and_then(|p| p.umpa.as_ref())
            .map(|st| st.api_calls)
            .unwrap_or(0)
    }

    pub fn userpage_malloc(
        &mut self,
        pid: ProcessId,
        size: u64,
        flags: AllocFlags,
    ) -> Result<u64, UmpaError> {
        with_state(self, pid, |m, st| {
            st.api_calls += 1;
            malloc_inner(m, pid, st, size, flags)
        })
    }

    pub fn userpage_free(&mut self, pid: ProcessId, base: u64, size: u64) -> Result<(), UmpaError> {
        with_state(self, pid, |m, st| {
            st.api_calls += 1;
            free_inner(m, pid, st, base, size)
        })
    }

    pub fn userpage_realloc(
        &mut self,
        pid: ProcessId,
        base: u64,
        old_size: u64,
        new_size: u64,
        flags: AllocFlags,
    ) -> Result<u64, UmpaError> {
        with_state(self, pid, |m, st| {
            st.api_calls += 1;
            realloc_inner(m, pid, st, base, old_size, new_size, flags)
        })
    }

    pub fn userpage_commit(
        &mut self,
        pid: ProcessId,
        base: u64,
        size: u64,
        flags: AllocFlags,
    ) -> Result<(), UmpaError> {
        with_state(self, pid, |m, st| {
            st.api_calls += 1;
            commit_inner(m, pid, st, base, size, flags)
        })
    }

    pub fn userpage_release(
        &mut self,
        pid: ProcessId,
        base: u64,
        size: u64,
    ) -> Result<(), UmpaError> {
        with_state(self, pid, |m, st| {
            st.api_calls += 1;
            release_inner(m, pid, st, base, size)
        })
    }

    pub fn userpage_swap(
        &mut self,
        pid: ProcessId,
        base_a: u64,
        base_b: u64,
        size: u64,
    ) -> Result<(), UmpaError> {
        with_state(self, pid, |m, st| {
            st.api_calls += 1;
            swap_inner(m, pid, st, base_a, base_b, size)
        })
    }

    /// Anonymous-mmap wrapper: zero-filled `userpage_malloc`.
    pub fn mmap_anonymous(&mut self, pid: ProcessId, size: u64) -> Result<u64, UmpaError> {
        with_state(self, pid, |m, st| {
            st.api_calls += 1;
            malloc_inner(m, pid, st, size, AllocFlags::zeroed())
        })
    }

    pub fn munmap(&mut self, pid: ProcessId, base: u64, size: u64) -> Result<(), UmpaError> {
        with_state(self, pid, |m, st| {
            st.api_calls += 1;
            free_inner(m, pid, st, base, size)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModelParams;
    use crate::machine::{Machine, MachineConfig};
    use crate::mmu::MmuError;

    const KB: u64 = 1024;

    fn machine(frames: u64) -> (Machine, ProcessId) {
        let mut m = Machine::new(MachineConfig {
            total_small_frames: frames,
            vspace_pages: 1 << 20,
            params: CostModelParams::default(),
        });
        let pid = m.create_process();
        m.attach_umpa(pid, UmpaConfig::default());
        (m, pid)
    }

    #[test]
    fn warm_cache_malloc_is_kernel_and_fault_silent() {
        let (mut m, pid) = machine(4096);
        m.umpa_preload(pid, 8).unwrap();
        let before = m.ledger(pid);
        let base = m
            .userpage_malloc(pid, 16 * KB, AllocFlags::default())
            .unwrap();
        for p in 0..4u64 {
            m.write_byte(pid, base + p * PAGE_SIZE, 1).unwrap();
        }
        let delta = m.ledger(pid).delta_since(&before);
        assert_eq!(delta.kernel_entries, 0);
        assert_eq!(delta.faults, 0);
        m.audit().unwrap();
    }

    #[test]
    fn zero_byte_malloc_is_invalid() {
        let (mut m, pid) = machine(64);
        assert_eq!(
            m.userpage_malloc(pid, 0, AllocFlags::default()),
            Err(UmpaError::InvalidSize)
        );
    }

    #[test]
    fn cold_eight_megabyte_malloc_is_one_kernel_entry() {
        let (mut m, pid) = machine(4096);
        let before = m.ledger(pid);
        m.userpage_malloc(pid, 8 * 1024 * KB, AllocFlags::default())
            .unwrap();
        let delta = m.ledger(pid).delta_since(&before);
        assert_eq!(delta.kernel_entries, 1);
        assert_eq!(m.kernel().held_small_equiv(), 2048);
        assert_eq!(delta.pte_writes, 2048);
    }

    #[test]
    fn free_feeds_the_cache_without_kernel_traffic() {
        let (mut m, pid) = machine(4096);
        m.umpa_preload(pid, 64).unwrap();
        let base = m
            .userpage_malloc(pid, 64 * KB, AllocFlags::default())
            .unwrap();
        let cache_before = m.umpa_cache_small_equiv(pid);
        let before = m.ledger(pid);
        m.userpage_free(pid, base, 64 * KB).unwrap();
        assert_eq!(m.umpa_cache_small_equiv(pid) - cache_before, 16);
        assert_eq!(m.ledger(pid).delta_since(&before).kernel_entries, 0);
        m.audit().unwrap();
    }

    #[test]
    fn free_with_wrong_base_is_unknown() {
        let (mut m, pid) = machine(64);
        let base = m
            .userpage_malloc(pid, 8 * KB, AllocFlags::default())
            .unwrap();
        assert_eq!(
            m.userpage_free(pid, base + PAGE_SIZE, 8 * KB),
            Err(UmpaError::UnknownBlock)
        );
        assert_eq!(
            m.userpage_free(pid, base, 4 * KB),
            Err(UmpaError::UnknownBlock)
        );
    }

    #[test]
    fn cache_overflow_releases_exactly_the_excess_in_one_call() {
        let mut m = Machine::new(MachineConfig {
            total_small_frames: 4096,
            vspace_pages: 1 << 20,
            params: CostModelParams::default(),
        });
        let pid = m.create_process();
        m.attach_umpa(pid, UmpaConfig::with_cap(16));
        m.umpa_preload(pid, 16).unwrap();
        // 26 pages live; freeing pushes the cache 10 over its cap.
        let base = m
            .userpage_malloc(pid, 26 * PAGE_SIZE, AllocFlags::default())
            .unwrap();
        let before = m.ledger(pid);
        m.userpage_free(pid, base, 26 * PAGE_SIZE).unwrap();
        let delta = m.ledger(pid).delta_since(&before);
        assert_eq!(delta.kernel_entries, 1);
        assert_eq!(m.umpa_cache_small_equiv(pid), 16);
        assert_eq!(m.kernel().held_small_equiv(), 16);
    }

    #[test]
    fn realloc_shrink_keeps_base_and_caches_tail() {
        let (mut m, pid) = machine(4096);
        m.umpa_preload(pid, 64).unwrap();
        let base = m
            .userpage_malloc(pid, 128 * KB, AllocFlags::default())
            .unwrap();
        let cache_before = m.umpa_cache_small_equiv(pid);
        let got = m
            .userpage_realloc(pid, base, 128 * KB, 64 * KB, AllocFlags::default())
            .unwrap();
        assert_eq!(got, base);
        assert_eq!(m.umpa_cache_small_equiv(pid) - cache_before, 16);
        m.audit().unwrap();
    }

    #[test]
    fn realloc_grow_relocates_without_copying_bytes() {
        let (mut m, pid) = machine(4096);
        m.umpa_preload(pid, 128).unwrap();
        let base = m
            .userpage_malloc(pid, 64 * KB, AllocFlags::default())
            .unwrap();
        let _blocker = m
            .userpage_malloc(pid, 4 * KB, AllocFlags::default())
            .unwrap();
        for i in 0..16u64 {
            m.write_byte(pid, base + i * PAGE_SIZE + 7, i as u8 + 1)
                .unwrap();
        }
        let before = m.ledger(pid);
        let new_base = m
            .userpage_realloc(pid, base, 64 * KB, 128 * KB, AllocFlags::default())
            .unwrap();
        let delta = m.ledger(pid).delta_since(&before);
        assert_ne!(new_base, base);
        assert_eq!(delta.bytes_copied, 0);
        for i in 0..16u64 {
            assert_eq!(
                m.read_byte(pid, new_base + i * PAGE_SIZE + 7).unwrap(),
                i as u8 + 1
            );
        }
        m.audit().unwrap();
    }

    #[test]
    fn blocked_grow_with_no_relocate_fails_cleanly() {
        let (mut m, pid) = machine(4096);
        m.umpa_preload(pid, 64).unwrap();
        let base = m
            .userpage_malloc(pid, 16 * KB, AllocFlags::default())
            .unwrap();
        let _blocker = m
            .userpage_malloc(pid, 4 * KB, AllocFlags::default())
            .unwrap();
        m.write_byte(pid, base, 0x42).unwrap();
        let flags = AllocFlags {
            zeroed: false,
            no_relocate: true,
        };
        let before = m.ledger(pid);
        assert_eq!(
            m.userpage_realloc(pid, base, 16 * KB, 32 * KB, flags),
            Err(UmpaError::CannotGrowInPlace)
        );
        let delta = m.ledger(pid).delta_since(&before);
        assert_eq!(delta.pte_writes, 0);
        assert_eq!(m.read_byte(pid, base).unwrap(), 0x42);
    }

    #[test]
    fn grow_in_place_when_neighborhood_is_free() {
        let (mut m, pid) = machine(4096);
        m.umpa_preload(pid, 64).unwrap();
        let base = m
            .userpage_malloc(pid, 16 * KB, AllocFlags::default())
            .unwrap();
        let got = m
            .userpage_realloc(pid, base, 16 * KB, 32 * KB, AllocFlags::default())
            .unwrap();
        assert_eq!(got, base);
        for p in 0..8u64 {
            m.write_byte(pid, base + p * PAGE_SIZE, 1).unwrap();
        }
        m.audit().unwrap();
    }

    #[test]
    fn commit_middle_of_reservation_leaves_rest_faulting() {
        let (mut m, pid) = machine(4096);
        let vpn = m.reserve(pid, 16).unwrap();
        let base = vpn * PAGE_SIZE;
        m.userpage_commit(
            pid,
            base + 6 * PAGE_SIZE,
            4 * PAGE_SIZE,
            AllocFlags::default(),
        )
        .unwrap();
        for p in 6..10u64 {
            m.write_byte(pid, base + p * PAGE_SIZE, 1).unwrap();
        }
        assert!(matches!(
            m.write_byte(pid, base, 1),
            Err(MmuError::SegmentationFault(_))
        ));
        assert!(matches!(
            m.write_byte(pid, base + 15 * PAGE_SIZE, 1),
            Err(MmuError::SegmentationFault(_))
        ));
        assert_eq!(
            m.userpage_commit(pid, base + 6 * PAGE_SIZE, PAGE_SIZE, AllocFlags::default()),
            Err(UmpaError::AlreadyCommitted)
        );
        assert_eq!(
            m.userpage_commit(
                pid,
                (vpn + 20) * PAGE_SIZE,
                PAGE_SIZE,
                AllocFlags::default()
            ),
            Err(UmpaError::NotReserved)
        );
    }

    #[test]
    fn release_keeps_reservation_and_zeroed_recommit_reads_zero() {
        let (mut m, pid) = machine(4096);
        let vpn = m.reserve(pid, 4).unwrap();
        let base = vpn * PAGE_SIZE;
        m.userpage_commit(pid, base, 4 * PAGE_SIZE, AllocFlags::default())
            .unwrap();
        m.write_byte(pid, base, 0xEE).unwrap();
        m.userpage_release(pid, base, 4 * PAGE_SIZE).unwrap();
        assert!(matches!(
            m.write_byte(pid, base, 1),
            Err(MmuError::SegmentationFault(_))
        ));
        // The address range stays claimed.
        assert_ne!(m.reserve(pid, 4).unwrap(), vpn);
        let before = m.ledger(pid);
        m.userpage_commit(pid, base, 4 * PAGE_SIZE, AllocFlags::zeroed())
            .unwrap();
        assert_eq!(m.read_byte(pid, base).unwrap(), 0);
        assert!(m.ledger(pid).delta_since(&before).bytes_zeroed > 0);
        assert_eq!(
            m.userpage_release(pid, (vpn + 100) * PAGE_SIZE, PAGE_SIZE),
            Err(UmpaError::NotReserved)
        );
    }

    #[test]
    fn swap_exchanges_patterns_without_copies() {
        let (mut m, pid) = machine(4096);
        m.umpa_preload(pid, 32).unwrap();
        let a = m
            .userpage_malloc(pid, 8 * KB, AllocFlags::default())
            .unwrap();
        let b = m
            .userpage_malloc(pid, 8 * KB, AllocFlags::default())
            .unwrap();
        for i in 0..2u64 {
            m.write_byte(pid, a + i * PAGE_SIZE, 0xAA).unwrap();
            m.write_byte(pid, b + i * PAGE_SIZE, 0xBB).unwrap();
        }
        let before = m.ledger(pid);
        m.userpage_swap(pid, a, b, 8 * KB).unwrap();
        assert_eq!(m.ledger(pid).delta_since(&before).bytes_copied, 0);
        for i in 0..2u64 {
            assert_eq!(m.read_byte(pid, a + i * PAGE_SIZE).unwrap(), 0xBB);
            assert_eq!(m.read_byte(pid, b + i * PAGE_SIZE).unwrap(), 0xAA);
        }
        m.audit().unwrap();
    }

    #[test]
    fn swap_size_mismatch_and_self_swap_error() {
        let (mut m, pid) = machine(4096);
        let a = m
            .userpage_malloc(pid, 8 * KB, AllocFlags::default())
            .unwrap();
        let b = m
            .userpage_malloc(pid, 16 * KB, AllocFlags::default())
            .unwrap();
        assert_eq!(
            m.userpage_swap(pid, a, b, 8 * KB),
            Err(UmpaError::SizeMismatch)
        );
        assert_eq!(
            m.userpage_swap(pid, a, a, 8 * KB),
            Err(UmpaError::RangeOverlap)
        );
    }

    #[test]
    fn pressure_releases_quarter_per_severity_level() {
        for (cached, level, expect) in
            [(100u64, 1u8, 25u64), (100, 4, 100), (3, 2, 2), (100, 2, 50)]
        {
            let (mut m, pid) = machine(4096);
            m.umpa_preload(pid, cached).unwrap();
            let reclaimed = m.sys_trigger_pressure(Severity::new(level).unwrap());
            assert_eq!(reclaimed, expect, "cache {cached} severity {level}");
            assert_eq!(m.umpa_cache_small_equiv(pid), cached - expect);
            m.audit().unwrap();
        }
    }

    #[test]
    fn mmap_reads_zero_even_after_dirty_reuse() {
        let (mut m, pid) = machine(4096);
        let a = m.mmap_anonymous(pid, 256 * KB).unwrap();
        for p in 0..64u64 {
            assert_eq!(m.read_byte(pid, a + p * PAGE_SIZE).unwrap(), 0);
        }
        m.write_byte(pid, a, 0x99).unwrap();
        let cache_before = m.umpa_cache_small_equiv(pid);
        m.munmap(pid, a, 256 * KB).unwrap();
        assert_eq!(m.umpa_cache_small_equiv(pid), cache_before + 64);
        let before = m.ledger(pid);
        let b = m.mmap_anonymous(pid, 256 * KB).unwrap();
        assert_eq!(m.read_byte(pid, b).unwrap(), 0);
        assert!(m.ledger(pid).delta_since(&before).bytes_zeroed > 0);
    }

    #[test]
    fn dirty_reuse_without_zeroed_flag_avoids_zeroing() {
        let (mut m, pid) = machine(4096);
        m.umpa_preload(pid, 16).unwrap();
        let a = m
            .userpage_malloc(pid, 16 * KB, AllocFlags::default())
            .unwrap();
        m.write_byte(pid, a, 1).unwrap();
        m.userpage_free(pid, a, 16 * KB).unwrap();
        let before = m.ledger(pid);
        let _b = m
            .userpage_malloc(pid, 16 * KB, AllocFlags::default())
            .unwrap();
        assert_eq!(m.ledger(pid).delta_since(&before).bytes_zeroed, 0);
    }

    #[test]
    fn umpa_paths_never_fault_or_copy() {
        let (mut m, pid) = machine(8192);
        m.umpa_preload(pid, 256).unwrap();
        let a = m
            .userpage_malloc(pid, 100 * KB, AllocFlags::default())
            .unwrap();
        let b = m
            .userpage_malloc(pid, 100 * KB, AllocFlags::zeroed())
            .unwrap();
        for p in 0..25u64 {
            m.write_byte(pid, a + p * PAGE_SIZE, 3).unwrap();
            m.write_byte(pid, b + p * PAGE_SIZE, 4).unwrap();
        }
        let a2 = m
            .userpage_realloc(pid, a, 100 * KB, 200 * KB, AllocFlags::default())
            .unwrap();
        m.userpage_swap(pid, a2.min(b), a2.max(b), 0).unwrap_err();
        m.userpage_free(pid, a2, 200 * KB).unwrap();
        m.userpage_free(pid, b, 100 * KB).unwrap();
        let ledger = m.ledger(pid);
        assert_eq!(ledger.faults, 0);
        assert_eq!(ledger.bytes_copied, 0);
        assert_eq!(ledger.cycles, ledger.recompute_cycles(m.params()));
        m.audit().unwrap();
    }
}
