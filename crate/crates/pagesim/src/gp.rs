//! General-purpose byte-granularity allocator over page operations.
//!
//! Small requests are carved from 1Mb arena chunks with segregated
//! power-of-two free lists and immediate coalescing; requests whose
//! size plus header exceed 256Kb go straight to page-level allocation,
//! reproducing the mmap seam of a dlmalloc-style allocator.
//!
//! Each arena allocation carries a 16-byte header in simulated memory:
//! span length and requested size in one word, a live/free magic plus the
//! alignment back-pad in the other.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::frame::{ProcessId, PAGE_SIZE};
use crate::machine::Machine;
use crate::mmu::{AccessKind, MmuError};
use crate::umpa::{AllocFlags, UmpaError};

pub const GP_HEADER_BYTES: u64 = 16;
pub const GP_DIRECT_THRESHOLD: u64 = 256 * 1024;
pub const GP_CHUNK_BYTES: u64 = 1024 * 1024;
/// Split remainders smaller than this stay absorbed in the allocation.
const MIN_SPLIT: u64 = 32;
const ALIGN: u64 = 16;

const MAGIC_LIVE: u32 = 0x6C69_7665;
const MAGIC_FREE: u32 = 0x6672_6565;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GpError {
    #[error("zero-byte request")]
    InvalidSize,
    #[error("address is not a live allocation")]
    UnknownAddress,
    #[error("allocation already freed")]
    DoubleFree,
    #[error("alignment must be a power of two in 16..=4096")]
    UnsupportedAlignment,
    #[error("out of physical memory")]
    OutOfPhysicalMemory,
    #[error(transparent)]
    Umpa(UmpaError),
    #[error(transparent)]
    Mmu(MmuError),
}

impl From<UmpaError> for GpError {
    fn from(e: UmpaError) -> Self {
        match e {
            UmpaError::OutOfPhysicalMemory => GpError::OutOfPhysicalMemory,
            UmpaError::InvalidSize => GpError::InvalidSize,
            other => GpError::Umpa(other),
        }
    }
}

impl From<MmuError> for GpError {
    fn from(e: MmuError) -> Self {
        GpError::Mmu(e)
    }
}

/// Where the heap gets its pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PageProvider {
    /// Anonymous mappings from the user mode page allocator (eager, no faults).
    Umpa,
    /// Reservation plus demand paging through the kernel fault path.
    KernelLazy,
}

#[derive(Debug, Clone, Copy)]
pub struct GpConfig {
    pub chunk_bytes: u64,
    pub direct_threshold: u64,
    pub provider: PageProvider,
}

impl Default for GpConfig {
    fn default() -> Self {
        GpConfig {
            chunk_bytes: GP_CHUNK_BYTES,
            direct_threshold: GP_DIRECT_THRESHOLD,
            provider: PageProvider::Umpa,
        }
    }
}

fn align16(v: u64) -> u64 {
    (v + (ALIGN - 1)) & !(ALIGN - 1)
}

fn align_up(v: u64, a: u64) -> u64 {
    (v + (a - 1)) & !(a - 1)
}

/// Free-space structure of the arena: per-chunk span maps plus segregated
/// free lists. Cloneable so a batch can dry-run its placements exactly.
#[derive(Clone, Default)]
pub(crate) struct Arena {
    /// Free spans per chunk, keyed by offset.
    spans: Vec<BTreeMap<u64, u64>>,
    /// Segregated lists of (chunk, offset) by floor(log2(len)).
    lists: Vec<Vec<(usize, u64)>>,
    chunk_bytes: u64,
}

struct Fit {
    chunk: usize,
    offset: u64,
    len: u64,
    pay_off: u64,
}

impl Arena {
    fn new(chunk_bytes: u64) -> Self {
        Arena {
            spans: Vec::new(),
            lists: vec![Vec::new(); chunk_bytes.ilog2() as usize + 1],
            chunk_bytes,
        }
    }

    fn class_of(&self, len: u64) -> usize {
        (len.ilog2() as usize).min(self.lists.len() - 1)
    }

    fn insert_span(&mut self, chunk: usize, offset: u64, len: u64) {
        self.spans[chunk].insert(offset, len);
        let class = self.class_of(len);
        self.lists[class].push((chunk, offset));
    }

    fn remove_span(&mut self, chunk: usize, offset: u64) -> u64 {
        let len = self.spans[chunk].remove(&offset).expect("span exists");
        let class = self.class_of(len);
        let pos = self.lists[class]
            .iter()
            .position(|&e| e == (chunk, offset))
            .expect("list mirrors span map");
        self.lists[class].remove(pos);
        len
    }

    fn add_chunk(&mut self) -> usize {
        let idx = self.spans.len();
        self.spans.push(BTreeMap::new());
        self.insert_span(idx, 0, self.chunk_bytes);
        idx
    }

    /// First fit within the smallest class that can hold the request,
    /// in list order. Chunk bases are page-aligned, so alignment padding
    /// is computable from offsets alone.
    fn find_fit(&self, payload: u64, alignment: u64) -> Option<Fit> {
        let min_need = payload + GP_HEADER_BYTES;
        for class in self.class_of(min_need)..self.lists.len() {
            for &(chunk, offset) in &self.lists[class] {
                let len = self.spans[chunk][&offset];
                let pay_off = align_up(offset + GP_HEADER_BYTES, alignment);
                if pay_off + payload <= offset + len {
                    return Some(Fit {
                        chunk,
                        offset,
                        len,
                        pay_off,
                    });
                }
            }
        }
        None
    }

    /// Consumes a fit, returning (span_total, back_pad); splits any
    /// remainder of at least MIN_SPLIT back onto the lists.
    fn carve(&mut self, fit: &Fit, payload: u64) -> (u64, u64) {
        self.remove_span(fit.chunk, fit.offset);
        let back_pad = fit.pay_off - GP_HEADER_BYTES - fit.offset;
        let used = back_pad + GP_HEADER_BYTES + payload;
        let rest = fit.len - used;
        if rest >= MIN_SPLIT {
            self.insert_span(fit.chunk, fit.offset + used, rest);
            (used, back_pad)
        } else {
            (fit.len, back_pad)
        }
    }

    /// Returns a span to the free structure, merging adjacent neighbors
    /// unless coalescing is deferred.
    fn free_span(&mut self, chunk: usize, mut offset: u64, mut len: u64, coalesce: bool) {
        if coalesce {
            let prev = self.spans[chunk]
                .range(..offset)
                .next_back()
                .map(|(&o, &l)| (o, l));
            if let Some((po, pl)) = prev {
                if po + pl == offset {
                    self.remove_span(chunk, po);
                    offset = po;
                    len += pl;
                }
            }
            if self.spans[chunk].contains_key(&(offset + len)) {
                let nl = self.remove_span(chunk, offset + len);
                len += nl;
            }
        }
        self.insert_span(chunk, offset, len);
    }

    /// Single coalescing pass over one chunk: rebuilds its spans by
    /// merging all adjacent runs.
    fn coalesce_chunk(&mut self, chunk: usize) {
        let old: Vec<(u64, u64)> = self.spans[chunk].iter().map(|(&o, &l)| (o, l)).collect();
        for &(o, _) in &old {
            self.remove_span(chunk, o);
        }
        let mut merged: Vec<(u64, u64)> = Vec::with_capacity(old.len());
        for (o, l) in old {
            match merged.last_mut() {
                Some((mo, ml)) if *mo + *ml == o => *ml += l,
                _ => merged.push((o, l)),
            }
        }
        for (o, l) in merged {
            self.insert_span(chunk, o, l);
        }
    }

    fn chunk_count(&self) -> usize {
        self.spans.len()
    }

    /// Free bytes in every chunk, for conservation checks.
    pub(crate) fn free_bytes(&self) -> u64 {
        self.spans.iter().flat_map(|m| m.values()).sum()
    }

    pub(crate) fn span_count(&self) -> usize {
        self.spans.iter().map(|m| m.len()).sum()
    }
}

/// Per-process heap state.
pub struct Heap {
    config: GpConfig,
    pub(crate) arena: Arena,
    chunk_bases: Vec<u64>,
    direct: BTreeMap<u64, u64>,
    header_writes: u64,
    chunk_fetches: u64,
    coalesce_passes: u64,
}

impl Heap {
    fn new(config: GpConfig) -> Self {
        Heap {
            config,
            arena: Arena::new(config.chunk_bytes),
            chunk_bases: Vec::new(),
            direct: BTreeMap::new(),
            header_writes: 0,
            chunk_fetches: 0,
            coalesce_passes: 0,
        }
    }

    pub fn header_writes(&self) -> u64 {
        self.header_writes
    }

    pub fn chunk_fetches(&self) -> u64 {
        self.chunk_fetches
    }

    pub fn coalesce_passes(&self) -> u64 {
        self.coalesce_passes
    }

    pub fn provider(&self) -> PageProvider {
        self.config.provider
    }

    fn chunk_containing(&self, addr: u64) -> Option<usize> {
        self.chunk_bases
            .iter()
            .position(|&b| addr >= b && addr < b + self.config.chunk_bytes)
    }

    fn is_direct(&self, addr: u64) -> bool {
        self.direct.contains_key(&addr)
    }
}

fn provider_alloc(
    m: &mut Machine,
    pid: ProcessId,
    provider: PageProvider,
    bytes: u64,
) -> Result<u64, GpError> {
    match provider {
        PageProvider::Umpa => Ok(m.mmap_anonymous(pid, bytes)?),
        PageProvider::KernelLazy => {
            let pages = bytes.div_ceil(PAGE_SIZE);
            let base = m.space_mut(pid).reserve(pages).map_err(UmpaError::from)?;
            Ok(base * PAGE_SIZE)
        }
    }
}

fn provider_free(
    m: &mut Machine,
    pid: ProcessId,
    provider: PageProvider,
    base: u64,
    bytes: u64,
) -> Result<(), GpError> {
    match provider {
        PageProvider::Umpa => Ok(m.munmap(pid, base, bytes)?),
        PageProvider::KernelLazy => {
            let vpn = base / PAGE_SIZE;
            let pages = bytes.div_ceil(PAGE_SIZE);
            let mut freed = Vec::new();
            let mut p = vpn;
            while p < vpn + pages {
                if m.space(pid).is_present(p) {
                    let mut run = 1;
                    while p + run < vpn + pages && m.space(pid).is_present(p + run) {
                        run += 1;
                    }
                    freed.extend(m.unmap_pages(pid, p, run).map_err(UmpaError::from)?);
                    p += run;
                } else {
                    p += 1;
                }
            }
            m.tlb_flush(pid, Some((vpn, pages)));
            if !freed.is_empty() {
                m.sys_exchange_pages(pid, &freed, &[])
                    .expect("unmapped held frames release cleanly");
            }
            m.space_mut(pid)
                .release_reservation(vpn, pages)
                .map_err(UmpaError::from)?;
            Ok(())
        }
    }
}

/// Touches each page of a lazily provided range so the copy engine finds
/// it resident.
fn ensure_resident(m: &mut Machine, pid: ProcessId, base: u64, len: u64) -> Result<(), GpError> {
    let first = base / PAGE_SIZE;
    let last = (base + len - 1) / PAGE_SIZE;
    for vpn in first..=last {
        m.translate(pid, vpn * PAGE_SIZE, AccessKind::Write)?;
    }
    Ok(())
}

fn write_header(
    m: &mut Machine,
    pid: ProcessId,
    heap: &mut Heap,
    header_addr: u64,
    w1: u64,
    w2: u64,
) -> Result<(), GpError> {
    if heap.config.provider == PageProvider::KernelLazy {
        ensure_resident(m, pid, header_addr, GP_HEADER_BYTES)?;
    }
    for (i, b) in w1
        .to_le_bytes()
        .iter()
        .chain(w2.to_le_bytes().iter())
        .enumerate()
    {
        m.write_byte(pid, header_addr + i as u64, *b)?;
    }
    heap.header_writes += 1;
    Ok(())
}

fn read_header(m: &mut Machine, pid: ProcessId, header_addr: u64) -> Result<(u64, u64), GpError> {
    let mut bytes = [0u8; 16];
    for (i, slot) in bytes.iter_mut().enumerate() {
        *slot = m
            .read_byte(pid, header_addr + i as u64)
            .map_err(|_| GpError::UnknownAddress)?;
    }
    let w1 = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let w2 = u64::from_le_bytes(bytes[8..].try_into().unwrap());
    Ok((w1, w2))
}

fn pack_w1(span_total: u64, requested: u64) -> u64 {
    (span_total << 32) | requested
}

fn unpack_w1(w1: u64) -> (u64, u64) {
    (w1 >> 32, w1 & 0xFFFF_FFFF)
}

fn pack_w2(magic: u32, back_pad: u64) -> u64 {
    ((magic as u64) << 32) | back_pad
}

fn unpack_w2(w2: u64) -> (u32, u64) {
    ((w2 >> 32) as u32, w2 & 0xFFFF)
}

/// Carves an aligned arena allocation, fetching a fresh chunk on
/// exhaustion. Returns (payload address, usable bytes).
pub(crate) fn arena_alloc(
    m: &mut Machine,
    pid: ProcessId,
    heap: &mut Heap,
    size: u64,
    alignment: u64,
) -> Result<(u64, u64), GpError> {
    let payload = align16(size);
    let fit = match heap.arena.find_fit(payload, alignment) {
        Some(fit) => fit,
        None => {
            let base = provider_alloc(m, pid, heap.config.provider, heap.config.chunk_bytes)?;
            heap.chunk_bases.push(base);
            heap.arena.add_chunk();
            heap.chunk_fetches += 1;
            heap.arena
                .find_fit(payload, alignment)
                .expect("fresh chunk fits any arena-class request")
        }
    };
    let chunk = fit.chunk;
    let pay_off = fit.pay_off;
    let (span_total, back_pad) = heap.arena.carve(&fit, payload);
    let addr = heap.chunk_bases[chunk] + pay_off;
    write_header(
        m,
        pid,
        heap,
        addr - GP_HEADER_BYTES,
        pack_w1(span_total, size),
        pack_w2(MAGIC_LIVE, back_pad),
    )?;
    let usable = span_total - back_pad - GP_HEADER_BYTES;
    Ok((addr, usable))
}

/// Located arena allocation: chunk index, span extent, requested size.
pub(crate) struct ArenaBlock {
    pub chunk: usize,
    pub span_off: u64,
    pub span_total: u64,
    pub requested: u64,
    pub back_pad: u64,
}

pub(crate) fn locate_arena_block(
    m: &mut Machine,
    pid: ProcessId,
    heap: &Heap,
    addr: u64,
) -> Result<ArenaBlock, GpError> {
    let chunk = heap.chunk_containing(addr).ok_or(GpError::UnknownAddress)?;
    if addr < heap.chunk_bases[chunk] + GP_HEADER_BYTES {
        return Err(GpError::UnknownAddress);
    }
    let (w1, w2) = read_header(m, pid, addr - GP_HEADER_BYTES)?;
    let (magic, back_pad) = unpack_w2(w2);
    match magic {
        MAGIC_LIVE => {}
        MAGIC_FREE => return Err(GpError::DoubleFree),
        _ => return Err(GpError::UnknownAddress),
    }
    let (span_total, requested) = unpack_w1(w1);
    let span_off = addr - GP_HEADER_BYTES - back_pad - heap.chunk_bases[chunk];
    if span_off + span_total > heap.config.chunk_bytes || span_total < GP_HEADER_BYTES {
        return Err(GpError::UnknownAddress);
    }
    Ok(ArenaBlock {
        chunk,
        span_off,
        span_total,
        requested,
        back_pad,
    })
}

/// Marks the block free in its header and returns the span, optionally
/// deferring neighbor coalescing.
pub(crate) fn arena_free(
    m: &mut Machine,
    pid: ProcessId,
    heap: &mut Heap,
    addr: u64,
    block: &ArenaBlock,
    coalesce: bool,
) -> Result<(), GpError> {
    write_header(
        m,
        pid,
        heap,
        addr - GP_HEADER_BYTES,
        pack_w1(block.span_total, block.requested),
        pack_w2(MAGIC_FREE, block.back_pad),
    )?;
    heap.arena
        .free_span(block.chunk, block.span_off, block.span_total, coalesce);
    Ok(())
}

/// Page-level allocation tracked headerless in the direct map.
pub(crate) fn direct_alloc_raw(
    m: &mut Machine,
    pid: ProcessId,
    heap: &mut Heap,
    size: u64,
) -> Result<(u64, u64), GpError> {
    let base = provider_alloc(m, pid, heap.config.provider, size)?;
    heap.direct.insert(base, size);
    Ok((base, size.div_ceil(PAGE_SIZE) * PAGE_SIZE))
}

pub(crate) fn free_direct(
    m: &mut Machine,
    pid: ProcessId,
    heap: &mut Heap,
    addr: u64,
) -> Result<(), GpError> {
    let size = heap
        .direct
        .get(&addr)
        .copied()
        .ok_or(GpError::UnknownAddress)?;
    provider_free(m, pid, heap.config.provider, addr, size)?;
    heap.direct.remove(&addr);
    Ok(())
}

pub(crate) fn update_direct_size(heap: &mut Heap, addr: u64, new_size: u64) {
    heap.direct.insert(addr, new_size);
}

fn gp_malloc_inner(
    m: &mut Machine,
    pid: ProcessId,
    heap: &mut Heap,
    size: u64,
    alignment: u64,
) -> Result<(u64, u64), GpError> {
    if size == 0 {
        return Err(GpError::InvalidSize);
    }
    if !alignment.is_power_of_two() || !(ALIGN..=PAGE_SIZE).contains(&alignment) {
        return Err(GpError::UnsupportedAlignment);
    }
    if align16(size) + GP_HEADER_BYTES > heap.config.direct_threshold {
        direct_alloc_raw(m, pid, heap, size)
    } else {
        arena_alloc(m, pid, heap, size, alignment)
    }
}

fn gp_free_inner(
    m: &mut Machine,
    pid: ProcessId,
    heap: &mut Heap,
    addr: u64,
) -> Result<(), GpError> {
    if let Some(&size) = heap.direct.get(&addr) {
        provider_free(m, pid, heap.config.provider, addr, size)?;
        heap.direct.remove(&addr);
        return Ok(());
    }
    let block = locate_arena_block(m, pid, heap, addr)?;
    arena_free(m, pid, heap, addr, &block, true)
}

fn gp_realloc_inner(
    m: &mut Machine,
    pid: ProcessId,
    heap: &mut Heap,
    addr: u64,
    new_size: u64,
) -> Result<u64, GpError> {
    if new_size == 0 {
        return Err(GpError::InvalidSize);
    }
    if let Some(&old_size) = heap.direct.get(&addr) {
        // Page-level resize: the page allocator remaps instead of copying.
        match heap.config.provider {
            PageProvider::Umpa => {
                let new_base =
                    m.userpage_realloc(pid, addr, old_size, new_size, AllocFlags::default())?;
                heap.direct.remove(&addr);
                heap.direct.insert(new_base, new_size);
                Ok(new_base)
            }
            PageProvider::KernelLazy => {
                let new_base = provider_alloc(m, pid, PageProvider::KernelLazy, new_size)?;
                let copy = old_size.min(new_size);
                ensure_resident(m, pid, addr, copy)?;
                ensure_resident(m, pid, new_base, copy)?;
                m.copy_bytes(pid, addr, new_base, copy)?;
                provider_free(m, pid, PageProvider::KernelLazy, addr, old_size)?;
                heap.direct.remove(&addr);
                heap.direct.insert(new_base, new_size);
                Ok(new_base)
            }
        }
    } else {
        let block = locate_arena_block(m, pid, heap, addr)?;
        let copy = block.requested.min(new_size);
        let (new_addr, _) = gp_malloc_inner(m, pid, heap, new_size, ALIGN)?;
        if heap.config.provider == PageProvider::KernelLazy {
            ensure_resident(m, pid, addr, copy)?;
            ensure_resident(m, pid, new_addr, copy)?;
        }
        m.copy_bytes(pid, addr, new_addr, copy)?;
        arena_free(m, pid, heap, addr, &block, true)?;
        Ok(new_addr)
    }
}

fn with_heap<R>(
    m: &mut Machine,
    pid: ProcessId,
    f: impl FnOnce(&mut Machine, &mut Heap) -> R,
) -> R {
    let mut heap = m
        .procs
        .get_mut(&pid)
        .expect("unknown process")
        .heap
        .take()
        .expect("general-purpose heap not attached");
    let out = f(m, &mut heap);
    m.procs.get_mut(&pid).expect("unknown process").heap = Some(heap);
    out
}

impl Machine {
    /// Attaches the byte-granularity heap. With the `KernelLazy` provider
    /// this also installs the demand-paging fault handler.
    pub fn attach_gp(&mut self, pid: ProcessId, config: GpConfig) {
        self.procs.get_mut(&pid).expect("unknown process").heap = Some(Heap::new(config));
        if config.provider == PageProvider::KernelLazy {
            crate::lazy::install_demand_paging(self, pid);
        }
    }

    pub fn gp_malloc(&mut self, pid: ProcessId, size: u64) -> Result<u64, GpError> {
        with_heap(self, pid, |m, heap| {
            gp_malloc_inner(m, pid, heap, size, ALIGN).map(|(addr, _)| addr)
        })
    }

    pub fn gp_free(&mut self, pid: ProcessId, addr: u64) -> Result<(), GpError> {
        with_heap(self, pid, |m, heap| gp_free_inner(m, pid, heap, addr))
    }

    pub fn gp_realloc(&mut self, pid: ProcessId, addr: u64, new_size: u64) -> Result<u64, GpError> {
        with_heap(self, pid, |m, heap| {
            gp_realloc_inner(m, pid, heap, addr, new_size)
        })
    }

    pub(crate) fn with_heap_state<R>(
        &mut self,
        pid: ProcessId,
        f: impl FnOnce(&mut Machine, &mut Heap) -> R,
    ) -> R {
        with_heap(self, pid, f)
    }

    pub fn gp_header_writes(&self, pid: ProcessId) -> u64 {
        self.procs
            .get(&pid)
            .and_then(|p| p.heap.as_ref())
            .map(|h| h.header_writes())
            .unwrap_or(0)
    }

    pub fn gp_chunk_fetches(&self, pid: ProcessId) -> u64 {
        self.procs
            .get(&pid)
            .and_then(|p| p.heap.as_ref())
            .map(|h| h.chunk_fetches())
            .unwrap_or(0)
    }

    pub fn gp_coalesce_passes(&self, pid: ProcessId) -> u64 {
        self.procs
            .get(&pid)
            .and_then(|p| p.heap.as_ref())
            .map(|h| h.coalesce_passes())
            .unwrap_or(0)
    }

    /// Free bytes currently on the arena lists, for conservation tests.
    pub fn gp_free_list_bytes(&self, pid: ProcessId) -> u64 {
        self.procs
            .get(&pid)
            .and_then(|p| p.heap.as_ref())
            .map(|h| h.arena.free_bytes())
            .unwrap_or(0)
    }

    /// Number of distinct free spans across all chunks.
    pub fn gp_free_spans(&self, pid: ProcessId) -> usize {
        self.procs
            .get(&pid)
            .and_then(|p| p.heap.as_ref())
            .map(|h| h.arena.span_count())
            .unwrap_or(0)
    }
}

// Batch operations live alongside the heap internals they drive.
pub(crate) use batch_support::*;

mod batch_support {
    use super::*;

    /// Exact dry-run of arena placements for a batch: how many fresh
    /// chunks the given arena-class payload sequence will need.
    pub(crate) fn plan_new_chunks(heap: &Heap, payloads: &[(u64, u64)]) -> u64 {
        let mut sim = heap.arena.clone();
        let mut new_chunks = 0;
        for &(payload, alignment) in payloads {
            let fit = match sim.find_fit(payload, alignment) {
                Some(f) => f,
                None => {
                    sim.add_chunk();
                    new_chunks += 1;
                    sim.find_fit(payload, alignment)
                        .expect("fresh chunk fits any arena-class request")
                }
            };
            sim.carve(&fit, payload);
        }
        new_chunks
    }

    pub(crate) fn heap_align16(v: u64) -> u64 {
        align16(v)
    }

    pub(crate) fn bump_coalesce_pass(heap: &mut Heap) {
        heap.coalesce_passes += 1;
        for chunk in 0..heap.arena.chunk_count() {
            heap.arena.coalesce_chunk(chunk);
        }
    }

    pub(crate) fn heap_direct_size(heap: &Heap, addr: u64) -> Option<u64> {
        heap.direct.get(&addr).copied()
    }

    pub(crate) fn heap_is_direct(heap: &Heap, addr: u64) -> bool {
        heap.is_direct(addr)
    }

    pub(crate) fn heap_threshold(heap: &Heap) -> u64 {
        heap.config.direct_threshold
    }

    pub(crate) fn heap_chunk_bytes(heap: &Heap) -> u64 {
        heap.config.chunk_bytes
    }

    pub(crate) fn arena_grow_in_place(
        m: &mut Machine,
        pid: ProcessId,
        heap: &mut Heap,
        addr: u64,
        block: &ArenaBlock,
        new_size: u64,
    ) -> Result<bool, GpError> {
        let need = block.back_pad + GP_HEADER_BYTES + align16(new_size);
        let mut span_total = block.span_total;
        if need > span_total {
            // Try to consume the adjacent free neighbor.
            let next_off = block.span_off + span_total;
            let next_len = heap.arena.spans[block.chunk].get(&next_off).copied();
            match next_len {
                Some(nl) if span_total + nl >= need => {
                    heap.arena.remove_span(block.chunk, next_off);
                    let take = need - span_total;
                    let rest = nl - take;
                    if rest >= MIN_SPLIT {
                        heap.arena.insert_span(block.chunk, next_off + take, rest);
                        span_total += take;
                    } else {
                        span_total += nl;
                    }
                }
                _ => return Ok(false),
            }
        } else {
            // Shrink: split the tail back onto the lists when worthwhile.
            let rest = span_total - need;
            if rest >= MIN_SPLIT {
                heap.arena
                    .insert_span(block.chunk, block.span_off + need, rest);
                span_total = need;
            }
        }
        write_header(
            m,
            pid,
            heap,
            addr - GP_HEADER_BYTES,
            pack_w1(span_total, new_size),
            pack_w2(MAGIC_LIVE, block.back_pad),
        )?;
        Ok(true)
    }
}
