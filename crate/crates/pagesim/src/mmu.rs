//! Per-process virtual address space: page table, two-level TLB, and
//! virtual address-space reservations.
//!
//! The page table is a radix of 512-entry sheets indexed by vpn, which is
//! both the structure the cost model talks about (near refills stay within
//! one sheet) and an O(1) lookup. Page-table updates deliberately leave the
//! TLB alone; translation of a stale entry is a hard
//! [`MmuError::ConsistencyFault`] so that a missing flush is a
//! deterministic, testable bug rather than a silent wrong frame.

use std::collections::BTreeMap;

use rustc_hash::FxHashMap;
use thiserror::Error;

use crate::cost::{CostLedger, CostModelParams};
use crate::frame::{FrameId, FrameState, ProcessId, SizeClass, PAGES_PER_LARGE};
use crate::kernel::Kernel;
use crate::machine::Machine;

/// Virtual page number; virtual address = vpn * 4096.
pub type Vpn = u64;

/// Page-table entries per sheet (2Mb of address space).
pub const SHEET_SPAN: u64 = PAGES_PER_LARGE;

/// Default virtual address-space size: 2^24 small pages (64Gb).
pub const DEFAULT_VSPACE_PAGES: u64 = 1 << 24;

pub fn sheet_of(vpn: Vpn) -> u64 {
    vpn / SHEET_SPAN
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MmuError {
    #[error("virtual page 0 is the null guard and never mappable")]
    NullPage,
    #[error("range extends beyond the virtual address space")]
    OutOfRange,
    #[error("target range already mapped")]
    AlreadyMapped,
    #[error("range not fully mapped")]
    NotMapped,
    #[error("frame {0} is not held by this address space's owner")]
    NotOwner(FrameId),
    #[error("frame {0} is already mapped somewhere")]
    FrameAliased(FrameId),
    #[error("frame {0} does not exist")]
    UnknownFrame(FrameId),
    #[error("source and destination ranges overlap")]
    RangeOverlap,
    #[error("operation would split a large-page mapping")]
    SplitsLargePage,
    #[error("large pages require 512-aligned virtual placement")]
    MisalignedLargePage,
    #[error("stale TLB entry for {0:#x}; a tlb_flush is required")]
    ConsistencyFault(u64),
    #[error("segmentation fault at {0:#x}")]
    SegmentationFault(u64),
    #[error("no free virtual address range of the requested size")]
    AddressSpaceExhausted,
    #[error("range is not reserved")]
    NotReserved,
}

/// One present page-table entry. Presence is encoded by occupancy of the
/// slot; `large` entries sit at 512-aligned vpns and cover 512 pages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageTableEntry {
    pub frame: FrameId,
    pub writable: bool,
    pub accessed: bool,
    pub dirty: bool,
    pub large: bool,
}

impl PageTableEntry {
    fn span(&self) -> u64 {
        if self.large {
            SHEET_SPAN
        } else {
            1
        }
    }
}

/// Fault handler: returns true when the fault was resolved and the access
/// should be retried (once).
pub type FaultHandler = Box<dyn FnMut(&mut Machine, ProcessId, u64, AccessKind) -> bool + Send>;

const NO_ENTRY: Option<PageTableEntry> = None;

struct Sheet {
    used: u16,
    entries: [Option<PageTableEntry>; SHEET_SPAN as usize],
}

impl Sheet {
    fn new() -> Box<Self> {
        Box::new(Sheet {
            used: 0,
            entries: [NO_ENTRY; SHEET_SPAN as usize],
        })
    }
}

/// Radix page table: one lazily allocated sheet per 512-page group.
pub(crate) struct PageTable {
    sheets: Vec<Option<Box<Sheet>>>,
}

impl PageTable {
    fn new(vspace_pages: u64) -> Self {
        let sheet_count = vspace_pages.div_ceil(SHEET_SPAN) as usize;
        let mut sheets = Vec::with_capacity(sheet_count);
        sheets.resize_with(sheet_count, || None);
        PageTable { sheets }
    }

    #[inline]
    pub(crate) fn get(&self, vpn: Vpn) -> Option<&PageTableEntry> {
        self.sheets
            .get((vpn / SHEET_SPAN) as usize)?
            .as_ref()?
            .entries[(vpn % SHEET_SPAN) as usize]
            .as_ref()
    }

    #[inline]
    pub(crate) fn get_mut(&mut self, vpn: Vpn) -> Option<&mut PageTableEntry> {
        self.sheets
            .get_mut((vpn / SHEET_SPAN) as usize)?
            .as_mut()?
            .entries[(vpn % SHEET_SPAN) as usize]
            .as_mut()
    }

    /// Writes into an empty slot.
    fn insert(&mut self, vpn: Vpn, entry: PageTableEntry) {
        let sheet = self.sheets[(vpn / SHEET_SPAN) as usize].get_or_insert_with(Sheet::new);
        let slot = &mut sheet.entries[(vpn % SHEET_SPAN) as usize];
        debug_assert!(slot.is_none());
        *slot = Some(entry);
        sheet.used += 1;
    }

    fn remove(&mut self, vpn: Vpn) -> Option<PageTableEntry> {
        let slot = self.sheets.get_mut((vpn / SHEET_SPAN) as usize)?.as_mut()?;
        let taken = slot.entries[(vpn % SHEET_SPAN) as usize].take();
        if taken.is_some() {
            slot.used -= 1;
            if slot.used == 0 {
                self.sheets[(vpn / SHEET_SPAN) as usize] = None;
            }
        }
        taken
    }

    /// The present entry covering `vpn`: its own slot, or a large entry at
    /// the base of its sheet.
    #[inline]
    pub(crate) fn covering(&self, vpn: Vpn) -> Option<(Vpn, &PageTableEntry)> {
        let sheet = self.sheets.get((vpn / SHEET_SPAN) as usize)?.as_ref()?;
        let idx = (vpn % SHEET_SPAN) as usize;
        if let Some(e) = sheet.entries[idx].as_ref() {
            return Some((vpn, e));
        }
        match sheet.entries[0].as_ref() {
            Some(e) if e.large => Some((vpn - vpn % SHEET_SPAN, e)),
            _ => None,
        }
    }

    #[inline]
    fn covering_mut(&mut self, vpn: Vpn) -> Option<(Vpn, &mut PageTableEntry)> {
        let base = self.covering(vpn)?.0;
        Some((base, self.get_mut(base).expect("covering entry exists")))
    }

    /// Any present entry whose base lies in `[start, start+count)`;
    /// whole empty sheets are skipped in one step.
    fn any_base_in(&self, start: Vpn, count: u64) -> bool {
        let end = start + count;
        let mut vpn = start;
        while vpn < end {
            match self.sheets.get((vpn / SHEET_SPAN) as usize) {
                None => break,
                Some(None) => vpn = (vpn / SHEET_SPAN + 1) * SHEET_SPAN,
                Some(Some(sheet)) => {
                    let upto = end.min((vpn / SHEET_SPAN + 1) * SHEET_SPAN);
                    if sheet.used > 0 {
                        for i in vpn..upto {
                            if sheet.entries[(i % SHEET_SPAN) as usize].is_some() {
                                return true;
                            }
                        }
                    }
                    vpn = upto;
                }
            }
        }
        false
    }

    fn iter(&self) -> impl Iterator<Item = (Vpn, &PageTableEntry)> {
        self.sheets.iter().enumerate().flat_map(|(s, sheet)| {
            sheet.iter().flat_map(move |sheet| {
                sheet.entries.iter().enumerate().filter_map(move |(i, e)| {
                    e.as_ref()
                        .map(move |e| (s as u64 * SHEET_SPAN + i as u64, e))
                })
            })
        })
    }
}

const NIL: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct LruSlot {
    key: Vpn,
    frame: FrameId,
    large: bool,
    prev: u32,
    next: u32,
}

/// Fixed-capacity strict-LRU map with O(1) touch and eviction.
struct LruLevel {
    capacity: u32,
    map: FxHashMap<Vpn, u32>,
    slots: Vec<LruSlot>,
    head: u32,
    tail: u32,
    free: Vec<u32>,
    large_entries: u32,
}

impl LruLevel {
    fn new(capacity: u32) -> Self {
        LruLevel {
            capacity,
            map: FxHashMap::default(),
            slots: Vec::with_capacity(capacity as usize),
            head: NIL,
            tail: NIL,
            free: Vec::new(),
            large_entries: 0,
        }
    }

    fn len(&self) -> usize {
        self.map.len()
    }

    fn get(&self, key: Vpn) -> Option<(FrameId, bool)> {
        let &idx = self.map.get(&key)?;
        let slot = &self.slots[idx as usize];
        Some((slot.frame, slot.large))
    }

    fn unlink(&mut self, idx: u32) {
        let (prev, next) = {
            let s = &self.slots[idx as usize];
            (s.prev, s.next)
        };
        if prev != NIL {
            self.slots[prev as usize].next = next;
        } else {
            self.head = next;
        }
        if next != NIL {
            self.slots[next as usize].prev = prev;
        } else {
            self.tail = prev;
        }
    }

    fn link_front(&mut self, idx: u32) {
        self.slots[idx as usize].prev = NIL;
        self.slots[idx as usize].next = self.head;
        if self.head != NIL {
            self.slots[self.head as usize].prev = idx;
        }
        self.head = idx;
        if self.tail == NIL {
            self.tail = idx;
        }
    }

    fn touch(&mut self, key: Vpn) {
        if let Some(&idx) = self.map.get(&key) {
            if self.head != idx {
                self.unlink(idx);
                self.link_front(idx);
            }
        }
    }

    /// Inserts at the front, returning the key evicted to make room.
    fn insert(&mut self, key: Vpn, frame: FrameId, large: bool) -> Option<Vpn> {
        if let Some(&idx) = self.map.get(&key) {
            let slot = &mut self.slots[idx as usize];
            if slot.large {
                self.large_entries -= 1;
            }
            slot.frame = frame;
            slot.large = large;
            if large {
                self.large_entries += 1;
            }
            if self.head != idx {
                self.unlink(idx);
                self.link_front(idx);
            }
            return None;
        }
        let evicted = if self.map.len() as u32 >= self.capacity {
            let victim = self.tail;
            let victim_key = self.slots[victim as usize].key;
            self.remove(victim_key);
            Some(victim_key)
        } else {
            None
        };
        let idx = match self.free.pop() {
            Some(idx) => {
                self.slots[idx as usize] = LruSlot {
                    key,
                    frame,
                    large,
                    prev: NIL,
                    next: NIL,
                };
                idx
            }
            None => {
                self.slots.push(LruSlot {
                    key,
                    frame,
                    large,
                    prev: NIL,
                    next: NIL,
                });
                self.slots.len() as u32 - 1
            }
        };
        self.map.insert(key, idx);
        self.link_front(idx);
        if large {
            self.large_entries += 1;
        }
        evicted
    }

    fn remove(&mut self, key: Vpn) {
        if let Some(idx) = self.map.remove(&key) {
            self.unlink(idx);
            if self.slots[idx as usize].large {
                self.large_entries -= 1;
            }
            self.free.push(idx);
        }
    }

    fn clear(&mut self) {
        self.map.clear();
        self.slots.clear();
        self.free.clear();
        self.head = NIL;
        self.tail = NIL;
        self.large_entries = 0;
    }

    fn keys_intersecting(&self, start: Vpn, count: u64) -> Vec<Vpn> {
        self.map
            .iter()
            .filter(|(&k, &idx)| {
                let span = if self.slots[idx as usize].large {
                    SHEET_SPAN
                } else {
                    1
                };
                k < start + count && k + span > start
            })
            .map(|(&k, _)| k)
            .collect()
    }

    fn contains(&self, key: Vpn) -> bool {
        self.map.contains_key(&key)
    }
}

/// Two-level translation cache: 16-entry L1 within a 256-entry L2, strict
/// LRU, L1 contents always a subset of L2. `last_sheet` tracks the
/// page-table sheet touched by the most recent walk or bulk entry update
/// and decides near versus far refill cost.
pub struct TlbModel {
    l1: LruLevel,
    l2: LruLevel,
    pub last_sheet: Option<u64>,
}

pub const L1_CAPACITY: usize = 16;
pub const L2_CAPACITY: usize = 256;

/// Outcome of a TLB probe.
pub(crate) enum TlbLookup {
    Hit {
        key: Vpn,
        frame: FrameId,
        large: bool,
    },
    Miss,
}

impl TlbModel {
    pub fn new() -> Self {
        TlbModel {
            l1: LruLevel::new(L1_CAPACITY as u32),
            l2: LruLevel::new(L2_CAPACITY as u32),
            last_sheet: None,
        }
    }

    /// Probes both levels for a translation covering `vpn`. A hit at
    /// either level refreshes recency and promotes into L1.
    pub(crate) fn lookup(&mut self, vpn: Vpn) -> TlbLookup {
        // An entry keyed exactly `vpn` covers it whether small or large
        // (large keys are sheet bases). Only when large entries exist can
        // a differently keyed entry cover it.
        let probe = |key: Vpn| -> Option<(FrameId, bool)> { self.l2.get(key) };
        let mut hit = probe(vpn).map(|(f, l)| (vpn, f, l));
        if hit.is_none() && self.l2.large_entries > 0 {
            let base = vpn - vpn % SHEET_SPAN;
            if base != vpn {
                hit = probe(base).filter(|&(_, l)| l).map(|(f, l)| (base, f, l));
            }
        }
        match hit {
            Some((key, frame, large)) => {
                self.l2.touch(key);
                if self.l1.contains(key) {
                    self.l1.touch(key);
                } else {
                    // Promotion never breaks inclusion: the key stays in L2.
                    self.l1.insert(key, frame, large);
                }
                TlbLookup::Hit { key, frame, large }
            }
            None => TlbLookup::Miss,
        }
    }

    /// Installs a translation after a successful walk.
    pub(crate) fn install(&mut self, key: Vpn, frame: FrameId, large: bool) {
        if let Some(victim) = self.l2.insert(key, frame, large) {
            // L1 entries are a subset of L2; evicting from L2 back-invalidates.
            self.l1.remove(victim);
        }
        self.l1.insert(key, frame, large);
    }

    pub(crate) fn flush(&mut self, range: Option<(Vpn, u64)>) {
        match range {
            None => {
                self.l1.clear();
                self.l2.clear();
            }
            Some((start, count)) => {
                for key in self.l2.keys_intersecting(start, count) {
                    self.l2.remove(key);
                    self.l1.remove(key);
                }
            }
        }
        self.last_sheet = None;
    }

    pub fn l1_len(&self) -> usize {
        self.l1.len()
    }

    pub fn l2_len(&self) -> usize {
        self.l2.len()
    }

    /// L1 ⊆ L2 inclusion check.
    pub fn inclusion_holds(&self) -> bool {
        self.l1.map.keys().all(|k| self.l2.map.contains_key(k))
    }
}

impl Default for TlbModel {
    fn default() -> Self {
        Self::new()
    }
}

/// A process's virtual address space: directly written page table,
/// reservations, TLB state, and the cost ledger charged by its activity.
pub struct AddressSpace {
    pub owner: ProcessId,
    pub(crate) table: PageTable,
    reservations: BTreeMap<Vpn, u64>,
    pub tlb: TlbModel,
    pub ledger: CostLedger,
    pub(crate) fault_handler: Option<FaultHandler>,
    vspace_pages: u64,
}

impl AddressSpace {
    pub fn new(owner: ProcessId, vspace_pages: u64) -> Self {
        AddressSpace {
            owner,
            table: PageTable::new(vspace_pages),
            reservations: BTreeMap::new(),
            tlb: TlbModel::new(),
            ledger: CostLedger::default(),
            fault_handler: None,
            vspace_pages,
        }
    }

    pub fn vspace_pages(&self) -> u64 {
        self.vspace_pages
    }

    /// The present entry covering `vpn`, with its base vpn.
    pub(crate) fn entry_covering(&self, vpn: Vpn) -> Option<(Vpn, &PageTableEntry)> {
        self.table.covering(vpn)
    }

    pub(crate) fn entry_covering_mut(&mut self, vpn: Vpn) -> Option<(Vpn, &mut PageTableEntry)> {
        self.table.covering_mut(vpn)
    }

    pub fn is_present(&self, vpn: Vpn) -> bool {
        self.table.covering(vpn).is_some()
    }

    fn range_is_unmapped(&self, start: Vpn, count: u64) -> bool {
        if self.table.any_base_in(start, count) {
            return false;
        }
        // The only entry below `start` that can reach into the range is a
        // large one at the base of start's sheet.
        let large_base = start - start % SHEET_SPAN;
        if large_base < start {
            if let Some(e) = self.table.get(large_base) {
                if e.large {
                    return false;
                }
            }
        }
        true
    }

    fn check_range(&self, start: Vpn, count: u64) -> Result<(), MmuError> {
        if start == 0 {
            return Err(MmuError::NullPage);
        }
        if count == 0 || start + count > self.vspace_pages {
            return Err(MmuError::OutOfRange);
        }
        Ok(())
    }

    /// Writes entries for `frames` starting at `start`. Large frames
    /// occupy one 512-aligned entry; one PTE write is charged per entry.
    pub(crate) fn map_pages(
        &mut self,
        kernel: &mut Kernel,
        params: &CostModelParams,
        start: Vpn,
        frames: &[FrameId],
        writable: bool,
    ) -> Result<(), MmuError> {
        let mut vpn = start;
        for &id in frames {
            let rec = kernel.record(id).ok_or(MmuError::UnknownFrame(id))?;
            if rec.size == SizeClass::Large && !vpn.is_multiple_of(SHEET_SPAN) {
                return Err(MmuError::MisalignedLargePage);
            }
            if rec.state != FrameState::Held || rec.owner != Some(self.owner) {
                return Err(MmuError::NotOwner(id));
            }
            if rec.mapped {
                return Err(MmuError::FrameAliased(id));
            }
            vpn += rec.size.small_equiv();
        }
        let total = vpn - start;
        self.check_range(start, total)?;
        if !self.range_is_unmapped(start, total) {
            return Err(MmuError::AlreadyMapped);
        }
        let mut at = start;
        for &id in frames {
            let large = kernel.record(id).expect("validated above").size == SizeClass::Large;
            self.table.insert(
                at,
                PageTableEntry {
                    frame: id,
                    writable,
                    accessed: false,
                    dirty: false,
                    large,
                },
            );
            kernel.set_mapped(id, true);
            at += if large { SHEET_SPAN } else { 1 };
        }
        self.ledger.charge_pte_writes(params, frames.len() as u64);
        // Bulk table updates leave the walker positioned at the range base.
        self.tlb.last_sheet = Some(sheet_of(start));
        Ok(())
    }

    /// Clears `count` pages of entries from `start`, returning the frames
    /// in address order. The TLB is left stale on purpose.
    pub(crate) fn unmap_pages(
        &mut self,
        kernel: &mut Kernel,
        params: &CostModelParams,
        start: Vpn,
        count: u64,
    ) -> Result<Vec<FrameId>, MmuError> {
        self.check_range(start, count)?;
        let entries = self.whole_entries_in(start, count)?;
        let mut freed = Vec::with_capacity(entries as usize);
        let mut vpn = start;
        while vpn < start + count {
            let entry = self.table.remove(vpn).expect("validated tiling");
            kernel.set_mapped(entry.frame, false);
            freed.push(entry.frame);
            vpn += entry.span();
        }
        self.ledger.charge_pte_writes(params, entries);
        self.tlb.last_sheet = Some(sheet_of(start));
        Ok(freed)
    }

    /// Validates that whole entries exactly tile `[start, start+count)`
    /// and returns how many there are.
    fn whole_entries_in(&self, start: Vpn, count: u64) -> Result<u64, MmuError> {
        let mut entries = 0;
        let mut vpn = start;
        let end = start + count;
        while vpn < end {
            match self.table.covering(vpn) {
                None => return Err(MmuError::NotMapped),
                Some((base, e)) => {
                    if base != vpn || base + e.span() > end {
                        return Err(MmuError::SplitsLargePage);
                    }
                    entries += 1;
                    vpn = base + e.span();
                }
            }
        }
        Ok(entries)
    }

    /// Moves entries `src..src+count` to `dst`, preserving frame and flag
    /// state. No bytes move; two PTE writes per entry are charged.
    pub(crate) fn remap_pages(
        &mut self,
        params: &CostModelParams,
        src: Vpn,
        dst: Vpn,
        count: u64,
    ) -> Result<(), MmuError> {
        self.check_range(src, count)?;
        self.check_range(dst, count)?;
        if src < dst + count && dst < src + count {
            return Err(MmuError::RangeOverlap);
        }
        let entries = self.whole_entries_in(src, count)?;
        if !self.range_is_unmapped(dst, count) {
            return Err(MmuError::AlreadyMapped);
        }
        let mut vpn = src;
        while vpn < src + count {
            let e = self.table.get(vpn).expect("validated tiling");
            if e.large && !(dst + (vpn - src)).is_multiple_of(SHEET_SPAN) {
                return Err(MmuError::MisalignedLargePage);
            }
            vpn += e.span();
        }
        let mut vpn = src;
        while vpn < src + count {
            let entry = self.table.remove(vpn).expect("validated tiling");
            self.table.insert(dst + (vpn - src), entry);
            vpn += entry.span();
        }
        self.ledger.charge_pte_writes(params, 2 * entries);
        self.tlb.last_sheet = Some(sheet_of(dst));
        Ok(())
    }

    /// Exchanges the small-page entries of two equal-length ranges pairwise.
    pub(crate) fn swap_ranges(
        &mut self,
        params: &CostModelParams,
        a: Vpn,
        b: Vpn,
        count: u64,
    ) -> Result<(), MmuError> {
        self.check_range(a, count)?;
        self.check_range(b, count)?;
        if a < b + count && b < a + count {
            return Err(MmuError::RangeOverlap);
        }
        for base in [a, b] {
            for vpn in base..base + count {
                match self.table.covering(vpn) {
                    None => return Err(MmuError::NotMapped),
                    Some((_, e)) if e.large => return Err(MmuError::SplitsLargePage),
                    Some(_) => {}
                }
            }
        }
        for i in 0..count {
            let ea = self.table.remove(a + i).expect("checked present");
            let eb = self.table.remove(b + i).expect("checked present");
            self.table.insert(a + i, eb);
            self.table.insert(b + i, ea);
        }
        self.ledger.charge_pte_writes(params, 2 * count);
        self.tlb.last_sheet = Some(sheet_of(a));
        Ok(())
    }

    /// Invalidates matching TLB entries (all when `range` is `None`) and
    /// clears walk locality. State is idempotent; the cost is charged per call.
    pub fn tlb_flush(&mut self, params: &CostModelParams, range: Option<(Vpn, u64)>) {
        self.tlb.flush(range);
        self.ledger.charge_tlb_flush(params);
    }

    /// First-fit reservation of `count` pages, lowest address wins.
    /// Page 0 stays unmapped as the null guard.
    pub(crate) fn reserve(&mut self, count: u64) -> Result<Vpn, MmuError> {
        if count == 0 {
            return Err(MmuError::OutOfRange);
        }
        let mut cursor: Vpn = 1;
        for (&start, &len) in &self.reservations {
            if start.saturating_sub(cursor) >= count {
                break;
            }
            cursor = start + len;
        }
        if cursor + count > self.vspace_pages {
            return Err(MmuError::AddressSpaceExhausted);
        }
        self.reservations.insert(cursor, count);
        Ok(cursor)
    }

    /// Releases `[start, start+count)`, which must be fully reserved.
    /// Partial releases split the surrounding reservations.
    pub(crate) fn release_reservation(&mut self, start: Vpn, count: u64) -> Result<(), MmuError> {
        let covering = self.covering_reservations(start, count)?;
        for (s, l) in covering {
            self.reservations.remove(&s);
            if s < start {
                self.reservations.insert(s, start - s);
            }
            if s + l > start + count {
                self.reservations
                    .insert(start + count, s + l - (start + count));
            }
        }
        Ok(())
    }

    /// Reservations whose union exactly covers `[start, start+count)`.
    fn covering_reservations(&self, start: Vpn, count: u64) -> Result<Vec<(Vpn, u64)>, MmuError> {
        if count == 0 {
            return Err(MmuError::OutOfRange);
        }
        let end = start + count;
        let from = self
            .reservations
            .range(..=start)
            .next_back()
            .map(|(&s, _)| s)
            .unwrap_or(start);
        let mut need = start;
        let mut out = Vec::new();
        for (&s, &l) in self.reservations.range(from..end) {
            if s + l <= need {
                continue;
            }
            if s > need {
                return Err(MmuError::NotReserved);
            }
            out.push((s, l));
            need = s + l;
            if need >= end {
                return Ok(out);
            }
        }
        Err(MmuError::NotReserved)
    }

    pub fn is_range_reserved(&self, start: Vpn, count: u64) -> bool {
        self.covering_reservations(start, count).is_ok()
    }

    /// Grows the reservation starting at `start` from `old` to `new` pages
    /// when the following address range is free. Pure bookkeeping.
    pub(crate) fn try_extend_reservation(&mut self, start: Vpn, old: u64, new: u64) -> bool {
        debug_assert!(new > old);
        let extra_start = start + old;
        let extra = new - old;
        if extra_start + extra > self.vspace_pages {
            return false;
        }
        if self.reservations.get(&start) != Some(&old) {
            return false;
        }
        let next_taken = self
            .reservations
            .range(extra_start..)
            .next()
            .map(|(&s, _)| s)
            .unwrap_or(u64::MAX);
        if next_taken < extra_start + extra {
            return false;
        }
        self.reservations.insert(start, new);
        true
    }

    /// Shrinks the reservation starting at `start` from `old` to `new` pages.
    pub(crate) fn shrink_reservation(&mut self, start: Vpn, old: u64, new: u64) {
        debug_assert!(new < old);
        if self.reservations.get(&start) == Some(&old) {
            self.reservations.insert(start, new);
        }
    }

    /// Pages of the reservation containing `vpn`, for size-dependent fault
    /// charges.
    pub(crate) fn reservation_pages_at(&self, vpn: Vpn) -> Option<u64> {
        self.reservations
            .range(..=vpn)
            .next_back()
            .filter(|(&s, &l)| vpn < s + l)
            .map(|(_, &l)| l)
    }

    /// All present (vpn base, entry) pairs, for audits.
    pub fn present_entries(&self) -> impl Iterator<Item = (Vpn, &PageTableEntry)> {
        self.table.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tlb_lru_evicts_oldest_and_keeps_inclusion() {
        let mut tlb = TlbModel::new();
        for i in 0..L2_CAPACITY as u64 + 8 {
            tlb.install(i + 1, FrameId(i), false);
        }
        assert_eq!(tlb.l2_len(), L2_CAPACITY);
        assert_eq!(tlb.l1_len(), L1_CAPACITY);
        assert!(tlb.inclusion_holds());
        // The very first installs were evicted, the latest survive.
        assert!(matches!(tlb.lookup(1), TlbLookup::Miss));
        assert!(matches!(
            tlb.lookup(L2_CAPACITY as u64 + 8),
            TlbLookup::Hit { .. }
        ));
    }

    #[test]
    fn tlb_large_entry_covers_whole_sheet_from_one_slot() {
        let mut tlb = TlbModel::new();
        tlb.install(512, FrameId(9), true);
        assert_eq!(tlb.l2_len(), 1);
        for probe in [512u64, 700, 1023] {
            assert!(matches!(
                tlb.lookup(probe),
                TlbLookup::Hit {
                    key: 512,
                    large: true,
                    ..
                }
            ));
        }
        assert!(matches!(tlb.lookup(1024), TlbLookup::Miss));
    }

    #[test]
    fn tlb_ranged_flush_keeps_other_entries_hot() {
        let mut tlb = TlbModel::new();
        tlb.install(10, FrameId(1), false);
        tlb.install(20, FrameId(2), false);
        tlb.flush(Some((10, 5)));
        assert!(matches!(tlb.lookup(10), TlbLookup::Miss));
        assert!(matches!(tlb.lookup(20), TlbLookup::Hit { .. }));
        assert_eq!(tlb.last_sheet, None);
    }

    #[test]
    fn lru_touch_rescues_an_entry_from_eviction() {
        let mut tlb = TlbModel::new();
        for i in 0..L2_CAPACITY as u64 {
            tlb.install(i + 1, FrameId(i), false);
        }
        // Key 1 is the LRU; touching it moves key 2 to the back.
        assert!(matches!(tlb.lookup(1), TlbLookup::Hit { .. }));
        tlb.install(9999, FrameId(9999), false);
        assert!(matches!(tlb.lookup(1), TlbLookup::Hit { .. }));
        assert!(matches!(tlb.lookup(2), TlbLookup::Miss));
        assert!(tlb.inclusion_holds());
    }

    #[test]
    fn page_table_radix_round_trips() {
        let mut t = PageTable::new(1 << 16);
        let e = PageTableEntry {
            frame: FrameId(7),
            writable: true,
            accessed: false,
            dirty: false,
            large: false,
        };
        t.insert(513, e);
        assert_eq!(t.get(513).unwrap().frame, FrameId(7));
        assert!(t.get(514).is_none());
        assert!(t.any_base_in(512, 4));
        assert!(!t.any_base_in(514, 100));
        assert_eq!(t.covering(513).unwrap().0, 513);
        let removed = t.remove(513).unwrap();
        assert_eq!(removed.frame, FrameId(7));
        assert!(t.get(513).is_none());
    }

    #[test]
    fn reserve_is_first_fit_lowest_address() {
        let mut space = AddressSpace::new(ProcessId(1), 1 << 16);
        let a = space.reserve(4).unwrap();
        let b = space.reserve(4).unwrap();
        assert_eq!(a, 1);
        assert_eq!(b, a + 4);
        space.release_reservation(a, 4).unwrap();
        let c = space.reserve(4).unwrap();
        assert_eq!(c, a);
        let d = space.reserve(2).unwrap();
        assert_eq!(d, b + 4);
    }

    #[test]
    fn reserve_exhaustion_errors() {
        let mut space = AddressSpace::new(ProcessId(1), 64);
        assert_eq!(space.reserve(1 << 20), Err(MmuError::AddressSpaceExhausted));
        let got = space.reserve(63).unwrap();
        assert_eq!(got, 1);
        assert_eq!(space.reserve(1), Err(MmuError::AddressSpaceExhausted));
    }

    #[test]
    fn partial_reservation_release_splits() {
        let mut space = AddressSpace::new(ProcessId(1), 1 << 16);
        let base = space.reserve(16).unwrap();
        space.release_reservation(base + 4, 8).unwrap();
        assert!(space.is_range_reserved(base, 4));
        assert!(space.is_range_reserved(base + 12, 4));
        assert!(!space.is_range_reserved(base + 4, 1));
        // First fit reuses the hole.
        assert_eq!(space.reserve(8).unwrap(), base + 4);
    }

    #[test]
    fn extend_reservation_respects_neighbors() {
        let mut space = AddressSpace::new(ProcessId(1), 1 << 16);
        let a = space.reserve(4).unwrap();
        let b = space.reserve(4).unwrap();
        assert!(!space.try_extend_reservation(a, 4, 8));
        space.release_reservation(b, 4).unwrap();
        assert!(space.try_extend_reservation(a, 4, 8));
        assert!(space.is_range_reserved(a, 8));
    }
}
