//! Simulated kernel: the physical frame database, the page-exchange
//! syscall, zero-on-transfer enforcement, and the two upcall registries.
//!
//! Physical capacity is a pool of small-page equivalents. Frame records are
//! materialized on first issue and retained while free so that a frame
//! re-issued to its last owner keeps its contents. Reclaiming retained
//! records (e.g. to mint a large frame out of released small ones) returns
//! their capacity to the pools; pooled capacity of dirty origin is always
//! cleared, and charged, when it backs a newly minted frame.

use std::collections::{BTreeMap, VecDeque};
use std::sync::{Arc, Mutex};

use rustc_hash::FxHashSet;
use thiserror::Error;

use crate::cost::{CostLedger, CostModelParams};
use crate::frame::{FrameContents, FrameId, FrameRecord, FrameState, ProcessId, SizeClass};
use crate::machine::Machine;
use crate::mmu::AccessKind;

/// Memory-pressure urgency, 1 (mild) to 4 (critical).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Severity(u8);

impl Severity {
    pub fn new(level: u8) -> Result<Self, KernelError> {
        if (1..=4).contains(&level) {
            Ok(Severity(level))
        } else {
            Err(KernelError::InvalidSeverity(level))
        }
    }

    pub fn level(self) -> u8 {
        self.0
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum KernelError {
    #[error("frame {0} is not held by the calling process")]
    NotOwner(FrameId),
    #[error("frame {0} is still mapped in an address space")]
    StillMapped(FrameId),
    #[error("frame {0} appears twice in the release list")]
    DuplicateRelease(FrameId),
    #[error("frame {0} does not exist")]
    UnknownFrame(FrameId),
    #[error("request exceeds free physical capacity")]
    OutOfPhysicalMemory,
    #[error("severity level {0} outside 1..=4")]
    InvalidSeverity(u8),
    #[error("virtual page {0} is not mapped")]
    UnmappedPage(u64),
}

/// Handler invoked by `sys_trigger_pressure`; returns frames the process
/// is willing to give back.
pub type PressureHandler = Box<dyn FnMut(&mut Machine, ProcessId, Severity) -> Vec<FrameId> + Send>;

/// Handler invoked once on the next access to a watched page.
pub type WatchHandler = Arc<Mutex<Box<dyn FnMut(u64, AccessKind) + Send>>>;

struct FreeLists {
    zeroed_small: VecDeque<FrameId>,
    zeroed_large: VecDeque<FrameId>,
    dirty_small: VecDeque<FrameId>,
    dirty_large: VecDeque<FrameId>,
}

impl FreeLists {
    fn new() -> Self {
        FreeLists {
            zeroed_small: VecDeque::new(),
            zeroed_large: VecDeque::new(),
            dirty_small: VecDeque::new(),
            dirty_large: VecDeque::new(),
        }
    }

    fn queue(&mut self, size: SizeClass, dirty: bool) -> &mut VecDeque<FrameId> {
        match (size, dirty) {
            (SizeClass::Small, false) => &mut self.zeroed_small,
            (SizeClass::Large, false) => &mut self.zeroed_large,
            (SizeClass::Small, true) => &mut self.dirty_small,
            (SizeClass::Large, true) => &mut self.dirty_large,
        }
    }
}

/// The physical frame database plus kernel-side registries.
///
/// Frame ids are dense and never reused, so the record store is a plain
/// vector indexed by id; destroyed records leave a hole.
pub struct Kernel {
    total_small_equiv: u64,
    /// Never-issued capacity; reads as zero when materialized.
    pristine_cap: u64,
    /// Reclaimed capacity of unknown prior ownership; always cleared on mint.
    dirty_cap: u64,
    records: Vec<Option<FrameRecord>>,
    free: FreeLists,
    pub(crate) pressure_handlers: BTreeMap<ProcessId, Option<PressureHandler>>,
    pub(crate) watches: BTreeMap<(ProcessId, u64), WatchHandler>,
    rejected_frames: u64,
}

impl Kernel {
    pub fn new(total_small_equiv: u64) -> Self {
        Kernel {
            total_small_equiv,
            pristine_cap: total_small_equiv,
            dirty_cap: 0,
            records: Vec::new(),
            free: FreeLists::new(),
            pressure_handlers: BTreeMap::new(),
            watches: BTreeMap::new(),
            rejected_frames: 0,
        }
    }

    pub fn capacity_small_equiv(&self) -> u64 {
        self.total_small_equiv
    }

    /// Free capacity in small-page equivalents: pooled plus retained records.
    pub fn free_small_equiv(&self) -> u64 {
        let retained: u64 = [
            (&self.free.zeroed_small, SizeClass::Small),
            (&self.free.dirty_small, SizeClass::Small),
            (&self.free.zeroed_large, SizeClass::Large),
            (&self.free.dirty_large, SizeClass::Large),
        ]
        .iter()
        .map(|(q, s)| q.len() as u64 * s.small_equiv())
        .sum();
        self.pristine_cap + self.dirty_cap + retained
    }

    pub fn held_small_equiv(&self) -> u64 {
        self.records
            .iter()
            .flatten()
            .filter(|r| r.state == FrameState::Held)
            .map(|r| r.size.small_equiv())
            .sum()
    }

    /// Frames returned by pressure handlers that failed validation.
    pub fn rejected_frames(&self) -> u64 {
        self.rejected_frames
    }

    pub fn frame_state(&self, id: FrameId) -> Option<FrameState> {
        self.record(id).map(|r| r.state)
    }

    pub fn frame_owner(&self, id: FrameId) -> Option<ProcessId> {
        self.record(id).and_then(|r| r.owner)
    }

    pub fn frame_size(&self, id: FrameId) -> Option<SizeClass> {
        self.record(id).map(|r| r.size)
    }

    pub fn frame_is_mapped(&self, id: FrameId) -> bool {
        self.record(id).map(|r| r.mapped).unwrap_or(false)
    }

    /// True when the frame's contents are guaranteed (or observed) all-zero.
    pub fn frame_reads_zero(&self, id: FrameId) -> bool {
        self.record(id)
            .map(|r| r.contents.is_all_zero())
            .unwrap_or(false)
    }

    /// Non-charging content inspection, for tests and diagnostics.
    pub fn peek_frame_byte(&self, id: FrameId, offset: u32) -> Option<u8> {
        self.record(id).map(|r| r.contents.read(offset))
    }

    #[inline]
    pub(crate) fn record(&self, id: FrameId) -> Option<&FrameRecord> {
        self.records.get(id.0 as usize)?.as_ref()
    }

    #[inline]
    pub(crate) fn record_mut(&mut self, id: FrameId) -> Option<&mut FrameRecord> {
        self.records.get_mut(id.0 as usize)?.as_mut()
    }

    pub(crate) fn set_mapped(&mut self, id: FrameId, mapped: bool) {
        if let Some(r) = self.record_mut(id) {
            r.mapped = mapped;
        }
    }

    /// Conservation audit: pooled + retained + held equals total capacity,
    /// and queue membership matches record state.
    pub fn audit_conservation(&self) -> bool {
        let held = self.held_small_equiv();
        if self.free_small_equiv() + held != self.total_small_equiv {
            return false;
        }
        let mut seen = FxHashSet::default();
        for q in [
            &self.free.zeroed_small,
            &self.free.zeroed_large,
            &self.free.dirty_small,
            &self.free.dirty_large,
        ] {
            for id in q {
                if !seen.insert(*id) {
                    return false;
                }
                match self.record(*id) {
                    Some(r) if r.state != FrameState::Held && !r.mapped => {}
                    _ => return false,
                }
            }
        }
        let free_records = self
            .records
            .iter()
            .flatten()
            .filter(|r| r.state != FrameState::Held)
            .count();
        free_records == seen.len()
    }

    /// The page-exchange syscall: atomically release `release` and acquire
    /// one frame per entry of `request`, in order. Exactly one kernel entry
    /// is charged whether the call succeeds or fails.
    pub fn exchange_pages(
        &mut self,
        caller: ProcessId,
        release: &[FrameId],
        request: &[SizeClass],
        ledger: &mut CostLedger,
        params: &CostModelParams,
    ) -> Result<Vec<FrameId>, KernelError> {
        ledger.charge_kernel_entry(params);

        let mut dup = FxHashSet::default();
        for &id in release {
            if !dup.insert(id) {
                return Err(KernelError::DuplicateRelease(id));
            }
            let rec = self.record(id).ok_or(KernelError::UnknownFrame(id))?;
            if rec.state != FrameState::Held || rec.owner != Some(caller) {
                return Err(KernelError::NotOwner(id));
            }
            if rec.mapped {
                return Err(KernelError::StillMapped(id));
            }
        }

        let released_equiv: u64 = release
            .iter()
            .map(|id| {
                self.record(*id)
                    .expect("validated above")
                    .size
                    .small_equiv()
            })
            .sum();
        let requested_equiv: u64 = request.iter().map(|s| s.small_equiv()).sum();
        if self.free_small_equiv() + released_equiv < requested_equiv {
            return Err(KernelError::OutOfPhysicalMemory);
        }

        for &id in release {
            self.release_to_dirty(id);
        }
        let issued = request
            .iter()
            .map(|&size| self.issue(size, caller, ledger, params))
            .collect();
        Ok(issued)
    }

    /// Kernel-internal frame grab used by the demand-paging fault path.
    /// The fault charge covers the kernel transition, so no kernel entry
    /// is recorded here.
    pub(crate) fn fault_resolve(
        &mut self,
        caller: ProcessId,
        ledger: &mut CostLedger,
        params: &CostModelParams,
    ) -> Result<FrameId, KernelError> {
        if self.free_small_equiv() < 1 {
            return Err(KernelError::OutOfPhysicalMemory);
        }
        Ok(self.issue(SizeClass::Small, caller, ledger, params))
    }

    /// Move frames validated by `sys_trigger_pressure` back to the free
    /// dirty lists. Returns reclaimed small-page equivalents.
    pub(crate) fn reclaim_validated(&mut self, proc: ProcessId, frames: &[FrameId]) -> u64 {
        let mut reclaimed = 0;
        for &id in frames {
            let ok = matches!(
                self.record(id),
                Some(r) if r.state == FrameState::Held && r.owner == Some(proc) && !r.mapped
            );
            if ok {
                reclaimed += self.record(id).expect("just matched").size.small_equiv();
                self.release_to_dirty(id);
            } else {
                self.rejected_frames += 1;
            }
        }
        reclaimed
    }

    fn release_to_dirty(&mut self, id: FrameId) {
        let rec = self.record_mut(id).expect("validated release");
        rec.state = FrameState::FreeDirty;
        let size = rec.size;
        self.free.queue(size, true).push_back(id);
    }

    /// Hand out one frame of `size` to `caller`, preferring retained records
    /// and minting from pooled capacity otherwise.
    fn issue(
        &mut self,
        size: SizeClass,
        caller: ProcessId,
        ledger: &mut CostLedger,
        params: &CostModelParams,
    ) -> FrameId {
        if let Some(id) = self.free.queue(size, false).pop_front() {
            let rec = self.record_mut(id).expect("queued record exists");
            rec.state = FrameState::Held;
            rec.owner = Some(caller);
            return id;
        }
        if let Some(id) = self.free.queue(size, true).pop_front() {
            let rec = self.record_mut(id).expect("queued record exists");
            if rec.owner != Some(caller) {
                rec.contents.clear();
                ledger.charge_zero_pages(params, size.small_equiv());
            }
            rec.state = FrameState::Held;
            rec.owner = Some(caller);
            return id;
        }
        self.mint(size, caller, ledger, params)
    }

    fn mint(
        &mut self,
        size: SizeClass,
        caller: ProcessId,
        ledger: &mut CostLedger,
        params: &CostModelParams,
    ) -> FrameId {
        let needed = size.small_equiv();
        // Reclaim retained records until pooled capacity covers the mint.
        // Zeroed records return pristine capacity, dirty ones dirty capacity.
        while self.pristine_cap + self.dirty_cap < needed {
            let id = self
                .pop_any_free_record()
                .expect("capacity was checked before issue");
            let rec = self.records[id.0 as usize]
                .take()
                .expect("queued record exists");
            match rec.state {
                FrameState::FreeZeroed => self.pristine_cap += rec.size.small_equiv(),
                FrameState::FreeDirty => self.dirty_cap += rec.size.small_equiv(),
                FrameState::Held => unreachable!("free queues hold only free records"),
            }
        }
        let from_pristine = needed.min(self.pristine_cap);
        let from_dirty = needed - from_pristine;
        self.pristine_cap -= from_pristine;
        self.dirty_cap -= from_dirty;
        if from_dirty > 0 {
            ledger.charge_zero_pages(params, from_dirty);
        }
        let id = FrameId(self.records.len() as u64);
        let mut rec = FrameRecord::new(id, size);
        rec.state = FrameState::Held;
        rec.owner = Some(caller);
        rec.contents = FrameContents::Zero;
        self.records.push(Some(rec));
        id
    }

    fn pop_any_free_record(&mut self) -> Option<FrameId> {
        self.free
            .zeroed_small
            .pop_front()
            .or_else(|| self.free.zeroed_large.pop_front())
            .or_else(|| self.free.dirty_small.pop_front())
            .or_else(|| self.free.dirty_large.pop_front())
    }

    /// At most one pressure handler per process; re-registration replaces.
    pub fn register_pressure_handler(&mut self, proc: ProcessId, handler: PressureHandler) {
        self.pressure_handlers.insert(proc, Some(handler));
    }

    /// One-shot page watches; every page must currently be mapped, which
    /// the machine validates before calling this.
    pub(crate) fn arm_watches(
        &mut self,
        proc: ProcessId,
        vpns: &[u64],
        handler: Box<dyn FnMut(u64, AccessKind) + Send>,
    ) {
        let shared: WatchHandler = Arc::new(Mutex::new(handler));
        for &vpn in vpns {
            self.watches.insert((proc, vpn), Arc::clone(&shared));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> (CostLedger, CostModelParams) {
        (CostLedger::default(), CostModelParams::default())
    }

    const P1: ProcessId = ProcessId(1);
    const P2: ProcessId = ProcessId(2);

    #[test]
    fn fresh_frames_are_zeroed_and_distinct() {
        let (mut led, params) = ctx();
        let mut k = Kernel::new(1024);
        let got = k
            .exchange_pages(P1, &[], &[SizeClass::Small; 4], &mut led, &params)
            .unwrap();
        assert_eq!(got.len(), 4);
        let mut uniq = std::collections::HashSet::new();
        for id in &got {
            assert!(uniq.insert(*id));
            assert!(k.frame_reads_zero(*id));
        }
        assert_eq!(led.kernel_entries, 1);
        assert_eq!(led.bytes_zeroed, 0);
        assert!(k.audit_conservation());
    }

    #[test]
    fn small_frames_exchange_for_a_large_one() {
        let (mut led, params) = ctx();
        let mut k = Kernel::new(512);
        let smalls = k
            .exchange_pages(P1, &[], &[SizeClass::Small; 512], &mut led, &params)
            .unwrap();
        let large = k
            .exchange_pages(P1, &smalls, &[SizeClass::Large], &mut led, &params)
            .unwrap();
        assert_eq!(large.len(), 1);
        assert_eq!(k.frame_size(large[0]), Some(SizeClass::Large));
        assert_eq!(k.held_small_equiv(), 512);
        assert!(k.audit_conservation());
    }

    #[test]
    fn exhaustion_is_atomic() {
        let (mut led, params) = ctx();
        let mut k = Kernel::new(1024);
        let before_entries = led.kernel_entries;
        let err = k
            .exchange_pages(P1, &[], &[SizeClass::Small; 1025], &mut led, &params)
            .unwrap_err();
        assert_eq!(err, KernelError::OutOfPhysicalMemory);
        assert_eq!(led.kernel_entries, before_entries + 1);
        assert_eq!(k.free_small_equiv(), 1024);
        assert_eq!(led.pte_writes + led.bytes_zeroed + led.faults, 0);
        assert!(k.audit_conservation());
    }

    #[test]
    fn releasing_anothers_frame_is_rejected() {
        let (mut led, params) = ctx();
        let mut k = Kernel::new(64);
        let f = k
            .exchange_pages(P1, &[], &[SizeClass::Small], &mut led, &params)
            .unwrap();
        let err = k
            .exchange_pages(P2, &f, &[], &mut led, &params)
            .unwrap_err();
        assert_eq!(err, KernelError::NotOwner(f[0]));
    }

    #[test]
    fn same_owner_reissue_retains_contents_cross_owner_reads_zero() {
        let (mut led, params) = ctx();
        let mut k = Kernel::new(8);
        let f = k
            .exchange_pages(P1, &[], &[SizeClass::Small], &mut led, &params)
            .unwrap()[0];
        k.record_mut(f).unwrap().contents.write(7, 0x5A, 4096);
        k.exchange_pages(P1, &[f], &[], &mut led, &params).unwrap();

        // Re-issued to the same process: contents intact, nothing zeroed.
        let back = k
            .exchange_pages(P1, &[], &[SizeClass::Small], &mut led, &params)
            .unwrap()[0];
        assert_eq!(back, f);
        assert_eq!(k.peek_frame_byte(f, 7), Some(0x5A));
        assert_eq!(led.bytes_zeroed, 0);

        // Released again and issued to a different process: zeroed, charged.
        k.exchange_pages(P1, &[f], &[], &mut led, &params).unwrap();
        let other = k
            .exchange_pages(P2, &[], &[SizeClass::Small], &mut led, &params)
            .unwrap()[0];
        assert_eq!(other, f);
        assert!(k.frame_reads_zero(f));
        assert_eq!(led.bytes_zeroed, 4096);
    }

    #[test]
    fn duplicate_release_is_an_error() {
        let (mut led, params) = ctx();
        let mut k = Kernel::new(8);
        let f = k
            .exchange_pages(P1, &[], &[SizeClass::Small], &mut led, &params)
            .unwrap()[0];
        let err = k
            .exchange_pages(P1, &[f, f], &[], &mut led, &params)
            .unwrap_err();
        assert_eq!(err, KernelError::DuplicateRelease(f));
        assert_eq!(k.frame_state(f), Some(FrameState::Held));
    }

    #[test]
    fn minting_large_from_released_dirty_smalls_charges_zeroing() {
        let (mut led, params) = ctx();
        let mut k = Kernel::new(512);
        let smalls = k
            .exchange_pages(P1, &[], &[SizeClass::Small; 512], &mut led, &params)
            .unwrap();
        k.record_mut(smalls[0]).unwrap().contents.write(0, 1, 4096);
        let zeroed_before = led.bytes_zeroed;
        let large = k
            .exchange_pages(P1, &smalls, &[SizeClass::Large], &mut led, &params)
            .unwrap()[0];
        // Pooled dirty capacity backs the mint, so the whole 2Mb is cleared.
        assert_eq!(led.bytes_zeroed - zeroed_before, 512 * 4096);
        assert!(k.frame_reads_zero(large));
        assert!(k.audit_conservation());
    }
}
