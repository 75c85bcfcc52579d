//! The whole simulated machine: kernel plus every process's address space
//! and allocator state, mutated by one caller at a time.
//!
//! Upcalls (fault handlers, pressure handlers, page watches) are synchronous
//! re-entrant calls on the same timeline: the machine takes the handler out
//! of its slot, hands itself to it mutably, and restores the handler
//! afterwards unless it was replaced during the call.

use std::collections::BTreeMap;

use crate::cost::{CostLedger, CostModelParams};
use crate::frame::{FrameId, ProcessId, SizeClass, PAGE_SIZE};
use crate::gp::Heap;
use crate::kernel::{Kernel, KernelError, PressureHandler, Severity};
use crate::mmu::{
    sheet_of, AccessKind, AddressSpace, FaultHandler, MmuError, TlbLookup, Vpn,
    DEFAULT_VSPACE_PAGES,
};
use crate::umpa::UmpaState;

/// Sizing and cost parameters for a fresh machine.
#[derive(Debug, Clone, Copy)]
pub struct MachineConfig {
    /// Physical capacity in small-page equivalents.
    pub total_small_frames: u64,
    /// Virtual address-space size per process, in pages.
    pub vspace_pages: u64,
    pub params: CostModelParams,
}

impl Default for MachineConfig {
    fn default() -> Self {
        MachineConfig {
            total_small_frames: 1 << 18,
            vspace_pages: DEFAULT_VSPACE_PAGES,
            params: CostModelParams::default(),
        }
    }
}

/// Resolved physical location of a virtual address.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhysLoc {
    pub frame: FrameId,
    pub offset: u64,
}

pub(crate) struct Process {
    pub(crate) space: AddressSpace,
    pub(crate) umpa: Option<UmpaState>,
    pub(crate) heap: Option<Heap>,
}

pub struct Machine {
    pub(crate) kernel: Kernel,
    pub(crate) procs: BTreeMap<ProcessId, Process>,
    pub(crate) params: CostModelParams,
    vspace_pages: u64,
    next_pid: u32,
}

impl Machine {
    pub fn new(config: MachineConfig) -> Self {
        Machine {
            kernel: Kernel::new(config.total_small_frames),
            procs: BTreeMap::new(),
            params: config.params,
            vspace_pages: config.vspace_pages,
            next_pid: 1,
        }
    }

    pub fn params(&self) -> &CostModelParams {
        &self.params
    }

    pub fn kernel(&self) -> &Kernel {
        &self.kernel
    }

    pub fn create_process(&mut self) -> ProcessId {
        let pid = ProcessId(self.next_pid);
        self.next_pid += 1;
        self.procs.insert(
            pid,
            Process {
                space: AddressSpace::new(pid, self.vspace_pages),
                umpa: None,
                heap: None,
            },
        );
        pid
    }

    pub fn space(&self, pid: ProcessId) -> &AddressSpace {
        &self.procs.get(&pid).expect("unknown process").space
    }

    pub(crate) fn space_mut(&mut self, pid: ProcessId) -> &mut AddressSpace {
        &mut self.procs.get_mut(&pid).expect("unknown process").space
    }

    /// Snapshot of the process's cost ledger.
    pub fn ledger(&self, pid: ProcessId) -> CostLedger {
        self.space(pid).ledger
    }

    // ------------------------------------------------------------------
    // Kernel surface
    // ------------------------------------------------------------------

    /// The page-exchange syscall, charged to `caller`'s ledger.
    pub fn sys_exchange_pages(
        &mut self,
        caller: ProcessId,
        release: &[FrameId],
        request: &[SizeClass],
    ) -> Result<Vec<FrameId>, KernelError> {
        let proc = self.procs.get_mut(&caller).expect("unknown process");
        self.kernel.exchange_pages(
            caller,
            release,
            request,
            &mut proc.space.ledger,
            &self.params,
        )
    }

    pub fn register_pressure_handler(&mut self, proc: ProcessId, handler: PressureHandler) {
        self.kernel.register_pressure_handler(proc, handler);
    }

    /// Invokes every registered pressure handler synchronously and reclaims
    /// the frames they give back. Returns reclaimed small-page equivalents.
    pub fn sys_trigger_pressure(&mut self, severity: Severity) -> u64 {
        let pids: Vec<ProcessId> = self.kernel.pressure_handlers.keys().copied().collect();
        let mut reclaimed = 0;
        for pid in pids {
            let taken = self
                .kernel
                .pressure_handlers
                .get_mut(&pid)
                .and_then(Option::take);
            let Some(mut handler) = taken else { continue };
            let frames = handler(self, pid, severity);
            reclaimed += self.kernel.reclaim_validated(pid, &frames);
            if let Some(slot) = self.kernel.pressure_handlers.get_mut(&pid) {
                if slot.is_none() {
                    *slot = Some(handler);
                }
            }
        }
        reclaimed
    }

    /// Arms a one-shot watch on each of `vpns`; all pages must be mapped.
    pub fn register_watch(
        &mut self,
        proc: ProcessId,
        vpns: &[Vpn],
        handler: Box<dyn FnMut(u64, AccessKind) + Send>,
    ) -> Result<(), KernelError> {
        for &vpn in vpns {
            if !self.space(proc).is_present(vpn) {
                return Err(KernelError::UnmappedPage(vpn));
            }
        }
        self.kernel.arm_watches(proc, vpns, handler);
        Ok(())
    }

    // ------------------------------------------------------------------
    // MMU surface
    // ------------------------------------------------------------------

    pub fn map_pages(
        &mut self,
        pid: ProcessId,
        start: Vpn,
        frames: &[FrameId],
        writable: bool,
    ) -> Result<(), MmuError> {
        let params = self.params;
        let proc = self.procs.get_mut(&pid).expect("unknown process");
        proc.space
            .map_pages(&mut self.kernel, &params, start, frames, writable)
    }

    pub fn unmap_pages(
        &mut self,
        pid: ProcessId,
        start: Vpn,
        count: u64,
    ) -> Result<Vec<FrameId>, MmuError> {
        let params = self.params;
        let proc = self.procs.get_mut(&pid).expect("unknown process");
        proc.space
            .unmap_pages(&mut self.kernel, &params, start, count)
    }

    pub fn remap_pages(
        &mut self,
        pid: ProcessId,
        src: Vpn,
        dst: Vpn,
        count: u64,
    ) -> Result<(), MmuError> {
        let params = self.params;
        self.space_mut(pid).remap_pages(&params, src, dst, count)
    }

    pub fn tlb_flush(&mut self, pid: ProcessId, range: Option<(Vpn, u64)>) {
        let params = self.params;
        self.space_mut(pid).tlb_flush(&params, range);
    }

    pub fn reserve(&mut self, pid: ProcessId, count_pages: u64) -> Result<Vpn, MmuError> {
        self.space_mut(pid).reserve(count_pages)
    }

    pub fn release_reservation(
        &mut self,
        pid: ProcessId,
        start: Vpn,
        count: u64,
    ) -> Result<(), MmuError> {
        self.space_mut(pid).release_reservation(start, count)
    }

    pub fn set_fault_handler(&mut self, pid: ProcessId, handler: FaultHandler) {
        self.space_mut(pid).fault_handler = Some(handler);
    }

    pub fn clear_fault_handler(&mut self, pid: ProcessId) {
        self.space_mut(pid).fault_handler = None;
    }

    /// Translates `vaddr`, charging TLB refills and faults as they occur.
    /// A not-present page invokes the fault handler once and retries once.
    pub fn translate(
        &mut self,
        pid: ProcessId,
        vaddr: u64,
        access: AccessKind,
    ) -> Result<PhysLoc, MmuError> {
        let params = self.params;
        let vpn = vaddr / PAGE_SIZE;
        let mut retried = false;
        loop {
            let proc = self.procs.get_mut(&pid).expect("unknown process");
            let space = &mut proc.space;
            let resolved = match space.tlb.lookup(vpn) {
                TlbLookup::Hit { key, frame, large } => {
                    match space.table.get(key) {
                        Some(e) if e.frame == frame && e.large == large => Some(key),
                        // The table moved underneath a live translation.
                        _ => return Err(MmuError::ConsistencyFault(vaddr)),
                    }
                }
                TlbLookup::Miss => match space.entry_covering(vpn).map(|(b, e)| (b, *e)) {
                    Some((base, entry)) => {
                        let sheet = sheet_of(vpn);
                        if space.tlb.last_sheet == Some(sheet) {
                            space.ledger.charge_near_refill(&params);
                        } else {
                            space.ledger.charge_far_refill(&params);
                        }
                        space.tlb.last_sheet = Some(sheet);
                        space.tlb.install(base, entry.frame, entry.large);
                        Some(base)
                    }
                    None => None,
                },
            };

            match resolved {
                Some(base) => {
                    let entry = space.table.get_mut(base).expect("resolved above");
                    if access == AccessKind::Write && !entry.writable {
                        return Err(MmuError::SegmentationFault(vaddr));
                    }
                    entry.accessed = true;
                    if access == AccessKind::Write {
                        entry.dirty = true;
                    }
                    let frame = entry.frame;
                    let offset = vaddr - base * PAGE_SIZE;
                    if let Some(watch) = self.kernel.watches.remove(&(pid, vpn)) {
                        (watch.lock().expect("watch handler poisoned"))(vaddr, access);
                    }
                    return Ok(PhysLoc { frame, offset });
                }
                None => {
                    if retried || space.fault_handler.is_none() {
                        return Err(MmuError::SegmentationFault(vaddr));
                    }
                    let reserved = space.reservation_pages_at(vpn).unwrap_or(0);
                    space.ledger.charge_fault(&params, reserved);
                    let mut handler = space.fault_handler.take().expect("checked above");
                    let handled = handler(self, pid, vaddr, access);
                    let space = &mut self.procs.get_mut(&pid).expect("unknown process").space;
                    if space.fault_handler.is_none() {
                        space.fault_handler = Some(handler);
                    }
                    if !handled {
                        return Err(MmuError::SegmentationFault(vaddr));
                    }
                    retried = true;
                }
            }
        }
    }

    /// Translates and then reads or writes one byte of the backing frame.
    pub fn access_byte(
        &mut self,
        pid: ProcessId,
        vaddr: u64,
        access: AccessKind,
        value: Option<u8>,
    ) -> Result<u8, MmuError> {
        let loc = self.translate(pid, vaddr, access)?;
        let params = self.params;
        self.space_mut(pid).ledger.charge_byte_access(&params);
        let rec = self
            .kernel
            .record_mut(loc.frame)
            .expect("mapped frame exists");
        match access {
            AccessKind::Read => Ok(rec.contents.read(loc.offset as u32)),
            AccessKind::Write => {
                let v = value.unwrap_or(0);
                let bytes = rec.size.bytes();
                rec.contents.write(loc.offset as u32, v, bytes);
                Ok(v)
            }
        }
    }

    pub fn read_byte(&mut self, pid: ProcessId, vaddr: u64) -> Result<u8, MmuError> {
        self.access_byte(pid, vaddr, AccessKind::Read, None)
    }

    pub fn write_byte(&mut self, pid: ProcessId, vaddr: u64, value: u8) -> Result<(), MmuError> {
        self.access_byte(pid, vaddr, AccessKind::Write, Some(value))?;
        Ok(())
    }

    /// Streaming copy between two mapped virtual ranges of one process.
    /// Bytes move through the simulated copy engine: the ledger records
    /// `len` copied bytes; no TLB traffic is modeled for the stream.
    pub fn copy_bytes(
        &mut self,
        pid: ProcessId,
        src: u64,
        dst: u64,
        len: u64,
    ) -> Result<(), MmuError> {
        if len == 0 {
            return Ok(());
        }
        // Resolve and validate both ranges page by page before moving bytes.
        let mut moves = Vec::new();
        let mut off = 0;
        while off < len {
            let s = src + off;
            let d = dst + off;
            let step = (PAGE_SIZE - s % PAGE_SIZE)
                .min(PAGE_SIZE - d % PAGE_SIZE)
                .min(len - off);
            let from = self.resolve_for_copy(pid, s, AccessKind::Read)?;
            let to = self.resolve_for_copy(pid, d, AccessKind::Write)?;
            moves.push((from, to, step));
            off += step;
        }
        for (from, to, step) in moves {
            for i in 0..step {
                let b = self
                    .kernel
                    .record(from.frame)
                    .expect("resolved frame")
                    .contents
                    .read((from.offset + i) as u32);
                let bytes = self.kernel.frame_size(to.frame).unwrap().bytes();
                self.kernel
                    .record_mut(to.frame)
                    .expect("resolved frame")
                    .contents
                    .write((to.offset + i) as u32, b, bytes);
            }
        }
        let params = self.params;
        self.space_mut(pid).ledger.charge_copy(&params, len);
        Ok(())
    }

    /// Page-table resolution for the copy engine; sets accessed/dirty but
    /// bypasses the TLB.
    fn resolve_for_copy(
        &mut self,
        pid: ProcessId,
        vaddr: u64,
        access: AccessKind,
    ) -> Result<PhysLoc, MmuError> {
        let vpn = vaddr / PAGE_SIZE;
        let space = self.space_mut(pid);
        let (base, entry) = match space.entry_covering_mut(vpn) {
            Some(pair) => pair,
            None => return Err(MmuError::SegmentationFault(vaddr)),
        };
        if access == AccessKind::Write && !entry.writable {
            return Err(MmuError::SegmentationFault(vaddr));
        }
        entry.accessed = true;
        if access == AccessKind::Write {
            entry.dirty = true;
        }
        Ok(PhysLoc {
            frame: entry.frame,
            offset: vaddr - base * PAGE_SIZE,
        })
    }

    /// Clears a held frame's contents and charges the zeroing to `pid`.
    pub(crate) fn zero_frame_charged(&mut self, pid: ProcessId, id: FrameId) {
        let params = self.params;
        let pages = self
            .kernel
            .frame_size(id)
            .expect("frame exists")
            .small_equiv();
        self.kernel
            .record_mut(id)
            .expect("frame exists")
            .contents
            .clear();
        self.space_mut(pid).ledger.charge_zero_pages(&params, pages);
    }

    // ------------------------------------------------------------------
    // Audits
    // ------------------------------------------------------------------

    /// Full-scan structural audit: frame exclusivity across every address
    /// space, kernel conservation, TLB inclusion, and allocator coherence.
    pub fn audit(&self) -> Result<(), String> {
        if !self.kernel.audit_conservation() {
            return Err("kernel conservation violated".into());
        }
        let mut seen = std::collections::HashMap::new();
        for (pid, proc) in &self.procs {
            if !proc.space.tlb.inclusion_holds() {
                return Err(format!("TLB inclusion violated for {pid:?}"));
            }
            for (vpn, entry) in proc.space.present_entries() {
                if let Some(prev) = seen.insert(entry.frame, (*pid, vpn)) {
                    return Err(format!(
                        "frame {} mapped twice: {:?} and ({pid:?}, {vpn})",
                        entry.frame, prev
                    ));
                }
                if self.kernel.frame_owner(entry.frame) != Some(*pid) {
                    return Err(format!(
                        "frame {} mapped but not held by {pid:?}",
                        entry.frame
                    ));
                }
                if !self.kernel.frame_is_mapped(entry.frame) {
                    return Err(format!("frame {} mapped but flag clear", entry.frame));
                }
                if entry.dirty && !entry.accessed {
                    return Err(format!("dirty but not accessed at vpn {vpn}"));
                }
            }
            if let Some(umpa) = &proc.umpa {
                for id in umpa.cached_frames() {
                    if self.kernel.frame_owner(id) != Some(*pid) {
                        return Err(format!("cached frame {id} not held by {pid:?}"));
                    }
                    if self.kernel.frame_is_mapped(id) {
                        return Err(format!("cached frame {id} still mapped"));
                    }
                }
            }
        }
        Ok(())
    }
}
