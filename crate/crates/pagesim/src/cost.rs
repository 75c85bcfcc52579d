//! Cycle charges and the per-process cost ledger.
//!
//! Every simulated operation that would cost real time is reduced to a
//! counter bump plus a cycle charge taken from [`CostModelParams`]. The
//! ledger is pure accounting: `cycles` always equals the dot product of
//! the counters with their configured charges (see [`CostLedger::recompute_cycles`]).

use crate::frame::PAGE_SIZE;

/// Cycle charges for the simulated machine.
///
/// Defaults model a Windows-class x64 system: 2800 cycles per page fault,
/// 15/230 cycle TLB refills depending on page-table sheet locality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModelParams {
    /// Charged per page fault taken through an installed fault handler.
    pub fault_cost_cycles: f64,
    /// TLB refill when the walked page shares the sheet of the previous walk.
    pub tlb_near_refill: f64,
    /// TLB refill when the walk crosses into a different sheet.
    pub tlb_far_refill: f64,
    /// Charged per page-table entry written by map/unmap/remap/swap.
    pub pte_write_cost: f64,
    /// Charged once per kernel syscall (`sys_exchange_pages`).
    pub kernel_entry_cost: f64,
    /// Charged per 4Kb page cleared; large frames clear 512 pages.
    pub zero_cost_per_page: f64,
    /// Charged per byte moved by the simulated copy engine.
    pub copy_cost_per_byte: f64,
    /// Charged per single-byte load/store issued through `access_byte`.
    pub byte_access_cost: f64,
    /// Charged per `tlb_flush` call, full or ranged.
    pub tlb_flush_cost: f64,
    /// When set, faults inside reservations larger than `.0` pages charge
    /// `.1` cycles instead of `fault_cost_cycles`. Off by default.
    pub fault_surcharge_above_pages: Option<(u64, f64)>,
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self::windows()
    }
}

impl CostModelParams {
    /// Default profile: Windows-class fault cost, surcharge off.
    pub fn windows() -> Self {
        CostModelParams {
            fault_cost_cycles: 2800.0,
            tlb_near_refill: 15.0,
            tlb_far_refill: 230.0,
            pte_write_cost: 1.0,
            kernel_entry_cost: 1000.0,
            zero_cost_per_page: 1000.0,
            copy_cost_per_byte: 0.25,
            byte_access_cost: 1.0,
            tlb_flush_cost: 100.0,
            fault_surcharge_above_pages: None,
        }
    }

    /// Linux-class profile: 3100-cycle faults jumping to 6500 for blocks
    /// above 512 pages.
    pub fn linux() -> Self {
        CostModelParams {
            fault_cost_cycles: 3100.0,
            fault_surcharge_above_pages: Some((512, 6500.0)),
            ..Self::windows()
        }
    }

    /// Fault charge for a page inside a reservation spanning `reserved_pages`.
    pub fn fault_cost_for(&self, reserved_pages: u64) -> f64 {
        match self.fault_surcharge_above_pages {
            Some((threshold, surcharged)) if reserved_pages > threshold => surcharged,
            _ => self.fault_cost_cycles,
        }
    }
}

/// Event counters plus the modeled cycle total they imply.
///
/// All counters are monotone within one experiment; deltas between two
/// snapshots give the cost of an operation sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostLedger {
    pub cycles: f64,
    pub faults: u64,
    pub tlb_near_refills: u64,
    pub tlb_far_refills: u64,
    pub pte_writes: u64,
    pub bytes_zeroed: u64,
    pub bytes_copied: u64,
    pub kernel_entries: u64,
    pub tlb_flushes: u64,
    pub byte_accesses: u64,
}

impl CostLedger {
    pub fn charge_fault(&mut self, params: &CostModelParams, reserved_pages: u64) {
        self.faults += 1;
        self.cycles += params.fault_cost_for(reserved_pages);
    }

    pub fn charge_near_refill(&mut self, params: &CostModelParams) {
        self.tlb_near_refills += 1;
        self.cycles += params.tlb_near_refill;
    }

    pub fn charge_far_refill(&mut self, params: &CostModelParams) {
        self.tlb_far_refills += 1;
        self.cycles += params.tlb_far_refill;
    }

    pub fn charge_pte_writes(&mut self, params: &CostModelParams, count: u64) {
        self.pte_writes += count;
        self.cycles += params.pte_write_cost * count as f64;
    }

    pub fn charge_kernel_entry(&mut self, params: &CostModelParams) {
        self.kernel_entries += 1;
        self.cycles += params.kernel_entry_cost;
    }

    pub fn charge_zero_pages(&mut self, params: &CostModelParams, pages: u64) {
        self.bytes_zeroed += pages * PAGE_SIZE;
        self.cycles += params.zero_cost_per_page * pages as f64;
    }

    pub fn charge_copy(&mut self, params: &CostModelParams, bytes: u64) {
        self.bytes_copied += bytes;
        self.cycles += params.copy_cost_per_byte * bytes as f64;
    }

    pub fn charge_byte_access(&mut self, params: &CostModelParams) {
        self.byte_accesses += 1;
        self.cycles += params.byte_access_cost;
    }

    pub fn charge_tlb_flush(&mut self, params: &CostModelParams) {
        self.tlb_flushes += 1;
        self.cycles += params.tlb_flush_cost;
    }

    /// Cycle total recomputed from the counters alone.
    ///
    /// Exact equality with `cycles` holds whenever the surcharge is off
    /// (all charges are then per-counter constants); with the surcharge on,
    /// per-fault charges vary and only the remaining terms are recoverable.
    pub fn recompute_cycles(&self, params: &CostModelParams) -> f64 {
        self.faults as f64 * params.fault_cost_cycles
            + self.tlb_near_refills as f64 * params.tlb_near_refill
            + self.tlb_far_refills as f64 * params.tlb_far_refill
            + self.pte_writes as f64 * params.pte_write_cost
            + (self.bytes_zeroed / PAGE_SIZE) as f64 * params.zero_cost_per_page
            + self.bytes_copied as f64 * params.copy_cost_per_byte
            + self.kernel_entries as f64 * params.kernel_entry_cost
            + self.tlb_flushes as f64 * params.tlb_flush_cost
            + self.byte_accesses as f64 * params.byte_access_cost
    }

    /// Counter-wise difference `self - earlier`; panics on counter regression.
    pub fn delta_since(&self, earlier: &CostLedger) -> CostLedger {
        CostLedger {
            cycles: self.cycles - earlier.cycles,
            faults: self.faults - earlier.faults,
            tlb_near_refills: self.tlb_near_refills - earlier.tlb_near_refills,
            tlb_far_refills: self.tlb_far_refills - earlier.tlb_far_refills,
            pte_writes: self.pte_writes - earlier.pte_writes,
            bytes_zeroed: self.bytes_zeroed - earlier.bytes_zeroed,
            bytes_copied: self.bytes_copied - earlier.bytes_copied,
            kernel_entries: self.kernel_entries - earlier.kernel_entries,
            tlb_flushes: self.tlb_flushes - earlier.tlb_flushes,
            byte_accesses: self.byte_accesses - earlier.byte_accesses,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_profile_matches_windows() {
        let p = CostModelParams::default();
        assert_eq!(p.fault_cost_cycles, 2800.0);
        assert_eq!(p.tlb_near_refill, 15.0);
        assert_eq!(p.tlb_far_refill, 230.0);
        assert!(p.fault_surcharge_above_pages.is_none());
    }

    #[test]
    fn linux_profile_surcharges_large_blocks() {
        let p = CostModelParams::linux();
        assert_eq!(p.fault_cost_for(512), 3100.0);
        assert_eq!(p.fault_cost_for(513), 6500.0);
    }

    #[test]
    fn ledger_identity_holds_for_mixed_charges() {
        let p = CostModelParams::default();
        let mut l = CostLedger::default();
        l.charge_fault(&p, 1);
        l.charge_near_refill(&p);
        l.charge_far_refill(&p);
        l.charge_pte_writes(&p, 7);
        l.charge_kernel_entry(&p);
        l.charge_zero_pages(&p, 3);
        l.charge_copy(&p, 12345);
        l.charge_byte_access(&p);
        l.charge_tlb_flush(&p);
        assert_eq!(l.cycles, l.recompute_cycles(&p));
    }
}
