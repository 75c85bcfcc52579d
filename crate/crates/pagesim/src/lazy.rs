//! Fault-driven baseline: demand paging of reserved address space.
//!
//! The installed handler resolves a fault inside any reserved range by
//! taking one small frame from the kernel and mapping it at the faulting
//! page, which is how conventional lazily-committed allocation behaves.
//! The fault charge itself covers the kernel transition, so no separate
//! kernel-entry cost is recorded on this path.

use crate::frame::{ProcessId, PAGE_SIZE};
use crate::machine::Machine;

/// Installs the demand-paging fault handler for `pid`. Faults outside
/// reserved ranges are declined and surface as segmentation faults.
pub fn install_demand_paging(m: &mut Machine, pid: ProcessId) {
    m.set_fault_handler(
        pid,
        Box::new(|m, pid, vaddr, _kind| {
            let vpn = vaddr / PAGE_SIZE;
            if m.space(pid).reservation_pages_at(vpn).is_none() {
                return false;
            }
            let params = m.params;
            let frame = {
                let proc = m.procs.get_mut(&pid).expect("unknown process");
                m.kernel.fault_resolve(pid, &mut proc.space.ledger, &params)
            };
            match frame {
                Ok(f) => m.map_pages(pid, vpn, &[f], true).is_ok(),
                Err(_) => false,
            }
        }),
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::CostModelParams;
    use crate::machine::{Machine, MachineConfig};
    use crate::mmu::AccessKind;

    #[test]
    fn lazy_traversal_faults_once_per_page_then_never() {
        let mut m = Machine::new(MachineConfig {
            total_small_frames: 4096,
            vspace_pages: 1 << 20,
            params: CostModelParams::default(),
        });
        let pid = m.create_process();
        install_demand_paging(&mut m, pid);
        let base = m.reserve(pid, 256).unwrap();
        let before = m.ledger(pid);
        for p in 0..256u64 {
            m.write_byte(pid, (base + p) * PAGE_SIZE, 1).unwrap();
        }
        let first = m.ledger(pid).delta_since(&before);
        assert_eq!(first.faults, 256);
        assert_eq!(first.pte_writes, 256);
        assert_eq!(first.kernel_entries, 0);

        let mid = m.ledger(pid);
        for p in 0..256u64 {
            m.write_byte(pid, (base + p) * PAGE_SIZE, 2).unwrap();
        }
        assert_eq!(m.ledger(pid).delta_since(&mid).faults, 0);
    }

    #[test]
    fn faults_outside_reservations_stay_segfaults() {
        let mut m = Machine::new(MachineConfig::default());
        let pid = m.create_process();
        install_demand_paging(&mut m, pid);
        assert!(m
            .translate(pid, 999 * PAGE_SIZE, AccessKind::Write)
            .is_err());
    }

    #[test]
    fn fault_retry_is_a_near_refill_after_the_handler_maps() {
        let mut m = Machine::new(MachineConfig::default());
        let pid = m.create_process();
        install_demand_paging(&mut m, pid);
        let base = m.reserve(pid, 4).unwrap();
        let before = m.ledger(pid);
        for p in 0..4u64 {
            m.write_byte(pid, (base + p) * PAGE_SIZE, 1).unwrap();
        }
        let d = m.ledger(pid).delta_since(&before);
        // Mapping the faulted page positions the walker on its sheet, so
        // every retry walk is a near refill.
        assert_eq!(d.tlb_near_refills, 4);
        assert_eq!(d.tlb_far_refills, 0);
        let per_page = d.cycles / 4.0;
        let p = m.params();
        assert_eq!(
            per_page,
            p.fault_cost_cycles + p.pte_write_cost + p.tlb_near_refill + p.byte_access_cost
        );
    }
}
