//! Deterministic user-space simulation of physical page-frame allocation.
//!
//! The crate models, with cycle-accounted costs instead of wall-clock time:
//!
//! - a simulated kernel owning the physical frame database, with a single
//!   page-exchange syscall, zero-on-transfer security, and memory-pressure /
//!   page-watch upcalls ([`kernel`]);
//! - per-process MMU state: directly written page tables, a two-level TLB
//!   with sheet-local refill costs, and address-space reservations ([`mmu`]);
//! - a user mode page allocator with a lookaside frame cache, eager mapping,
//!   and no-copy resize and swap ([`umpa`]);
//! - a byte-granularity heap that delegates big blocks to page operations at
//!   a 256Kb threshold ([`gp`]), plus a batch allocation API ([`batch`]);
//! - the classic fault-driven lazy allocation baseline ([`lazy`]).
//!
//! Everything lives in one [`Machine`] mutated by one caller at a time;
//! handlers re-enter the same timeline synchronously.

pub mod batch;
pub mod cost;
pub mod frame;
pub mod gp;
pub mod kernel;
pub mod lazy;
pub mod machine;
pub mod mmu;
pub mod umpa;

pub use batch::{AllocationRequest, AllocationResult, BatchError};
pub use cost::{CostLedger, CostModelParams};
pub use frame::{FrameId, FrameState, ProcessId, SizeClass, LARGE_PAGE_SIZE, PAGE_SIZE};
pub use gp::{GpConfig, GpError, PageProvider, GP_CHUNK_BYTES, GP_DIRECT_THRESHOLD};
pub use kernel::{Kernel, KernelError, Severity};
pub use machine::{Machine, MachineConfig, PhysLoc};
pub use mmu::{AccessKind, AddressSpace, MmuError, Vpn, DEFAULT_VSPACE_PAGES, SHEET_SPAN};
pub use umpa::{AllocFlags, UmpaConfig, UmpaError};
