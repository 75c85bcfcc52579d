//! Allocator drivers for the benchmark loops: one uniform alloc/free
//! surface over the lazy kernel baseline, the eager kernel path, the user
//! mode page allocator, and the byte-granularity heap over either.

use pagesim::{
    AllocFlags, FrameId, GpConfig, Machine, PageProvider, ProcessId, SizeClass, UmpaConfig,
    PAGE_SIZE,
};

use crate::experiments::BenchError;

/// Which allocation stack a run drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocatorKind {
    /// Reserve plus demand paging: each first touch faults a frame in.
    KernelPaged,
    /// One kernel exchange per allocation, then eager mapping.
    KernelNonPaged,
    /// The user mode page allocator over its lookaside cache.
    Umpa,
    /// Byte-granularity heap whose pages come from the umpa.
    GpUmpa,
    /// The same heap over the lazy kernel seam.
    GpKernel,
}

impl AllocatorKind {
    pub fn name(self) -> &'static str {
        match self {
            AllocatorKind::KernelPaged => "kernel-paged",
            AllocatorKind::KernelNonPaged => "kernel-nonpaged",
            AllocatorKind::Umpa => "umpa",
            AllocatorKind::GpUmpa => "gp-umpa",
            AllocatorKind::GpKernel => "gp-kernel",
        }
    }

    pub fn parse(name: &str) -> Result<Self, BenchError> {
        match name {
            "kernel-paged" => Ok(AllocatorKind::KernelPaged),
            "kernel-nonpaged" => Ok(AllocatorKind::KernelNonPaged),
            "umpa" => Ok(AllocatorKind::Umpa),
            "gp-umpa" => Ok(AllocatorKind::GpUmpa),
            "gp-kernel" => Ok(AllocatorKind::GpKernel),
            other => Err(BenchError::Config(format!(
                "unknown allocator '{other}' (expected kernel-paged, kernel-nonpaged, umpa, gp-umpa, gp-kernel)"
            ))),
        }
    }

    fn uses_umpa(self) -> bool {
        matches!(self, AllocatorKind::Umpa | AllocatorKind::GpUmpa)
    }
}

/// A live benchmark block as the driver tracks it.
#[derive(Debug, Clone, Copy)]
pub struct BenchBlock {
    pub base: u64,
    pub bytes: u64,
}

pub struct Driver {
    pub kind: AllocatorKind,
    pub pid: ProcessId,
}

impl Driver {
    /// Prepares a process for `kind` on the given machine, preloading the
    /// lookaside cache with `preload_frames` when the stack uses one.
    pub fn install(
        m: &mut Machine,
        kind: AllocatorKind,
        preload_frames: u64,
    ) -> Result<Driver, BenchError> {
        let pid = m.create_process();
        match kind {
            AllocatorKind::KernelPaged => pagesim::lazy::install_demand_paging(m, pid),
            AllocatorKind::KernelNonPaged => {}
            AllocatorKind::Umpa => {
                m.attach_umpa(pid, UmpaConfig::with_cap(u64::MAX / 2));
            }
            AllocatorKind::GpUmpa => {
                m.attach_umpa(pid, UmpaConfig::with_cap(u64::MAX / 2));
                m.attach_gp(pid, GpConfig::default());
            }
            AllocatorKind::GpKernel => {
                m.attach_gp(
                    pid,
                    GpConfig {
                        provider: PageProvider::KernelLazy,
                        ..GpConfig::default()
                    },
                );
            }
        }
        if kind.uses_umpa() && preload_frames > 0 {
            m.umpa_preload(pid, preload_frames)
                .map_err(|e| BenchError::Config(format!("cache preload failed: {e}")))?;
        }
        Ok(Driver { kind, pid })
    }

    pub fn alloc(&self, m: &mut Machine, bytes: u64) -> Result<BenchBlock, BenchError> {
        let pid = self.pid;
        let base = match self.kind {
            AllocatorKind::KernelPaged => {
                let pages = bytes.div_ceil(PAGE_SIZE);
                let vpn = m
                    .reserve(pid, pages)
                    .map_err(|e| BenchError::Config(e.to_string()))?;
                vpn * PAGE_SIZE
            }
            AllocatorKind::KernelNonPaged => {
                let pages = bytes.div_ceil(PAGE_SIZE);
                let vpn = m
                    .reserve(pid, pages)
                    .map_err(|e| BenchError::Config(e.to_string()))?;
                let frames = m
                    .sys_exchange_pages(pid, &[], &vec![SizeClass::Small; pages as usize])
                    .map_err(|e| BenchError::Config(e.to_string()))?;
                m.map_pages(pid, vpn, &frames, true)
                    .map_err(|e| BenchError::Config(e.to_string()))?;
                vpn * PAGE_SIZE
            }
            AllocatorKind::Umpa => m
                .userpage_malloc(pid, bytes, AllocFlags::default())
                .map_err(|e| BenchError::Config(e.to_string()))?,
            AllocatorKind::GpUmpa | AllocatorKind::GpKernel => m
                .gp_malloc(pid, bytes)
                .map_err(|e| BenchError::Config(e.to_string()))?,
        };
        Ok(BenchBlock { base, bytes })
    }

    pub fn free(&self, m: &mut Machine, block: BenchBlock) -> Result<(), BenchError> {
        let pid = self.pid;
        match self.kind {
            AllocatorKind::KernelPaged | AllocatorKind::KernelNonPaged => {
                let vpn = block.base / PAGE_SIZE;
                let pages = block.bytes.div_ceil(PAGE_SIZE);
                let mut freed: Vec<FrameId> = Vec::new();
                let mut p = vpn;
                while p < vpn + pages {
                    if m.space(pid).is_present(p) {
                        let mut run = 1;
                        while p + run < vpn + pages && m.space(pid).is_present(p + run) {
                            run += 1;
                        }
                        freed.extend(
                            m.unmap_pages(pid, p, run)
                                .map_err(|e| BenchError::Config(e.to_string()))?,
                        );
                        p += run;
                    } else {
                        p += 1;
                    }
                }
                m.tlb_flush(pid, Some((vpn, pages)));
                if !freed.is_empty() {
                    m.sys_exchange_pages(pid, &freed, &[])
                        .map_err(|e| BenchError::Config(e.to_string()))?;
                }
                m.release_reservation(pid, vpn, pages)
                    .map_err(|e| BenchError::Config(e.to_string()))?;
            }
            AllocatorKind::Umpa => {
                m.userpage_free(pid, block.base, block.bytes)
                    .map_err(|e| BenchError::Config(e.to_string()))?;
            }
            AllocatorKind::GpUmpa | AllocatorKind::GpKernel => {
                m.gp_free(pid, block.base)
                    .map_err(|e| BenchError::Config(e.to_string()))?;
            }
        }
        Ok(())
    }
}
