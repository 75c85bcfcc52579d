//! The benchmark experiments, all on modeled cycles: Monte-Carlo allocator
//! scaling with a ring of live blocks, per-page fault-cost tables, resize
//! scaling against the copying baseline, and the Amdahl utility.

use std::collections::VecDeque;

use thiserror::Error;

use pagesim::{AllocFlags, CostModelParams, Machine, MachineConfig, PAGE_SIZE};

use crate::adapters::{AllocatorKind, BenchBlock, Driver};
use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Domain(String),
    #[error("{0}")]
    Io(String),
}

impl From<std::io::Error> for BenchError {
    fn from(e: std::io::Error) -> Self {
        BenchError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    pub seed: u64,
    pub iterations: u64,
    pub ring_size: usize,
    pub min_size: u64,
    pub max_size: u64,
    pub allocator: AllocatorKind,
    pub preload_cache: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 42,
            iterations: 20_000,
            ring_size: 512,
            min_size: 4096,
            max_size: 8 * 1024 * 1024,
            allocator: AllocatorKind::Umpa,
            preload_cache: false,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(BenchError::Config(format!(
                "size range {}..{} is invalid",
                self.min_size, self.max_size
            )));
        }
        if self.ring_size == 0 {
            return Err(BenchError::Config("ring size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-bin aggregate of the Monte-Carlo run. The bin of a block is
/// floor(log2(requested bytes)).
#[derive(Debug, Clone)]
pub struct BinStats {
    pub allocator: &'static str,
    pub bin_log2: u32,
    pub samples: u64,
    pub mean_alloc_cycles: f64,
    pub mean_free_cycles: f64,
    pub mean_traverse_cycles: f64,
    /// Allocation-plus-first-touch cost with the modeled cost of a
    /// faultless traversal removed, floored at zero.
    pub mean_alloc_cycles_notraverse: f64,
    pub mean_pages: f64,
}

#[derive(Default, Clone)]
struct BinAcc {
    samples: u64,
    alloc_cycles: f64,
    traverse_cycles: f64,
    free_cycles: f64,
    free_samples: u64,
    pages: u64,
}

/// Rounds a drawn byte size to the whole-page request the benchmark
/// issues, never below one page.
fn request_bytes(drawn: u64) -> u64 {
    let pages = (drawn + PAGE_SIZE / 2) / PAGE_SIZE;
    pages.max(1) * PAGE_SIZE
}

fn machine_for(config: &BenchConfig, params: &CostModelParams) -> (Machine, u64) {
    let worst_live_pages = config.ring_size as u64 * config.max_size.div_ceil(PAGE_SIZE);
    // Heap chunks are never returned, so give the gp variants headroom.
    let slack = 1 << 16;
    let preload = worst_live_pages + slack / 2;
    let total = preload + slack;
    let m = Machine::new(MachineConfig {
        total_small_frames: total,
        vspace_pages: 1 << 26,
        params: *params,
    });
    (m, preload)
}

/// The ledger delta of one loop iteration with every allocator and access
/// call elided: the null-loop adjustment. The simulation charges nothing
/// for loop bookkeeping, so this measures exactly zero; it is kept as a
/// measured quantity rather than an assumption.
fn null_loop_per_iteration(config: &BenchConfig, params: &CostModelParams) -> f64 {
    let mut m = Machine::new(MachineConfig {
        total_small_frames: 16,
        vspace_pages: 1 << 16,
        params: *params,
    });
    let pid = m.create_process();
    let mut rng = SplitMix64::new(config.seed);
    let mut ring: VecDeque<(u64, u32)> = VecDeque::new();
    let before = m.ledger(pid);
    let iterations = config.iterations.clamp(1, 1024);
    for _ in 0..iterations {
        let drawn = rng.uniform_inclusive(config.min_size, config.max_size);
        let _request = request_bytes(drawn);
        ring.push_back((drawn, drawn.ilog2()));
        if ring.len() > config.ring_size {
            ring.pop_front();
        }
    }
    let delta = m.ledger(pid).delta_since(&before);
    delta.cycles / iterations as f64
}

/// Monte-Carlo scaling run: random sizes in `[min, max]`, one byte written
/// into each page, a 512-deep ring of live blocks, per-phase cycle deltas
/// accumulated into two-powers bins keyed by the drawn size.
pub fn run_montecarlo(
    config: &BenchConfig,
    params: &CostModelParams,
) -> Result<Vec<BinStats>, BenchError> {
    config.validate()?;
    let null_adjust = null_loop_per_iteration(config, params);
    let (mut m, preload) = machine_for(config, params);
    let preload = if config.preload_cache { preload } else { 0 };
    let driver = Driver::install(&mut m, config.allocator, preload)?;
    let pid = driver.pid;

    let mut rng = SplitMix64::new(config.seed);
    let mut ring: VecDeque<(BenchBlock, u32)> = VecDeque::new();
    let max_bin = if config.max_size > 0 {
        config.max_size.ilog2()
    } else {
        0
    };
    let mut bins: Vec<BinAcc> = vec![BinAcc::default(); max_bin as usize + 1];

    for _ in 0..config.iterations {
        let drawn = rng.uniform_inclusive(config.min_size, config.max_size);
        let request = request_bytes(drawn);
        let bin = drawn.ilog2();
        let pages = request / PAGE_SIZE;

        let at_start = m.ledger(pid);
        let block = driver.alloc(&mut m, request)?;
        let after_alloc = m.ledger(pid);
        let mut addr = block.base;
        for _ in 0..pages {
            m.write_byte(pid, addr, 1)
                .map_err(|e| BenchError::Config(e.to_string()))?;
            addr += PAGE_SIZE;
        }
        let after_touch = m.ledger(pid);

        let acc = &mut bins[bin as usize];
        acc.samples += 1;
        acc.alloc_cycles += after_alloc.cycles - at_start.cycles - null_adjust;
        acc.traverse_cycles += after_touch.cycles - after_alloc.cycles;
        acc.pages += pages;

        ring.push_back((block, bin));
        if ring.len() > config.ring_size {
            let (old, old_bin) = ring.pop_front().expect("ring is non-empty");
            let before_free = m.ledger(pid);
            driver.free(&mut m, old)?;
            let after_free = m.ledger(pid);
            let acc = &mut bins[old_bin as usize];
            acc.free_cycles += after_free.cycles - before_free.cycles;
            acc.free_samples += 1;
        }
    }
    debug_assert!(ring.len() <= config.ring_size);
    // Blocks still in the ring are drain-phase; their frees are not binned.

    let per_page_allowance = params.tlb_far_refill + params.byte_access_cost;
    let stats = bins
        .iter()
        .enumerate()
        .filter(|(_, acc)| acc.samples > 0)
        .map(|(bin, acc)| {
            let n = acc.samples as f64;
            let mean_alloc = acc.alloc_cycles / n;
            let mean_traverse = acc.traverse_cycles / n;
            let mean_pages = acc.pages as f64 / n;
            let notraverse =
                (mean_alloc + mean_traverse - mean_pages * per_page_allowance).max(0.0);
            BinStats {
                allocator: config.allocator.name(),
                bin_log2: bin as u32,
                samples: acc.samples,
                mean_alloc_cycles: mean_alloc,
                mean_free_cycles: if acc.free_samples > 0 {
                    acc.free_cycles / acc.free_samples as f64
                } else {
                    0.0
                },
                mean_traverse_cycles: mean_traverse,
                mean_alloc_cycles_notraverse: notraverse,
                mean_pages,
            }
        })
        .collect();
    Ok(stats)
}

/// One row of the fault-cost table.
#[derive(Debug, Clone)]
pub struct FaultCostRow {
    pub size_bytes: u64,
    pub paged_cycles_per_page: f64,
    pub nonpaged_cycles_per_page: f64,
    pub overhead_ratio: f64,
}

/// Default size list for the fault-cost experiment.
pub const FAULTCOST_SIZES: [u64; 4] = [16 * 1024, 1024 * 1024, 16 * 1024 * 1024, 512 * 1024 * 1024];

/// Compares lazy fault-driven allocation against eager cache-backed
/// mapping: modeled cycles per page to allocate a block and write one byte
/// into each of its pages, on a fresh simulation per size.
pub fn run_faultcost(
    config: &BenchConfig,
    params: &CostModelParams,
    sizes: &[u64],
) -> Result<Vec<FaultCostRow>, BenchError> {
    let mut rows = Vec::with_capacity(sizes.len());
    for &size in sizes {
        if size == 0 || size % PAGE_SIZE != 0 {
            return Err(BenchError::Config(format!(
                "fault-cost sizes must be page multiples, got {size}"
            )));
        }
        let pages = size / PAGE_SIZE;

        let paged = {
            let mut m = Machine::new(MachineConfig {
                total_small_frames: pages + 64,
                vspace_pages: (pages + 64) * 4,
                params: *params,
            });
            let driver = Driver::install(&mut m, AllocatorKind::KernelPaged, 0)?;
            let before = m.ledger(driver.pid);
            let block = driver.alloc(&mut m, size)?;
            touch_each_page(&mut m, driver.pid, block.base, pages)?;
            let delta = m.ledger(driver.pid).delta_since(&before);
            driver.free(&mut m, block)?;
            delta.cycles / pages as f64
        };

        let nonpaged = {
            let mut m = Machine::new(MachineConfig {
                total_small_frames: pages + 64,
                vspace_pages: (pages + 64) * 4,
                params: *params,
            });
            let driver = Driver::install(&mut m, AllocatorKind::Umpa, pages + 16)?;
            let before = m.ledger(driver.pid);
            let block = driver.alloc(&mut m, size)?;
            touch_each_page(&mut m, driver.pid, block.base, pages)?;
            let delta = m.ledger(driver.pid).delta_since(&before);
            driver.free(&mut m, block)?;
            delta.cycles / pages as f64
        };

        rows.push(FaultCostRow {
            size_bytes: size,
            paged_cycles_per_page: paged,
            nonpaged_cycles_per_page: nonpaged,
            overhead_ratio: paged / nonpaged,
        });
    }
    let _ = config;
    Ok(rows)
}

fn touch_each_page(
    m: &mut Machine,
    pid: pagesim::ProcessId,
    base: u64,
    pages: u64,
) -> Result<(), BenchError> {
    let mut addr = base;
    for _ in 0..pages {
        m.write_byte(pid, addr, 1)
            .map_err(|e| BenchError::Config(e.to_string()))?;
        addr += PAGE_SIZE;
    }
    Ok(())
}

/// Resize scaling: for each two-powers size, a doubling `userpage_realloc`
/// with relocation forced by a blocker block, against the explicit
/// allocate-copy-free baseline. Two rows per bin, labeled `umpa` and
/// `baseline`.
pub fn run_reallocbench(
    config: &BenchConfig,
    params: &CostModelParams,
) -> Result<Vec<BinStats>, BenchError> {
    config.validate()?;
    let reps = config.iterations.max(1);
    let mut out = Vec::new();
    let mut size = config.min_size.next_power_of_two().max(PAGE_SIZE);
    while size <= config.max_size {
        let pages = size / PAGE_SIZE;
        let mut umpa_cycles = 0.0;
        let mut baseline_cycles = 0.0;
        for rep in 0..reps {
            // Fresh, preloaded simulation per measurement; the blocker
            // right after the block forces the grow to relocate.
            let frames = pages * 4 + 64;
            let mut m = Machine::new(MachineConfig {
                total_small_frames: frames,
                vspace_pages: frames * 8,
                params: *params,
            });
            let driver = Driver::install(&mut m, AllocatorKind::Umpa, pages * 3 + 32)?;
            let pid = driver.pid;
            let a = m
                .userpage_malloc(pid, size, AllocFlags::default())
                .map_err(|e| BenchError::Config(e.to_string()))?;
            let _blocker = m
                .userpage_malloc(pid, PAGE_SIZE, AllocFlags::default())
                .map_err(|e| BenchError::Config(e.to_string()))?;
            m.write_byte(pid, a, rep as u8)
                .map_err(|e| BenchError::Config(e.to_string()))?;

            let before = m.ledger(pid);
            let moved = m
                .userpage_realloc(pid, a, size, 2 * size, AllocFlags::default())
                .map_err(|e| BenchError::Config(e.to_string()))?;
            let delta = m.ledger(pid).delta_since(&before);
            assert_eq!(
                delta.bytes_copied, 0,
                "page-remapping realloc must not copy"
            );
            assert_ne!(moved, a, "blocker must force relocation");
            umpa_cycles += delta.cycles;

            // Copying baseline on its own fresh simulation.
            let mut m = Machine::new(MachineConfig {
                total_small_frames: frames,
                vspace_pages: frames * 8,
                params: *params,
            });
            let driver = Driver::install(&mut m, AllocatorKind::Umpa, pages * 4 + 32)?;
            let pid = driver.pid;
            let a = m
                .userpage_malloc(pid, size, AllocFlags::default())
                .map_err(|e| BenchError::Config(e.to_string()))?;
            let _blocker = m
                .userpage_malloc(pid, PAGE_SIZE, AllocFlags::default())
                .map_err(|e| BenchError::Config(e.to_string()))?;
            m.write_byte(pid, a, rep as u8)
                .map_err(|e| BenchError::Config(e.to_string()))?;

            let before = m.ledger(pid);
            let b = m
                .userpage_malloc(pid, 2 * size, AllocFlags::default())
                .map_err(|e| BenchError::Config(e.to_string()))?;
            m.copy_bytes(pid, a, b, size)
                .map_err(|e| BenchError::Config(e.to_string()))?;
            m.userpage_free(pid, a, size)
                .map_err(|e| BenchError::Config(e.to_string()))?;
            let delta = m.ledger(pid).delta_since(&before);
            assert_eq!(delta.bytes_copied, size);
            baseline_cycles += delta.cycles;
        }
        let bin = size.ilog2();
        for (label, cycles) in [("umpa", umpa_cycles), ("baseline", baseline_cycles)] {
            let mean = cycles / reps as f64;
            out.push(BinStats {
                allocator: label,
                bin_log2: bin,
                samples: reps,
                mean_alloc_cycles: mean,
                mean_free_cycles: 0.0,
                mean_traverse_cycles: 0.0,
                mean_alloc_cycles_notraverse: mean,
                mean_pages: pages as f64,
            });
        }
        size *= 2;
    }
    Ok(out)
}

/// Overall speedup when a fraction `p` of time enjoys a speedup of `s`.
pub fn amdahl_speedup(p: f64, s: f64) -> Result<f64, BenchError> {
    if !(0.0..=1.0).contains(&p) || !p.is_finite() {
        return Err(BenchError::Domain(format!(
            "fraction of time must be within [0, 1], got {p}"
        )));
    }
    if s <= 0.0 || !s.is_finite() {
        return Err(BenchError::Domain(format!(
            "speedup must be positive, got {s}"
        )));
    }
    Ok(1.0 / ((1.0 - p) + p / s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amdahl_matches_closed_form() {
        let got = amdahl_speedup(0.05, 2.0).unwrap();
        assert!((got - 1.0 / 0.975).abs() < 1e-12);
        assert_eq!(amdahl_speedup(0.3, 1.0).unwrap(), 1.0);
        assert_eq!(amdahl_speedup(1.0, 4.0).unwrap(), 4.0);
        assert!(amdahl_speedup(-0.1, 2.0).is_err());
        assert!(amdahl_speedup(1.1, 2.0).is_err());
        assert!(amdahl_speedup(0.5, 0.0).is_err());
    }

    #[test]
    fn request_rounding_is_to_nearest_page() {
        assert_eq!(request_bytes(4096), 4096);
        assert_eq!(request_bytes(4097), 4096);
        assert_eq!(request_bytes(6143), 4096);
        assert_eq!(request_bytes(6144), 8192);
        assert_eq!(request_bytes(8191), 8192);
        assert_eq!(request_bytes(1), 4096);
    }

    #[test]
    fn zero_iterations_yield_empty_stats() {
        let config = BenchConfig {
            iterations: 0,
            ..BenchConfig::default()
        };
        let stats = run_montecarlo(&config, &CostModelParams::default()).unwrap();
        assert!(stats.is_empty());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let config = BenchConfig {
            min_size: 8192,
            max_size: 4096,
            ..BenchConfig::default()
        };
        assert!(matches!(
            run_montecarlo(&config, &CostModelParams::default()),
            Err(BenchError::Config(_))
        ));
        let config = BenchConfig {
            ring_size: 0,
            ..BenchConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn forced_one_megabyte_paged_notraverse_matches_closed_form() {
        // Every page costs fault + pte write + near refill + byte access;
        // the notraverse adjustment removes the faultless-walk allowance.
        let config = BenchConfig {
            iterations: 24,
            ring_size: 8,
            min_size: 1024 * 1024,
            max_size: 1024 * 1024,
            allocator: AllocatorKind::KernelPaged,
            ..BenchConfig::default()
        };
        let p = CostModelParams::default();
        let stats = run_montecarlo(&config, &p).unwrap();
        assert_eq!(stats.len(), 1);
        let bin = &stats[0];
        assert_eq!(bin.bin_log2, 20);
        let per_page = bin.mean_alloc_cycles_notraverse / bin.mean_pages;
        let expected =
            p.fault_cost_cycles + p.pte_write_cost + p.tlb_near_refill + p.byte_access_cost
                - (p.tlb_far_refill + p.byte_access_cost);
        assert!(
            (per_page - expected).abs() < 1e-9,
            "per page {per_page} vs closed form {expected}"
        );
        // Fault cost dominates the leftover.
        assert!((per_page / p.fault_cost_cycles - 1.0).abs() < 0.1);
    }

    #[test]
    fn paged_baseline_notraverse_is_affine_in_pages() {
        let config = BenchConfig {
            iterations: 1500,
            ring_size: 64,
            max_size: 1024 * 1024,
            allocator: AllocatorKind::KernelPaged,
            ..BenchConfig::default()
        };
        let stats = run_montecarlo(&config, &CostModelParams::default()).unwrap();
        assert!(stats.len() >= 4);
        for s in &stats {
            assert!(s.mean_alloc_cycles >= 0.0);
            assert!(s.mean_traverse_cycles >= 0.0);
            assert!(s.mean_free_cycles >= 0.0);
        }
        // Least squares of per-bin notraverse means against per-bin mean
        // pages: the deterministic model is exactly affine, so the
        // coefficient of determination is 1 up to floating rounding.
        let n = stats.len() as f64;
        let xs: Vec<f64> = stats.iter().map(|s| s.mean_pages).collect();
        let ys: Vec<f64> = stats.iter().map(|s| s.mean_alloc_cycles_notraverse).collect();
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
        let r2 = sxy * sxy / (sxx * syy);
        assert!((r2 - 1.0).abs() < 1e-9, "r^2 = {r2}");
    }

    #[test]
    fn faultcost_paged_per_page_is_size_invariant() {
        let p = CostModelParams::default();
        let rows = run_faultcost(
            &BenchConfig::default(),
            &p,
            &[16 * 1024, 1024 * 1024, 16 * 1024 * 1024],
        )
        .unwrap();
        let first = rows[0].paged_cycles_per_page;
        for row in &rows {
            assert!(
                (row.paged_cycles_per_page / first - 1.0).abs() < 0.05,
                "paged cost drifted: {} vs {}",
                row.paged_cycles_per_page,
                first
            );
        }
        // One page, one fault.
        let one = run_faultcost(&BenchConfig::default(), &p, &[4096]).unwrap();
        assert!(one[0].paged_cycles_per_page >= p.fault_cost_cycles);
    }

    #[test]
    fn linux_profile_surcharge_kicks_in_above_512_pages() {
        let p = CostModelParams::linux();
        let rows = run_faultcost(
            &BenchConfig::default(),
            &p,
            &[1024 * 1024, 16 * 1024 * 1024],
        )
        .unwrap();
        // 256 pages fault at 3100, 4096 pages fault at 6500.
        assert!(rows[0].paged_cycles_per_page < 3400.0);
        assert!(rows[1].paged_cycles_per_page > 6000.0);
    }

    #[test]
    fn realloc_baseline_doubles_per_bin_and_umpa_stays_flat() {
        let config = BenchConfig {
            iterations: 1,
            min_size: 4096,
            max_size: 1024 * 1024,
            ..BenchConfig::default()
        };
        let stats = run_reallocbench(&config, &CostModelParams::default()).unwrap();
        let base: Vec<&BinStats> = stats.iter().filter(|s| s.allocator == "baseline").collect();
        for pair in base.windows(2) {
            let ratio = pair[1].mean_alloc_cycles / pair[0].mean_alloc_cycles;
            assert!(
                (1.8..=2.2).contains(&ratio),
                "baseline consecutive-bin ratio {ratio}"
            );
        }
        let umpa: Vec<&BinStats> = stats
            .iter()
            .filter(|s| s.allocator == "umpa" && (12..=17).contains(&s.bin_log2))
            .collect();
        let max = umpa.iter().map(|s| s.mean_alloc_cycles).fold(0.0, f64::max);
        let min = umpa
            .iter()
            .map(|s| s.mean_alloc_cycles)
            .fold(f64::INFINITY, f64::min);
        assert!(max <= 2.0 * min, "umpa resize spread {max}/{min}");
    }
}
