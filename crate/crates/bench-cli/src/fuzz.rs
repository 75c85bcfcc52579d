//! Randomized differential checking of the allocator stack against a
//! naive shadow model, plus the two-process zeroing-security fuzz.
//!
//! Every sequence is an independent simulation keyed by its seed, so the
//! corpus is data-parallel; with the `parallel` feature the sequences run
//! across threads, and `run_corpus_sequential` is the single-threaded
//! fallback used for comparison and when the feature is off.

use std::collections::HashMap;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use pagesim::{
    AllocFlags, CostModelParams, FrameId, GpConfig, Machine, MachineConfig, ProcessId, SizeClass,
    UmpaConfig, PAGE_SIZE,
};

use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy)]
pub struct CorpusConfig {
    pub sequences: u64,
    pub ops_per_sequence: u64,
    pub max_block_bytes: u64,
    pub base_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            sequences: 1000,
            ops_per_sequence: 256,
            max_block_bytes: 64 * 1024,
            base_seed: 0x5EED,
        }
    }
}

#[derive(Debug, Default)]
pub struct CorpusReport {
    pub sequences_run: u64,
    pub failures: Vec<String>,
}

impl CorpusReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn sequence_for(cfg: &CorpusConfig, index: u64) -> Result<(), String> {
    let seed = cfg.base_seed ^ (index.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1);
    // Even sequences exercise the page allocator directly, odd ones the
    // byte-granularity heap layered over it.
    if index.is_multiple_of(2) {
        run_umpa_sequence(seed, cfg.ops_per_sequence, cfg.max_block_bytes)
            .map_err(|e| format!("umpa sequence {index} (seed {seed:#x}): {e}"))
    } else {
        run_gp_sequence(seed, cfg.ops_per_sequence, cfg.max_block_bytes)
            .map_err(|e| format!("gp sequence {index} (seed {seed:#x}): {e}"))
    }
}

/// Runs the corpus across threads when built with the `parallel` feature.
#[cfg(feature = "parallel")]
pub fn run_corpus(cfg: &CorpusConfig) -> CorpusReport {
    let failures: Vec<String> = (0..cfg.sequences)
        .into_par_iter()
        .filter_map(|i| sequence_for(cfg, i).err())
        .collect();
    CorpusReport {
        sequences_run: cfg.sequences,
        failures,
    }
}

#[cfg(not(feature = "parallel"))]
pub fn run_corpus(cfg: &CorpusConfig) -> CorpusReport {
    run_corpus_sequential(cfg)
}

/// Single-threaded corpus run; identical verdicts to [`run_corpus`].
pub fn run_corpus_sequential(cfg: &CorpusConfig) -> CorpusReport {
    let failures: Vec<String> = (0..cfg.sequences)
        .filter_map(|i| sequence_for(cfg, i).err())
        .collect();
    CorpusReport {
        sequences_run: cfg.sequences,
        failures,
    }
}

struct Shadow {
    base: u64,
    size: u64,
    written: HashMap<u64, u8>,
}

fn fail(msg: impl Into<String>) -> String {
    msg.into()
}

fn fuzz_machine() -> Machine {
    Machine::new(MachineConfig {
        total_small_frames: 1 << 14,
        vspace_pages: 1 << 20,
        params: CostModelParams::default(),
    })
}

/// Differential run of malloc/free/realloc/swap with zero-filled blocks:
/// every written byte must read back and every unwritten byte must stay
/// zero, exactly as a plain zero-initialized buffer allocator behaves.
fn run_umpa_sequence(seed: u64, ops: u64, max_block: u64) -> Result<(), String> {
    let mut rng = SplitMix64::new(seed);
    let mut m = fuzz_machine();
    let pid = m.create_process();
    m.attach_umpa(pid, UmpaConfig::with_cap(1 << 13));
    let preload = rng.uniform_inclusive(0, 128);
    if preload > 0 {
        m.umpa_preload(pid, preload)
            .map_err(|e| fail(e.to_string()))?;
    }
    let mut live: Vec<Shadow> = Vec::new();
    let baseline = m.ledger(pid);

    for _ in 0..ops {
        match rng.uniform_inclusive(0, 99) {
            0..=29 => {
                let size = rng.uniform_inclusive(1, max_block);
                let base = m
                    .userpage_malloc(pid, size, AllocFlags::zeroed())
                    .map_err(|e| fail(e.to_string()))?;
                let mut block = Shadow {
                    base,
                    size,
                    written: HashMap::new(),
                };
                scribble(&mut m, pid, &mut block, &mut rng)?;
                live.push(block);
            }
            30..=49 => {
                if live.is_empty() {
                    continue;
                }
                let idx = rng.uniform_inclusive(0, live.len() as u64 - 1) as usize;
                let block = live.swap_remove(idx);
                m.userpage_free(pid, block.base, block.size)
                    .map_err(|e| fail(e.to_string()))?;
            }
            50..=74 => {
                if live.is_empty() {
                    continue;
                }
                let idx = rng.uniform_inclusive(0, live.len() as u64 - 1) as usize;
                let new_size = rng.uniform_inclusive(1, max_block);
                let block = &mut live[idx];
                let new_base = m
                    .userpage_realloc(pid, block.base, block.size, new_size, AllocFlags::zeroed())
                    .map_err(|e| fail(e.to_string()))?;
                let keep = block.size.min(new_size);
                block.written.retain(|&off, _| off < keep);
                block.base = new_base;
                block.size = new_size;
                scribble(&mut m, pid, &mut live[idx], &mut rng)?;
            }
            75..=89 => {
                // Swap two equal-sized blocks, if the population has a pair.
                let mut pair = None;
                'outer: for i in 0..live.len() {
                    for j in i + 1..live.len() {
                        if live[i].size == live[j].size {
                            pair = Some((i, j));
                            break 'outer;
                        }
                    }
                }
                if let Some((i, j)) = pair {
                    m.userpage_swap(pid, live[i].base, live[j].base, live[i].size)
                        .map_err(|e| fail(e.to_string()))?;
                    let (a, b) = live.split_at_mut(j);
                    std::mem::swap(&mut a[i].written, &mut b[0].written);
                }
            }
            _ => {
                if live.is_empty() {
                    continue;
                }
                let idx = rng.uniform_inclusive(0, live.len() as u64 - 1) as usize;
                scribble(&mut m, pid, &mut live[idx], &mut rng)?;
            }
        }
        m.audit()?;
    }

    let delta = m.ledger(pid).delta_since(&baseline);
    if delta.faults != 0 {
        return Err(fail(format!("eager mapping took {} faults", delta.faults)));
    }
    if delta.bytes_copied != 0 {
        return Err(fail(format!(
            "{} bytes copied by no-copy paths",
            delta.bytes_copied
        )));
    }
    for block in &live {
        verify_block(&mut m, pid, block, &mut rng, true)?;
    }
    Ok(())
}

/// Differential run of the byte-granularity heap: recycled arena memory is
/// not zeroed, so equivalence covers exactly the bytes the client wrote
/// and the min(old,new) prefix a resize preserves.
fn run_gp_sequence(seed: u64, ops: u64, max_block: u64) -> Result<(), String> {
    let mut rng = SplitMix64::new(seed);
    let mut m = fuzz_machine();
    let pid = m.create_process();
    m.attach_umpa(pid, UmpaConfig::with_cap(1 << 13));
    m.attach_gp(pid, GpConfig::default());
    let mut live: Vec<Shadow> = Vec::new();

    for _ in 0..ops {
        match rng.uniform_inclusive(0, 99) {
            0..=34 => {
                let size = rng.uniform_inclusive(1, max_block);
                let addr = m.gp_malloc(pid, size).map_err(|e| fail(e.to_string()))?;
                let mut block = Shadow {
                    base: addr,
                    size,
                    written: HashMap::new(),
                };
                scribble(&mut m, pid, &mut block, &mut rng)?;
                live.push(block);
            }
            35..=59 => {
                if live.is_empty() {
                    continue;
                }
                let idx = rng.uniform_inclusive(0, live.len() as u64 - 1) as usize;
                let block = live.swap_remove(idx);
                m.gp_free(pid, block.base)
                    .map_err(|e| fail(e.to_string()))?;
            }
            60..=84 => {
                if live.is_empty() {
                    continue;
                }
                let idx = rng.uniform_inclusive(0, live.len() as u64 - 1) as usize;
                let new_size = rng.uniform_inclusive(1, max_block);
                let block = &mut live[idx];
                let new_addr = m
                    .gp_realloc(pid, block.base, new_size)
                    .map_err(|e| fail(e.to_string()))?;
                let keep = block.size.min(new_size);
                block.written.retain(|&off, _| off < keep);
                block.base = new_addr;
                block.size = new_size;
                scribble(&mut m, pid, &mut live[idx], &mut rng)?;
            }
            _ => {
                if live.is_empty() {
                    continue;
                }
                let idx = rng.uniform_inclusive(0, live.len() as u64 - 1) as usize;
                scribble(&mut m, pid, &mut live[idx], &mut rng)?;
            }
        }
        m.audit()?;
        overlap_check(&live)?;
    }

    for block in &live {
        verify_block(&mut m, pid, block, &mut rng, false)?;
    }
    Ok(())
}

fn scribble(
    m: &mut Machine,
    pid: ProcessId,
    block: &mut Shadow,
    rng: &mut SplitMix64,
) -> Result<(), String> {
    let n = rng.uniform_inclusive(1, 16);
    for _ in 0..n {
        let off = rng.uniform_inclusive(0, block.size - 1);
        let val = rng.next_u64() as u8;
        m.write_byte(pid, block.base + off, val)
            .map_err(|e| fail(format!("write at +{off}: {e}")))?;
        block.written.insert(off, val);
    }
    Ok(())
}

fn verify_block(
    m: &mut Machine,
    pid: ProcessId,
    block: &Shadow,
    rng: &mut SplitMix64,
    zero_filled: bool,
) -> Result<(), String> {
    for (&off, &expect) in &block.written {
        let got = m
            .read_byte(pid, block.base + off)
            .map_err(|e| fail(format!("read at +{off}: {e}")))?;
        if got != expect {
            return Err(fail(format!(
                "content mismatch at {:#x}+{off}: got {got:#04x}, want {expect:#04x}",
                block.base
            )));
        }
    }
    if zero_filled {
        for _ in 0..16 {
            let off = rng.uniform_inclusive(0, block.size - 1);
            if block.written.contains_key(&off) {
                continue;
            }
            let got = m
                .read_byte(pid, block.base + off)
                .map_err(|e| fail(e.to_string()))?;
            if got != 0 {
                return Err(fail(format!(
                    "unwritten byte at {:#x}+{off} reads {got:#04x}, want zero",
                    block.base
                )));
            }
        }
    }
    Ok(())
}

fn overlap_check(live: &[Shadow]) -> Result<(), String> {
    let mut spans: Vec<(u64, u64)> = live.iter().map(|b| (b.base, b.base + b.size)).collect();
    spans.sort_unstable();
    for w in spans.windows(2) {
        if w[0].1 > w[1].0 {
            return Err(fail(format!(
                "live allocations overlap: {:#x}..{:#x} and {:#x}..",
                w[0].0, w[0].1, w[1].0
            )));
        }
    }
    Ok(())
}

/// Two-process frame-exchange fuzz: every frame crossing a process
/// boundary must read zero at issue, same-owner re-issues must keep their
/// bytes, and warm same-process reuse must never charge zeroing.
pub fn run_zeroing_sequence(seed: u64, ops: u64) -> Result<(), String> {
    let mut rng = SplitMix64::new(seed);
    let mut m = Machine::new(MachineConfig {
        total_small_frames: 512,
        vspace_pages: 1 << 16,
        params: CostModelParams::default(),
    });
    let procs = [m.create_process(), m.create_process()];
    let mut held: [Vec<FrameId>; 2] = [Vec::new(), Vec::new()];
    let mut last_writer: HashMap<FrameId, (ProcessId, u8)> = HashMap::new();
    let scratch = 128;

    for _ in 0..ops {
        let who = rng.uniform_inclusive(0, 1) as usize;
        let caller = procs[who];
        match rng.uniform_inclusive(0, 3) {
            0 => {
                let n = rng.uniform_inclusive(1, 4) as usize;
                if let Ok(got) = m.sys_exchange_pages(caller, &[], &vec![SizeClass::Small; n]) {
                    for f in got {
                        match last_writer.get(&f) {
                            Some(&(owner, byte)) if owner == caller => {
                                let read = m.kernel().peek_frame_byte(f, 11).unwrap_or(0);
                                if read != byte {
                                    return Err(fail(format!(
                                        "same-owner re-issue of {f} lost contents"
                                    )));
                                }
                            }
                            Some(_) => {
                                if !m.kernel().frame_reads_zero(f) {
                                    return Err(fail(format!(
                                        "cross-process issue of {f} leaked bytes"
                                    )));
                                }
                                last_writer.remove(&f);
                            }
                            None => {
                                if !m.kernel().frame_reads_zero(f) {
                                    return Err(fail(format!("fresh frame {f} not zero")));
                                }
                            }
                        }
                        held[who].push(f);
                    }
                }
            }
            1 => {
                if let Some(&f) = held[who].last() {
                    let byte = rng.next_u64() as u8;
                    m.map_pages(caller, scratch, &[f], true)
                        .map_err(|e| fail(e.to_string()))?;
                    m.write_byte(caller, scratch * PAGE_SIZE + 11, byte)
                        .map_err(|e| fail(e.to_string()))?;
                    m.unmap_pages(caller, scratch, 1)
                        .map_err(|e| fail(e.to_string()))?;
                    m.tlb_flush(caller, Some((scratch, 1)));
                    last_writer.insert(f, (caller, byte));
                }
            }
            _ => {
                let take = (rng.uniform_inclusive(1, 4) as usize).min(held[who].len());
                if take > 0 {
                    let give: Vec<FrameId> = held[who].drain(..take).collect();
                    m.sys_exchange_pages(caller, &give, &[])
                        .map_err(|e| fail(e.to_string()))?;
                }
            }
        }
        if !m.kernel().audit_conservation() {
            return Err(fail("kernel conservation violated"));
        }
    }

    // Warm same-process reuse with zeroed=false never zeroes.
    let pid = procs[0];
    m.attach_umpa(pid, UmpaConfig::with_cap(256));
    m.umpa_preload(pid, 32).map_err(|e| fail(e.to_string()))?;
    let before = m.ledger(pid);
    for _ in 0..16 {
        let size = rng.uniform_inclusive(1, 16) * PAGE_SIZE;
        let base = m
            .userpage_malloc(pid, size, AllocFlags::default())
            .map_err(|e| fail(e.to_string()))?;
        m.write_byte(pid, base, 0xA5)
            .map_err(|e| fail(e.to_string()))?;
        m.userpage_free(pid, base, size)
            .map_err(|e| fail(e.to_string()))?;
    }
    let delta = m.ledger(pid).delta_since(&before);
    if delta.bytes_zeroed != 0 {
        return Err(fail(format!(
            "warm same-process reuse zeroed {} bytes",
            delta.bytes_zeroed
        )));
    }
    Ok(())
}

/// Seed sweep over [`run_zeroing_sequence`], parallel when available.
pub fn run_zeroing_fuzz(seeds: u64, ops: u64) -> Vec<String> {
    #[cfg(feature = "parallel")]
    {
        (0..seeds)
            .into_par_iter()
            .filter_map(|s| {
                run_zeroing_sequence(s, ops)
                    .err()
                    .map(|e| format!("seed {s}: {e}"))
            })
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..seeds)
            .filter_map(|s| {
                run_zeroing_sequence(s, ops)
                    .err()
                    .map(|e| format!("seed {s}: {e}"))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_small_corpus_passes_both_lanes() {
        let cfg = CorpusConfig {
            sequences: 8,
            ops_per_sequence: 64,
            ..CorpusConfig::default()
        };
        let report = run_corpus_sequential(&cfg);
        assert!(report.passed(), "{:?}", report.failures);
        assert_eq!(report.sequences_run, 8);
    }

    #[test]
    fn zeroing_sequences_hold_for_a_few_seeds() {
        for seed in 0..4 {
            run_zeroing_sequence(seed, 64).unwrap();
        }
    }
}
