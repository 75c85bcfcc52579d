//! Benchmark harness over the page-allocation simulator.
//!
//! Experiments run on the deterministic cost model: identical seed and
//! configuration give identical ledgers and identical CSV bytes. Each run
//! is a self-contained simulation, so multi-run work (the differential
//! fuzz corpus, seed sweeps) parallelizes across independent machines;
//! the `parallel` feature (default on) backs that with a thread pool.

pub mod adapters;
pub mod costfile;
pub mod csvout;
pub mod experiments;
pub mod fuzz;
pub mod rng;

pub use adapters::AllocatorKind;
pub use costfile::{apply_cost_file, profile};
pub use csvout::{csv_string, write_csv, CSV_HEADER};
pub use experiments::{
    amdahl_speedup, run_faultcost, run_montecarlo, run_reallocbench, BenchConfig, BenchError,
    BinStats, FaultCostRow, FAULTCOST_SIZES,
};
pub use fuzz::{run_corpus, run_corpus_sequential, run_zeroing_fuzz, CorpusConfig, CorpusReport};
pub use rng::SplitMix64;
