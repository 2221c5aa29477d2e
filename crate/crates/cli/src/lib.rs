//! Experiment runner behind the `driftseg` binary.

pub mod commands;
pub mod config;
pub mod report;
pub mod runner;

pub use config::{ConfigError, ExperimentConfig, Method};
pub use runner::{run, RunRecord, RunSummary};

/// Keeps freed tensor buffers in the heap instead of returning them to the
/// kernel after every op; training is several times faster with glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}

/// Sizes the global rayon pool from `DRIFTSEG_THREADS` when set.
pub fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("DRIFTSEG_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| config::config_error(format!("DRIFTSEG_THREADS=`{v}` is not a number")))?;
        // A pool may already exist in tests; keep it.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    Ok(())
}
