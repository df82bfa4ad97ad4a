//! Files, formats and drivers around [`divid_core`]: PNG frame datasets with
//! JSON manifests, TOML run configs, binary checkpoints, the training loop,
//! evaluation reports, swap grids and the `divid` command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod eval;
pub mod frames;
pub mod grid;
pub mod manifest;
pub mod train;

pub use error::{DividError, Result};

/// Keeps glibc from returning large freed blocks to the OS after every
/// training step; the autograd tape allocates and frees megabytes per op.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator thresholds and is safe to call at any time.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
