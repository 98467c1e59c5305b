//! Radiance fields whose camera rays render whole pixel patches, with
//! distance-aware 1D convolutions along each ray and a training-free coarse
//! model synced from the fine one.

use blas_src as _;

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod img;
pub mod metrics;
pub mod model;
pub mod render;
pub mod sampling;
pub mod trainer;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};

/// Pick fast BLAS kernels, re-executing the process if needed.
///
/// OpenBLAS builds that predate this CPU silently fall back to their generic
/// pre-AVX kernels when they do not recognize the core, which costs more than
/// an order of magnitude in GEMM throughput; selecting the Skylake-X kernel
/// family explicitly restores the AVX-512 paths. OpenBLAS reads
/// `OPENBLAS_CORETYPE` in a shared-library constructor that runs before
/// `main`, so setting the variable here is only visible after re-exec. A
/// no-op when the user already chose a core type or the CPU lacks AVX-512.
pub fn tune_blas() {
    let mut changed = false;
    #[cfg(target_arch = "x86_64")]
    if std::env::var_os("OPENBLAS_CORETYPE").is_none()
        && is_x86_feature_detected!("avx512f")
    {
        std::env::set_var("OPENBLAS_CORETYPE", "SKYLAKEX");
        changed = true;
    }
    if std::env::var_os("OPENBLAS_NUM_THREADS").is_none() {
        std::env::set_var(
            "OPENBLAS_NUM_THREADS",
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
                .to_string(),
        );
        changed = true;
    }
    // Large short-lived arrays dominate the allocation profile; without a
    // long purge delay the allocator returns their pages to the OS between
    // iterations and the train loop spends more time in page faults than in
    // arithmetic. (MIMALLOC_RESET_DELAY is the pre-2.x spelling.)
    for purge_knob in ["MIMALLOC_PURGE_DELAY", "MIMALLOC_RESET_DELAY"] {
        if std::env::var_os(purge_knob).is_none() {
            std::env::set_var(purge_knob, "100000");
            changed = true;
        }
    }
    #[cfg(unix)]
    if changed {
        if let Ok(exe) = std::env::current_exe() {
            use std::os::unix::process::CommandExt;
            let err = std::process::Command::new(exe)
                .args(std::env::args_os().skip(1))
                .exec();
            eprintln!("warning: re-exec for BLAS tuning failed: {err}");
        }
    }
    let _ = changed;
}
