//! Adversarial training that targets several perturbation models at once,
//! in pixel and DCT coordinates, via multiplicative weights over loss arms.

pub mod attacks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod game_lab;
pub mod model;
pub mod repspace;
pub mod tensor;
pub mod trainers;

pub use error::{Error, Result};

/// Keeps glibc from mapping and unmapping the multi-megabyte activation
/// buffers of every forward/backward pass, which otherwise spends more time
/// in page faults than in arithmetic. Call once at process start; a no-op
/// outside glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        // 32 MiB is the largest threshold glibc accepts on 64-bit targets.
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 256 << 20);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
