//! Desk-scale multi-task voice framework: a miniature wav2vec-style speech
//! representation extractor pretrained with a contrastive objective, then
//! jointly fine-tuned on keyword spotting and speaker verification through a
//! round-robin multi-task loop. Everything runs on the in-crate `tensor`
//! autodiff library; no external ML runtime is involved.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod losses;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sre;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor};

/// Raise glibc's malloc mmap/trim thresholds so the large short-lived buffers
/// of training steps are recycled from the heap instead of being mapped and
/// unmapped on every allocation. Call once at process start; no-op elsewhere.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    }
}
