//! Supernet-based architecture search for compressing small transformer
//! encoders: block-wise distillation against a teacher, progressive shrinking
//! of a binned search space, lookup-table latency/loss approximation, and
//! constrained selection plus retraining of the chosen architecture.

pub mod config;
pub mod error;
pub mod latency;
pub mod numerics;
pub mod pipeline;
pub mod retrain;
pub mod searchspace;
pub mod selection;
pub mod shrinktrain;
pub mod supernet;
pub mod teacher;

pub use error::{Error, Result};

/// Training and evaluation math runs in 64-bit; checkpoints store 32-bit.
pub type Tensor = numerics::Tensor<f64>;
pub type Tensor32 = numerics::Tensor<f32>;
pub type Graph = numerics::Graph<f64>;
pub type ParamStore = numerics::ParamStore<f64>;
pub type AdamConfig = numerics::AdamConfig;

/// Derive a child RNG seed from a master seed and a context tag, so that
/// independent components draw from decorrelated, reproducible streams.
pub fn subseed(master: u64, tags: &[u64]) -> u64 {
    let mut x = master ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        x ^= t.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x ^= x >> 27;
    }
    x.wrapping_mul(0x94d0_49bb_1331_11eb) ^ (x >> 31)
}

/// Cap the global rayon pool from `NASCOMPRESS_THREADS` when set. Safe to
/// call more than once; later calls are no-ops.
pub fn init_thread_pool_from_env() {
    if let Ok(v) = std::env::var("NASCOMPRESS_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
