//! Lipschitz-aware linearity grafting workbench for small feedforward
//! ReLU networks.
//!
//! The crate is organized around one pipeline: compute relaxation-based
//! bounds ([`bounds`]), score and select influential unstable neurons
//! ([`select`]), replace their activations with learnable linear functions
//! ([`model::ActivationKind::GraftedLinear`]), fine-tune with a slope loss
//! ([`train`]), and certify robustness and ℓ∞ local Lipschitz constants
//! against brute-force oracles ([`verify`], [`lipschitz`]).

pub mod bounds;
pub mod data;
pub mod linalg;
pub mod lipschitz;
pub mod lp;
pub mod model;
pub mod rng;
pub mod select;
pub mod tape;
pub mod train;
pub mod verify;

use std::sync::OnceLock;

static POOL_INIT: OnceLock<usize> = OnceLock::new();

/// Cap rayon's global pool with the `GRAFTCERT_THREADS` env var.
///
/// Safe to call more than once; only the first call configures the pool.
pub fn init_thread_pool_from_env() -> usize {
    *POOL_INIT.get_or_init(|| {
        let requested = std::env::var("GRAFTCERT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0);
        if let Some(n) = requested {
            // Ignore the error: the pool may already be built by a test harness.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
            n
        } else {
            rayon::current_num_threads()
        }
    })
}
