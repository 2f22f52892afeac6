//! Citywide EV charging occupancy forecasting.
//!
//! The crate is organized as a pipeline:
//!
//! - [`dataset`]: load/validate/interpolate/normalize/window the demand,
//!   price, and temperature tables; synthetic data generation.
//! - [`region`]: POI TF-IDF, k-means area clustering, hypergraph incidence
//!   and spatial adjacency structures, Pearson correlation analysis.
//! - [`tape`]: reverse-mode autodiff engine every layer is built on.
//! - [`layers`]: differentiable building blocks (GRN, GLU, soft/graph/
//!   hypergraph attention, Gumbel-Softmax temporal attention, variable
//!   selection, encoder block).
//! - [`model`]: the full network assembly, forward pass, checkpoints.
//! - [`training`]: MSE + Adam + early stopping training loop.
//! - [`evaluation`]: metric suite, persistence baseline, ablation matrix,
//!   gradient verification harness.

pub mod dataset;
pub mod evaluation;
pub mod layers;
pub mod model;
pub mod region;
pub mod tape;
pub mod training;

/// Mixes a sequence of integers into one deterministic 64-bit seed
/// (splitmix64 over an accumulator). Used to derive per-epoch, per-batch,
/// and per-layer RNG streams from a single run seed.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        let mut z = acc ^ p.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        acc = z ^ (z >> 31);
    }
    acc
}
