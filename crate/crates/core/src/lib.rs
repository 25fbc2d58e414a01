//! GPS trajectory toolkit: GPX ingestion, 1 Hz normalization and filtering,
//! length-adaptive resampling, self-supervised masking, a small rotary
//! encoder-decoder trained by masked reconstruction, and evaluation metrics.

pub mod atr;
pub mod eval;
pub mod geo;
pub mod gpx;
pub mod jsonl;
pub mod metrics;
pub mod model;
pub mod preprocess;
pub mod stm;
pub mod synth;
pub mod trajectory;

pub use geo::{haversine_m, GeoPoint};
pub use trajectory::{TrajPoint, Trajectory, TrajectoryDataset};

/// Derives an independent seed for item `index` of random stream `stream`
/// (SplitMix64 finalizer over the mixed inputs).
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut z = base
        ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_add(1).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
