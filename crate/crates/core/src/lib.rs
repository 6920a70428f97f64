//! Synthetic ALS/TLS forest pipeline with a conditional point-cloud diffusion
//! model and its evaluation stack.

pub mod biometrics;
pub mod detect;
pub mod diffusion;
pub mod geom;
pub mod metrics;
pub mod pipeline;
pub mod scansim;
pub mod synthforest;
pub mod theory;

pub use geom::{BBox3, ConvexHull3, GroundModel, Point3, PointCloud, SemanticLabel, SpatialIndex, UnitCubeTransform};
pub use scansim::TreePair;

/// Derives an independent sub-seed for `stream` from `master` (SplitMix64
/// finalizer over the combined words).
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Worker count from `FG3D_THREADS`, defaulting to the available cores.
pub fn worker_threads() -> usize {
    std::env::var("FG3D_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `f` on a pool capped at [`worker_threads`]. Results of indexed
/// parallel iterators inside `f` keep their input order.
pub fn with_workers<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match rayon::ThreadPoolBuilder::new().num_threads(worker_threads()).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
