//! Shared fixtures for the benchmarks.

use ffuse_core::{generate_pair, FeatureMatrix, SynthSpec};

/// A correlated stream pair of the given size, seeded for repeatability.
pub fn stream_pair(frames: usize, dims: usize) -> (FeatureMatrix, FeatureMatrix) {
    generate_pair(&SynthSpec {
        frames,
        dims_u: dims,
        dims_v: dims,
        rho: 0.65,
        paired_dims: dims,
        seed: 7,
        ..SynthSpec::default()
    })
    .expect("valid synthetic spec")
}
