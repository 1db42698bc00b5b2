//! Benchmark fixtures shared by the criterion targets.

use r2n2_core::data::{generate_case, SyntheticCase, DEFAULT_BLOBS};

/// A deformed synthetic pair at `resolution` with the evaluation settings.
pub fn case(resolution: usize, seed: u64) -> SyntheticCase {
    generate_case(resolution, 0.08, DEFAULT_BLOBS, seed).expect("valid case settings")
}
