//! Synthetic inputs shared by the benchmarks.

use fbev_core::{CameraGrids, GridSpec, LiftedPoints};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points scattered over `spec` from `cameras` cameras, `channels` wide.
pub fn random_points(n: usize, channels: usize, cameras: u32, spec: &GridSpec, seed: u64) -> LiftedPoints {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = LiftedPoints::empty(channels);
    p.features = Array2::from_shape_fn((n, channels), |_| rng.random_range(-1.0..1.0));
    for i in 0..n {
        p.positions.push([
            rng.random_range(spec.x_min()..spec.x_max()),
            rng.random_range(spec.y_min()..spec.y_max()),
            0.0,
        ]);
        p.weights.push(1.0);
        p.camera_id.push(rng.random_range(0..cameras));
        p.pixel_id.push(i as u32);
        p.bin_id.push(0);
    }
    p
}

/// Per-camera grids with random features and counts.
pub fn random_grids(cameras: usize, channels: usize, nx: usize, ny: usize, seed: u64) -> CameraGrids {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = Array3::from_shape_fn((cameras, nx, ny), |_| rng.random_range(0..4u32));
    let features = Array4::from_shape_fn((cameras, channels, nx, ny), |(k, _, i, j)| {
        if counts[(k, i, j)] > 0 {
            rng.random_range(-1.0..1.0)
        } else {
            0.0
        }
    });
    CameraGrids { features, counts, dropped: 0 }
}
