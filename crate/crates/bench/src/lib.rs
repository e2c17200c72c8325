//! Deterministic inputs shared by the benchmarks.

use duosplat_core::gaussian::GaussianSet;
use duosplat_core::geometry::Point3;
use duosplat_core::image::Grid;
use duosplat_core::{CameraModel, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points uniformly filling a body-sized box in front of the camera.
pub fn body_points(n: usize, seed: u64) -> Vec<Point3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [rng.random_range(-0.3..0.3), rng.random_range(-0.9..0.9), rng.random_range(2.3..2.7)]).collect()
}

pub fn colors(n: usize) -> Vec<Rgb> {
    (0..n).map(|i| [(i % 7) as f64 / 7.0, (i % 5) as f64 / 5.0, 0.5]).collect()
}

/// Square camera at `-2` on the z axis looking at the origin.
pub fn camera(size: usize) -> CameraModel {
    let f = 1.05 * size as f64;
    let c = (size as f64 - 1.0) / 2.0;
    CameraModel::look_at([0.0, 0.0, -2.0], [0.0; 3], [0.0, 1.0, 0.0], f, f, c, c, size, size)
}

/// `n` small random Gaussians around the origin, as regressed from a 64² pair.
pub fn gaussians(n: usize, seed: u64) -> GaussianSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = GaussianSet::default();
    for _ in 0..n {
        set.push(
            [rng.random_range(-0.3..0.3), rng.random_range(-0.8..0.8), rng.random_range(-0.2..0.2)],
            std::array::from_fn(|_| rng.random_range(0.0..1.0)),
            rng.random_range(0.3..1.0),
            std::array::from_fn(|_| rng.random_range(0.005..0.02)),
            [1.0, 0.0, 0.0, 0.0],
        );
    }
    set
}

pub fn upstream(size: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Grid::from_fn(size, size, |_, _| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
}
