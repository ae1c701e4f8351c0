//! Test oracles shared by integration tests.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use t2sim::motion::RigidTransform;

pub const RADIUS: f64 = 64.0;
pub const ORACLE_SAMPLES: usize = 1_000_000;

/// Uniform ball samples by rejection from the enclosing cube, fully
/// independent of the quasi-random point set used by the library.
pub fn monte_carlo_displacement(t: &RigidTransform, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = t.rotation_matrix();
    let d = t.translation_vector();
    let mut sum = 0.0;
    let mut n = 0;
    while n < ORACLE_SAMPLES {
        let p = Vector3::new(
            2.0 * rng.random::<f64>() - 1.0,
            2.0 * rng.random::<f64>() - 1.0,
            2.0 * rng.random::<f64>() - 1.0,
        );
        if p.norm_squared() > 1.0 {
            continue;
        }
        let p = p * RADIUS;
        sum += (r * p + d - p).norm();
        n += 1;
    }
    sum / n as f64
}
