//! Seeded inputs shared by the benchmarks.

use patchxfer_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `(c, h, w)` map of uniform values in `[-1, 1)`.
pub fn random_map(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..c * h * w)
        .map(|_| rng.gen_range(-1.0f32..1.0))
        .collect();
    Tensor::new(vec![c, h, w], data).expect("valid shape")
}

/// RGB image tensor with values in `[0, 1)`.
pub fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
    random_map(3, h, w, seed)
        .map(|v| 0.5 + 0.5 * v)
        .expect("finite")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_are_seeded() {
        assert!(random_map(2, 3, 4, 7).bit_eq(&random_map(2, 3, 4, 7)));
        assert!(!random_map(2, 3, 4, 7).bit_eq(&random_map(2, 3, 4, 8)));
        let img = random_image(5, 5, 1);
        assert!(img.data().iter().all(|v| (0.0..1.0).contains(v)));
    }
}
