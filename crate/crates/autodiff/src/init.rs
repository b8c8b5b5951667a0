//! Seeded weight initialization.

use ndarray::{ArrayD, IxDyn};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// The RNG used throughout: small, fast, and identical across platforms.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Standard normal draws scaled by `std`, in row-major element order.
pub fn normal(rng: &mut Rng, shape: &[usize], std: f64) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z * std
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product match")
}

/// He (Kaiming) normal initialization: std = sqrt(2 / fan_in).
pub fn he_normal(rng: &mut Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    assert!(fan_in > 0, "fan_in must be positive");
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}

/// All-zeros tensor (bias and residual-head initialization).
pub fn zeros(shape: &[usize]) -> ArrayD<f64> {
    ArrayD::zeros(IxDyn(shape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn normal_is_deterministic_for_seed() {
        let a = normal(&mut Rng::seed_from_u64(7), &[3, 4], 1.0);
        let b = normal(&mut Rng::seed_from_u64(7), &[3, 4], 1.0);
        assert_eq!(a, b);
    }

    #[test]
    fn he_normal_scales_by_fan_in() {
        let mut rng = Rng::seed_from_u64(0);
        let w = he_normal(&mut rng, &[64, 16], 16);
        let var: f64 = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        // Expected variance 2/16 = 0.125, loose statistical bound.
        assert!((var - 0.125).abs() < 0.05, "sample variance {var}");
    }

    #[test]
    fn zeros_shape() {
        let z = zeros(&[2, 3]);
        assert_eq!(z.shape(), &[2, 3]);
        assert!(z.iter().all(|&x| x == 0.0));
    }
}
