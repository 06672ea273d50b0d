//! Seeded synthetic test images.

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::weights::tensor_rng;

/// Smooth `(3, H, W)` content in `[0, 1]`: a few random plane waves per
/// channel plus faint noise.
pub fn test_image<S: Scalar>(seed: u64, height: usize, width: usize) -> Tensor<S> {
    let mut rng = tensor_rng(seed, "synth.image");
    let mut waves = Vec::new();
    for _ in 0..3 {
        let base: f64 = rng.random_range(0.2..0.8);
        let comps: Vec<[f64; 4]> = (0..4)
            .map(|_| {
                [
                    rng.random_range(0.02..0.25),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(-0.2..0.2),
                    rng.random_range(0.0..std::f64::consts::TAU),
                ]
            })
            .collect();
        waves.push((base, comps));
    }
    let mut data = Vec::with_capacity(3 * height * width);
    for (base, comps) in &waves {
        for y in 0..height {
            for x in 0..width {
                let mut v = *base;
                for [a, fy, fx, ph] in comps {
                    v += a * (fy * y as f64 + fx * x as f64 + ph).sin();
                }
                v += rng.random_range(-0.02..0.02);
                data.push(S::of(v.clamp(0.0, 1.0)));
            }
        }
    }
    Tensor::from_fn(vec![3, height, width], |i| data[i])
}
