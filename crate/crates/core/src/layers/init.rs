use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::{numel, Scalar, Tensor};

/// Glorot-scaled normal, resampled outside two standard deviations.
pub fn truncated_normal<F: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<F> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..numel(shape))
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break F::lit(z * std);
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}
