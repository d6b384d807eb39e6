use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

/// Xavier/Glorot uniform: U(-a, a) with `a = √(6 / (fan_in + fan_out))`.
pub(crate) fn xavier_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize, gain: f32) -> Tensor {
    let limit = gain * (6.0 / (fan_in + fan_out) as f32).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-limit..limit)).expect("finite init")
}
