//! Fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfsr_core::data::{synth_samples, BitDepth, Sample, SynthConfig};
use sfsr_core::Tensor;

pub fn uniform(shape: &[usize], seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` synthetic pairs of `size × size` at scale 8.
pub fn samples(n: usize, size: usize) -> Vec<Sample> {
    synth_samples(&SynthConfig {
        n,
        h: size,
        w: size,
        seed: 1,
        scale: 8,
        bits: BitDepth::Eight,
    })
    .expect("valid synthetic config")
}
