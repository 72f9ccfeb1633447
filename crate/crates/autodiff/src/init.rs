use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a parent seed and a label.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(label.as_bytes());
    fnv1a(&bytes)
}

/// Glorot-uniform tensor, seeded by the run seed and the parameter name.
pub fn glorot_uniform(shape: Vec<usize>, fan_in: usize, fan_out: usize, seed: u64, name: &str) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, name));
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, values).expect("length matches shape")
}
