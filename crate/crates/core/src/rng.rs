//! Seeded randomness. Every stochastic path takes a `ChaCha8Rng`; independent
//! streams are derived by hashing a parent seed with a label.

use candle_core::{DType, Device, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::Result;

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Child seed for `(seed, label)`; stable across platforms.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("sha256 has 32 bytes"))
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}

/// Standard normal f32 tensor.
pub fn gaussian<S: Into<Shape>>(shape: S, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let shape = shape.into();
    let n = shape.elem_count();
    let data: Vec<f32> = (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
}

/// Standard normal tensor with the shape and dtype of `like`.
pub fn gaussian_like(like: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let t = gaussian(like.shape().clone(), rng)?;
    if like.dtype() == DType::F32 {
        Ok(t)
    } else {
        Ok(t.to_dtype(like.dtype())?)
    }
}
