use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::schedule::VarianceSchedule;
use super::unet::NoisePredictor;
use crate::error::{Error, Result};
use crate::rng::gaussian_like;

/// `μ = (x_t − β_t/√(1−ᾱ_t)·ε̂) / √α_t`.
pub fn posterior_mean_from_eps(
    xt: &Tensor,
    eps: &Tensor,
    t: usize,
    sched: &VarianceSchedule,
) -> Result<Tensor> {
    if xt.dims() != eps.dims() {
        return Err(Error::ShapeMismatch(format!(
            "x_t {:?} vs eps {:?}",
            xt.dims(),
            eps.dims()
        )));
    }
    let beta = sched.beta(t)?;
    let alpha = sched.alpha(t)?;
    let ab = sched.alpha_bar(t)?;
    let coef = beta / (1.0 - ab).sqrt();
    Ok(((xt - (eps * coef)?)? * (1.0 / alpha.sqrt()))?)
}

/// One ancestral step `x_{t-1} ~ N(μ_θ(x_t, t), β_t I)`; `t = 1` returns the mean.
///
/// `xt` is a single image `(H, W, C)` or a batch `(B, H, W, C)`.
pub fn reverse_step(
    xt: &Tensor,
    t: usize,
    predictor: &NoisePredictor,
    sched: &VarianceSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    sched.check_step(t)?;
    let batched = if xt.rank() == 3 {
        xt.unsqueeze(0)?
    } else {
        xt.clone()
    };
    let mean = predictor.posterior_mean(&batched, t, sched)?;
    let out = if t == 1 {
        mean
    } else {
        let z = gaussian_like(&mean, rng)?;
        (mean + (z * sched.beta(t)?.sqrt())?)?
    };
    if xt.rank() == 3 {
        Ok(out.squeeze(0)?)
    } else {
        Ok(out)
    }
}

/// Full ancestral sampling from pure noise, for sanity checks only.
pub fn sample(
    predictor: &NoisePredictor,
    sched: &VarianceSchedule,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let cfg = predictor.config();
    let shape = (n, cfg.height(), cfg.width(), cfg.channels);
    let mut x = crate::rng::gaussian(shape, rng)?;
    for t in (1..=sched.len()).rev() {
        x = reverse_step(&x, t, predictor, sched, rng)?;
    }
    Ok(x)
}
