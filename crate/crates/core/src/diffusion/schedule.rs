use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diffusion process and backbone-training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Number of diffusion steps.
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// `[H, W]`.
    pub image_size: [usize; 2],
    pub channels: usize,
    pub seed: u64,
    pub base_width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            image_size: [64, 64],
            channels: 1,
            seed: 0,
            base_width: 32,
            epochs: 10,
            batch_size: 8,
            lr: 1e-3,
        }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.steps < 2 {
            return bad(format!("diffusion.T must be >= 2, got {}", self.steps));
        }
        if !(self.beta_start > 0.0 && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return bad(format!(
                "need 0 < diffusion.beta_start < diffusion.beta_end < 1, got {} and {}",
                self.beta_start, self.beta_end
            ));
        }
        for d in self.image_size {
            if d < 16 || !d.is_power_of_two() {
                return bad(format!(
                    "diffusion.image_size entries must be powers of two >= 16, got {d}"
                ));
            }
        }
        if self.channels == 0 {
            return bad("diffusion.channels must be positive".into());
        }
        if self.base_width == 0 || self.base_width % 8 != 0 {
            return bad(format!(
                "diffusion.base_width must be a positive multiple of 8, got {}",
                self.base_width
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return bad("diffusion.epochs, batch_size and lr must be positive".into());
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.image_size[0]
    }

    pub fn width(&self) -> usize {
        self.image_size[1]
    }
}

/// Fixed variance schedule `β_1..β_T` with derived `α_t` and `ᾱ_t`.
///
/// Steps are 1-based everywhere in the public API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(Error::InvalidConfig("schedule needs at least 2 steps".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::InvalidConfig(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.len(),
            });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alphas[t - 1])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

/// Linear β from `beta_start` to `beta_end` over `T` entries.
pub fn build_linear_schedule(config: &DiffusionConfig) -> Result<VarianceSchedule> {
    if config.steps < 2 || config.beta_start >= config.beta_end {
        return Err(Error::InvalidConfig(format!(
            "linear schedule needs T >= 2 and beta_start < beta_end (T={}, {} .. {})",
            config.steps, config.beta_start, config.beta_end
        )));
    }
    let n = config.steps;
    let span = config.beta_end - config.beta_start;
    let betas = (0..n)
        .map(|i| config.beta_start + span * i as f64 / (n - 1) as f64)
        .collect();
    VarianceSchedule::from_betas(betas)
}

/// Closed-form forward noising `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
pub fn q_sample(x0: &Tensor, t: usize, eps: &Tensor, sched: &VarianceSchedule) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::ShapeMismatch(format!(
            "x0 {:?} vs eps {:?}",
            x0.dims(),
            eps.dims()
        )));
    }
    let ab = sched.alpha_bar(t)?;
    Ok(((x0 * ab.sqrt())? + (eps * (1.0 - ab).sqrt())?)?)
}

/// Batched noising with one step per leading-dimension entry.
pub fn q_sample_batch(
    x0: &Tensor,
    steps: &[usize],
    eps: &Tensor,
    sched: &VarianceSchedule,
) -> Result<Tensor> {
    if x0.dims() != eps.dims() {
        return Err(Error::ShapeMismatch(format!(
            "x0 {:?} vs eps {:?}",
            x0.dims(),
            eps.dims()
        )));
    }
    let b = x0.dim(0)?;
    if steps.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} steps for batch of {b}",
            steps.len()
        )));
    }
    let mut signal = Vec::with_capacity(b);
    let mut noise = Vec::with_capacity(b);
    for &t in steps {
        let ab = sched.alpha_bar(t)?;
        signal.push(ab.sqrt());
        noise.push((1.0 - ab).sqrt());
    }
    let mut shape = vec![1usize; x0.rank()];
    shape[0] = b;
    let dev = x0.device();
    let signal = Tensor::from_vec(signal, shape.as_slice(), dev)?.to_dtype(x0.dtype())?;
    let noise = Tensor::from_vec(noise, shape.as_slice(), dev)?.to_dtype(x0.dtype())?;
    Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
}
