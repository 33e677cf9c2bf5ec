use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{build_linear_schedule, q_sample_batch, DiffusionConfig, VarianceSchedule};
use super::unet::NoisePredictor;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng;

pub const BACKBONE_MAGIC: &[u8; 8] = b"TXDFBKBN";
pub const BACKBONE_VERSION: u32 = 1;

/// Minimizes `E‖ε − ε_θ(x_t, t)‖²` over the given images `(H, W, C)`.
///
/// Returns a frozen predictor whose `loss_trace` holds the per-epoch mean loss.
pub fn train_backbone(images: &[Tensor], config: &DiffusionConfig) -> Result<NoisePredictor> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let want = [config.height(), config.width(), config.channels];
    if let Some(bad) = images.iter().find(|im| im.dims() != want) {
        return Err(Error::ShapeMismatch(format!(
            "backbone expects images {want:?}, got {:?}",
            bad.dims()
        )));
    }
    let sched = build_linear_schedule(config)?;
    let predictor = NoisePredictor::new(config)?;
    let mut opt = AdamW::new(
        predictor.params().all_vars(),
        ParamsAdamW {
            lr: config.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = rng::stream(config.seed, "backbone-train");
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<Tensor> = chunk.iter().map(|&i| images[i].clone()).collect();
            let x0 = Tensor::stack(&batch, 0)?.to_dtype(DType::F32)?;
            let steps: Vec<usize> = (0..chunk.len())
                .map(|_| rng.gen_range(1..=config.steps))
                .collect();
            let eps = rng::gaussian(x0.shape().clone(), &mut rng)?;
            let xt = q_sample_batch(&x0, &steps, &eps, &sched)?;
            let pred = predictor.predict(&xt, &steps)?;
            let loss = (pred - &eps)?.sqr()?.mean_all()?;
            opt.backward_step(&loss)?;
            total += loss.to_scalar::<f32>()? as f64;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!("backbone epoch {}/{}: loss {mean:.5}", epoch + 1, config.epochs);
        trace.push(mean);
    }
    let mut frozen = predictor.frozen()?;
    frozen.loss_trace = trace;
    Ok(frozen)
}

#[derive(Debug, Serialize, Deserialize)]
struct BackboneMeta {
    config: DiffusionConfig,
    betas: Vec<f64>,
    loss_trace: Vec<f64>,
}

/// Writes config, schedule and weights into one self-describing file.
pub fn save_backbone(path: &Path, predictor: &NoisePredictor, sched: &VarianceSchedule) -> Result<()> {
    let meta = BackboneMeta {
        config: predictor.config().clone(),
        betas: sched.betas().to_vec(),
        loss_trace: predictor.loss_trace.clone(),
    };
    checkpoint::write(
        path,
        BACKBONE_MAGIC,
        BACKBONE_VERSION,
        serde_json::to_value(meta)?,
        predictor.params(),
    )
}

/// Loads a frozen predictor and its schedule.
pub fn load_backbone(path: &Path) -> Result<(NoisePredictor, VarianceSchedule)> {
    let (version, meta, store) = checkpoint::read(path, BACKBONE_MAGIC, DType::F32)?;
    if version != BACKBONE_VERSION {
        return Err(Error::BadCheckpoint(format!(
            "backbone version {version}, expected {BACKBONE_VERSION}"
        )));
    }
    let meta: BackboneMeta = serde_json::from_value(meta)?;
    let sched = VarianceSchedule::from_betas(meta.betas)?;
    let mut predictor = NoisePredictor::from_store(&meta.config, store, true)?;
    predictor.loss_trace = meta.loss_trace;
    Ok((predictor, sched))
}
