use std::time::Instant;

use candle_core::Tensor;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, Variant};
use super::model::{count_params, gradient_routing, GradientRouting, ParamCounts, PreparedImage, SegModel};
use crate::data::SegmentationSample;
use crate::diffusion::{NoisePredictor, VarianceSchedule};
use crate::error::{Error, Result};
use crate::probe::{extract_natives, BlockSelection, FeatureCache, ImageFeatures};
use crate::rng;
use crate::seg::{dice_metric, iou_metric, seg_loss, ImageMetrics, MaskPair, MetricsReport};
use crate::text::{encode, TextEncoder};

/// Frozen encoders plus the optional feature cache.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub backbone: &'a NoisePredictor,
    pub sched: &'a VarianceSchedule,
    pub encoder: &'a dyn TextEncoder,
    pub cache: Option<&'a FeatureCache>,
}

impl<'a> Components<'a> {
    pub fn new(
        backbone: &'a NoisePredictor,
        sched: &'a VarianceSchedule,
        encoder: &'a dyn TextEncoder,
    ) -> Self {
        Self {
            backbone,
            sched,
            encoder,
            cache: None,
        }
    }

    pub fn with_cache(self, cache: &'a FeatureCache) -> Self {
        Self {
            cache: Some(cache),
            ..self
        }
    }
}

/// Noise seed for one image; `epoch` is set only when resampling per epoch.
pub fn noise_seed(base: u64, image_id: &str, epoch: Option<usize>) -> u64 {
    match epoch {
        Some(e) => rng::derive_seed(base, &format!("noise/{e}/{image_id}")),
        None => rng::derive_seed(base, &format!("noise/{image_id}")),
    }
}

/// Extracts (or loads from cache) the native maps for one sample.
pub fn image_features(
    sample: &SegmentationSample,
    sel: &BlockSelection,
    comps: &Components,
    seed: u64,
) -> Result<ImageFeatures> {
    let backbone_sum = match comps.cache {
        Some(cache) => {
            let sum = comps.backbone.checksum()?;
            if let Some(f) = cache.load(&sample.image_id, sel, &sum, seed)? {
                return Ok(f);
            }
            Some(sum)
        }
        None => None,
    };
    let (h, w, _) = sample.image.dims3()?;
    let mut rng = rng::seeded(seed);
    let natives = extract_natives(&sample.image, comps.backbone, sel, comps.sched, &mut rng)?;
    let feats = ImageFeatures {
        size: (h, w),
        natives,
    };
    if let (Some(cache), Some(sum)) = (comps.cache, backbone_sum) {
        cache.store(&sample.image_id, sel, &sum, seed, &feats)?;
    }
    Ok(feats)
}

/// Features, text embeddings and targets for a set of samples.
pub fn prepare(
    samples: &[SegmentationSample],
    model: &SegModel,
    comps: &Components,
    epoch: Option<usize>,
) -> Result<Vec<PreparedImage>> {
    samples
        .iter()
        .map(|s| {
            let seed = noise_seed(model.feature_seed, &s.image_id, epoch);
            let feats = if epoch.is_some() {
                image_features(s, &model.selection, &Components { cache: None, ..*comps }, seed)?
            } else {
                image_features(s, &model.selection, comps, seed)?
            };
            let text = if model.variant.uses_text() {
                Some(encode(&s.text, comps.encoder)?)
            } else {
                None
            };
            PreparedImage::new(&s.image_id, &feats, text, &s.mask)
        })
        .collect()
}

/// What a training run produced besides the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub loss_trace: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub routing: GradientRouting,
    pub backbone_checksum: String,
    pub text_checksum: String,
}

/// Optimizes `L_Dice + L_CE` over the attention and classifier parameters.
/// Backbone and text encoder stay fixed; their checksums are compared before
/// and after, and any gradient reaching them is an error.
pub fn train_segmenter(
    train: &[SegmentationSample],
    cfg: &TrainConfig,
    comps: &Components,
) -> Result<(SegModel, TrainRecord)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let backbone_before = comps.backbone.checksum()?;
    let text_before = comps.encoder.checksum();
    if comps.encoder.d_text() == 0 {
        return Err(Error::InvalidDims("text encoder width is zero".into()));
    }
    let mut model = SegModel::new(cfg, comps.backbone.registry(), comps.encoder.d_text())?;
    let vars = model.trainable().into_iter().map(|(_, v)| v).collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut prepared = prepare(train, &model, comps, None)?;
    let mut rng = rng::stream(cfg.seed, "seg-train");
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, SegModel)> = None;
    let mut routing = None;
    for epoch in 0..cfg.epochs {
        if cfg.resample_features && epoch > 0 {
            prepared = prepare(train, &model, comps, Some(epoch))?;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let img = &prepared[i];
                losses.push(seg_loss(&model.logits(img)?, &img.gt)?);
            }
            let loss = (Tensor::stack(&losses, 0)?.sum_all()? / chunk.len() as f64)?;
            let grads = loss.backward()?;
            if routing.is_none() {
                let r = gradient_routing(&model, &[comps.backbone.params()], &grads)?;
                if !r.frozen_with_grad.is_empty() {
                    return Err(Error::FrozenViolation(format!(
                        "gradient reached {:?}",
                        r.frozen_with_grad
                    )));
                }
                routing = Some(r);
            }
            opt.step(&grads)?;
            total += loss.to_scalar::<f32>()? as f64;
            batches += 1;
        }
        let mean = total / batches as f64;
        log::info!(
            "{} epoch {}/{}: loss {mean:.5}",
            cfg.variant,
            epoch + 1,
            cfg.epochs
        );
        trace.push(mean);
        if best.as_ref().is_none_or(|(b, _, _)| mean < *b) {
            best = Some((mean, epoch, model.deep_clone()?));
        }
    }
    let (_, best_epoch, kept) = best.expect("at least one epoch");
    model = kept;
    let backbone_after = comps.backbone.checksum()?;
    if backbone_after != backbone_before {
        return Err(Error::FrozenViolation("backbone parameters changed".into()));
    }
    if comps.encoder.checksum() != text_before {
        return Err(Error::FrozenViolation("text encoder parameters changed".into()));
    }
    Ok((
        model,
        TrainRecord {
            loss_trace: trace,
            best_epoch,
            routing: routing.expect("at least one step"),
            backbone_checksum: backbone_after,
            text_checksum: text_before,
        },
    ))
}

/// Per-image and mean Dice/IoU on `test`. `sel` must be the selection the
/// model was trained with.
pub fn evaluate(
    test: &[SegmentationSample],
    model: &SegModel,
    sel: &BlockSelection,
    comps: &Components,
) -> Result<MetricsReport> {
    if sel != &model.selection {
        return Err(Error::SelectionMismatch {
            trained: model.selection.to_string(),
            requested: sel.to_string(),
        });
    }
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prepared = prepare(test, model, comps, None)?;
    let rows = prepared
        .iter()
        .map(|img| {
            let mp = MaskPair::new(model.predict(img)?, img.mask.clone())?;
            Ok(ImageMetrics {
                image_id: img.image_id.clone(),
                dice_pct: dice_metric(&mp),
                iou_pct: iou_metric(&mp),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_rows(rows)
}

/// Outcome of one train-and-evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub variant: Variant,
    pub config: TrainConfig,
    pub loss_trace: Vec<f64>,
    pub best_epoch: usize,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub wall_time_s: f64,
    pub params: ParamCounts,
    /// Gradient norms observed on the first optimizer step.
    pub routing: GradientRouting,
    pub backbone_checksum: String,
    pub text_checksum: String,
    pub metrics: MetricsReport,
}

/// Trains `variant` on `train` and evaluates on `test`.
pub fn run_variant(
    variant: Variant,
    train: &[SegmentationSample],
    test: &[SegmentationSample],
    cfg: &TrainConfig,
    comps: &Components,
) -> Result<(SegModel, ExperimentRecord)> {
    let start = Instant::now();
    let cfg = TrainConfig {
        variant,
        ..cfg.clone()
    };
    let (model, rec) = train_segmenter(train, &cfg, comps)?;
    let metrics = evaluate(test, &model, &cfg.selection, comps)?;
    let params = count_params(&model, comps.backbone.params(), comps.encoder);
    Ok((
        model,
        ExperimentRecord {
            variant,
            config: cfg,
            loss_trace: rec.loss_trace,
            best_epoch: rec.best_epoch,
            mean_dice: metrics.mean_dice,
            mean_iou: metrics.mean_iou,
            wall_time_s: start.elapsed().as_secs_f64(),
            params,
            routing: rec.routing,
            backbone_checksum: rec.backbone_checksum,
            text_checksum: rec.text_checksum,
            metrics,
        },
    ))
}
