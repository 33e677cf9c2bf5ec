//! Per-pixel classifier, Dice + cross-entropy losses and overlap metrics.

use std::fmt;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{flat_f32, flat_f64, ParamStore};
use crate::rng;

pub const CLASSIFIER_MAGIC: &[u8; 8] = b"TXDFCLSF";
pub const CLASSIFIER_VERSION: u32 = 1;
pub const DICE_SMOOTH: f64 = 1.0;

/// Two-layer MLP `D → hidden → 2` applied identically at every pixel.
#[derive(Debug, Clone)]
pub struct PixelClassifier {
    store: ParamStore,
    input_dim: usize,
    hidden: usize,
}

impl PixelClassifier {
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        Self::with_dtype(input_dim, hidden, seed, DType::F32)
    }

    pub fn with_dtype(input_dim: usize, hidden: usize, seed: u64, dtype: DType) -> Result<Self> {
        if input_dim == 0 || hidden == 0 {
            return Err(Error::InvalidDims(format!(
                "classifier dims {input_dim} -> {hidden}"
            )));
        }
        let mut rng = rng::stream(seed, "classifier-init");
        let mut store = ParamStore::new(dtype);
        store.gaussian("w1", &[input_dim, hidden], 1.0 / (input_dim as f64).sqrt(), &mut rng)?;
        store.constant("b1", &[hidden], 0.0)?;
        store.gaussian("w2", &[hidden, 2], 1.0 / (hidden as f64).sqrt(), &mut rng)?;
        store.constant("b2", &[2], 0.0)?;
        Ok(Self {
            store,
            input_dim,
            hidden,
        })
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let w1 = store.tensor("w1")?;
        let (input_dim, hidden) = w1.dims2()?;
        for name in ["b1", "w2", "b2"] {
            store.tensor(name)?;
        }
        Ok(Self {
            store,
            input_dim,
            hidden,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    fn t(&self, name: &str) -> Tensor {
        self.store
            .get(name)
            .expect("classifier tensors checked at construction")
            .as_tensor()
            .clone()
    }

    /// First-layer weight and bias, exposed for callers that apply the
    /// linear layer to feature groups separately.
    pub fn first_layer(&self) -> (Tensor, Tensor) {
        (self.t("w1"), self.t("b1"))
    }

    /// Maps pre-activations `(P, hidden)` of the first layer to logits `(P, 2)`.
    pub fn head(&self, pre: &Tensor) -> Result<Tensor> {
        Ok(pre
            .relu()?
            .matmul(&self.t("w2"))?
            .broadcast_add(&self.t("b2"))?)
    }

    /// Logits `(P, 2)` for pixel rows `(P, D)`.
    pub fn forward_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (_, d) = x.dims2()?;
        if d != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "classifier expects {} features, got {d}",
                self.input_dim
            )));
        }
        let pre = x
            .to_dtype(self.store.dtype())?
            .matmul(&self.t("w1"))?
            .broadcast_add(&self.t("b1"))?;
        self.head(&pre)
    }

    /// Copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            store: self.store.deep_clone()?,
            ..self.clone()
        })
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<()> {
        checkpoint::write(path, CLASSIFIER_MAGIC, CLASSIFIER_VERSION, meta, &self.store)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (version, meta, store) = checkpoint::read(path, CLASSIFIER_MAGIC, DType::F32)?;
        if version != CLASSIFIER_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "classifier version {version}, expected {CLASSIFIER_VERSION}"
            )));
        }
        Ok((Self::from_store(store)?, meta))
    }
}

/// Logits `(H, W, 2)` for features `(H, W, D)`.
pub fn classify(features: &Tensor, clf: &PixelClassifier) -> Result<Tensor> {
    let (h, w, d) = features.dims3()?;
    Ok(clf
        .forward_rows(&features.reshape((h * w, d))?)?
        .reshape((h, w, 2))?)
}

/// Foreground where the foreground logit is strictly larger; ties go to background.
pub fn predict_mask(logits: &Tensor) -> Result<Mask> {
    let (h, w, _) = logits.dims3()?;
    let v = flat_f32(logits)?;
    let data = v.chunks_exact(2).map(|c| c[1] > c[0]).collect();
    Mask::new(h, w, data)
}

/// `log Σ_c exp(logit_c)` over the last axis.
fn logsumexp(logits: &Tensor) -> Result<Tensor> {
    let m = logits.max_keepdim(D::Minus1)?.detach();
    Ok(logits
        .broadcast_sub(&m)?
        .exp()?
        .sum_keepdim(D::Minus1)?
        .log()?
        .broadcast_add(&m)?
        .squeeze(D::Minus1)?)
}

/// Foreground probabilities from `(..., 2)` logits.
pub fn foreground_probs(logits: &Tensor) -> Result<Tensor> {
    let fg = logits.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?;
    Ok((fg - logsumexp(logits)?)?.exp()?)
}

/// `1 − (2Σpg + s)/(Σp + Σg + s)` with `s = 1`.
pub fn dice_loss(probs: &Tensor, gt: &Tensor) -> Result<Tensor> {
    if probs.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "probs {:?} vs mask {:?}",
            probs.dims(),
            gt.dims()
        )));
    }
    if flat_f64(probs)?.iter().any(|p| !(0.0..=1.0).contains(p)) {
        return Err(Error::RangeViolation);
    }
    let gt = gt.to_dtype(probs.dtype())?;
    let inter = (probs * &gt)?.sum_all()?;
    let denom = ((probs.sum_all()? + gt.sum_all()?)? + DICE_SMOOTH)?;
    let ratio = ((inter * 2.0)? + DICE_SMOOTH)?.div(&denom)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

/// Mean over pixels of `−log softmax(logits)[gt]`.
pub fn ce_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let gt = gt.to_dtype(logits.dtype())?;
    let l0 = logits.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)?;
    let l1 = logits.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?;
    if l0.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs mask {:?}",
            logits.dims(),
            gt.dims()
        )));
    }
    let picked = ((&l1 * &gt)? + (l0 * gt.affine(-1.0, 1.0)?)?)?;
    // (m − picked) + log Σ exp(l − m) keeps small losses representable
    let m = logits.max_keepdim(D::Minus1)?.detach();
    let rest = logits
        .broadcast_sub(&m)?
        .exp()?
        .sum_keepdim(D::Minus1)?
        .log()?
        .squeeze(D::Minus1)?;
    Ok(((m.squeeze(D::Minus1)? - picked)? + rest)?.mean_all()?)
}

/// `L_Dice + L_CE` on one image's logits.
pub fn seg_loss(logits: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let dice = dice_loss(&foreground_probs(logits)?, gt)?;
    Ok((dice + ce_loss(logits, gt)?)?)
}

/// Binary `H × W` mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::ShapeMismatch(format!(
                "mask {h}x{w} with {} entries",
                data.len()
            )));
        }
        Ok(Self { h, w, data })
    }

    /// From a `(H, W)` tensor, foreground where the value exceeds 0.5.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = t.dims2()?;
        Self::new(h, w, flat_f32(t)?.into_iter().map(|x| x > 0.5).collect())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// Predicted and ground-truth masks of equal shape.
#[derive(Debug, Clone)]
pub struct MaskPair {
    pub pred: Mask,
    pub gt: Mask,
}

impl MaskPair {
    pub fn new(pred: Mask, gt: Mask) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::ShapeMismatch(format!(
                "pred {:?} vs gt {:?}",
                pred.dims(),
                gt.dims()
            )));
        }
        Ok(Self { pred, gt })
    }

    fn counts(&self) -> (usize, usize, usize) {
        let inter = self
            .pred
            .data
            .iter()
            .zip(&self.gt.data)
            .filter(|(p, g)| **p && **g)
            .count();
        (self.pred.count(), self.gt.count(), inter)
    }
}

/// `100·2|P∩G|/(|P|+|G|)`; 100 when both masks are empty.
pub fn dice_metric(mp: &MaskPair) -> f64 {
    let (p, g, i) = mp.counts();
    if p + g == 0 {
        return 100.0;
    }
    100.0 * 2.0 * i as f64 / (p + g) as f64
}

/// `100·|P∩G|/|P∪G|`; 100 when both masks are empty.
pub fn iou_metric(mp: &MaskPair) -> f64 {
    let (p, g, i) = mp.counts();
    let union = p + g - i;
    if union == 0 {
        return 100.0;
    }
    100.0 * i as f64 / union as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub image_id: String,
    pub dice_pct: f64,
    pub iou_pct: f64,
}

/// Per-image metrics with their means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ImageMetrics>,
    pub mean_dice: f64,
    pub mean_iou: f64,
}

impl MetricsReport {
    pub fn from_rows(rows: Vec<ImageMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = rows.len() as f64;
        let mean_dice = rows.iter().map(|r| r.dice_pct).sum::<f64>() / n;
        let mean_iou = rows.iter().map(|r| r.iou_pct).sum::<f64>() / n;
        Ok(Self {
            rows,
            mean_dice,
            mean_iou,
        })
    }

    /// Writes `image_id,dice_pct,iou_pct` rows and a trailing `MEAN` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image_id", "dice_pct", "iou_pct"])?;
        for r in &self.rows {
            w.write_record([
                r.image_id.clone(),
                format!("{:.2}", r.dice_pct),
                format!("{:.2}", r.iou_pct),
            ])?;
        }
        w.write_record([
            "MEAN".to_string(),
            format!("{:.2}", self.mean_dice),
            format!("{:.2}", self.mean_iou),
        ])?;
        w.flush()?;
        Ok(())
    }

    /// Reads a metrics CSV; the `MEAN` row supplies the means as written.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        let mut mean = None;
        for rec in rdr.deserialize() {
            let r: ImageMetrics = rec?;
            if r.image_id == "MEAN" {
                mean = Some((r.dice_pct, r.iou_pct));
            } else {
                rows.push(r);
            }
        }
        let mut report = Self::from_rows(rows)?;
        if let Some((d, i)) = mean {
            report.mean_dice = d;
            report.mean_iou = i;
        }
        Ok(report)
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} images, Dice {:.2}%, IoU {:.2}%",
            self.rows.len(),
            self.mean_dice,
            self.mean_iou
        )
    }
}
