use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, Variant};
use crate::diffusion::BlockRegistry;
use crate::error::{Error, Result};
use crate::fusion::{attend_pixels, fuse_maps, AttentionParams, FusionConfig};
use crate::nn::{flat_f64, ParamStore};
use crate::probe::{upsample_bilinear_hwc, BlockSelection, ImageFeatures};
use crate::seg::{classify, predict_mask, Mask, PixelClassifier};
use crate::text::{TextEmbedding, TextEncoder};

/// One native map flattened to pixel rows `(h·w, C)`.
#[derive(Debug, Clone)]
pub struct NativeRows {
    pub key: (usize, usize),
    pub hw: (usize, usize),
    pub rows: Tensor,
}

/// Everything the trainable part needs for one image.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub image_id: String,
    pub size: (usize, usize),
    /// Canonical `(block, step)` order.
    pub maps: Vec<NativeRows>,
    pub text: Option<TextEmbedding>,
    /// Flattened ground truth `(H·W,)`.
    pub gt: Tensor,
    pub mask: Mask,
}

impl PreparedImage {
    pub fn new(
        image_id: &str,
        feats: &ImageFeatures,
        text: Option<TextEmbedding>,
        mask: &Tensor,
    ) -> Result<Self> {
        let maps = feats
            .natives
            .iter()
            .map(|(&key, m)| {
                let (c, h, w) = m.dims3()?;
                Ok(NativeRows {
                    key,
                    hw: (h, w),
                    rows: m.reshape((c, h * w))?.t()?.contiguous()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let (h, w) = mask.dims2()?;
        if (h, w) != feats.size {
            return Err(Error::ShapeMismatch(format!(
                "mask {h}x{w} for features at {:?}",
                feats.size
            )));
        }
        Ok(Self {
            image_id: image_id.to_string(),
            size: feats.size,
            maps,
            text,
            gt: mask.flatten_all()?,
            mask: Mask::from_tensor(mask)?,
        })
    }

    pub fn visual_dim(&self) -> usize {
        self.maps.iter().map(|m| m.rows.dims()[1]).sum()
    }

    fn natives(&self) -> Result<BTreeMap<(usize, usize), Tensor>> {
        self.maps
            .iter()
            .map(|m| {
                let (h, w) = m.hw;
                let c = m.rows.dims()[1];
                Ok((m.key, m.rows.t()?.reshape((c, h, w))?))
            })
            .collect()
    }

    fn text(&self) -> Result<&TextEmbedding> {
        self.text
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("{} has no text embedding", self.image_id)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SegMeta {
    variant: Variant,
    selection: BlockSelection,
    fusion: FusionConfig,
    feature_seed: u64,
    d_text: usize,
}

/// Trainable segmentation state: optional attention plus the pixel classifier.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub variant: Variant,
    pub selection: BlockSelection,
    pub fusion: FusionConfig,
    pub attention: Option<AttentionParams>,
    pub classifier: PixelClassifier,
    /// Base seed for the noise drawn during feature extraction.
    pub feature_seed: u64,
    pub d_text: usize,
}

impl SegModel {
    pub fn new(cfg: &TrainConfig, registry: &BlockRegistry, d_text: usize) -> Result<Self> {
        Self::with_dtype(cfg, registry, d_text, DType::F32)
    }

    pub fn with_dtype(
        cfg: &TrainConfig,
        registry: &BlockRegistry,
        d_text: usize,
        dtype: DType,
    ) -> Result<Self> {
        cfg.validate()?;
        let sel = &cfg.selection;
        sel.validate(registry, usize::MAX)?;
        let visual = sel.assembled_dim(registry)?;
        let maps = sel.blocks().len() * sel.steps().len();
        let input_dim = match cfg.variant {
            Variant::Full if cfg.fusion.h_only => maps * cfg.fusion.d_v,
            Variant::Full => visual + maps * cfg.fusion.d_v,
            Variant::Zeta1 => visual,
            Variant::Zeta2 => visual + d_text,
        };
        let attention = match cfg.variant {
            Variant::Full => Some(AttentionParams::for_selection_with_dtype(
                registry,
                sel,
                &cfg.fusion,
                d_text,
                cfg.seed,
                dtype,
            )?),
            _ => None,
        };
        Ok(Self {
            variant: cfg.variant,
            selection: sel.clone(),
            fusion: cfg.fusion.clone(),
            attention,
            classifier: PixelClassifier::with_dtype(input_dim, cfg.hidden, cfg.seed, dtype)?,
            feature_seed: cfg.seed,
            d_text,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    /// Trainable variables, prefixed `attn.` or `clf.`.
    pub fn trainable(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        if let Some(a) = &self.attention {
            out.extend(a.store().iter().map(|(n, v)| (n.to_string(), v.clone())));
        }
        out.extend(
            self.classifier
                .store()
                .iter()
                .map(|(n, v)| (format!("clf.{n}"), v.clone())),
        );
        out
    }

    pub fn num_trainable(&self) -> usize {
        self.attention.as_ref().map_or(0, |a| a.num_params()) + self.classifier.num_params()
    }

    /// SHA-256 over all trainable tensors.
    pub fn digest(&self) -> Result<String> {
        let mut parts = self.classifier.store().digest()?;
        if let Some(a) = &self.attention {
            parts.push_str(&a.store().digest()?);
        }
        Ok(parts)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            attention: self.attention.as_ref().map(|a| a.deep_clone()).transpose()?,
            classifier: self.classifier.deep_clone()?,
            ..self.clone()
        })
    }

    fn check_image(&self, img: &PreparedImage) -> Result<()> {
        let keys: Vec<_> = img.maps.iter().map(|m| m.key).collect();
        if keys != self.selection.keys() {
            return Err(Error::SelectionMismatch {
                trained: self.selection.to_string(),
                requested: format!("maps {keys:?}"),
            });
        }
        Ok(())
    }

    /// Classifier input `(H, W, D)` built literally: upsampled visual
    /// features, the fused attention maps and/or the pooled text.
    pub fn input_features(&self, img: &PreparedImage) -> Result<Tensor> {
        self.check_image(img)?;
        let feats = ImageFeatures {
            size: img.size,
            natives: img.natives()?,
        };
        let dtype = self.classifier.store().dtype();
        let visual = feats.assembled()?.to_dtype(dtype)?;
        let (h, w) = img.size;
        let parts = match self.variant {
            Variant::Zeta1 => vec![visual],
            Variant::Zeta2 => {
                let t = img.text()?.mean_pooled()?.to_dtype(dtype)?;
                let d = t.dims()[0];
                vec![visual, t.reshape((1, 1, d))?.broadcast_as((h, w, d))?.contiguous()?]
            }
            Variant::Full => {
                let params = self.attention.as_ref().expect("full variant has attention");
                let natives = feats
                    .natives
                    .iter()
                    .map(|(k, v)| Ok((*k, v.to_dtype(dtype)?)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                let fused = fuse_maps(&natives, img.size, img.text()?, params)?.concatenated;
                if self.fusion.h_only {
                    vec![fused]
                } else {
                    vec![visual, fused]
                }
            }
        };
        Ok(Tensor::cat(&parts, 2)?)
    }

    /// Reference logits `(H·W, 2)` via [`Self::input_features`] and `classify`.
    pub fn logits_reference(&self, img: &PreparedImage) -> Result<Tensor> {
        let x = self.input_features(img)?;
        let (h, w) = img.size;
        Ok(classify(&x, &self.classifier)?.reshape((h * w, 2))?)
    }

    /// Logits `(H·W, 2)`.
    ///
    /// The first classifier layer is linear and bilinear upsampling is linear
    /// per channel, so each native map is projected to the hidden width first
    /// and only the per-resolution sums are upsampled.
    pub fn logits(&self, img: &PreparedImage) -> Result<Tensor> {
        self.check_image(img)?;
        let (w1, b1) = self.classifier.first_layer();
        let dtype = w1.dtype();
        let hidden = self.classifier.hidden();
        let mut acc: BTreeMap<(usize, usize), Tensor> = BTreeMap::new();
        let mut add = |hw: (usize, usize), t: Tensor| -> Result<()> {
            let next = match acc.remove(&hw) {
                Some(prev) => (prev + t)?,
                None => t,
            };
            acc.insert(hw, next);
            Ok(())
        };
        let mut offset = 0;
        let rows: Vec<Tensor> = img
            .maps
            .iter()
            .map(|m| m.rows.to_dtype(dtype))
            .collect::<candle_core::Result<_>>()?;
        if !(self.variant == Variant::Full && self.fusion.h_only) {
            for (m, r) in img.maps.iter().zip(&rows) {
                let c = r.dims()[1];
                add(m.hw, r.matmul(&w1.narrow(0, offset, c)?)?)?;
                offset += c;
            }
        }
        let mut shift = b1.clone();
        match self.variant {
            Variant::Zeta1 => {}
            Variant::Zeta2 => {
                let t = img.text()?.mean_pooled()?.to_dtype(dtype)?.unsqueeze(0)?;
                let d = t.dims()[1];
                let proj = t.matmul(&w1.narrow(0, offset, d)?)?.squeeze(0)?;
                shift = (shift + proj)?;
                offset += d;
            }
            Variant::Full => {
                let params = self.attention.as_ref().expect("full variant has attention");
                let text = img.text()?.matrix();
                for (m, r) in img.maps.iter().zip(&rows) {
                    let (z, t) = m.key;
                    let out = attend_pixels(r, text, &params.scale(z, t)?)?;
                    let dv = out.dims()[1];
                    add(m.hw, out.matmul(&w1.narrow(0, offset, dv)?)?)?;
                    offset += dv;
                }
            }
        }
        debug_assert_eq!(offset, self.input_dim());
        let (h, w) = img.size;
        let mut pre: Option<Tensor> = None;
        for ((nh, nw), sum) in acc {
            let up = upsample_bilinear_hwc(&sum.reshape((nh, nw, hidden))?, (h, w))?
                .reshape((h * w, hidden))?;
            pre = Some(match pre {
                Some(p) => (p + up)?,
                None => up,
            });
        }
        let pre = pre
            .ok_or_else(|| Error::IncompleteFeatureSet("no maps".into()))?
            .broadcast_add(&shift)?;
        self.classifier.head(&pre)
    }

    pub fn predict(&self, img: &PreparedImage) -> Result<Mask> {
        let (h, w) = img.size;
        predict_mask(&self.logits(img)?.reshape((h, w, 2))?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = SegMeta {
            variant: self.variant,
            selection: self.selection.clone(),
            fusion: self.fusion.clone(),
            feature_seed: self.feature_seed,
            d_text: self.d_text,
        };
        self.classifier
            .save(&dir.join("classifier.ckpt"), serde_json::to_value(meta)?)?;
        if let Some(a) = &self.attention {
            a.save(&dir.join("fusion.ckpt"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (classifier, meta) = PixelClassifier::load(&dir.join("classifier.ckpt"))?;
        let meta: SegMeta = serde_json::from_value(meta)?;
        let attention = match meta.variant {
            Variant::Full => Some(AttentionParams::load(&dir.join("fusion.ckpt"))?),
            _ => None,
        };
        Ok(Self {
            variant: meta.variant,
            selection: meta.selection,
            fusion: meta.fusion,
            attention,
            classifier,
            feature_seed: meta.feature_seed,
            d_text: meta.d_text,
        })
    }
}

/// Exact parameter counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub backbone: usize,
    pub text_encoder: usize,
    pub attention: usize,
    pub classifier: usize,
    pub total: usize,
    pub trainable: usize,
}

pub fn count_params(model: &SegModel, backbone: &ParamStore, encoder: &dyn TextEncoder) -> ParamCounts {
    let attention = model.attention.as_ref().map_or(0, |a| a.num_params());
    let classifier = model.classifier.num_params();
    let backbone = backbone.num_params();
    let text_encoder = encoder.num_params();
    ParamCounts {
        backbone,
        text_encoder,
        attention,
        classifier,
        total: backbone + text_encoder + attention + classifier,
        trainable: attention + classifier,
    }
}

/// Where the gradients of one backward pass landed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRouting {
    /// Gradient L2 norm per trainable tensor; `None` when no gradient exists.
    pub trainable: Vec<(String, Option<f64>)>,
    /// Frozen tensors that received any gradient.
    pub frozen_with_grad: Vec<String>,
}

impl GradientRouting {
    pub fn all_trainable_nonzero(&self) -> bool {
        self.trainable.iter().all(|(_, n)| n.is_some_and(|n| n > 0.0))
    }
}

pub fn gradient_routing(
    model: &SegModel,
    frozen: &[&ParamStore],
    grads: &GradStore,
) -> Result<GradientRouting> {
    let trainable = model
        .trainable()
        .into_iter()
        .map(|(name, var)| {
            let norm = match grads.get(var.as_tensor()) {
                Some(g) => Some(flat_f64(g)?.iter().map(|x| x * x).sum::<f64>().sqrt()),
                None => None,
            };
            Ok((name, norm))
        })
        .collect::<Result<Vec<_>>>()?;
    let frozen_with_grad = frozen
        .iter()
        .flat_map(|s| s.iter())
        .filter(|(_, v)| grads.get(v.as_tensor()).is_some())
        .map(|(n, _)| n.to_string())
        .collect();
    Ok(GradientRouting {
        trainable,
        frozen_with_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::DiffusionConfig;
    use crate::nn::flat_f32;
    use crate::rng;
    use crate::seg::seg_loss;
    use crate::text::{encode, HashedGaussianEncoder};

    fn registry() -> BlockRegistry {
        BlockRegistry::for_config(&DiffusionConfig::default())
    }

    fn fixture(variant: Variant, seed: u64) -> (SegModel, PreparedImage) {
        let reg = registry();
        let sel = BlockSelection::new(vec![6, 12], vec![50, 250]).unwrap();
        let mut cfg = TrainConfig::new(variant, sel.clone());
        cfg.hidden = 16;
        cfg.seed = seed;
        let model = SegModel::new(&cfg, &reg, 24).unwrap();
        let mut r = rng::seeded(seed + 100);
        let mut natives = BTreeMap::new();
        for (z, t) in sel.keys() {
            let info = reg.get(z).unwrap();
            let shape = (info.channels, info.height, info.width);
            natives.insert((z, t), rng::gaussian(shape, &mut r).unwrap());
        }
        let feats = ImageFeatures {
            size: (64, 64),
            natives,
        };
        let enc = HashedGaussianEncoder::new(24, 0).unwrap();
        let text = variant
            .uses_text()
            .then(|| encode("the round lesion in the upper left", &enc).unwrap());
        let mask = Tensor::zeros((64, 64), DType::F32, &candle_core::Device::Cpu)
            .unwrap()
            .slice_assign(
                &[10..30, 12..28],
                &Tensor::ones((20, 16), DType::F32, &candle_core::Device::Cpu).unwrap(),
            )
            .unwrap();
        (model, PreparedImage::new("img", &feats, text, &mask).unwrap())
    }

    #[test]
    fn fast_logits_match_reference() {
        for v in Variant::ALL {
            let (model, img) = fixture(v, 3);
            let fast = flat_f32(&model.logits(&img).unwrap()).unwrap();
            let slow = flat_f32(&model.logits_reference(&img).unwrap()).unwrap();
            assert_eq!(fast.len(), 64 * 64 * 2);
            let worst = fast
                .iter()
                .zip(&slow)
                .map(|(a, b)| (a - b).abs())
                .fold(0f32, f32::max);
            assert!(worst < 1e-4, "{v}: {worst}");
        }
    }

    #[test]
    fn variant_input_dims() {
        let visual = 2 * (64 + 32);
        let (full, _) = fixture(Variant::Full, 0);
        assert_eq!(full.input_dim(), visual + 4 * full.fusion.d_v);
        let (z1, _) = fixture(Variant::Zeta1, 0);
        assert!(z1.attention.is_none());
        assert_eq!(z1.input_dim(), visual);
        assert!(z1.trainable().iter().all(|(n, _)| n.starts_with("clf.")));
        let (z2, _) = fixture(Variant::Zeta2, 0);
        assert!(z2.attention.is_none());
        assert_eq!(z2.input_dim(), visual + 24);
    }

    #[test]
    fn every_trainable_tensor_gets_gradient() {
        let (model, img) = fixture(Variant::Full, 1);
        let loss = seg_loss(&model.logits(&img).unwrap(), &img.gt).unwrap();
        let grads = loss.backward().unwrap();
        let r = gradient_routing(&model, &[], &grads).unwrap();
        assert!(r.trainable.iter().any(|(n, _)| n.starts_with("attn.")));
        assert!(r.all_trainable_nonzero(), "{:?}", r.trainable);
    }

    #[test]
    fn frozen_store_is_reported() {
        let (model, img) = fixture(Variant::Zeta1, 1);
        let loss = seg_loss(&model.logits(&img).unwrap(), &img.gt).unwrap();
        let grads = loss.backward().unwrap();
        let r = gradient_routing(&model, &[model.classifier.store()], &grads).unwrap();
        assert!(!r.frozen_with_grad.is_empty());
    }

    #[test]
    fn save_load_preserves_predictions() {
        let dir = tempfile::tempdir().unwrap();
        for v in Variant::ALL {
            let (model, img) = fixture(v, 5);
            let sub = dir.path().join(v.to_string());
            model.save(&sub).unwrap();
            let back = SegModel::load(&sub).unwrap();
            assert_eq!(back.variant, v);
            assert_eq!(back.selection, model.selection);
            assert_eq!(back.digest().unwrap(), model.digest().unwrap());
            assert_eq!(
                flat_f32(&back.logits(&img).unwrap()).unwrap(),
                flat_f32(&model.logits(&img).unwrap()).unwrap()
            );
        }
    }

    #[test]
    fn wrong_selection_rejected() {
        let (model, mut img) = fixture(Variant::Zeta1, 0);
        img.maps.pop();
        assert!(matches!(model.logits(&img), Err(Error::SelectionMismatch { .. })));
    }
}
