//! Multi-scale cross-modal attention: pixel features query text tokens.
//!
//! For a scale `z`, each pixel `p` with feature `h_p` produces
//! `softmax((h_p W_q)(t̂ W_k)ᵀ / √d) · (t̂ W_v)`, the softmax running over the
//! `L` tokens. Outputs are computed at native resolution, upsampled and
//! concatenated in canonical `(block, step)` order.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::diffusion::BlockRegistry;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::probe::{upsample_bilinear, BlockSelection, PixelFeatureSet};
use crate::rng;
use crate::text::TextEmbedding;

pub const FUSION_MAGIC: &[u8; 8] = b"TXDFFUSN";
pub const FUSION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub d: usize,
    pub d_v: usize,
    /// Separate `(W_q, W_k, W_v)` for every step instead of one per scale.
    pub per_step: bool,
    /// Feed the classifier `H` alone instead of `[x̂, H]`.
    pub h_only: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d: 64,
            d_v: 16,
            per_step: false,
            h_only: false,
        }
    }
}

/// Borrowed view of one scale's projection matrices.
#[derive(Debug, Clone)]
pub struct ScaleParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
}

impl ScaleParams {
    pub fn d(&self) -> usize {
        self.wq.dims()[1]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AttentionMeta {
    d: usize,
    d_v: usize,
    d_text: usize,
    /// Block index to channel count.
    scales: BTreeMap<usize, usize>,
    /// Present when parameters are kept per step.
    steps: Option<Vec<usize>>,
    selection: Option<BlockSelection>,
}

/// Learned `W_q`, `W_k`, `W_v` per scale.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    store: ParamStore,
    meta: AttentionMeta,
}

fn key(z: usize, t: Option<usize>) -> String {
    match t {
        Some(t) => format!("attn.{z}.t{t}"),
        None => format!("attn.{z}"),
    }
}

/// Draws every matrix from N(0, 1/fan_in). `scales` pairs each block index
/// with its channel count; `steps` switches to per-step parameters.
pub fn init_params(
    scales: &[(usize, usize)],
    steps: Option<&[usize]>,
    d: usize,
    d_v: usize,
    d_text: usize,
    seed: u64,
) -> Result<AttentionParams> {
    init_params_with_dtype(scales, steps, d, d_v, d_text, seed, DType::F32)
}

pub fn init_params_with_dtype(
    scales: &[(usize, usize)],
    steps: Option<&[usize]>,
    d: usize,
    d_v: usize,
    d_text: usize,
    seed: u64,
    dtype: DType,
) -> Result<AttentionParams> {
    if d == 0 || d_v == 0 || d_text == 0 || scales.is_empty() || scales.iter().any(|s| s.1 == 0) {
        return Err(Error::InvalidDims(format!(
            "d={d} d_v={d_v} d_text={d_text} scales={scales:?}"
        )));
    }
    let mut rng = rng::stream(seed, "attention-init");
    let mut store = ParamStore::new(dtype);
    let step_keys: Vec<Option<usize>> = match steps {
        Some(s) => s.iter().map(|&t| Some(t)).collect(),
        None => vec![None],
    };
    for &(z, c) in scales {
        for &t in &step_keys {
            let k = key(z, t);
            store.gaussian(&format!("{k}.wq"), &[c, d], 1.0 / (c as f64).sqrt(), &mut rng)?;
            store.gaussian(&format!("{k}.wk"), &[d_text, d], 1.0 / (d_text as f64).sqrt(), &mut rng)?;
            store.gaussian(&format!("{k}.wv"), &[d_text, d_v], 1.0 / (d_text as f64).sqrt(), &mut rng)?;
        }
    }
    Ok(AttentionParams {
        store,
        meta: AttentionMeta {
            d,
            d_v,
            d_text,
            scales: scales.iter().copied().collect(),
            steps: steps.map(<[usize]>::to_vec),
            selection: None,
        },
    })
}

impl AttentionParams {
    /// Parameters for every block of `sel`, with channel counts from `registry`.
    pub fn for_selection(
        registry: &BlockRegistry,
        sel: &BlockSelection,
        cfg: &FusionConfig,
        d_text: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::for_selection_with_dtype(registry, sel, cfg, d_text, seed, DType::F32)
    }

    pub fn for_selection_with_dtype(
        registry: &BlockRegistry,
        sel: &BlockSelection,
        cfg: &FusionConfig,
        d_text: usize,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let scales = sel
            .blocks()
            .iter()
            .map(|&b| registry.get(b).map(|i| (b, i.channels)))
            .collect::<Result<Vec<_>>>()?;
        let steps = cfg.per_step.then(|| sel.steps());
        let mut p = init_params_with_dtype(&scales, steps, cfg.d, cfg.d_v, d_text, seed, dtype)?;
        p.meta.selection = Some(sel.clone());
        Ok(p)
    }

    pub fn d(&self) -> usize {
        self.meta.d
    }

    pub fn d_v(&self) -> usize {
        self.meta.d_v
    }

    pub fn d_text(&self) -> usize {
        self.meta.d_text
    }

    pub fn per_step(&self) -> bool {
        self.meta.steps.is_some()
    }

    pub fn selection(&self) -> Option<&BlockSelection> {
        self.meta.selection.as_ref()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Parameters used for block `z` at step `t`.
    pub fn scale(&self, z: usize, t: usize) -> Result<ScaleParams> {
        let k = key(z, self.meta.steps.as_ref().map(|_| t));
        let get = |suffix: &str| {
            self.store
                .get(&format!("{k}.{suffix}"))
                .map(|v| v.as_tensor().clone())
                .ok_or(Error::MissingScaleParams(z))
        };
        Ok(ScaleParams {
            wq: get("wq")?,
            wk: get("wk")?,
            wv: get("wv")?,
        })
    }

    /// Copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            store: self.store.deep_clone()?,
            meta: self.meta.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(
            path,
            FUSION_MAGIC,
            FUSION_VERSION,
            serde_json::to_value(&self.meta)?,
            &self.store,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (version, meta, store) = checkpoint::read(path, FUSION_MAGIC, DType::F32)?;
        if version != FUSION_VERSION {
            return Err(Error::BadCheckpoint(format!(
                "fusion version {version}, expected {FUSION_VERSION}"
            )));
        }
        Ok(Self {
            store,
            meta: serde_json::from_value(meta)?,
        })
    }
}

/// Softmax weights `(P, L)` for pixel rows `hp` `(P, C)` against tokens `t`.
pub fn attention_weights(hp: &Tensor, t: &Tensor, p: &ScaleParams) -> Result<Tensor> {
    check_dims(hp, t, p)?;
    let t = t.to_dtype(p.wk.dtype())?;
    let q = hp.to_dtype(p.wq.dtype())?.matmul(&p.wq)?;
    let k = t.matmul(&p.wk)?;
    let scores = (q.matmul(&k.t()?)? / (p.d() as f64).sqrt())?;
    let shift = scores.max_keepdim(D::Minus1)?.detach();
    let e = scores.broadcast_sub(&shift)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Attention output `(P, d_v)` for pixel rows `hp` `(P, C)`.
pub fn attend_pixels(hp: &Tensor, t: &Tensor, p: &ScaleParams) -> Result<Tensor> {
    let w = attention_weights(hp, t, p)?;
    let v = t.to_dtype(p.wv.dtype())?.matmul(&p.wv)?;
    Ok(w.matmul(&v)?)
}

fn check_dims(hp: &Tensor, t: &Tensor, p: &ScaleParams) -> Result<()> {
    let (_, c) = hp.dims2()?;
    let (_, dt) = t.dims2()?;
    if c != p.wq.dims()[0] {
        return Err(Error::DimensionMismatch(format!(
            "pixel features have {c} channels, W_q expects {}",
            p.wq.dims()[0]
        )));
    }
    if dt != p.wk.dims()[0] || dt != p.wv.dims()[0] {
        return Err(Error::DimensionMismatch(format!(
            "text width {dt}, W_k expects {}, W_v expects {}",
            p.wk.dims()[0],
            p.wv.dims()[0]
        )));
    }
    Ok(())
}

/// Attention at native scale: `h` `(C, h, w)` → `(d_v, h, w)`.
pub fn attend_scale(h: &Tensor, t_emb: &TextEmbedding, p: &ScaleParams) -> Result<Tensor> {
    let (c, hh, ww) = h.dims3()?;
    let hp = h.reshape((c, hh * ww))?.t()?;
    let out = attend_pixels(&hp, t_emb.matrix(), p)?;
    let dv = out.dims()[1];
    Ok(out.t()?.reshape((dv, hh, ww))?)
}

/// `H_{z,t}` at native scale plus their upsampled concatenation `(H, W, n·d_v)`.
#[derive(Debug, Clone)]
pub struct FusedRepresentation {
    pub per_scale: BTreeMap<(usize, usize), Tensor>,
    pub concatenated: Tensor,
}

/// Fuses native maps keyed by `(block, step)` into an `(H, W)` representation.
pub fn fuse_maps(
    natives: &BTreeMap<(usize, usize), Tensor>,
    size: (usize, usize),
    t_emb: &TextEmbedding,
    params: &AttentionParams,
) -> Result<FusedRepresentation> {
    if natives.is_empty() {
        return Err(Error::IncompleteFeatureSet("no maps to fuse".into()));
    }
    let mut per_scale = BTreeMap::new();
    let mut ups = Vec::with_capacity(natives.len());
    for (&(z, t), h) in natives {
        let p = params.scale(z, t)?;
        let out = attend_scale(h, t_emb, &p)?;
        ups.push(upsample_bilinear(&out, size)?);
        per_scale.insert((z, t), out);
    }
    let concatenated = Tensor::cat(&ups, 0)?.permute((1, 2, 0))?.contiguous()?;
    Ok(FusedRepresentation {
        per_scale,
        concatenated,
    })
}

pub fn fuse(
    fs: &PixelFeatureSet,
    t_emb: &TextEmbedding,
    params: &AttentionParams,
) -> Result<FusedRepresentation> {
    fuse_maps(&fs.natives(), fs.size(), t_emb, params)
}
