//! UNet-shaped noise predictor with a numbered decoder-block registry.
//!
//! Layout for base width `w` and an `H x W` input (NHWC throughout):
//!
//! ```text
//! stem   space-to-depth + 1x1          -> w   @ H/2
//! enc 1  res                            -> w   @ H/2   (skip s1; stem is s0)
//! enc 2  down                           -> 2w  @ H/4
//! enc 3  res                            -> 2w  @ H/4   (skip s2)
//! enc 4  down                           -> 4w  @ H/8
//! enc 5  res                            -> 4w  @ H/8   (skip s3)
//! enc 6  mid res                        -> 4w  @ H/8
//! dec 1..=16, coarsest first (see DECODER_LAYOUT)
//! head   norm, silu, 1x1, depth-to-space -> C  @ H
//! ```

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{DiffusionConfig, VarianceSchedule};
use crate::error::{Error, Result};
use crate::nn::{
    depth_to_space, space_to_depth, timestep_features, upsample_nearest2x, Conv3x3, GroupNorm,
    Linear, ParamStore,
};

const GROUPS: usize = 8;
pub const ENCODER_BLOCKS: usize = 7;
pub const DECODER_BLOCKS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    /// Concatenates an encoder skip, then conv.
    Merge,
    /// Residual conv at constant width and resolution.
    Res,
    /// Nearest 2x upsample, then conv to the next level's width.
    Up,
}

/// (kind, level after the block, skip consumed). Levels: 0 = H/2, 1 = H/4, 2 = H/8.
const DECODER_LAYOUT: [(BlockKind, usize, Option<usize>); DECODER_BLOCKS] = [
    (BlockKind::Merge, 2, Some(3)),
    (BlockKind::Res, 2, None),
    (BlockKind::Res, 2, None),
    (BlockKind::Res, 2, None),
    (BlockKind::Up, 1, None),
    (BlockKind::Merge, 1, Some(2)),
    (BlockKind::Res, 1, None),
    (BlockKind::Res, 1, None),
    (BlockKind::Res, 1, None),
    (BlockKind::Up, 0, None),
    (BlockKind::Merge, 0, Some(1)),
    (BlockKind::Res, 0, None),
    (BlockKind::Merge, 0, Some(0)),
    (BlockKind::Res, 0, None),
    (BlockKind::Res, 0, None),
    (BlockKind::Res, 0, None),
];

/// Static description of one decoder block's output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub index: usize,
    pub kind: BlockKind,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Reference to a network block as requested by a caller.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRef {
    Decoder(usize),
    Encoder(usize),
}

impl std::str::FromStr for BlockRef {
    type Err = Error;

    /// `"6"` or `"d6"` name decoder block 6; `"e2"` names encoder block 2.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::InvalidConfig(format!("bad block reference {s:?}"));
        if let Some(rest) = s.strip_prefix('e') {
            rest.parse().map(BlockRef::Encoder).map_err(|_| bad())
        } else {
            let rest = s.strip_prefix('d').unwrap_or(s);
            rest.parse().map(BlockRef::Decoder).map_err(|_| bad())
        }
    }
}

/// Decoder registry for an architecture; indices are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRegistry {
    blocks: Vec<BlockInfo>,
}

impl BlockRegistry {
    pub fn for_config(config: &DiffusionConfig) -> Self {
        let w = config.base_width;
        let blocks = DECODER_LAYOUT
            .iter()
            .enumerate()
            .map(|(i, &(kind, level, _))| BlockInfo {
                index: i + 1,
                kind,
                channels: w << level,
                height: config.height() >> (level + 1),
                width: config.width() >> (level + 1),
            })
            .collect();
        Self { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<&BlockInfo> {
        if index == 0 || index > self.blocks.len() {
            return Err(Error::UnknownBlockIndex(index));
        }
        Ok(&self.blocks[index - 1])
    }

    pub fn blocks(&self) -> &[BlockInfo] {
        &self.blocks
    }

    /// Resolves caller references to decoder indices.
    pub fn resolve(&self, refs: &[BlockRef]) -> Result<BTreeSet<usize>> {
        refs.iter()
            .map(|r| match *r {
                BlockRef::Decoder(i) => self.get(i).map(|b| b.index),
                BlockRef::Encoder(i) if i < ENCODER_BLOCKS => Err(Error::EncoderBlockRequested(i)),
                BlockRef::Encoder(i) => Err(Error::UnknownBlockIndex(i)),
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct ConvBlock {
    kind: BlockKind,
    conv: Conv3x3,
    norm: GroupNorm,
    temb: Linear,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        kind: BlockKind,
        c_in: usize,
        c_out: usize,
        temb_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            kind,
            conv: Conv3x3::new(store, &format!("{name}.conv"), c_in, c_out, rng)?,
            norm: GroupNorm::new(store, &format!("{name}.norm"), c_out, GROUPS)?,
            temb: Linear::new(store, &format!("{name}.temb"), temb_dim, c_out, rng)?,
        })
    }

    fn load(store: &ParamStore, name: &str, kind: BlockKind) -> Result<Self> {
        Ok(Self {
            kind,
            conv: Conv3x3::from_store(store, &format!("{name}.conv"))?,
            norm: GroupNorm::from_store(store, &format!("{name}.norm"), GROUPS)?,
            temb: Linear::from_store(store, &format!("{name}.temb"))?,
        })
    }

    fn forward(&self, x: &Tensor, skip: Option<&Tensor>, temb_act: &Tensor) -> Result<Tensor> {
        let input = match (self.kind, skip) {
            (BlockKind::Merge, Some(s)) => Tensor::cat(&[x, s], 3)?,
            (BlockKind::Up, _) => upsample_nearest2x(x)?,
            _ => x.clone(),
        };
        let h = self.norm.forward(&self.conv.forward(&input)?)?;
        let (b, _, _, c) = h.dims4()?;
        let t = self.temb.forward(temb_act)?.reshape((b, 1, 1, c))?;
        let h = h.broadcast_add(&t)?.silu()?;
        Ok(match self.kind {
            BlockKind::Res => (x + h)?,
            _ => h,
        })
    }
}

#[derive(Debug, Clone)]
struct Layers {
    temb1: Linear,
    temb2: Linear,
    stem: Linear,
    enc_res: [ConvBlock; 4],
    down: [Linear; 2],
    dec: Vec<ConvBlock>,
    head_norm: GroupNorm,
    head: Linear,
}

/// Trainable noise predictor `ε_θ(x_t, t)`.
#[derive(Debug, Clone)]
pub struct NoisePredictor {
    config: DiffusionConfig,
    registry: BlockRegistry,
    store: ParamStore,
    layers: Layers,
    frozen: bool,
    /// Per-epoch mean ε-prediction loss recorded by training.
    pub loss_trace: Vec<f64>,
}

fn time_dim(w: usize) -> usize {
    2 * w
}

impl NoisePredictor {
    /// Fresh network with deterministic initialization from `config.seed`.
    pub fn new(config: &DiffusionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_b0b0);
        let mut store = ParamStore::new(DType::F32);
        let w = config.base_width;
        let c = config.channels;
        let td = time_dim(w);
        let te = 4 * w;
        let s = &mut store;
        let r = &mut rng;
        let temb1 = Linear::new(s, "temb.l1", td, te, r)?;
        let temb2 = Linear::new(s, "temb.l2", te, te, r)?;
        let stem = Linear::new(s, "stem", 4 * c, w, r)?;
        let enc_res = [
            ConvBlock::new(s, "enc.1", BlockKind::Res, w, w, te, r)?,
            ConvBlock::new(s, "enc.3", BlockKind::Res, 2 * w, 2 * w, te, r)?,
            ConvBlock::new(s, "enc.5", BlockKind::Res, 4 * w, 4 * w, te, r)?,
            ConvBlock::new(s, "enc.6", BlockKind::Res, 4 * w, 4 * w, te, r)?,
        ];
        let down = [
            Linear::new(s, "enc.2", 4 * w, 2 * w, r)?,
            Linear::new(s, "enc.4", 8 * w, 4 * w, r)?,
        ];
        let skip_widths = [w, w, 2 * w, 4 * w];
        let mut dec = Vec::with_capacity(DECODER_BLOCKS);
        let mut width = 4 * w;
        for (i, &(kind, level, skip)) in DECODER_LAYOUT.iter().enumerate() {
            let out = w << level;
            let c_in = match skip {
                Some(k) => width + skip_widths[k],
                None => width,
            };
            dec.push(ConvBlock::new(s, &format!("dec.{}", i + 1), kind, c_in, out, te, r)?);
            width = out;
        }
        let head_norm = GroupNorm::new(s, "head.norm", w, GROUPS)?;
        let head = Linear::new(s, "head.out", w, 4 * c, r)?;
        let layers = Layers {
            temb1,
            temb2,
            stem,
            enc_res,
            down,
            dec,
            head_norm,
            head,
        };
        Ok(Self {
            config: config.clone(),
            registry: BlockRegistry::for_config(config),
            store,
            layers,
            frozen: false,
            loss_trace: Vec::new(),
        })
    }

    /// Rebuilds from a parameter store. Frozen predictors run on detached
    /// tensors so no autograd graph ever reaches the store.
    pub fn from_store(config: &DiffusionConfig, store: ParamStore, frozen: bool) -> Result<Self> {
        config.validate()?;
        let view = if frozen {
            let mut v = ParamStore::new(store.dtype());
            for (name, var) in store.iter() {
                v.insert(name, var.as_tensor().detach())?;
            }
            v
        } else {
            store.clone()
        };
        let load_block = |name: &str, kind| ConvBlock::load(&view, name, kind);
        let layers = Layers {
            temb1: Linear::from_store(&view, "temb.l1")?,
            temb2: Linear::from_store(&view, "temb.l2")?,
            stem: Linear::from_store(&view, "stem")?,
            enc_res: [
                load_block("enc.1", BlockKind::Res)?,
                load_block("enc.3", BlockKind::Res)?,
                load_block("enc.5", BlockKind::Res)?,
                load_block("enc.6", BlockKind::Res)?,
            ],
            down: [
                Linear::from_store(&view, "enc.2")?,
                Linear::from_store(&view, "enc.4")?,
            ],
            dec: DECODER_LAYOUT
                .iter()
                .enumerate()
                .map(|(i, &(kind, _, _))| load_block(&format!("dec.{}", i + 1), kind))
                .collect::<Result<_>>()?,
            head_norm: GroupNorm::from_store(&view, "head.norm", GROUPS)?,
            head: Linear::from_store(&view, "head.out")?,
        };
        Ok(Self {
            config: config.clone(),
            registry: BlockRegistry::for_config(config),
            store,
            layers,
            frozen,
            loss_trace: Vec::new(),
        })
    }

    /// Same weights, detached for inference.
    pub fn frozen(&self) -> Result<Self> {
        let mut p = Self::from_store(&self.config, self.store.clone(), true)?;
        p.loss_trace = self.loss_trace.clone();
        Ok(p)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn config(&self) -> &DiffusionConfig {
        &self.config
    }

    pub fn registry(&self) -> &BlockRegistry {
        &self.registry
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// SHA-256 of all weights.
    pub fn checksum(&self) -> Result<String> {
        self.store.digest()
    }

    fn check_input(&self, xt: &Tensor) -> Result<usize> {
        let (b, h, w, c) = xt.dims4()?;
        if (h, w) != (self.config.height(), self.config.width()) || c != self.config.channels {
            return Err(Error::ShapeMismatch(format!(
                "predictor expects (B, {}, {}, {}), got {:?}",
                self.config.height(),
                self.config.width(),
                self.config.channels,
                xt.dims()
            )));
        }
        Ok(b)
    }

    /// `ε̂` for a batch `(B, H, W, C)` with one step per entry.
    pub fn predict(&self, xt: &Tensor, steps: &[usize]) -> Result<Tensor> {
        Ok(self.forward_impl(xt, steps, &BTreeSet::new())?.0)
    }

    /// Forward pass that also captures the outputs of the requested decoder
    /// blocks, NHWC and at native resolution. Capturing only clones handles;
    /// `ε̂` is identical to [`predict`](Self::predict).
    pub fn forward_with_taps(
        &self,
        xt: &Tensor,
        t: usize,
        blocks: &[BlockRef],
    ) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        let taps = self.registry.resolve(blocks)?;
        let b = self.check_input(xt)?;
        self.forward_impl(xt, &vec![t; b], &taps)
    }

    fn forward_impl(
        &self,
        xt: &Tensor,
        steps: &[usize],
        taps: &BTreeSet<usize>,
    ) -> Result<(Tensor, BTreeMap<usize, Tensor>)> {
        let b = self.check_input(xt)?;
        if steps.len() != b {
            return Err(Error::ShapeMismatch(format!(
                "{} steps for batch of {b}",
                steps.len()
            )));
        }
        if let Some(&t) = steps.iter().find(|&&t| t == 0 || t > self.config.steps) {
            return Err(Error::StepOutOfRange {
                step: t,
                max: self.config.steps,
            });
        }
        let l = &self.layers;
        let dtype = l.stem.weight.dtype();
        let xt = xt.to_dtype(dtype)?;
        let tf = timestep_features(steps, time_dim(self.config.base_width), xt.device())?
            .to_dtype(dtype)?;
        let temb = l.temb2.forward(&l.temb1.forward(&tf)?.silu()?)?;
        let temb_act = temb.silu()?;

        let s0 = l.stem.forward_nhwc(&space_to_depth(&xt)?)?;
        let s1 = l.enc_res[0].forward(&s0, None, &temb_act)?;
        let h = l.down[0].forward_nhwc(&space_to_depth(&s1)?)?;
        let s2 = l.enc_res[1].forward(&h, None, &temb_act)?;
        let h = l.down[1].forward_nhwc(&space_to_depth(&s2)?)?;
        let s3 = l.enc_res[2].forward(&h, None, &temb_act)?;
        let mut h = l.enc_res[3].forward(&s3, None, &temb_act)?;
        let skips = [&s0, &s1, &s2, &s3];

        let mut captured = BTreeMap::new();
        for (i, block) in l.dec.iter().enumerate() {
            let skip = DECODER_LAYOUT[i].2.map(|k| skips[k]);
            h = block.forward(&h, skip, &temb_act)?;
            if taps.contains(&(i + 1)) {
                captured.insert(i + 1, h.clone());
            }
        }
        let out = l.head.forward_nhwc(&l.head_norm.forward(&h)?.silu()?)?;
        Ok((depth_to_space(&out)?, captured))
    }

    /// Posterior mean `μ_θ(x_t, t)` for a batch at a single step.
    pub fn posterior_mean(&self, xt: &Tensor, t: usize, sched: &VarianceSchedule) -> Result<Tensor> {
        let b = self.check_input(xt)?;
        let eps = self.predict(xt, &vec![t; b])?;
        super::sampling::posterior_mean_from_eps(xt, &eps, t, sched)
    }
}
