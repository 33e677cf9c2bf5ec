//! Pixel-level diffusion representations: noise a clean image to each
//! configured step, tap the frozen predictor's decoder, and bring every
//! activation to full resolution.
//!
//! Maps are keyed by `(block, step)` and always assembled in ascending
//! lexicographic order of that key.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{q_sample, BlockRef, BlockRegistry, NoisePredictor, VarianceSchedule};
use crate::error::{Error, Result};
use crate::nn::flat_f32;
use crate::rng::gaussian;

/// Decoder blocks `B` and diffusion steps `t` probed together.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSelection {
    blocks: Vec<usize>,
    steps: Vec<usize>,
}

impl BlockSelection {
    pub fn new(blocks: Vec<usize>, steps: Vec<usize>) -> Result<Self> {
        let increasing = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        if blocks.is_empty() || steps.is_empty() {
            return Err(Error::InvalidConfig(
                "block selection needs at least one block and one step".into(),
            ));
        }
        if !increasing(&blocks) {
            return Err(Error::InvalidConfig(format!(
                "selection.blocks must be strictly increasing, got {blocks:?}"
            )));
        }
        if !increasing(&steps) {
            return Err(Error::InvalidConfig(format!(
                "selection.steps must be strictly increasing, got {steps:?}"
            )));
        }
        if steps[0] == 0 {
            return Err(Error::InvalidConfig("selection.steps are 1-based".into()));
        }
        Ok(Self { blocks, steps })
    }

    /// Checks the selection against a backbone's registry and step count.
    pub fn validate(&self, registry: &BlockRegistry, max_step: usize) -> Result<()> {
        for &b in &self.blocks {
            registry.get(b)?;
        }
        if let Some(&t) = self.steps.iter().find(|&&t| t > max_step) {
            return Err(Error::StepOutOfRange {
                step: t,
                max: max_step,
            });
        }
        Ok(())
    }

    pub fn blocks(&self) -> &[usize] {
        &self.blocks
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    /// Canonical `(block, step)` keys.
    pub fn keys(&self) -> Vec<(usize, usize)> {
        self.blocks
            .iter()
            .flat_map(|&z| self.steps.iter().map(move |&t| (z, t)))
            .collect()
    }

    /// `|steps| · Σ_z C_z` for a registry.
    pub fn assembled_dim(&self, registry: &BlockRegistry) -> Result<usize> {
        let per_step: usize = self
            .blocks
            .iter()
            .map(|&b| registry.get(b).map(|i| i.channels))
            .sum::<Result<usize>>()?;
        Ok(per_step * self.steps.len())
    }

    pub fn block_refs(&self) -> Vec<BlockRef> {
        self.blocks.iter().map(|&b| BlockRef::Decoder(b)).collect()
    }
}

impl fmt::Display for BlockSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(f, "B={{{}}} t={{{}}}", join(&self.blocks), join(&self.steps))
    }
}

/// One probed activation: native `(C, h, w)` and upsampled `(C, H, W)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub native: Tensor,
    pub upsampled: Tensor,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.native.dims()[0]
    }
}

/// Activations `h_{z,t}` for one image, keyed by `(block, step)`.
#[derive(Debug, Clone)]
pub struct PixelFeatureSet {
    size: (usize, usize),
    expected: Option<BlockSelection>,
    maps: BTreeMap<(usize, usize), FeatureMap>,
}

impl PixelFeatureSet {
    /// Empty set for an `(H, W)` image. With `expected`, assembly refuses to
    /// run until every `(z, t)` of the selection is present.
    pub fn new(size: (usize, usize), expected: Option<BlockSelection>) -> Self {
        Self {
            size,
            expected,
            maps: BTreeMap::new(),
        }
    }

    /// Adds a native `(C, h, w)` map, upsampling it to the set's size.
    pub fn insert_native(&mut self, block: usize, step: usize, native: Tensor) -> Result<()> {
        let upsampled = upsample_bilinear(&native, self.size)?;
        self.maps.insert((block, step), FeatureMap { native, upsampled });
        Ok(())
    }

    pub fn size(&self) -> (usize, usize) {
        self.size
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn get(&self, block: usize, step: usize) -> Option<&FeatureMap> {
        self.maps.get(&(block, step))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, usize), &FeatureMap)> {
        self.maps.iter()
    }

    pub fn assembled_dim(&self) -> usize {
        self.maps.values().map(FeatureMap::channels).sum()
    }

    fn check_complete(&self) -> Result<()> {
        if self.maps.is_empty() {
            return Err(Error::IncompleteFeatureSet("no maps".into()));
        }
        if let Some(sel) = &self.expected {
            if let Some((z, t)) = sel.keys().into_iter().find(|k| !self.maps.contains_key(k)) {
                return Err(Error::IncompleteFeatureSet(format!(
                    "missing block {z} at step {t}"
                )));
            }
        }
        Ok(())
    }

    /// Native maps only, keyed canonically.
    pub fn natives(&self) -> BTreeMap<(usize, usize), Tensor> {
        self.maps
            .iter()
            .map(|(k, m)| (*k, m.native.clone()))
            .collect()
    }
}

/// Bilinear upsampling of `(C, h, w)` to `(C, H, W)` on a corner-aligned grid:
/// output index `i` samples source coordinate `i·(h−1)/(H−1)`.
pub fn upsample_bilinear(m: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (c, h, w) = m.dims3()?;
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::DownsampleRequested {
            from: (h, w),
            to: target,
        });
    }
    if (th, tw) == (h, w) {
        return Ok(m.clone());
    }
    let dtype = m.dtype();
    let rw = interpolation_matrix(w, tw, m.device())?.to_dtype(dtype)?;
    let rh = interpolation_matrix(h, th, m.device())?.to_dtype(dtype)?;
    // rows: (C·h, w) x (w, W)
    let y = m
        .contiguous()?
        .reshape((c * h, w))?
        .matmul(&rw.t()?)?
        .reshape((c, h, tw))?;
    let y = y
        .transpose(1, 2)?
        .contiguous()?
        .reshape((c * tw, h))?
        .matmul(&rh.t()?)?
        .reshape((c, tw, th))?;
    Ok(y.transpose(1, 2)?.contiguous()?)
}

/// [`upsample_bilinear`] for channel-last `(h, w, C)` maps.
pub fn upsample_bilinear_hwc(m: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (h, w, c) = m.dims3()?;
    let (th, tw) = target;
    if th < h || tw < w {
        return Err(Error::DownsampleRequested {
            from: (h, w),
            to: target,
        });
    }
    if (th, tw) == (h, w) {
        return Ok(m.clone());
    }
    let dtype = m.dtype();
    let rh = interpolation_matrix(h, th, m.device())?.to_dtype(dtype)?;
    let rw = interpolation_matrix(w, tw, m.device())?.to_dtype(dtype)?;
    let y = rh.matmul(&m.contiguous()?.reshape((h, w * c))?)?;
    let y = y
        .reshape((th, w, c))?
        .transpose(0, 1)?
        .contiguous()?
        .reshape((w, th * c))?;
    let y = rw.matmul(&y)?.reshape((tw, th, c))?;
    Ok(y.transpose(0, 1)?.contiguous()?)
}

/// `(n_out, n_in)` matrix of corner-aligned linear interpolation weights.
pub fn interpolation_matrix(n_in: usize, n_out: usize, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; n_out * n_in];
    for i in 0..n_out {
        let src = if n_out == 1 || n_in == 1 {
            0.0
        } else {
            i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        };
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        data[i * n_in + lo] += (1.0 - frac) as f32;
        if hi != lo {
            data[i * n_in + hi] += frac as f32;
        }
    }
    Ok(Tensor::from_vec(data, (n_out, n_in), device)?)
}

/// Noises `x0` (`(H, W, C)`) to every selected step with a fresh draw, taps the
/// selected decoder blocks and upsamples each activation to `(H, W)`.
pub fn extract(
    x0: &Tensor,
    predictor: &NoisePredictor,
    sel: &BlockSelection,
    sched: &VarianceSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<PixelFeatureSet> {
    let natives = extract_natives(x0, predictor, sel, sched, rng)?;
    let (h, w, _) = x0.dims3()?;
    let mut fs = PixelFeatureSet::new((h, w), Some(sel.clone()));
    for ((block, t), native) in natives {
        fs.insert_native(block, t, native)?;
    }
    Ok(fs)
}

/// The native `(C, h, w)` maps of [`extract`], without upsampling.
pub fn extract_natives(
    x0: &Tensor,
    predictor: &NoisePredictor,
    sel: &BlockSelection,
    sched: &VarianceSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<BTreeMap<(usize, usize), Tensor>> {
    let cfg = predictor.config();
    let (h, w, c) = x0.dims3()?;
    if (h, w) != (cfg.height(), cfg.width()) || c != cfg.channels {
        return Err(Error::ResolutionMismatch {
            expected: (cfg.height(), cfg.width()),
            got: (h, w),
        });
    }
    sel.validate(predictor.registry(), sched.len())?;
    let refs = sel.block_refs();
    let x0 = x0.to_dtype(DType::F32)?;
    let mut out = BTreeMap::new();
    for &t in sel.steps() {
        let eps = gaussian(x0.shape().clone(), rng)?;
        let xt = q_sample(&x0, t, &eps, sched)?.unsqueeze(0)?;
        let (_, taps) = predictor.forward_with_taps(&xt, t, &refs)?;
        for (block, act) in taps {
            let native = act.squeeze(0)?.permute((2, 0, 1))?.contiguous()?.detach();
            out.insert((block, t), native);
        }
    }
    Ok(out)
}

/// Channel-wise concatenation of all upsampled maps into `(H, W, D)`.
pub fn assemble_pixel_vectors(fs: &PixelFeatureSet) -> Result<Tensor> {
    fs.check_complete()?;
    let maps: Vec<&Tensor> = fs.maps.values().map(|m| &m.upsampled).collect();
    Ok(Tensor::cat(&maps, 0)?.permute((1, 2, 0))?.contiguous()?)
}

/// Native maps of one image; the assembled tensor is derived on demand.
#[derive(Debug, Clone)]
pub struct ImageFeatures {
    pub size: (usize, usize),
    pub natives: BTreeMap<(usize, usize), Tensor>,
}

impl ImageFeatures {
    pub fn from_set(fs: &PixelFeatureSet) -> Self {
        Self {
            size: fs.size(),
            natives: fs.natives(),
        }
    }

    /// `(H, W, D)` visual features, identical to [`assemble_pixel_vectors`].
    pub fn assembled(&self) -> Result<Tensor> {
        let mut fs = PixelFeatureSet::new(self.size, None);
        for (&(z, t), m) in &self.natives {
            fs.insert_native(z, t, m.clone())?;
        }
        assemble_pixel_vectors(&fs)
    }
}

const CACHE_MAGIC: &[u8; 8] = b"TXDFFEAT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheHeader {
    image_id: String,
    selection: BlockSelection,
    backbone: String,
    noise_seed: u64,
    natives: Vec<((usize, usize), Vec<usize>)>,
    size: (usize, usize),
}

/// On-disk feature cache: one file per image id holding the native maps (the
/// assembled tensor is an exact function of them). A record is only served
/// when its selection, backbone checksum and noise seed all match the request.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// Cache rooted at `$TEXTDIFF_CACHE` when set, else `fallback`.
    pub fn from_env(fallback: impl Into<PathBuf>) -> Self {
        match std::env::var_os("TEXTDIFF_CACHE") {
            Some(p) if !p.is_empty() => Self::new(PathBuf::from(p)),
            _ => Self::new(fallback),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, image_id: &str) -> PathBuf {
        let mut h = Sha256::new();
        h.update(image_id.as_bytes());
        let tag = hex::encode(&h.finalize()[..4]);
        let safe: String = image_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        self.dir.join(format!("{safe}-{tag}.feat"))
    }

    pub fn load(
        &self,
        image_id: &str,
        sel: &BlockSelection,
        backbone: &str,
        noise_seed: u64,
    ) -> Result<Option<ImageFeatures>> {
        let path = self.path(image_id);
        if !path.exists() {
            return Ok(None);
        }
        let mut r = BufReader::new(File::open(&path)?);
        let mut magic = [0u8; 8];
        if r.read_exact(&mut magic).is_err() || &magic != CACHE_MAGIC {
            return Ok(None);
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let header: CacheHeader = match serde_json::from_slice(&header) {
            Ok(h) => h,
            Err(_) => return Ok(None),
        };
        if header.image_id != image_id
            || &header.selection != sel
            || header.backbone != backbone
            || header.noise_seed != noise_seed
        {
            return Ok(None);
        }
        let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; 4 * n];
            r.read_exact(&mut bytes)?;
            let data: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Tensor::from_vec(data, shape, &Device::Cpu)?)
        };
        let mut natives = BTreeMap::new();
        for (key, shape) in &header.natives {
            natives.insert(*key, read_tensor(shape)?);
        }
        Ok(Some(ImageFeatures {
            size: header.size,
            natives,
        }))
    }

    pub fn store(
        &self,
        image_id: &str,
        sel: &BlockSelection,
        backbone: &str,
        noise_seed: u64,
        feats: &ImageFeatures,
    ) -> Result<()> {
        std::fs::create_dir_all(&self.dir)?;
        let header = CacheHeader {
            image_id: image_id.to_string(),
            selection: sel.clone(),
            backbone: backbone.to_string(),
            noise_seed,
            natives: feats
                .natives
                .iter()
                .map(|(k, t)| (*k, t.dims().to_vec()))
                .collect(),
            size: feats.size,
        };
        let header = serde_json::to_vec(&header)?;
        static WRITES: AtomicU64 = AtomicU64::new(0);
        let n = WRITES.fetch_add(1, Ordering::Relaxed);
        let tmp = self
            .path(image_id)
            .with_extension(format!("{}-{n}.tmp", std::process::id()));
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            w.write_all(CACHE_MAGIC)?;
            w.write_all(&(header.len() as u64).to_le_bytes())?;
            w.write_all(&header)?;
            for t in feats.natives.values() {
                for x in flat_f32(t)? {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            w.flush()?;
        }
        std::fs::rename(tmp, self.path(image_id))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{build_linear_schedule, DiffusionConfig};
    use crate::rng::seeded;

    /// Textbook per-pixel bilinear sampling, written independently of the
    /// matrix formulation above.
    fn naive_bilinear(src: &[f32], h: usize, w: usize, th: usize, tw: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(th * tw);
        for i in 0..th {
            let y = if th > 1 { i as f64 * (h as f64 - 1.0) / (th as f64 - 1.0) } else { 0.0 };
            for j in 0..tw {
                let x = if tw > 1 { j as f64 * (w as f64 - 1.0) / (tw as f64 - 1.0) } else { 0.0 };
                let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                let (dy, dx) = (y - y0 as f64, x - x0 as f64);
                let at = |r: usize, c: usize| src[r * w + c] as f64;
                let v = at(y0, x0) * (1.0 - dy) * (1.0 - dx)
                    + at(y0, x1) * (1.0 - dy) * dx
                    + at(y1, x0) * dy * (1.0 - dx)
                    + at(y1, x1) * dy * dx;
                out.push(v as f32);
            }
        }
        out
    }

    #[test]
    fn corner_aligned_ramp() {
        let m = Tensor::new(&[[[0f32, 1.], [0., 1.]]], &Device::Cpu).unwrap();
        let up = upsample_bilinear(&m, (4, 4)).unwrap();
        let rows = up.squeeze(0).unwrap().to_vec2::<f32>().unwrap();
        for row in rows {
            for (got, want) in row.iter().zip([0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]) {
                assert!((got - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_stays_constant() {
        let m = (Tensor::ones((3, 5, 7), DType::F32, &Device::Cpu).unwrap() * 2.5).unwrap();
        let up = upsample_bilinear(&m, (16, 32)).unwrap();
        assert_eq!(up.dims(), &[3, 16, 32]);
        for v in flat_f32(&up).unwrap() {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn random_map_matches_naive_oracle() {
        let mut rng = seeded(9);
        let m = gaussian((2usize, 7usize, 5usize), &mut rng).unwrap();
        let up = upsample_bilinear(&m, (256, 256)).unwrap();
        let src = flat_f32(&m).unwrap();
        let got = flat_f32(&up).unwrap();
        for ch in 0..2 {
            let want = naive_bilinear(&src[ch * 35..(ch + 1) * 35], 7, 5, 256, 256);
            let g = &got[ch * 65536..(ch + 1) * 65536];
            let max = g.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0f32, f32::max);
            assert!(max < 1e-6, "max err {max}");
        }
    }

    #[test]
    fn channel_last_matches_channel_first() {
        let m = gaussian((3usize, 4usize, 6usize), &mut seeded(4)).unwrap();
        let a = upsample_bilinear(&m, (16, 12)).unwrap().permute((1, 2, 0)).unwrap();
        let b = upsample_bilinear_hwc(&m.permute((1, 2, 0)).unwrap(), (16, 12)).unwrap();
        let (a, b) = (flat_f32(&a.contiguous().unwrap()).unwrap(), flat_f32(&b).unwrap());
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn downsample_rejected() {
        let m = Tensor::zeros((1, 8, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            upsample_bilinear(&m, (4, 8)),
            Err(Error::DownsampleRequested { .. })
        ));
    }

    #[test]
    fn selection_invariants() {
        assert!(BlockSelection::new(vec![], vec![50]).is_err());
        assert!(BlockSelection::new(vec![8, 6], vec![50]).is_err());
        assert!(BlockSelection::new(vec![6], vec![150, 50]).is_err());
        let reg = BlockRegistry::for_config(&DiffusionConfig::default());
        let sel = BlockSelection::new(vec![6, 8, 12, 16], vec![50, 150, 250]).unwrap();
        sel.validate(&reg, 1000).unwrap();
        // 64 + 64 + 32 + 32 channels, three steps
        assert_eq!(sel.assembled_dim(&reg).unwrap(), 576);
        let bad = BlockSelection::new(vec![6, 17], vec![50]).unwrap();
        assert!(matches!(bad.validate(&reg, 1000), Err(Error::UnknownBlockIndex(17))));
        let late = BlockSelection::new(vec![6], vec![1001]).unwrap();
        assert!(late.validate(&reg, 1000).is_err());
    }

    #[test]
    fn assembly_order_is_canonical() {
        let dev = Device::Cpu;
        let a = Tensor::ones((3, 2, 2), DType::F32, &dev).unwrap();
        let b = (Tensor::ones((5, 2, 2), DType::F32, &dev).unwrap() * 2.0).unwrap();
        let mut first = PixelFeatureSet::new((4, 4), None);
        first.insert_native(4, 50, a.clone()).unwrap();
        first.insert_native(6, 50, b.clone()).unwrap();
        let mut second = PixelFeatureSet::new((4, 4), None);
        second.insert_native(6, 50, b).unwrap();
        second.insert_native(4, 50, a).unwrap();
        let x = assemble_pixel_vectors(&first).unwrap();
        let y = assemble_pixel_vectors(&second).unwrap();
        assert_eq!(x.dims(), &[4, 4, 8]);
        assert_eq!(flat_f32(&x).unwrap(), flat_f32(&y).unwrap());
        let px = x.get(0).unwrap().get(0).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(px, vec![1., 1., 1., 2., 2., 2., 2., 2.]);
    }

    #[test]
    fn incomplete_set_rejected() {
        let sel = BlockSelection::new(vec![4, 6], vec![50]).unwrap();
        let mut fs = PixelFeatureSet::new((4, 4), Some(sel));
        assert!(matches!(
            assemble_pixel_vectors(&fs),
            Err(Error::IncompleteFeatureSet(_))
        ));
        fs.insert_native(4, 50, Tensor::zeros((2, 2, 2), DType::F32, &Device::Cpu).unwrap())
            .unwrap();
        assert!(matches!(
            assemble_pixel_vectors(&fs),
            Err(Error::IncompleteFeatureSet(_))
        ));
    }

    fn tiny_backbone() -> (NoisePredictor, VarianceSchedule) {
        let cfg = DiffusionConfig {
            image_size: [16, 16],
            base_width: 8,
            ..Default::default()
        };
        let sched = build_linear_schedule(&cfg).unwrap();
        (NoisePredictor::new(&cfg).unwrap().frozen().unwrap(), sched)
    }

    #[test]
    fn extract_shapes_determinism_and_frozen_weights() {
        let (p, sched) = tiny_backbone();
        let before = p.checksum().unwrap();
        let x0 = gaussian((16usize, 16usize, 1usize), &mut seeded(1)).unwrap();
        let sel = BlockSelection::new(vec![6, 8, 12, 16], vec![50, 150, 250]).unwrap();
        let fs = extract(&x0, &p, &sel, &sched, &mut seeded(2)).unwrap();
        assert_eq!(fs.len(), 12);
        assert_eq!(fs.assembled_dim(), sel.assembled_dim(p.registry()).unwrap());
        for (_, m) in fs.iter() {
            assert_eq!(&m.upsampled.dims()[1..], &[16, 16]);
        }
        let again = extract(&x0, &p, &sel, &sched, &mut seeded(2)).unwrap();
        assert_eq!(
            flat_f32(&assemble_pixel_vectors(&fs).unwrap()).unwrap(),
            flat_f32(&assemble_pixel_vectors(&again).unwrap()).unwrap()
        );
        assert_eq!(p.checksum().unwrap(), before);

        let one = BlockSelection::new(vec![12], vec![50]).unwrap();
        let fs = extract(&x0, &p, &one, &sched, &mut seeded(2)).unwrap();
        assert_eq!(fs.assembled_dim(), 8);
    }

    #[test]
    fn extract_rejects_wrong_resolution() {
        let (p, sched) = tiny_backbone();
        let x0 = Tensor::zeros((32, 32, 1), DType::F32, &Device::Cpu).unwrap();
        let sel = BlockSelection::new(vec![6], vec![50]).unwrap();
        assert!(matches!(
            extract(&x0, &p, &sel, &sched, &mut seeded(0)),
            Err(Error::ResolutionMismatch { .. })
        ));
    }

    #[test]
    fn cache_roundtrip_and_invalidation() {
        let (p, sched) = tiny_backbone();
        let x0 = gaussian((16usize, 16usize, 1usize), &mut seeded(1)).unwrap();
        let sel = BlockSelection::new(vec![6, 12], vec![50]).unwrap();
        let fs = extract(&x0, &p, &sel, &sched, &mut seeded(2)).unwrap();
        let feats = ImageFeatures::from_set(&fs);
        let dir = tempfile::tempdir().unwrap();
        let cache = FeatureCache::new(dir.path());
        let sum = p.checksum().unwrap();
        cache.store("img_001", &sel, &sum, 2, &feats).unwrap();
        let back = cache.load("img_001", &sel, &sum, 2).unwrap().unwrap();
        assert_eq!(
            flat_f32(&back.assembled().unwrap()).unwrap(),
            flat_f32(&assemble_pixel_vectors(&fs).unwrap()).unwrap()
        );
        assert_eq!(back.natives.len(), 2);
        let other = BlockSelection::new(vec![6], vec![50]).unwrap();
        assert!(cache.load("img_001", &other, &sum, 2).unwrap().is_none());
        assert!(cache.load("img_001", &sel, "deadbeef", 2).unwrap().is_none());
        assert!(cache.load("img_001", &sel, &sum, 3).unwrap().is_none());
        assert!(cache.load("img_002", &sel, &sum, 2).unwrap().is_none());
    }
}
