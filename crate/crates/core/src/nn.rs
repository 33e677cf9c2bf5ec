//! Small NHWC building blocks on top of candle tensors.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted names. Initialization
//! draws from an explicit ChaCha stream so two stores built from the same seed
//! are bitwise identical, which candle's own initializers do not guarantee.

use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named, ordered collection of trainable (or frozen) variables.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.vars.len())
            .field("params", &self.num_params())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a tensor drawn from N(0, std²).
    pub fn gaussian(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::from_vec(vec![value; n], shape, &self.device)?)
    }

    /// Inserts (or replaces) a variable, casting to the store dtype.
    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<Tensor> {
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| Error::BadCheckpoint(format!("missing tensor {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian f32 values, in name order.
    pub fn digest(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for (name, var) in &self.vars {
            hasher.update(name.as_bytes());
            for d in var.dims() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for x in flat_f32(var.as_tensor())? {
                hasher.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(hasher.finalize()))
    }

    /// Deep copy with detached storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParamStore::new(self.dtype);
        for (name, var) in &self.vars {
            out.insert(name, var.as_tensor().copy()?)?;
        }
        Ok(out)
    }
}

pub(crate) fn flat_f32(t: &Tensor) -> Result<Vec<f32>> {
    Ok(t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?)
}

pub(crate) fn flat_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Dense layer `y = x W + b` on the last dimension; `x` is `(N, in)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let weight = store.gaussian(&format!("{name}.weight"), &[fan_in, fan_out], std, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[fan_out], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: store.tensor(&format!("{name}.weight"))?,
            bias: store.tensor(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight)?.broadcast_add(&self.bias)?)
    }

    /// Applies the layer per pixel of an NHWC tensor.
    pub fn forward_nhwc(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let y = self.forward(&x.reshape((b * h * w, c))?)?;
        Ok(y.reshape((b, h, w, self.weight.dim(1)?))?)
    }
}

/// 3x3 same-padding convolution on NHWC input via im2col and a single matmul.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    /// `(9 * in, out)`, rows ordered (ky, kx, c_in).
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv3x3 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let std = (2.0 / (9 * c_in) as f64).sqrt();
        let weight = store.gaussian(&format!("{name}.weight"), &[9 * c_in, c_out], std, rng)?;
        let bias = store.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn from_store(store: &ParamStore, name: &str) -> Result<Self> {
        Ok(Self {
            weight: store.tensor(&format!("{name}.weight"))?,
            bias: store.tensor(&format!("{name}.bias"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let col = x.contiguous()?.apply_op1(Im2Col3x3)?;
        debug_assert_eq!(col.dims(), &[b * h * w, 9 * c]);
        let y = col.matmul(&self.weight)?.broadcast_add(&self.bias)?;
        Ok(y.reshape((b, h, w, self.weight.dim(1)?))?)
    }
}

/// NHWC input `(B, H, W, C)` to patch rows `(B*H*W, 9*C)`, zero padded.
struct Im2Col3x3;

/// Adjoint of [`Im2Col3x3`]: scatters patch rows back onto `(B, H, W, C)`.
struct Col2Im3x3 {
    dims: (usize, usize, usize, usize),
}

fn im2col<T: Copy + Default>(x: &[T], (b, h, w, c): (usize, usize, usize, usize)) -> Vec<T> {
    let mut out = vec![T::default(); b * h * w * 9 * c];
    let row = 9 * c;
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let base = ((n * h + i) * w + j) * row;
                for ky in 0..3 {
                    let si = i + ky;
                    if si < 1 || si > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let sj = j + kx;
                        if sj < 1 || sj > w {
                            continue;
                        }
                        let src = ((n * h + si - 1) * w + sj - 1) * c;
                        let dst = base + (ky * 3 + kx) * c;
                        out[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(
    g: &[T],
    (b, h, w, c): (usize, usize, usize, usize),
) -> Vec<T> {
    let mut out = vec![T::default(); b * h * w * c];
    let row = 9 * c;
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let base = ((n * h + i) * w + j) * row;
                for ky in 0..3 {
                    let si = i + ky;
                    if si < 1 || si > h {
                        continue;
                    }
                    for kx in 0..3 {
                        let sj = j + kx;
                        if sj < 1 || sj > w {
                            continue;
                        }
                        let dst = ((n * h + si - 1) * w + sj - 1) * c;
                        let src = base + (ky * 3 + kx) * c;
                        for (o, v) in out[dst..dst + c].iter_mut().zip(&g[src..src + c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => candle_core::bail!("im2col/col2im need contiguous input"),
    }
}

impl CustomOp1 for Im2Col3x3 {
    fn name(&self) -> &'static str {
        "im2col3x3-nhwc"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l.shape().dims4()?;
        let (b, h, w, c) = dims;
        let shape = Shape::from((b * h * w, 9 * c));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, l)?, dims)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, l)?, dims)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im3x3 { dims })?))
    }
}

impl CustomOp1 for Col2Im3x3 {
    fn name(&self) -> &'static str {
        "col2im3x3-nhwc"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = self.dims;
        if l.shape().dims() != [b * h * w, 9 * c] {
            candle_core::bail!("col2im: unexpected shape {:?}", l.shape());
        }
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, l)?, self.dims)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, l)?, self.dims)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", candle_core::backend::BackendStorage::dtype(other)),
        };
        Ok((out, Shape::from((b, h, w, c))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col3x3)?))
    }
}

/// Group normalization over NHWC input with per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        if channels % groups != 0 {
            return Err(Error::InvalidDims(format!(
                "{channels} channels not divisible into {groups} groups"
            )));
        }
        let gamma = store.constant(&format!("{name}.gamma"), &[channels], 1.0)?;
        let beta = store.constant(&format!("{name}.beta"), &[channels], 0.0)?;
        Ok(Self {
            gamma,
            beta,
            groups,
        })
    }

    pub fn from_store(store: &ParamStore, name: &str, groups: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.tensor(&format!("{name}.gamma"))?,
            beta: store.tensor(&format!("{name}.beta"))?,
            groups,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let normed = x.contiguous()?.apply_op1(GroupNormalize {
            groups: self.groups,
        })?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

const GN_EPS: f64 = 1e-5;

/// Per-sample, per-group standardization of NHWC input (no affine).
struct GroupNormalize {
    groups: usize,
}

/// Mean and inverse std for every (sample, group).
fn group_stats<T: num_like::Float>(x: &[T], b: usize, hw: usize, c: usize, g: usize) -> Vec<(f64, f64)> {
    let cg = c / g;
    let n = (hw * cg) as f64;
    let mut stats = Vec::with_capacity(b * g);
    for s in 0..b {
        let xs = &x[s * hw * c..(s + 1) * hw * c];
        let mut sum = vec![0f64; g];
        let mut sq = vec![0f64; g];
        for px in xs.chunks_exact(c) {
            for (k, v) in px.iter().enumerate() {
                let v = v.to_f64();
                sum[k / cg] += v;
                sq[k / cg] += v * v;
            }
        }
        for k in 0..g {
            let mean = sum[k] / n;
            let var = (sq[k] / n - mean * mean).max(0.0);
            stats.push((mean, 1.0 / (var + GN_EPS).sqrt()));
        }
    }
    stats
}

fn gn_forward<T: num_like::Float>(x: &[T], b: usize, hw: usize, c: usize, g: usize) -> Vec<T> {
    let cg = c / g;
    let stats = group_stats(x, b, hw, c, g);
    let mut out = Vec::with_capacity(x.len());
    for s in 0..b {
        let st = &stats[s * g..(s + 1) * g];
        for px in x[s * hw * c..(s + 1) * hw * c].chunks_exact(c) {
            for (k, v) in px.iter().enumerate() {
                let (m, inv) = st[k / cg];
                out.push(T::from_f64((v.to_f64() - m) * inv));
            }
        }
    }
    out
}

/// `dx = inv · (g − mean(g) − x̂ · mean(g·x̂))` per group.
fn gn_backward<T: num_like::Float>(x: &[T], grad: &[T], b: usize, hw: usize, c: usize, g: usize) -> Vec<T> {
    let cg = c / g;
    let n = (hw * cg) as f64;
    let stats = group_stats(x, b, hw, c, g);
    let mut out = vec![T::from_f64(0.0); x.len()];
    for s in 0..b {
        let st = &stats[s * g..(s + 1) * g];
        let range = s * hw * c..(s + 1) * hw * c;
        let mut gsum = vec![0f64; g];
        let mut gxsum = vec![0f64; g];
        for (px, gp) in x[range.clone()].chunks_exact(c).zip(grad[range.clone()].chunks_exact(c)) {
            for k in 0..c {
                let (m, inv) = st[k / cg];
                let xh = (px[k].to_f64() - m) * inv;
                let gv = gp[k].to_f64();
                gsum[k / cg] += gv;
                gxsum[k / cg] += gv * xh;
            }
        }
        for ((px, gp), op) in x[range.clone()]
            .chunks_exact(c)
            .zip(grad[range.clone()].chunks_exact(c))
            .zip(out[range.clone()].chunks_exact_mut(c))
        {
            for k in 0..c {
                let grp = k / cg;
                let (m, inv) = st[grp];
                let xh = (px[k].to_f64() - m) * inv;
                let d = inv * (gp[k].to_f64() - gsum[grp] / n - xh * gxsum[grp] / n);
                op[k] = T::from_f64(d);
            }
        }
    }
    out
}

mod num_like {
    pub trait Float: Copy {
        fn to_f64(self) -> f64;
        fn from_f64(v: f64) -> Self;
    }
    impl Float for f32 {
        fn to_f64(self) -> f64 {
            self as f64
        }
        fn from_f64(v: f64) -> Self {
            v as f32
        }
    }
    impl Float for f64 {
        fn to_f64(self) -> f64 {
            self
        }
        fn from_f64(v: f64) -> Self {
            v
        }
    }
}

impl CustomOp1 for GroupNormalize {
    fn name(&self) -> &'static str {
        "group-normalize-nhwc"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = l.shape().dims4()?;
        let g = self.groups;
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(gn_forward(contiguous_slice(v, l)?, b, h * w, c, g)),
            CpuStorage::F64(v) => CpuStorage::F64(gn_forward(contiguous_slice(v, l)?, b, h * w, c, g)),
            other => candle_core::bail!(
                "group norm: unsupported dtype {:?}",
                candle_core::backend::BackendStorage::dtype(other)
            ),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, h, w, c) = arg.dims4()?;
        let g = self.groups;
        let grad = grad.contiguous()?;
        let arg = arg.contiguous()?.detach();
        let data = match arg.dtype() {
            DType::F32 => {
                let x = arg.flatten_all()?.to_vec1::<f32>()?;
                let gr = grad.flatten_all()?.to_vec1::<f32>()?;
                Tensor::from_vec(gn_backward(&x, &gr, b, h * w, c, g), (b, h, w, c), arg.device())?
            }
            DType::F64 => {
                let x = arg.flatten_all()?.to_vec1::<f64>()?;
                let gr = grad.flatten_all()?.to_vec1::<f64>()?;
                Tensor::from_vec(gn_backward(&x, &gr, b, h * w, c, g), (b, h, w, c), arg.device())?
            }
            other => candle_core::bail!("group norm: unsupported dtype {other:?}"),
        };
        Ok(Some(data))
    }
}

/// `(B, H, W, C)` -> `(B, H/2, W/2, 4C)`; each output channel block is one 2x2 offset.
pub fn space_to_depth(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let y = x
        .reshape((b, h / 2, 2, w / 2, 2 * c))?
        .transpose(2, 3)?
        .contiguous()?;
    Ok(y.reshape((b, h / 2, w / 2, 4 * c))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c4) = x.dims4()?;
    let c = c4 / 4;
    let y = x
        .reshape((b, h, w, 2, 2 * c))?
        .transpose(2, 3)?
        .contiguous()?;
    Ok(y.reshape((b, 2 * h, 2 * w, c))?)
}

/// Nearest-neighbour 2x upsampling of NHWC input.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    let y = x
        .reshape((b, h, 1, w, 1, c))?
        .broadcast_as((b, h, 2, w, 2, c))?
        .contiguous()?;
    Ok(y.reshape((b, 2 * h, 2 * w, c))?)
}

/// Sinusoidal features of integer timesteps, `(N, dim)` with sin half then cos half.
pub fn timestep_features(steps: &[usize], dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let t = t as f64;
        let freqs: Vec<f64> = (0..half)
            .map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp() * t)
            .collect();
        data.extend(freqs.iter().map(|a| a.sin() as f32));
        data.extend(freqs.iter().map(|a| a.cos() as f32));
    }
    Ok(Tensor::from_vec(data, (steps.len(), 2 * half), device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn nchw_reference_conv(x: &Tensor, conv: &Conv3x3) -> Vec<f32> {
        // direct loop over NHWC input
        let (b, h, w, c) = x.dims4().unwrap();
        let co = conv.weight.dim(1).unwrap();
        let xv = flat_f32(x).unwrap();
        let wv = flat_f32(&conv.weight).unwrap();
        let bv = flat_f32(&conv.bias).unwrap();
        let mut out = vec![0f32; b * h * w * co];
        for n in 0..b {
            for i in 0..h {
                for j in 0..w {
                    for o in 0..co {
                        let mut acc = bv[o];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (si, sj) = (i as isize + ky as isize - 1, j as isize + kx as isize - 1);
                                if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    let xi = ((n * h + si as usize) * w + sj as usize) * c + ci;
                                    let wi = ((ky * 3 + kx) * c + ci) * co + o;
                                    acc += xv[xi] * wv[wi];
                                }
                            }
                        }
                        out[((n * h + i) * w + j) * co + o] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3x3_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(DType::F32);
        let mut conv = Conv3x3::new(&mut store, "c", 3, 4, &mut rng).unwrap();
        conv.bias = Tensor::new(&[0.1f32, -0.2, 0.3, 0.0], &Device::Cpu).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 5, 6, 3), &Device::Cpu).unwrap();
        let got = flat_f32(&conv.forward(&x).unwrap()).unwrap();
        let want = nchw_reference_conv(&x, &conv);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-4, "{g} vs {w}");
        }
    }

    #[test]
    fn conv3x3_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new(DType::F64);
        let conv = Conv3x3::new(&mut store, "c", 2, 3, &mut rng).unwrap();
        let x = Var::from_tensor(
            &Tensor::randn(0f64, 1.0, (1, 4, 3, 2), &Device::Cpu).unwrap(),
        )
        .unwrap();
        let loss = |t: &Tensor| conv.forward(t).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss(x.as_tensor()).backward().unwrap();
        let analytic = flat_f64(grads.get(&x).unwrap()).unwrap();
        let base = flat_f64(x.as_tensor()).unwrap();
        for k in 0..base.len() {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[k] += d;
                let t = Tensor::from_vec(v, (1, 4, 3, 2), &Device::Cpu).unwrap();
                loss(&t).to_scalar::<f64>().unwrap()
            };
            let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            assert!((fd - analytic[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn group_norm_gradient_matches_finite_differences() {
        let mut store = ParamStore::new(DType::F64);
        let gn = GroupNorm::new(&mut store, "g", 4, 2).unwrap();
        let dims = (2, 3, 2, 4);
        let x = Var::from_tensor(&Tensor::randn(0f64, 1.0, dims, &Device::Cpu).unwrap()).unwrap();
        let wts = Tensor::randn(0f64, 1.0, dims, &Device::Cpu).unwrap();
        let loss = |t: &Tensor| {
            gn.forward(t).unwrap().mul(&wts).unwrap().tanh().unwrap().sum_all().unwrap()
        };
        let grads = loss(x.as_tensor()).backward().unwrap();
        let analytic = flat_f64(grads.get(&x).unwrap()).unwrap();
        let base = flat_f64(x.as_tensor()).unwrap();
        for k in 0..base.len() {
            let eval = |d: f64| {
                let mut v = base.clone();
                v[k] += d;
                loss(&Tensor::from_vec(v, dims, &Device::Cpu).unwrap())
                    .to_scalar::<f64>()
                    .unwrap()
            };
            let fd = (eval(1e-5) - eval(-1e-5)) / 2e-5;
            assert!((fd - analytic[k]).abs() < 1e-5 * (1.0 + fd.abs()), "{k}: {fd} vs {}", analytic[k]);
        }
    }

    #[test]
    fn space_depth_roundtrip() {
        let x = Tensor::arange(0f32, 2.0 * 4.0 * 6.0 * 3.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 4, 6, 3))
            .unwrap();
        let s = space_to_depth(&x).unwrap();
        assert_eq!(s.dims(), &[2, 2, 3, 12]);
        let back = depth_to_space(&s).unwrap();
        assert_eq!(flat_f32(&back).unwrap(), flat_f32(&x).unwrap());
    }

    #[test]
    fn nearest_upsample_repeats() {
        let x = Tensor::new(&[[1f32, 2.], [3., 4.]], &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 2, 1))
            .unwrap();
        let y = upsample_nearest2x(&x).unwrap();
        assert_eq!(
            flat_f32(&y).unwrap(),
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn group_norm_zero_mean_unit_var() {
        let mut store = ParamStore::new(DType::F32);
        let gn = GroupNorm::new(&mut store, "gn", 4, 2).unwrap();
        let x = (Tensor::randn(0f32, 3.0, (1, 4, 4, 4), &Device::Cpu).unwrap() + 5.0).unwrap();
        let y = flat_f32(&gn.forward(&x).unwrap()).unwrap();
        let mean: f32 = y.iter().sum::<f32>() / y.len() as f32;
        assert!(mean.abs() < 1e-4);
    }

    #[test]
    fn same_seed_same_store() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut s = ParamStore::new(DType::F32);
            Linear::new(&mut s, "l", 8, 4, &mut rng).unwrap();
            s.digest().unwrap()
        };
        assert_eq!(build(), build());
    }
}
