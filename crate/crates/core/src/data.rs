//! Synthetic two-shape data, folder loading and train/test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::{GrayImage, ImageBuffer, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::flat_f32;
use crate::rng;
use crate::text::{read_annotations, write_annotations};

/// One `(image, text, mask)` triple. Images are `(H, W, C)` in `[−1, 1]`,
/// masks `(H, W)` with values in `{0, 1}`.
#[derive(Debug, Clone)]
pub struct SegmentationSample {
    pub image_id: String,
    pub image: Tensor,
    pub text: String,
    pub mask: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64 },
    Folder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRole {
    All,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: Option<PathBuf>,
    pub resolution: (usize, usize),
    pub provenance: Provenance,
    pub role: SplitRole,
    pub ids: Vec<String>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Manifest plus its materialized samples, in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SegmentationSample>,
}

impl Dataset {
    pub fn get(&self, id: &str) -> Option<&SegmentationSample> {
        self.samples.iter().find(|s| s.image_id == id)
    }

    /// Samples for the ids of `manifest`, in its order.
    pub fn select(&self, manifest: &DatasetManifest) -> Result<Vec<SegmentationSample>> {
        let by_id: BTreeMap<&str, &SegmentationSample> =
            self.samples.iter().map(|s| (s.image_id.as_str(), s)).collect();
        manifest
            .ids
            .iter()
            .map(|id| {
                by_id
                    .get(id.as_str())
                    .map(|s| (*s).clone())
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown image id {id}")))
            })
            .collect()
    }

    pub fn images(&self) -> Vec<Tensor> {
        self.samples.iter().map(|s| s.image.clone()).collect()
    }
}

/// Uniform split without replacement into `train_n` training ids and the rest.
pub fn split(
    manifest: &DatasetManifest,
    train_n: usize,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if train_n >= manifest.ids.len() || train_n == 0 {
        return Err(Error::TrainNTooLarge {
            train_n,
            total: manifest.ids.len(),
        });
    }
    let mut ids = manifest.ids.clone();
    ids.sort();
    ids.shuffle(&mut rng::stream(seed, "split"));
    let test = ids.split_off(train_n);
    let part = |role, ids| DatasetManifest {
        role,
        ids,
        ..manifest.clone()
    };
    Ok((part(SplitRole::Train, ids), part(SplitRole::Test, test)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeClass {
    Round,
    Square,
}

impl ShapeClass {
    pub fn word(self) -> &'static str {
        match self {
            ShapeClass::Round => "round",
            ShapeClass::Square => "square",
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Shape {
    class: ShapeClass,
    cy: f64,
    cx: f64,
    /// Outer ring radius or square half-side.
    size: f64,
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        match self.class {
            ShapeClass::Round => {
                let r2 = dy * dy + dx * dx;
                r2 <= self.size * self.size && r2 >= (RING_INNER * self.size).powi(2)
            }
            ShapeClass::Square => dy.abs() <= self.size && dx.abs() <= self.size,
        }
    }

    fn radius(&self) -> f64 {
        match self.class {
            ShapeClass::Round => self.size,
            ShapeClass::Square => self.size * std::f64::consts::SQRT_2,
        }
    }
}

/// Inner radius of the ring as a fraction of the outer radius.
const RING_INNER: f64 = 0.55;

const TEMPLATES: [&str; 3] = [
    "the lesion is the {cls} opacity in the {pos}",
    "a {cls} lesion located in the {pos} region",
    "segment the {cls} structure near the {pos}",
];

fn place(class: ShapeClass, size: f64, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Option<Shape> {
    let margin = size + 2.0;
    if 2.0 * margin >= h as f64 || 2.0 * margin >= w as f64 {
        return None;
    }
    Some(Shape {
        class,
        cy: rng.gen_range(margin..h as f64 - margin),
        cx: rng.gen_range(margin..w as f64 - margin),
        size,
    })
}

fn synth_one(
    index: usize,
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(String, Vec<u8>, String, Vec<u8>, ShapeClass)> {
    let m = h.min(w) as f64;
    if h.min(w) < 16 {
        return Err(Error::ShapesUnplaceable(h, w));
    }
    let radius = rng.gen_range(0.12 * m..0.19 * m);
    // equal-area square half-side, drawn independently
    let area = 1.0 - RING_INNER * RING_INNER;
    let half = rng.gen_range(0.12 * m..0.19 * m) * (area * std::f64::consts::PI).sqrt() / 2.0;
    let mut shapes = None;
    for _ in 0..200 {
        let (Some(a), Some(b)) = (
            place(ShapeClass::Round, radius, h, w, rng),
            place(ShapeClass::Square, half, h, w, rng),
        ) else {
            return Err(Error::ShapesUnplaceable(h, w));
        };
        let dist = ((a.cy - b.cy).powi(2) + (a.cx - b.cx).powi(2)).sqrt();
        if dist > a.radius() + b.radius() + 3.0 {
            shapes = Some([a, b]);
            break;
        }
    }
    let shapes = shapes.ok_or(Error::ShapesUnplaceable(h, w))?;
    let target = if rng.gen_bool(0.5) { 0 } else { 1 };
    let background = rng.gen_range(-0.7..-0.5);
    let levels = [rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6)];
    let mut pixels = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let mut v: f64 = background;
            for (s, level) in shapes.iter().zip(levels) {
                if s.contains(y, x) {
                    v = level;
                }
            }
            v += 0.08 * rng.sample::<f64, _>(StandardNormal);
            pixels.push(to_u8(v));
            mask.push(shapes[target].contains(y, x) as u8);
        }
    }
    let t = &shapes[target];
    let vertical = if t.cy < h as f64 / 2.0 { "upper" } else { "lower" };
    let horizontal = if t.cx < w as f64 / 2.0 { "left" } else { "right" };
    let text = TEMPLATES[rng.gen_range(0..TEMPLATES.len())]
        .replace("{cls}", t.class.word())
        .replace("{pos}", &format!("{vertical} {horizontal}"));
    Ok((format!("syn_{index:04}"), pixels, text, mask, t.class))
}

fn to_u8(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_u8(data: &[u8], shape: (usize, usize, usize)) -> Result<Tensor> {
    let v: Vec<f32> = data.iter().map(|&u| u as f32 / 127.5 - 1.0).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

fn mask_tensor(bits: &[u8], h: usize, w: usize) -> Result<Tensor> {
    let v: Vec<f32> = bits.iter().map(|&b| (b != 0) as u8 as f32).collect();
    Ok(Tensor::from_vec(v, (h, w), &Device::Cpu)?)
}

/// `n` grayscale images, each with one ring and one square; the text names
/// the target shape and the mask covers only that shape. Pixel values are
/// 8-bit quantized so a save/load round trip is exact.
pub fn generate_synthetic(n: usize, resolution: (usize, usize), seed: u64) -> Result<Dataset> {
    Ok(generate_synthetic_with_classes(n, resolution, seed)?.0)
}

/// As [`generate_synthetic`], also returning each sample's target class.
pub fn generate_synthetic_with_classes(
    n: usize,
    resolution: (usize, usize),
    seed: u64,
) -> Result<(Dataset, Vec<ShapeClass>)> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 samples, got {n}")));
    }
    let (h, w) = resolution;
    let mut rng = rng::stream(seed, "synthetic");
    let mut samples = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let (id, pixels, text, mask, class) = synth_one(i, h, w, &mut rng)?;
        samples.push(SegmentationSample {
            image_id: id,
            image: from_u8(&pixels, (h, w, 1))?,
            text,
            mask: mask_tensor(&mask, h, w)?,
        });
        classes.push(class);
    }
    let manifest = DatasetManifest {
        root: None,
        resolution,
        provenance: Provenance::Synthetic { seed },
        role: SplitRole::All,
        ids: samples.iter().map(|s| s.image_id.clone()).collect(),
    };
    Ok((Dataset { manifest, samples }, classes))
}

/// Writes `images/`, `masks/`, `texts.csv` and `manifest.json` under `root`.
pub fn save_folder(ds: &Dataset, root: &Path) -> Result<()> {
    std::fs::create_dir_all(root.join("images"))?;
    std::fs::create_dir_all(root.join("masks"))?;
    for s in &ds.samples {
        let (h, w, c) = s.image.dims3()?;
        let px: Vec<u8> = flat_f32(&s.image)?.into_iter().map(|v| to_u8(v as f64)).collect();
        let path = root.join("images").join(format!("{}.png", s.image_id));
        match c {
            1 => GrayImage::from_raw(w as u32, h as u32, px)
                .expect("buffer sized from tensor")
                .save(&path)?,
            3 => RgbImage::from_raw(w as u32, h as u32, px)
                .expect("buffer sized from tensor")
                .save(&path)?,
            _ => return Err(Error::InvalidConfig(format!("cannot save {c}-channel images"))),
        }
        let m: Vec<u8> = flat_f32(&s.mask)?.into_iter().map(|v| if v > 0.5 { 255 } else { 0 }).collect();
        GrayImage::from_raw(w as u32, h as u32, m)
            .expect("buffer sized from tensor")
            .save(root.join("masks").join(format!("{}.png", s.image_id)))?;
    }
    write_annotations(
        &root.join("texts.csv"),
        ds.samples.iter().map(|s| (s.image_id.as_str(), s.text.as_str())),
    )?;
    let mut manifest = ds.manifest.clone();
    manifest.root = Some(root.to_path_buf());
    std::fs::write(root.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads `root/images/*.png` with matching `masks/` and `texts.csv` rows,
/// resizing images bilinearly and masks by nearest neighbour.
pub fn load_folder(root: &Path, resolution: (usize, usize), channels: usize) -> Result<Dataset> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidConfig(format!("channels must be 1 or 3, got {channels}")));
    }
    let texts_path = root.join("texts.csv");
    if !texts_path.exists() {
        return Err(Error::InvalidConfig(format!("{} not found", texts_path.display())));
    }
    let texts = read_annotations(&texts_path)?;
    let mut stems = BTreeSet::new();
    for entry in std::fs::read_dir(root.join("images"))? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.insert(stem.to_string());
            }
        }
    }
    if stems.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (h, w) = resolution;
    let mut samples = Vec::with_capacity(stems.len());
    for id in &stems {
        let unreadable = |e: image::ImageError| Error::UnreadableFile {
            id: id.clone(),
            reason: e.to_string(),
        };
        let img = image::open(root.join("images").join(format!("{id}.png"))).map_err(unreadable)?;
        let mask_path = root.join("masks").join(format!("{id}.png"));
        if !mask_path.exists() {
            return Err(Error::MissingMask(id.clone()));
        }
        let mask = image::open(&mask_path).map_err(unreadable)?.to_luma8();
        let text = texts
            .get(id)
            .ok_or_else(|| Error::MissingTextRow(id.clone()))?
            .clone();
        let pixels = if channels == 1 {
            resize_to(img.to_luma8(), w, h, FilterType::Triangle).into_raw()
        } else {
            resize_to(img.to_rgb8(), w, h, FilterType::Triangle).into_raw()
        };
        let mask = resize_to(mask, w, h, FilterType::Nearest).into_raw();
        samples.push(SegmentationSample {
            image_id: id.clone(),
            image: from_u8(&pixels, (h, w, channels))?,
            text,
            mask: mask_tensor(&mask, h, w)?,
        });
    }
    let manifest = DatasetManifest {
        root: Some(root.to_path_buf()),
        resolution,
        provenance: Provenance::Folder,
        role: SplitRole::All,
        ids: stems.into_iter().collect(),
    };
    Ok(Dataset { manifest, samples })
}

fn resize_to<P>(
    img: ImageBuffer<P, Vec<u8>>,
    w: usize,
    h: usize,
    filter: FilterType,
) -> ImageBuffer<P, Vec<u8>>
where
    P: image::Pixel<Subpixel = u8> + 'static,
{
    if img.dimensions() == (w as u32, h as u32) {
        img
    } else {
        image::imageops::resize(&img, w as u32, h as u32, filter)
    }
}
