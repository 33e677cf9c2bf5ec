//! Frozen token-level text embeddings behind a pluggable encoder trait.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Lowercases, drops punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
    if tokens.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(tokens)
}

/// A frozen text encoder `E_Te`. Implementations must be pure: the same
/// tokens always map to the same rows.
pub trait TextEncoder: Send + Sync {
    fn d_text(&self) -> usize;

    /// One row of width `d_text` per token.
    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f32>>>;

    /// SHA-256 over the encoder's serialized parameters.
    fn checksum(&self) -> String;

    /// Number of stored parameters; tokens hashed on the fly count as none.
    fn num_params(&self) -> usize {
        0
    }
}

/// `L × d_text` token embeddings for one annotation.
#[derive(Debug, Clone)]
pub struct TextEmbedding {
    tokens: Vec<String>,
    matrix: Tensor,
}

impl TextEmbedding {
    pub fn from_rows(tokens: Vec<String>, rows: Vec<Vec<f32>>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != rows.len() {
            return Err(Error::EmptyText);
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("ragged embedding rows".into()));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::InvalidDims("non-finite text embedding".into()));
        }
        let l = rows.len();
        let matrix = Tensor::from_vec(rows.concat(), (l, d), &Device::Cpu)?;
        Ok(Self { tokens, matrix })
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// `(L, d_text)`.
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn d_text(&self) -> usize {
        self.matrix.dims()[1]
    }

    /// Mean over tokens, `(d_text,)`.
    pub fn mean_pooled(&self) -> Result<Tensor> {
        Ok(self.matrix.mean(0)?)
    }
}

pub fn encode(text: &str, enc: &dyn TextEncoder) -> Result<TextEmbedding> {
    let tokens = tokenize(text)?;
    let rows = enc.embed_tokens(&tokens)?;
    if rows.iter().any(|r| r.len() != enc.d_text()) {
        return Err(Error::DimensionMismatch(format!(
            "encoder declared d_text={} but produced other widths",
            enc.d_text()
        )));
    }
    TextEmbedding::from_rows(tokens, rows)
}

/// Reference encoder: each token seeds its own Gaussian draw, normalized to
/// unit length. Distinct tokens land on near-orthogonal directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashedGaussianEncoder {
    d_text: usize,
    seed: u64,
}

impl HashedGaussianEncoder {
    pub fn new(d_text: usize, seed: u64) -> Result<Self> {
        if d_text == 0 {
            return Err(Error::InvalidDims("d_text must be positive".into()));
        }
        Ok(Self { d_text, seed })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn token_vector(&self, token: &str) -> Vec<f32> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((token.len() as u64).to_le_bytes());
        h.update(token.as_bytes());
        let mut rng = ChaCha8Rng::from_seed(h.finalize().into());
        let v: Vec<f64> = (0..self.d_text)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| (x / norm) as f32).collect()
    }
}

impl TextEncoder for HashedGaussianEncoder {
    fn d_text(&self) -> usize {
        self.d_text
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f32>>> {
        Ok(tokens.iter().map(|t| self.token_vector(t)).collect())
    }

    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"hashed-gaussian");
        h.update((self.d_text as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRow {
    image_id: String,
    text: String,
}

/// Reads an `image_id,text` CSV into a map keyed by image id.
pub fn read_annotations(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_id", "text"] {
        return Err(Error::InvalidConfig(format!(
            "{} must have header image_id,text",
            path.display()
        )));
    }
    let mut out = BTreeMap::new();
    for row in rdr.deserialize() {
        let row: AnnotationRow = row?;
        out.insert(row.image_id, row.text);
    }
    Ok(out)
}

pub fn write_annotations<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = (&'a str, &'a str)>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (image_id, text) in rows {
        w.serialize(AnnotationRow {
            image_id: image_id.to_string(),
            text: text.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}
