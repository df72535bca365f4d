use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::vocab::ClassVocabulary;
use crate::error::{Error, Result};

const MAX_TRIES: usize = 1000;
const MAX_ABS_COS: f64 = 0.5;

/// Frozen unit-norm embedding per class, one row per class id.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddings {
    classes: usize,
    dim: usize,
    matrix: Vec<f64>,
}

impl TextEmbeddings {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.len();
        let dim = rows.first().map_or(0, Vec::len);
        if classes == 0 || dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::config("embedding rows must be non-empty and equally sized"));
        }
        Ok(Self {
            classes,
            dim,
            matrix: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.matrix[class * self.dim..(class + 1) * self.dim]
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    /// D×C layout, ready to right-multiply normalized features.
    pub fn transposed(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.matrix.len()];
        for c in 0..self.classes {
            for d in 0..self.dim {
                out[d * self.classes + c] = self.matrix[c * self.dim + d];
            }
        }
        out
    }
}

fn name_seed(name: &str, seed: u64, attempt: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update((attempt as u64).to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
}

/// Deterministic pseudo text encoder: every class name maps to a unit
/// vector drawn from a generator keyed by (name, seed, attempt). Draws are
/// rejected until the row's |cosine| to all earlier rows is below 0.5.
pub fn embed_text(vocab: &ClassVocabulary, dim: usize, seed: u64) -> Result<TextEmbeddings> {
    if dim == 0 {
        return Err(Error::config("embedding dimension must be positive"));
    }
    if dim < vocab.len() {
        log::warn!(
            "embedding dimension {dim} is below the class count {}; separation may fail",
            vocab.len()
        );
    }
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(vocab.len());
    for name in vocab.names() {
        let mut accepted = None;
        for attempt in 0..MAX_TRIES {
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(name, seed, attempt));
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            let separated = rows.iter().all(|r| {
                let cos: f64 = r.iter().zip(&v).map(|(a, b)| a * b).sum();
                cos.abs() < MAX_ABS_COS
            });
            if separated {
                accepted = Some(v);
                break;
            }
        }
        match accepted {
            Some(v) => rows.push(v),
            None => {
                return Err(Error::config(format!(
                    "could not separate embedding for '{name}' after {MAX_TRIES} draws; dimension {dim} too small"
                )))
            }
        }
    }
    TextEmbeddings::from_rows(rows)
}
