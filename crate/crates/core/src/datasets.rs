//! Token sources: a 27-symbol character corpus and seeded synthetic
//! categorical sources with known entropy.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `a`-`z` then space.
pub const ALPHABET_SIZE: usize = 27;
pub const SPACE: usize = 26;

pub fn encode_char(c: char) -> usize {
    match c {
        'a'..='z' => c as usize - 'a' as usize,
        _ => SPACE,
    }
}

pub fn decode_id(id: usize) -> char {
    match id {
        0..=25 => (b'a' + id as u8) as char,
        _ => ' ',
    }
}

pub fn tokenize(text: &str) -> Vec<usize> {
    text.chars().map(encode_char).collect()
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter().map(|&i| decode_id(i)).collect()
}

/// A tokenized character corpus.
#[derive(Debug, Clone)]
pub struct TextCorpus {
    ids: Vec<usize>,
}

impl TextCorpus {
    pub fn from_text(text: &str) -> Self {
        Self { ids: tokenize(text) }
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of distinct chunk offsets for chunks of length `len`.
    pub fn offsets(&self, len: usize) -> usize {
        (self.ids.len() + 1).saturating_sub(len)
    }

    /// A uniformly random contiguous chunk of length `len`.
    pub fn chunk<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<&[usize]> {
        let n = self.offsets(len);
        if len == 0 || n == 0 {
            return Err(Error::InvalidParameter(format!(
                "corpus of {} symbols has no chunk of length {len}",
                self.ids.len()
            )));
        }
        let start = rng.random_range(0..n);
        Ok(&self.ids[start..start + len])
    }
}

pub fn load_text(path: &Path) -> Result<TextCorpus> {
    let text = std::fs::read_to_string(path)?;
    Ok(TextCorpus::from_text(&text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SyntheticSource {
    Iid { probs: Vec<f64> },
    Markov { matrix: Vec<Vec<f64>> },
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    if p.len() < 2 {
        return Err(Error::InvalidParameter(format!("{what} needs at least two symbols")));
    }
    if let Some((i, &v)) = p.iter().enumerate().find(|(_, v)| !(**v >= 0.0 && v.is_finite())) {
        return Err(Error::NegativeCoordinate { index: i, value: v });
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized { sum });
    }
    Ok(())
}

fn entropy_of(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Solves `pi P = pi`, `sum pi = 1` by Gaussian elimination; a singular
/// system means the chain has several stationary laws.
fn stationary_of(matrix: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = matrix.len();
    // Row i of the system is column i of (P^T - I), with the last row
    // replaced by the normalization.
    let mut a: Vec<Vec<f64>> = (0..d)
        .map(|i| {
            let mut row: Vec<f64> = (0..d).map(|j| matrix[j][i] - if i == j { 1.0 } else { 0.0 }).collect();
            row.push(0.0);
            row
        })
        .collect();
    a[d - 1] = vec![1.0; d + 1];
    for col in 0..d {
        let piv = (col..d)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .expect("non-empty range");
        if a[piv][col].abs() < 1e-12 {
            return Err(Error::InvalidParameter(
                "transition matrix has no unique stationary distribution".into(),
            ));
        }
        a.swap(col, piv);
        for r in 0..d {
            if r != col {
                let f = a[r][col] / a[col][col];
                if f != 0.0 {
                    let pivot = a[col].clone();
                    a[r][col..=d]
                        .iter_mut()
                        .zip(&pivot[col..=d])
                        .for_each(|(x, p)| *x -= f * p);
                }
            }
        }
    }
    Ok((0..d).map(|i| (a[i][d] / a[i][i]).max(0.0)).collect())
}

fn draw<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    // Rounding left `acc` a hair below 1: take the last symbol with mass.
    p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

impl SyntheticSource {
    pub fn uniform(d: usize) -> Self {
        Self::Iid {
            probs: vec![1.0 / d as f64; d],
        }
    }

    /// Point mass on `k`.
    pub fn constant(d: usize, k: usize) -> Self {
        let mut probs = vec![0.0; d];
        probs[k] = 1.0;
        Self::Iid { probs }
    }

    /// `p_k proportional to (k + 1)^{-exponent}`.
    pub fn zipf(d: usize, exponent: f64) -> Self {
        let w: Vec<f64> = (0..d).map(|k| (k as f64 + 1.0).powf(-exponent)).collect();
        let z: f64 = w.iter().sum();
        Self::Iid {
            probs: w.iter().map(|x| x / z).collect(),
        }
    }

    pub fn vocab(&self) -> usize {
        match self {
            Self::Iid { probs } => probs.len(),
            Self::Markov { matrix } => matrix.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Iid { probs } => check_distribution(probs, "distribution"),
            Self::Markov { matrix } => {
                for row in matrix {
                    if row.len() != matrix.len() {
                        return Err(Error::DimensionMismatch {
                            expected: matrix.len(),
                            got: row.len(),
                        });
                    }
                    check_distribution(row, "transition row")?;
                }
                self.stationary().map(|_| ())
            }
        }
    }

    /// Stationary distribution of the chain (the distribution itself for iid).
    pub fn stationary(&self) -> Result<Vec<f64>> {
        match self {
            Self::Iid { probs } => Ok(probs.clone()),
            Self::Markov { matrix } => stationary_of(matrix),
        }
    }

    /// Entropy rate in nats per token.
    pub fn entropy(&self) -> Result<f64> {
        self.validate()?;
        match self {
            Self::Iid { probs } => Ok(entropy_of(probs)),
            Self::Markov { matrix } => {
                let pi = self.stationary()?;
                Ok(pi.iter().zip(matrix).map(|(w, row)| w * entropy_of(row)).sum())
            }
        }
    }

    /// Per-token entropy of a length-`len` sequence started from the
    /// stationary law: `(H(pi) + (len - 1) H_rate) / len`.
    pub fn sequence_entropy(&self, len: usize) -> Result<f64> {
        let rate = self.entropy()?;
        match self {
            Self::Iid { .. } => Ok(rate),
            Self::Markov { .. } => {
                let h0 = entropy_of(&self.stationary()?);
                Ok((h0 + (len as f64 - 1.0) * rate) / len as f64)
            }
        }
    }

    pub fn sequence<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<Vec<usize>> {
        match self {
            Self::Iid { probs } => Ok((0..len).map(|_| draw(probs, rng)).collect()),
            Self::Markov { matrix } => {
                let pi = self.stationary()?;
                let mut out = Vec::with_capacity(len);
                if len > 0 {
                    out.push(draw(&pi, rng));
                }
                while out.len() < len {
                    let prev = *out.last().expect("non-empty");
                    out.push(draw(&matrix[prev], rng));
                }
                Ok(out)
            }
        }
    }
}

/// `n_seqs` sequences of length `len` and the entropy rate.
pub fn synth_generate<R: Rng + ?Sized>(
    source: &SyntheticSource,
    n_seqs: usize,
    len: usize,
    rng: &mut R,
) -> Result<(Vec<Vec<usize>>, f64)> {
    let h = source.entropy()?;
    let seqs = (0..n_seqs).map(|_| source.sequence(len, rng)).collect::<Result<_>>()?;
    Ok((seqs, h))
}

/// Where training and evaluation batches come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Text(TextCorpus),
}

impl DataSource {
    pub fn vocab(&self) -> usize {
        match self {
            Self::Synthetic(s) => s.vocab(),
            Self::Text(_) => ALPHABET_SIZE,
        }
    }

    pub fn batch<R: Rng + ?Sized>(&self, n: usize, len: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
        (0..n)
            .map(|_| match self {
                Self::Synthetic(s) => s.sequence(len, rng),
                Self::Text(c) => c.chunk(len, rng).map(<[usize]>::to_vec),
            })
            .collect()
    }
}
