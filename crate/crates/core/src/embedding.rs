//! The discrete embedding space: a trainable codebook that replaces patch
//! tokens with their most similar entry.
//!
//! Forward, each token `t_i` is replaced by the codebook row `E_j` maximising
//! `t_i . E_j`. Backward, gradients flow as if the token had been replaced by
//! the soft mixture `sum_j w_ij E_j`, where `w_i` is a Gumbel-Softmax of the
//! similarity row. The forward value is the exact codebook row; only the
//! Jacobian is borrowed from the soft path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{argmax_first, Element, Graph, Tensor, Var};
use crate::{Error, Result};

/// Codebook `E` of `size` vectors with `dim` components each.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    weights: Tensor<T>,
}

impl<T: Element> Codebook<T> {
    pub fn new(weights: Tensor<T>) -> Result<Self> {
        if weights.shape().len() != 2 || weights.shape()[0] < 2 {
            return Err(Error::InvalidArgument(format!(
                "codebook must be [size >= 2, dim], got {:?}",
                weights.shape()
            )));
        }
        if !weights.is_finite() {
            return Err(Error::InvalidArgument("codebook has non-finite entries".into()));
        }
        Ok(Self { weights })
    }

    /// Entries i.i.d. normal with standard deviation `1 / sqrt(dim)`, so
    /// initial similarity logits are O(1).
    pub fn random(size: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("valid std");
        Self::new(Tensor::from_fn([size, dim], |_| T::of(normal.sample(rng))))
    }

    pub fn size(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor<T> {
        &self.weights
    }

    pub fn into_weights(self) -> Tensor<T> {
        self.weights
    }

    /// Row-normalized copy of the codebook.
    pub fn normalized(&self) -> Result<Tensor<f64>> {
        normalized_rows(&self.weights)
    }
}

fn normalized_rows<T: Element>(weights: &Tensor<T>) -> Result<Tensor<f64>> {
    let d = weights.cols();
    let mut out = weights.cast::<f64>();
    for (r, row) in out.data_mut().chunks_mut(d).enumerate() {
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(n >= 1e-12) {
            return Err(Error::InvalidArgument(format!("codebook row {r} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Source of the Gumbel noise `G` added to the logits before the tempered
/// softmax.
#[derive(Clone, Debug)]
pub enum GumbelNoise {
    /// `G = -ln(-ln U)`, `U ~ Uniform(0, 1)`, drawn fresh on every call.
    Sampled(ChaCha8Rng),
    /// Returns the injected array verbatim. Used by gradient checks.
    Frozen(Tensor<f64>),
    /// `G = 0`; inference mode.
    Zero,
}

impl GumbelNoise {
    pub fn sampled(seed: u64) -> Self {
        Self::Sampled(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Noise for a `[rows, cols]` logit matrix.
    pub fn draw<T: Element>(&mut self, rows: usize, cols: usize) -> Result<Tensor<T>> {
        match self {
            Self::Sampled(rng) => Ok(Tensor::from_fn([rows, cols], |_| T::of(sample_gumbel(rng)))),
            Self::Frozen(t) => {
                if t.shape() != [rows, cols] {
                    return Err(Error::InvalidArgument(format!(
                        "frozen noise has shape {:?}, logits are [{rows}, {cols}]",
                        t.shape()
                    )));
                }
                Ok(t.cast())
            }
            Self::Zero => Ok(Tensor::zeros([rows, cols])),
        }
    }
}

pub fn sample_gumbel(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -(-u.ln()).ln();
        }
    }
}

/// What the Gumbel-Softmax of the soft path is applied to.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SoftInput {
    /// `G(S(t E^T))`: the similarity row is softmax-normalized first.
    #[default]
    Probabilities,
    /// `G(t E^T)`: the raw similarity logits.
    Logits,
}

impl SoftInput {
    pub fn name(self) -> &'static str {
        match self {
            Self::Probabilities => "probabilities",
            Self::Logits => "logits",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "probabilities" => Some(Self::Probabilities),
            "logits" => Some(Self::Logits),
            _ => None,
        }
    }
}

fn check_dims<T: Element>(g: &Graph<T>, tokens: Var, codebook: Var) -> Result<()> {
    let (ts, cs) = (g.shape(tokens), g.shape(codebook));
    if ts.len() != 2 || cs.len() != 2 || ts[1] != cs[1] {
        return Err(Error::InvalidArgument(format!("tokens {ts:?} do not match codebook {cs:?}")));
    }
    Ok(())
}

/// `t E^T`: `[n, d] x [size, d] -> [n, size]`.
pub fn similarity_logits<T: Element>(g: &Graph<T>, tokens: Var, codebook: Var) -> Result<Var> {
    check_dims(g, tokens, codebook)?;
    Ok(g.matmul_nt(tokens, codebook)?)
}

/// Row-wise `softmax((v + G) / tau)`.
pub fn gumbel_softmax<T: Element>(g: &Graph<T>, logits: Var, tau: f64, noise: &mut GumbelNoise) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let shape = g.shape(logits);
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!("logits must be 2-D, got {shape:?}")));
    }
    let noise = g.constant(noise.draw(shape[0], shape[1])?);
    let perturbed = g.add(logits, noise)?;
    let tempered = g.scale(perturbed, T::of(1.0 / tau))?;
    Ok(g.softmax(tempered, 1)?)
}

pub struct Quantized {
    /// Codebook rows selected per token; straight-through on the soft path.
    pub quantized: Var,
    pub indices: Vec<usize>,
    pub soft_weights: Var,
    pub logits: Var,
    /// The soft mixture `soft_weights x E` (the backward surrogate).
    pub soft: Var,
}

/// Replaces each token with its most similar codebook row (lowest index on
/// ties) while backpropagating through the Gumbel-Softmax mixture.
pub fn quantize_st<T: Element>(
    g: &Graph<T>,
    tokens: Var,
    codebook: Var,
    tau: f64,
    noise: &mut GumbelNoise,
    input: SoftInput,
) -> Result<Quantized> {
    let logits = similarity_logits(g, tokens, codebook)?;
    let resample_input = match input {
        SoftInput::Probabilities => g.softmax(logits, 1)?,
        SoftInput::Logits => logits,
    };
    let soft_weights = gumbel_softmax(g, resample_input, tau, noise)?;
    let soft = g.matmul(soft_weights, codebook)?;

    let (indices, hard) = {
        let lv = g.value(logits);
        let cb = g.value(codebook);
        let indices: Vec<usize> = (0..lv.rows()).map(|r| argmax_first(lv.row(r)).0).collect();
        let d = cb.cols();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &j in &indices {
            data.extend_from_slice(cb.row(j));
        }
        (indices, Tensor::new([lv.rows(), d], data)?)
    };
    let quantized = g.straight_through(soft, hard)?;
    Ok(Quantized { quantized, indices, soft_weights, logits, soft })
}

/// `|| Ê Ê^T - I ||_F` with `Ê` the row-normalized codebook.
pub fn orthogonal_loss<T: Element>(g: &Graph<T>, codebook: Var) -> Result<Var> {
    let shape = g.shape(codebook);
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!("codebook must be 2-D, got {shape:?}")));
    }
    let normalized = g
        .normalize_rows(codebook)
        .map_err(|e| Error::InvalidArgument(format!("orthogonal loss needs nonzero rows: {e}")))?;
    let gram = g.matmul_nt(normalized, normalized)?;
    let eye = g.constant(Tensor::eye(shape[0]));
    let diff = g.sub(gram, eye)?;
    Ok(g.frobenius_norm(diff)?)
}

/// Histogram of the `size * (size - 1)` off-diagonal pairwise cosines of a
/// codebook, over `bins` equal-width bins spanning `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CosineHistogram {
    pub counts: Vec<usize>,
    pub max_abs: f64,
    pub mean_abs: f64,
}

impl CosineHistogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_center(&self, i: usize) -> f64 {
        let w = 2.0 / self.bins() as f64;
        -1.0 + w * (i as f64 + 0.5)
    }

    pub fn bin_of(bins: usize, cos: f64) -> usize {
        let b = ((cos.clamp(-1.0, 1.0) + 1.0) / 2.0 * bins as f64).floor() as usize;
        b.min(bins - 1)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `bin_center count` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{:.6} {}\n", self.bin_center(i), c));
        }
        s
    }
}

pub fn cosine_histogram<T: Element>(codebook: &Tensor<T>, bins: usize) -> Result<CosineHistogram> {
    if bins == 0 {
        return Err(Error::InvalidArgument("histogram needs at least one bin".into()));
    }
    let size = codebook.shape().first().copied().unwrap_or(0);
    if codebook.shape().len() != 2 || size < 2 {
        return Err(Error::InvalidArgument(format!("codebook must be [size >= 2, dim], got {:?}", codebook.shape())));
    }
    let n = normalized_rows(codebook)?;
    let mut counts = vec![0; bins];
    let (mut max_abs, mut sum_abs) = (0.0f64, 0.0);
    for i in 0..size {
        for j in 0..size {
            if i == j {
                continue;
            }
            let c: f64 = n.row(i).iter().zip(n.row(j)).map(|(a, b)| a * b).sum();
            counts[CosineHistogram::bin_of(bins, c)] += 1;
            max_abs = max_abs.max(c.abs());
            sum_abs += c.abs();
        }
    }
    let pairs = (size * (size - 1)) as f64;
    Ok(CosineHistogram { counts, max_abs, mean_abs: sum_abs / pairs })
}
