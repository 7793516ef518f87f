//! Miniature vision-transformer encoder-decoder with the codebook
//! reconstruction inserted before the last block.
//!
//! Token layout per image is `[cls_global, cls_local, patch_0, ..]`, so a
//! sequence has `2 + n_p` rows. Both CLS rows skip quantization.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::arcface::HierarchicalCenters;
use crate::embedding::{quantize_st, Codebook, GumbelNoise, SoftInput};
use crate::tensor::{BatchStats, Element, Graph, Tensor, Var};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in the running neck statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub codebook_size: usize,
    pub tau: f64,
    pub levels: usize,
    pub num_ids: usize,
    pub mlp_ratio: usize,
    pub soft_input: SoftInput,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_blocks: 4,
            embed_dim: 64,
            heads: 4,
            patch_size: 16,
            stride: 8,
            image_height: 64,
            image_width: 64,
            codebook_size: 128,
            tau: 0.1,
            levels: 3,
            num_ids: 32,
            mlp_ratio: 4,
            soft_input: SoftInput::Probabilities,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.num_blocks == 0 {
            return bad("num_blocks must be >= 1".into());
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", self.embed_dim, self.heads));
        }
        if self.patch_size == 0 || self.stride == 0 || self.stride > self.patch_size {
            return bad(format!("need 0 < stride <= patch_size, got {} and {}", self.stride, self.patch_size));
        }
        for (name, extent) in [("image_height", self.image_height), ("image_width", self.image_width)] {
            if extent < self.patch_size || (extent - self.patch_size) % self.stride != 0 {
                return bad(format!(
                    "{name} {extent} does not tile with patch {} stride {}",
                    self.patch_size, self.stride
                ));
            }
        }
        if self.codebook_size < 2 || !(self.tau > 0.0) || self.levels == 0 || self.num_ids < 2 || self.mlp_ratio == 0 {
            return bad("need codebook_size >= 2, tau > 0, levels >= 1, num_ids >= 2, mlp_ratio >= 1".into());
        }
        Ok(())
    }

    /// Patch grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (
            (self.image_height - self.patch_size) / self.stride + 1,
            (self.image_width - self.patch_size) / self.stride + 1,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn seq_len(&self) -> usize {
        2 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }
}

/// Train mode uses batch statistics in the necks; eval mode the running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Named parameter arrays in a fixed order. Non-trainable entries hold the
/// neck running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl Params {
    fn empty() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), trainable: Vec::new(), index: HashMap::new() }
    }

    fn push(&mut self, name: String, tensor: Tensor<f32>, trainable: bool) {
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        self.trainable.push(trainable);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    fn get_mut(&mut self, name: &str) -> &mut Tensor<f32> {
        let i = self.index[name];
        &mut self.tensors[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }
}

/// Parameters of one forward pass placed on a graph.
pub struct Bound<'m> {
    vars: Vec<Var>,
    params: &'m Params,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        let i = self.params.position(name).unwrap_or_else(|| panic!("no parameter {name}"));
        self.vars[i]
    }

    /// Graph handles in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Outputs of the two heads for a batch.
pub struct Heads<T> {
    /// Pre-neck global feature (CLS global); triplet input.
    pub global_pre: Var,
    /// Pre-neck fused local feature; triplet input.
    pub local_pre: Var,
    pub global_feat: Var,
    pub local_feat: Var,
    /// `[B, C]` logits of the local head.
    pub id_logits: Var,
    /// `[B, C]` logits of the global linear head, used when the hierarchical
    /// loss is switched off.
    pub id_logits_global: Var,
    /// Batch statistics of the global and local necks in train mode.
    pub neck_stats: Option<(BatchStats<T>, BatchStats<T>)>,
}

pub struct Forward<T> {
    pub heads: Heads<T>,
    /// Codebook indices of every patch token, when quantizing.
    pub code_indices: Option<Vec<usize>>,
    pub tokens: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
}

fn block_names(i: usize) -> [String; 16] {
    let p = format!("block{i}");
    [
        "ln1.gain",
        "ln1.bias",
        "attn.q.weight",
        "attn.q.bias",
        "attn.k.weight",
        "attn.k.bias",
        "attn.v.weight",
        "attn.v.bias",
        "attn.proj.weight",
        "attn.proj.bias",
        "ln2.gain",
        "ln2.bias",
        "mlp.fc1.weight",
        "mlp.fc1.bias",
        "mlp.fc2.weight",
        "mlp.fc2.bias",
    ]
    .map(|s| format!("{p}.{s}"))
}

impl Model {
    /// Parameter names and shapes in storage order, with the trainable flag.
    pub fn layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
        let (d, c) = (config.embed_dim, config.num_ids);
        let h = d * config.mlp_ratio;
        let mut out: Vec<(String, Vec<usize>, bool)> = vec![
            ("patch.weight".into(), vec![config.patch_dim(), d], true),
            ("patch.bias".into(), vec![d], true),
            ("cls_global".into(), vec![1, d], true),
            ("cls_local".into(), vec![1, d], true),
            ("pos".into(), vec![config.seq_len(), d], true),
        ];
        for i in 0..config.num_blocks {
            let shapes = [
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, h],
                vec![h],
                vec![h, d],
                vec![d],
            ];
            out.extend(block_names(i).into_iter().zip(shapes).map(|(n, s)| (n, s, true)));
        }
        out.extend([
            ("norm.gain".into(), vec![d], true),
            ("norm.bias".into(), vec![d], true),
            ("codebook".into(), vec![config.codebook_size, d], true),
            ("centers".into(), vec![config.levels, c + 1, d], true),
            ("neck_global.gain".into(), vec![d], true),
            ("neck_global.running_mean".into(), vec![d], false),
            ("neck_global.running_var".into(), vec![d], false),
            ("neck_local.gain".into(), vec![d], true),
            ("neck_local.running_mean".into(), vec![d], false),
            ("neck_local.running_var".into(), vec![d], false),
            ("id_local.weight".into(), vec![d, c], true),
            ("id_global.weight".into(), vec![d, c], true),
        ]);
        out
    }

    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = Params::empty();
        let small = Normal::new(0.0, 0.02).expect("valid std");
        let head = Normal::new(0.0, 0.001).expect("valid std");
        for (name, shape, trainable) in Self::layout(&config) {
            let t = match name.as_str() {
                "codebook" => Codebook::<f32>::random(config.codebook_size, config.embed_dim, rng)?.into_weights(),
                "centers" => HierarchicalCenters::<f32>::random(config.levels, config.num_ids, config.embed_dim, rng)?
                    .into_weights(),
                n if n.ends_with(".gain") || n.ends_with("running_var") => Tensor::full(shape, 1.0),
                n if n.ends_with(".bias") || n.ends_with("running_mean") => Tensor::zeros(shape),
                n if n.starts_with("id_") => Tensor::from_fn(shape, |_| head.sample(rng) as f32),
                _ => Tensor::from_fn(shape, |_| small.sample(rng) as f32),
            };
            params.push(name, t, trainable);
        }
        Ok(Self { config, params })
    }

    /// Rebuilds a model from named arrays, checking names and shapes against
    /// the configuration.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        config.validate()?;
        let layout = Self::layout(&config);
        if layout.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "configuration expects {} arrays, checkpoint has {}",
                layout.len(),
                named.len()
            )));
        }
        let mut params = Params::empty();
        for ((name, shape, trainable), (got_name, t)) in layout.into_iter().zip(named) {
            if name != got_name || shape != t.shape() {
                return Err(Error::Checkpoint(format!("expected {name} {shape:?}, found {got_name} {:?}", t.shape())));
            }
            if !t.is_finite() {
                return Err(Error::Checkpoint(format!("{name} holds non-finite values")));
            }
            params.push(name, t, trainable);
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn codebook(&self) -> &Tensor<f32> {
        self.params.get("codebook").expect("layout has a codebook")
    }

    /// Places every parameter on `g`: trainable ones as gradient leaves.
    pub fn bind<'m, T: Element>(&'m self, g: &Graph<T>) -> Bound<'m> {
        let vars =
            self.params.tensors.iter().zip(&self.params.trainable).map(|(t, &tr)| g.leaf(t.cast(), tr)).collect();
        Bound { vars, params: &self.params }
    }

    /// Overlapping patches of `[B, 3, H, W]` images, one row per patch with
    /// features ordered `(channel, dy, dx)`; patches in row-major grid order.
    pub fn im2col<T: Element>(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[2] != c.image_height || s[3] != c.image_width {
            return Err(Error::InvalidArgument(format!(
                "images must be [B, 3, {}, {}], got {s:?}",
                c.image_height, c.image_width
            )));
        }
        let (b, h, w, p) = (s[0], s[2], s[3], c.patch_size);
        let (gh, gw) = c.grid();
        let mut out = Vec::with_capacity(b * gh * gw * c.patch_dim());
        let data = images.data();
        for img in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    for ch in 0..3 {
                        for dy in 0..p {
                            let row = ((img * 3 + ch) * h + gy * c.stride + dy) * w + gx * c.stride;
                            out.extend_from_slice(&data[row..row + p]);
                        }
                    }
                }
            }
        }
        Ok(Tensor::new([b * gh * gw, c.patch_dim()], out)?)
    }

    /// Projected patches with both CLS tokens prepended and position
    /// embeddings added: `[B, 2 + n_p, d]`.
    pub fn patch_embed<T: Element>(&self, g: &Graph<T>, p: &Bound, images: &Tensor<T>) -> Result<Var> {
        let cols = g.constant(self.im2col(images)?);
        let batch = images.shape()[0];
        let (np, t, d) = (self.config.num_patches(), self.config.seq_len(), self.config.embed_dim);
        let proj = g.linear(cols, p.var("patch.weight"), Some(p.var("patch.bias")))?;
        let all = g.concat_rows(&[p.var("cls_global"), p.var("cls_local"), proj])?;
        let index: Vec<usize> =
            (0..batch).flat_map(|b| [0, 1].into_iter().chain((0..np).map(move |j| 2 + b * np + j))).collect();
        let seq = g.reshape(g.gather_rows(all, &index)?, &[batch, t, d])?;
        Ok(g.add_trailing(seq, p.var("pos"))?)
    }

    /// One pre-norm transformer block on `[B, T, d]`.
    pub fn block<T: Element>(&self, g: &Graph<T>, p: &Bound, x: Var, i: usize) -> Result<Var> {
        let n = block_names(i);
        let v = |k: usize| p.var(&n[k]);
        let eps = T::of(LN_EPS);
        let h = g.layer_norm(x, v(0), v(1), eps)?;
        let q = g.linear(h, v(2), Some(v(3)))?;
        let k = g.linear(h, v(4), Some(v(5)))?;
        let val = g.linear(h, v(6), Some(v(7)))?;
        let a = g.attention(q, k, val, self.config.heads)?;
        let x = g.add(x, g.linear(a, v(8), Some(v(9)))?)?;
        let h = g.layer_norm(x, v(10), v(11), eps)?;
        let m = g.gelu(g.linear(h, v(12), Some(v(13)))?)?;
        Ok(g.add(x, g.linear(m, v(14), Some(v(15)))?)?)
    }

    /// Blocks `0 .. N-1`.
    pub fn encode<T: Element>(&self, g: &Graph<T>, p: &Bound, mut x: Var) -> Result<Var> {
        for i in 0..self.config.num_blocks - 1 {
            x = self.block(g, p, x, i)?;
        }
        Ok(x)
    }

    /// The last block.
    pub fn decode<T: Element>(&self, g: &Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        self.block(g, p, x, self.config.num_blocks - 1)
    }

    /// Replaces every patch token with its codebook row; CLS rows are copied
    /// through. Returns the new sequence and the chosen indices.
    pub fn reconstruct<T: Element>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        x: Var,
        noise: &mut GumbelNoise,
    ) -> Result<(Var, Vec<usize>)> {
        let shape = g.shape(x);
        let (batch, t, d) = (shape[0], shape[1], shape[2]);
        let np = t - 2;
        let flat = g.reshape(x, &[batch * t, d])?;
        let patch_rows: Vec<usize> = (0..batch).flat_map(|b| (2..t).map(move |j| b * t + j)).collect();
        let patches = g.gather_rows(flat, &patch_rows)?;
        let q = quantize_st(g, patches, p.var("codebook"), self.config.tau, noise, self.config.soft_input)?;
        let all = g.concat_rows(&[flat, q.quantized])?;
        let index: Vec<usize> = (0..batch)
            .flat_map(|b| (0..t).map(move |j| if j < 2 { b * t + j } else { batch * t + b * np + j - 2 }))
            .collect();
        let out = g.reshape(g.gather_rows(all, &index)?, &[batch, t, d])?;
        Ok((out, q.indices))
    }

    fn neck<T: Element>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        x: Var,
        name: &str,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let d = self.config.embed_dim;
        let gain = p.var(&format!("{name}.gain"));
        match mode {
            Mode::Train => {
                let (y, stats) = g.batch_norm(x, gain, g.constant(Tensor::zeros([d])), T::of(BN_EPS))?;
                Ok((y, Some(stats)))
            }
            Mode::Eval => {
                let mean = self.params.get(&format!("{name}.running_mean")).expect("layout");
                let var = self.params.get(&format!("{name}.running_var")).expect("layout");
                let shift = Tensor::from_fn([d], |i| T::of(-mean.data()[i] as f64));
                let rstd = Tensor::from_fn([d], |i| T::of(1.0 / (var.data()[i] as f64 + BN_EPS).sqrt()));
                let centered = g.add_trailing(x, g.constant(shift))?;
                let normed = g.mul_trailing(centered, g.constant(rstd))?;
                Ok((g.mul_trailing(normed, gain)?, None))
            }
        }
    }

    pub fn heads<T: Element>(&self, g: &Graph<T>, p: &Bound, x: Var, mode: Mode) -> Result<Heads<T>> {
        let shape = g.shape(x);
        let (batch, t) = (shape[0], shape[1]);
        let normed = g.layer_norm(x, p.var("norm.gain"), p.var("norm.bias"), T::of(LN_EPS))?;
        let cls_g = g.gather_rows(normed, &(0..batch).map(|b| b * t).collect::<Vec<_>>())?;
        let cls_l = g.gather_rows(normed, &(0..batch).map(|b| b * t + 1).collect::<Vec<_>>())?;
        let patch_rows: Vec<usize> = (0..batch).flat_map(|b| (2..t).map(move |j| b * t + j)).collect();
        let pooled = g.mean_pool(g.gather_rows(normed, &patch_rows)?, t - 2)?;
        let local_pre = g.add(cls_l, pooled)?;
        let (global_feat, sg) = self.neck(g, p, cls_g, "neck_global", mode)?;
        let (local_feat, sl) = self.neck(g, p, local_pre, "neck_local", mode)?;
        Ok(Heads {
            global_pre: cls_g,
            local_pre,
            global_feat,
            local_feat,
            id_logits: g.matmul(local_feat, p.var("id_local.weight"))?,
            id_logits_global: g.matmul(global_feat, p.var("id_global.weight"))?,
            neck_stats: sg.zip(sl),
        })
    }

    /// Full pass. `quantize = false` is the plain N-block transformer.
    pub fn forward<T: Element>(
        &self,
        g: &Graph<T>,
        p: &Bound,
        images: &Tensor<T>,
        mode: Mode,
        quantize: bool,
        noise: &mut GumbelNoise,
    ) -> Result<Forward<T>> {
        let x = self.patch_embed(g, p, images)?;
        let x = self.encode(g, p, x)?;
        let (x, code_indices) = if quantize {
            let (x, idx) = self.reconstruct(g, p, x, noise)?;
            (x, Some(idx))
        } else {
            (x, None)
        };
        let tokens = self.decode(g, p, x)?;
        let heads = self.heads(g, p, tokens, mode)?;
        Ok(Forward { heads, code_indices, tokens })
    }

    /// Folds train-mode neck statistics into the running averages, using the
    /// unbiased batch variance.
    pub fn update_running_stats<T: Element>(&mut self, stats: &(BatchStats<T>, BatchStats<T>)) {
        for (name, s) in [("neck_global", &stats.0), ("neck_local", &stats.1)] {
            let n = s.count as f64;
            let correction = if s.count > 1 { n / (n - 1.0) } else { 1.0 };
            let mean = self.params.get_mut(&format!("{name}.running_mean"));
            for (r, b) in mean.data_mut().iter_mut().zip(&s.mean) {
                *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * b.as_f64()) as f32;
            }
            let var = self.params.get_mut(&format!("{name}.running_var"));
            for (r, b) in var.data_mut().iter_mut().zip(&s.var) {
                *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * b.as_f64() * correction) as f32;
            }
        }
    }

    /// L2-normalized `[B, 2d]` retrieval descriptors: both neck outputs in
    /// eval mode, zero Gumbel noise.
    pub fn descriptors(&self, images: &Tensor<f32>, quantize: bool) -> Result<Tensor<f32>> {
        let g = Graph::<f32>::new();
        let p = self.bind_frozen(&g);
        let f = self.forward(&g, &p, images, Mode::Eval, quantize, &mut GumbelNoise::Zero)?;
        let joined = g.concat_cols(&[f.heads.global_feat, f.heads.local_feat])?;
        Ok(g.tensor(g.normalize_rows(joined)?))
    }

    /// Like [`Model::bind`] but without gradient tracking.
    pub fn bind_frozen<'m, T: Element>(&'m self, g: &Graph<T>) -> Bound<'m> {
        let vars = self.params.tensors.iter().map(|t| g.constant(t.cast())).collect();
        Bound { vars, params: &self.params }
    }
}

#[cfg(test)]
mod tests;
