use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::attention::{self, AttentionCache, AttentionLayer};
use super::train::EpochStats;
use super::vocab::{Vocab, PAD_ID};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Training and architecture settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    pub model_dim: usize,
    pub head_count: usize,
    pub layer_count: usize,
    pub ff_dim: usize,
    /// Tokens per segment.
    pub max_len: usize,
    /// Non-reserved vocabulary entries kept.
    pub vocab_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Upper bound on the positive-class loss weight.
    pub pos_weight_cap: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            model_dim: 64,
            head_count: 2,
            layer_count: 2,
            ff_dim: 128,
            max_len: 128,
            vocab_size: 5000,
            learning_rate: 1e-3,
            epochs: 6,
            batch_size: 16,
            pos_weight_cap: 10.0,
            grad_clip: Some(1.0),
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.model_dim == 0 || self.head_count == 0 || !self.model_dim.is_multiple_of(self.head_count) {
            return bad(format!(
                "model_dim {} must be a positive multiple of head_count {}",
                self.model_dim, self.head_count
            ));
        }
        if self.ff_dim == 0 || self.max_len == 0 || self.batch_size == 0 {
            return bad("ff_dim, max_len and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if self.pos_weight_cap.is_nan() || self.pos_weight_cap < 1.0 {
            return bad(format!("pos_weight_cap {} must be at least 1", self.pos_weight_cap));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    fn new(dim: usize, gamma: f64) -> Self {
        LayerNorm {
            gamma: Array1::from_elem(dim, gamma),
            beta: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: AttentionLayer,
    pub ln2: LayerNorm,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array1<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array1<f64>,
}

/// Every trainable tensor. Gradients and optimizer moments reuse this layout.
/// 64-bit FNV-1a; stable across platforms and releases.
fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub embedding: Array2<f64>,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub head_w: Array1<f64>,
    pub head_b: Array1<f64>,
}

impl Weights {
    pub fn zeros(vocab_len: usize, hyper: &Hyper) -> Self {
        let d = hyper.model_dim;
        let f = hyper.ff_dim;
        Weights {
            embedding: Array2::zeros((vocab_len, d)),
            blocks: (0..hyper.layer_count)
                .map(|_| Block {
                    ln1: LayerNorm::new(d, 0.0),
                    attn: AttentionLayer::zeros(d, hyper.head_count),
                    ln2: LayerNorm::new(d, 0.0),
                    ff_w1: Array2::zeros((d, f)),
                    ff_b1: Array1::zeros(f),
                    ff_w2: Array2::zeros((f, d)),
                    ff_b2: Array1::zeros(d),
                })
                .collect(),
            ln_f: LayerNorm::new(d, 0.0),
            head_w: Array1::zeros(d),
            head_b: Array1::zeros(1),
        }
    }

    /// Glorot-uniform projections and uniform embeddings. Each embedding row
    /// is drawn from a stream keyed by its token string, so models sharing a
    /// seed start from the same vector for every token they have in common.
    pub fn init(tokens: &[String], hyper: &Hyper, rng: &mut impl Rng) -> Self {
        let base: u64 = rng.gen();
        let mut w = Weights::zeros(tokens.len(), hyper);
        let mut glorot = |m: &mut Array2<f64>| {
            let a = (6.0 / (m.nrows() + m.ncols()) as f64).sqrt();
            m.mapv_inplace(|_| rng.gen_range(-a..a));
        };
        for b in &mut w.blocks {
            b.ln1.gamma.fill(1.0);
            b.ln2.gamma.fill(1.0);
            glorot(&mut b.attn.w_q);
            glorot(&mut b.attn.w_k);
            glorot(&mut b.attn.w_v);
            glorot(&mut b.attn.w_o);
            glorot(&mut b.ff_w1);
            glorot(&mut b.ff_w2);
        }
        w.ln_f.gamma.fill(1.0);
        let a = (3.0 / hyper.model_dim as f64).sqrt();
        w.head_w.mapv_inplace(|_| rng.gen_range(-a..a));
        for (mut row, token) in w.embedding.rows_mut().into_iter().zip(tokens) {
            let mut token_rng = ChaCha8Rng::seed_from_u64(base ^ fnv1a(token.as_bytes()));
            row.mapv_inplace(|_| token_rng.gen_range(-1.0..1.0));
        }
        w
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }

    /// Tensor names and shapes in canonical order.
    pub fn specs(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![("embedding".to_string(), self.embedding.shape().to_vec())];
        for (i, b) in self.blocks.iter().enumerate() {
            let d = b.ln1.gamma.len();
            let f = b.ff_b1.len();
            for (name, shape) in [
                ("ln1.gamma", vec![d]),
                ("ln1.beta", vec![d]),
                ("attn.w_q", vec![d, d]),
                ("attn.w_k", vec![d, d]),
                ("attn.w_v", vec![d, d]),
                ("attn.w_o", vec![d, d]),
                ("attn.b_o", vec![d]),
                ("ln2.gamma", vec![d]),
                ("ln2.beta", vec![d]),
                ("ff.w1", vec![d, f]),
                ("ff.b1", vec![f]),
                ("ff.w2", vec![f, d]),
                ("ff.b2", vec![d]),
            ] {
                out.push((format!("block{i}.{name}"), shape));
            }
        }
        let d = self.head_w.len();
        out.push(("ln_f.gamma".into(), vec![d]));
        out.push(("ln_f.beta".into(), vec![d]));
        out.push(("head.w".into(), vec![d]));
        out.push(("head.b".into(), vec![1]));
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.embedding.as_slice().expect("standard layout")];
        for b in &self.blocks {
            out.extend([
                b.ln1.gamma.as_slice().unwrap(),
                b.ln1.beta.as_slice().unwrap(),
                b.attn.w_q.as_slice().unwrap(),
                b.attn.w_k.as_slice().unwrap(),
                b.attn.w_v.as_slice().unwrap(),
                b.attn.w_o.as_slice().unwrap(),
                b.attn.b_o.as_slice().unwrap(),
                b.ln2.gamma.as_slice().unwrap(),
                b.ln2.beta.as_slice().unwrap(),
                b.ff_w1.as_slice().unwrap(),
                b.ff_b1.as_slice().unwrap(),
                b.ff_w2.as_slice().unwrap(),
                b.ff_b2.as_slice().unwrap(),
            ]);
        }
        out.extend([
            self.ln_f.gamma.as_slice().unwrap(),
            self.ln_f.beta.as_slice().unwrap(),
            self.head_w.as_slice().unwrap(),
            self.head_b.as_slice().unwrap(),
        ]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.embedding.as_slice_mut().expect("standard layout")];
        for b in &mut self.blocks {
            out.extend([
                b.ln1.gamma.as_slice_mut().unwrap(),
                b.ln1.beta.as_slice_mut().unwrap(),
                b.attn.w_q.as_slice_mut().unwrap(),
                b.attn.w_k.as_slice_mut().unwrap(),
                b.attn.w_v.as_slice_mut().unwrap(),
                b.attn.w_o.as_slice_mut().unwrap(),
                b.attn.b_o.as_slice_mut().unwrap(),
                b.ln2.gamma.as_slice_mut().unwrap(),
                b.ln2.beta.as_slice_mut().unwrap(),
                b.ff_w1.as_slice_mut().unwrap(),
                b.ff_b1.as_slice_mut().unwrap(),
                b.ff_w2.as_slice_mut().unwrap(),
                b.ff_b2.as_slice_mut().unwrap(),
            ]);
        }
        out.extend([
            self.ln_f.gamma.as_slice_mut().unwrap(),
            self.ln_f.beta.as_slice_mut().unwrap(),
            self.head_w.as_slice_mut().unwrap(),
            self.head_b.as_slice_mut().unwrap(),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

pub(crate) fn sinusoidal(max_len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((max_len, dim), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 * rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone)]
pub(crate) struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, ln: &LayerNorm) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &ln.gamma + &ln.beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(dy: &Array2<f64>, ln: &LayerNorm, cache: &LnCache, grads: &mut LayerNorm) -> Array2<f64> {
    grads.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
    grads.beta += &dy.sum_axis(Axis(0));
    let dxhat = dy * &ln.gamma;
    let d = dy.ncols() as f64;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &cache.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - &mean_dxhat.insert_axis(Axis(1));
    dx -= &(&cache.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
    dx * cache.inv_std.view().insert_axis(Axis(1))
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    ln1: LnCache,
    attn: AttentionCache,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    r: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    ids: Vec<u32>,
    mask: Vec<bool>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    pooled: Array1<f64>,
    n_valid: usize,
    pub logit: f64,
}

impl ForwardCache {
    /// Attention weights, `[layer][head]`, each n×n.
    pub fn attention(&self) -> Vec<Vec<Array2<f64>>> {
        self.blocks.iter().map(|b| b.attn.weights.clone()).collect()
    }

    /// Which feed-forward units are active, across all blocks.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks.iter().flat_map(|b| b.u.iter().map(|&v| v > 0.0)).collect()
    }
}

/// Pre-norm encoder: embeddings plus sinusoidal positions, residual
/// attention and ReLU feed-forward blocks, final layer norm, mean pooling
/// over non-padding positions, and a linear logit.
pub(crate) fn forward(weights: &Weights, positions: &Array2<f64>, ids: &[u32]) -> Result<ForwardCache> {
    if ids.is_empty() {
        return Err(Error::InvalidInput("empty token sequence".into()));
    }
    if ids.len() > positions.nrows() {
        return Err(Error::Shape(format!(
            "segment of {} tokens exceeds max_len {}",
            ids.len(),
            positions.nrows()
        )));
    }
    let vocab_len = weights.embedding.nrows();
    if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab_len) {
        return Err(Error::Shape(format!("token id {bad} outside vocab of {vocab_len}")));
    }
    let mask: Vec<bool> = ids.iter().map(|&i| i != PAD_ID).collect();
    let n_valid = mask.iter().filter(|&&m| m).count();
    if n_valid == 0 {
        return Err(Error::InvalidInput("segment contains only padding".into()));
    }
    let d = weights.embedding.ncols();
    let mut x = Array2::from_shape_fn((ids.len(), d), |(r, c)| {
        weights.embedding[[ids[r] as usize, c]] + positions[[r, c]]
    });
    let mut blocks = Vec::with_capacity(weights.blocks.len());
    for b in &weights.blocks {
        let (h1, ln1) = layer_norm(&x, &b.ln1);
        let (a, attn) = attention::forward_cached(&h1, &b.attn, Some(&mask))?;
        x += &a;
        let (h2, ln2) = layer_norm(&x, &b.ln2);
        let u = h2.dot(&b.ff_w1) + &b.ff_b1;
        let r = u.mapv(|v| v.max(0.0));
        x += &(r.dot(&b.ff_w2) + &b.ff_b2);
        blocks.push(BlockCache {
            ln1,
            attn,
            ln2,
            h2,
            u,
            r,
        });
    }
    let (hf, ln_f) = layer_norm(&x, &weights.ln_f);
    let mut pooled = Array1::zeros(d);
    for (row, &m) in hf.rows().into_iter().zip(&mask) {
        if m {
            pooled += &row;
        }
    }
    pooled /= n_valid as f64;
    let logit = pooled.dot(&weights.head_w) + weights.head_b[0];
    Ok(ForwardCache {
        ids: ids.to_vec(),
        mask,
        blocks,
        ln_f,
        pooled,
        n_valid,
        logit,
    })
}

/// Accumulates d(loss)/d(weights) into `grads`, given d(loss)/d(logit).
pub(crate) fn backward(weights: &Weights, cache: &ForwardCache, d_logit: f64, grads: &mut Weights) {
    grads.head_w.scaled_add(d_logit, &cache.pooled);
    grads.head_b[0] += d_logit;
    let d_pooled = &weights.head_w * (d_logit / cache.n_valid as f64);
    let n = cache.ids.len();
    let mut d_hf = Array2::zeros((n, d_pooled.len()));
    for (mut row, &m) in d_hf.rows_mut().into_iter().zip(&cache.mask) {
        if m {
            row.assign(&d_pooled);
        }
    }
    let mut dx = layer_norm_backward(&d_hf, &weights.ln_f, &cache.ln_f, &mut grads.ln_f);
    for ((b, bc), bg) in weights
        .blocks
        .iter()
        .zip(&cache.blocks)
        .zip(grads.blocks.iter_mut())
        .rev()
    {
        // Feed-forward sublayer; dx passes through the residual unchanged.
        bg.ff_w2 += &bc.r.t().dot(&dx);
        bg.ff_b2 += &dx.sum_axis(Axis(0));
        let mut du = dx.dot(&b.ff_w2.t());
        du.zip_mut_with(&bc.u, |g, &u| {
            if u <= 0.0 {
                *g = 0.0
            }
        });
        bg.ff_w1 += &bc.h2.t().dot(&du);
        bg.ff_b1 += &du.sum_axis(Axis(0));
        let dh2 = du.dot(&b.ff_w1.t());
        dx += &layer_norm_backward(&dh2, &b.ln2, &bc.ln2, &mut bg.ln2);
        // Attention sublayer.
        let (ag, dh1) = attention::backward(&b.attn, &bc.attn, &dx);
        bg.attn.w_q += &ag.w_q;
        bg.attn.w_k += &ag.w_k;
        bg.attn.w_v += &ag.w_v;
        bg.attn.w_o += &ag.w_o;
        bg.attn.b_o += &ag.b_o;
        dx += &layer_norm_backward(&dh1, &b.ln1, &bc.ln1, &mut bg.ln1);
    }
    for (row, &id) in dx.rows().into_iter().zip(&cache.ids) {
        let mut target = grads.embedding.row_mut(id as usize);
        target += &row;
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Weighted binary cross-entropy on a logit, computed without overflow.
/// Returns (loss, d loss / d logit).
pub(crate) fn weighted_bce(logit: f64, label: u8, weight: f64) -> (f64, f64) {
    let y = label as f64;
    let loss = logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p();
    (weight * loss, weight * (sigmoid(logit) - y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    pub vocab: Vocab,
    pub hyper: Hyper,
    pub weights: Weights,
    pub seed: u64,
    pub training_curve: Vec<EpochStats>,
    pub(crate) positions: Array2<f64>,
}

impl TransformerModel {
    pub fn new(vocab: Vocab, hyper: Hyper, weights: Weights, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let expected = Weights::zeros(vocab.len(), &hyper).specs();
        if weights.specs() != expected {
            return Err(Error::Shape("weights do not match vocab and hyperparameters".into()));
        }
        let positions = sinusoidal(hyper.max_len, hyper.model_dim);
        Ok(TransformerModel {
            vocab,
            hyper,
            weights,
            seed,
            training_curve: Vec::new(),
            positions,
        })
    }

    /// Fresh model with random weights drawn from `seed`.
    pub fn initialize(vocab: Vocab, hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Weights::init(vocab.tokens(), &hyper, &mut rng);
        round_to_f32(&mut weights);
        TransformerModel::new(vocab, hyper, weights, seed)
    }

    pub(crate) fn forward(&self, ids: &[u32]) -> Result<ForwardCache> {
        forward(&self.weights, &self.positions, ids)
    }

    /// Probability for one id segment. Padding ids are masked out.
    pub fn probability_ids(&self, ids: &[u32]) -> Result<f64> {
        Ok(sigmoid(self.forward(ids)?.logit))
    }
}

/// Keeps every weight exactly representable as `f32`, so checkpoints are lossless.
pub(crate) fn round_to_f32(weights: &mut Weights) {
    for t in weights.tensors_mut() {
        t.iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}
