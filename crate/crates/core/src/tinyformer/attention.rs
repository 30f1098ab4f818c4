//! Multi-head scaled dot-product self-attention.

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub head_count: usize,
}

impl AttentionLayer {
    pub fn zeros(model_dim: usize, head_count: usize) -> Self {
        AttentionLayer {
            w_q: Array2::zeros((model_dim, model_dim)),
            w_k: Array2::zeros((model_dim, model_dim)),
            w_v: Array2::zeros((model_dim, model_dim)),
            w_o: Array2::zeros((model_dim, model_dim)),
            b_o: Array1::zeros(model_dim),
            head_count,
        }
    }

    pub fn model_dim(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_k(&self) -> usize {
        self.model_dim() / self.head_count.max(1)
    }

    fn check(&self, x: &Array2<f64>) -> Result<()> {
        let d = self.model_dim();
        if self.head_count == 0 || d == 0 || !d.is_multiple_of(self.head_count) {
            return Err(Error::Shape(format!(
                "model_dim {d} not divisible into {} heads",
                self.head_count
            )));
        }
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if w.dim() != (d, d) {
                return Err(Error::Shape(format!("{name} is {:?}, expected ({d}, {d})", w.dim())));
            }
        }
        if self.b_o.len() != d {
            return Err(Error::Shape(format!("b_o has length {}, expected {d}", self.b_o.len())));
        }
        if x.nrows() == 0 {
            return Err(Error::Shape("input has no rows".into()));
        }
        if x.ncols() != d {
            return Err(Error::Shape(format!("input has {} columns, expected {d}", x.ncols())));
        }
        Ok(())
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct AttentionCache {
    pub input: Array2<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    pub weights: Vec<Array2<f64>>,
    pub concat: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct AttentionGrads {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
}

/// Row-wise softmax of `scores`, ignoring columns where `key_mask` is false.
fn masked_softmax(mut scores: Array2<f64>, key_mask: Option<&[bool]>) -> Array2<f64> {
    for mut row in scores.rows_mut() {
        if let Some(mask) = key_mask {
            for (v, &keep) in row.iter_mut().zip(mask) {
                if !keep {
                    *v = f64::NEG_INFINITY;
                }
            }
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = if v.is_finite() { (*v - max).exp() } else { 0.0 };
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    scores
}

pub(crate) fn forward_cached(
    x: &Array2<f64>,
    layer: &AttentionLayer,
    key_mask: Option<&[bool]>,
) -> Result<(Array2<f64>, AttentionCache)> {
    layer.check(x)?;
    if let Some(mask) = key_mask {
        if mask.len() != x.nrows() {
            return Err(Error::Shape(format!(
                "key mask has length {}, expected {}",
                mask.len(),
                x.nrows()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Shape("key mask hides every position".into()));
        }
    }
    let d_k = layer.d_k();
    let scale = 1.0 / (d_k as f64).sqrt();
    let q = x.dot(&layer.w_q);
    let k = x.dot(&layer.w_k);
    let v = x.dot(&layer.w_v);
    let mut concat = Array2::zeros(x.raw_dim());
    let mut weights = Vec::with_capacity(layer.head_count);
    for h in 0..layer.head_count {
        let cols = s![.., h * d_k..(h + 1) * d_k];
        let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        let attn = masked_softmax(scores, key_mask);
        concat.slice_mut(cols).assign(&attn.dot(&v.slice(cols)));
        weights.push(attn);
    }
    let out = concat.dot(&layer.w_o) + &layer.b_o;
    Ok((
        out,
        AttentionCache {
            input: x.clone(),
            q,
            k,
            v,
            weights,
            concat,
        },
    ))
}

/// softmax(QKᵀ/√d_k)V per head, concatenated and projected through `w_o`.
/// Returns the output and the per-head attention weights.
pub fn self_attention(x: &Array2<f64>, layer: &AttentionLayer) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let (out, cache) = forward_cached(x, layer, None)?;
    Ok((out, cache.weights))
}

/// Like [`self_attention`], with padding keys hidden from every query.
pub fn self_attention_masked(
    x: &Array2<f64>,
    layer: &AttentionLayer,
    key_mask: &[bool],
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let (out, cache) = forward_cached(x, layer, Some(key_mask))?;
    Ok((out, cache.weights))
}

/// Returns parameter gradients and the gradient w.r.t. the layer input.
pub(crate) fn backward(
    layer: &AttentionLayer,
    cache: &AttentionCache,
    d_out: &Array2<f64>,
) -> (AttentionGrads, Array2<f64>) {
    let d_k = layer.d_k();
    let scale = 1.0 / (d_k as f64).sqrt();
    let w_o = cache.concat.t().dot(d_out);
    let b_o = d_out.sum_axis(Axis(0));
    let d_concat = d_out.dot(&layer.w_o.t());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for (h, attn) in cache.weights.iter().enumerate() {
        let cols = s![.., h * d_k..(h + 1) * d_k];
        let d_head = d_concat.slice(cols);
        let d_attn = d_head.dot(&cache.v.slice(cols).t());
        dv.slice_mut(cols).assign(&attn.t().dot(&d_head));
        // Softmax Jacobian, row by row.
        let row_dot = (&d_attn * attn).sum_axis(Axis(1)).insert_axis(Axis(1));
        let d_scores = attn * &(&d_attn - &row_dot) * scale;
        dq.slice_mut(cols).assign(&d_scores.dot(&cache.k.slice(cols)));
        dk.slice_mut(cols).assign(&d_scores.t().dot(&cache.q.slice(cols)));
    }
    let x_t = cache.input.t();
    let grads = AttentionGrads {
        w_q: x_t.dot(&dq),
        w_k: x_t.dot(&dk),
        w_v: x_t.dot(&dv),
        w_o,
        b_o,
    };
    let d_x = dq.dot(&layer.w_q.t()) + dk.dot(&layer.w_k.t()) + dv.dot(&layer.w_v.t());
    (grads, d_x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn identity_layer(d: usize, heads: usize) -> AttentionLayer {
        let eye = Array2::eye(d);
        AttentionLayer {
            w_q: eye.clone(),
            w_k: eye.clone(),
            w_v: eye.clone(),
            w_o: eye,
            b_o: Array1::zeros(d),
            head_count: heads,
        }
    }

    #[test]
    fn singleton_attends_to_itself() {
        let x = array![[0.3, -1.2, 0.5, 2.0]];
        let (out, w) = self_attention(&x, &identity_layer(4, 2)).unwrap();
        for head in &w {
            assert_eq!(head, &array![[1.0]]);
        }
        assert!((&out - &x).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn zero_queries_give_uniform_rows() {
        let mut layer = identity_layer(2, 1);
        layer.w_q.fill(0.0);
        layer.w_k.fill(0.0);
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 9.0]];
        let (out, w) = self_attention(&x, &layer).unwrap();
        assert!(w[0].iter().all(|&a| (a - 1.0 / 3.0).abs() < 1e-12));
        let mean = x.mean_axis(Axis(0)).unwrap();
        for row in out.rows() {
            assert!((&row - &mean).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn shape_errors() {
        let layer = identity_layer(4, 2);
        assert!(self_attention(&Array2::zeros((3, 5)), &layer).is_err());
        assert!(self_attention(&Array2::zeros((0, 4)), &layer).is_err());
        assert!(self_attention(&Array2::zeros((2, 4)), &identity_layer(4, 3)).is_err());
        assert!(self_attention_masked(&Array2::zeros((2, 4)), &layer, &[false, false]).is_err());
    }

    #[test]
    fn masked_keys_get_no_weight() {
        let x = array![[1.0, 0.0], [0.0, 1.0], [7.0, 7.0]];
        let (_, w) = self_attention_masked(&x, &identity_layer(2, 1), &[true, true, false]).unwrap();
        assert!(w[0].column(2).iter().all(|&a| a == 0.0));
        for row in w[0].rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
