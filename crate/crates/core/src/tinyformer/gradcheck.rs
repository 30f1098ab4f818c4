use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{self, weighted_bce, ForwardCache, TransformerModel, Weights};
use crate::corpus::TokenSeq;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub label: u8,
    /// Loss weight; zero removes the learning signal entirely.
    pub label_weight: f64,
    pub epsilon: f64,
    /// Coordinates sampled from each weight tensor.
    pub per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            label: 1,
            label_weight: 1.0,
            epsilon: 1e-6,
            per_tensor: 4,
            seed: 0,
        }
    }
}

/// Relative errors below this absolute scale are not meaningful in f64.
const ABS_FLOOR: f64 = 1e-7;

fn example_loss(
    weights: &Weights,
    model: &TransformerModel,
    segments: &[Vec<u32>],
    opts: &GradCheckOptions,
) -> Result<(f64, Vec<ForwardCache>)> {
    let mut total = 0.0;
    let mut caches = Vec::with_capacity(segments.len());
    for ids in segments {
        let cache = model::forward(weights, &model.positions, ids)?;
        total += weighted_bce(cache.logit, opts.label, opts.label_weight).0;
        caches.push(cache);
    }
    Ok((total / segments.len() as f64, caches))
}

fn relu_pattern(caches: &[ForwardCache]) -> Vec<bool> {
    caches.iter().flat_map(|c| c.relu_pattern()).collect()
}

/// Max relative error between analytic and central-difference gradients
/// over the default sample.
pub fn gradient_check(model: &TransformerModel, tokens: &TokenSeq, epsilon: f64) -> Result<f64> {
    gradient_check_with(
        model,
        tokens,
        &GradCheckOptions {
            epsilon,
            seed: model.seed,
            ..GradCheckOptions::default()
        },
    )
}

/// Coordinates where the perturbation flips a ReLU are skipped: the loss is
/// not differentiable across the kink.
pub fn gradient_check_with(model: &TransformerModel, tokens: &TokenSeq, opts: &GradCheckOptions) -> Result<f64> {
    if !(1e-6..=1e-3).contains(&opts.epsilon) {
        return Err(Error::InvalidInput(format!(
            "epsilon {} outside [1e-6, 1e-3]",
            opts.epsilon
        )));
    }
    if tokens.is_empty() {
        return Err(Error::InvalidInput(
            "cannot check gradients on an empty sequence".into(),
        ));
    }
    let segments: Vec<Vec<u32>> = tokens
        .chunks(model.hyper.max_len)
        .map(|c| model.vocab.encode(c))
        .collect();
    let (_, caches) = example_loss(&model.weights, model, &segments, opts)?;
    let base_pattern = relu_pattern(&caches);
    let mut analytic = model.weights.zeros_like();
    for cache in &caches {
        let (_, d_logit) = weighted_bce(cache.logit, opts.label, opts.label_weight);
        model::backward(&model.weights, cache, d_logit / segments.len() as f64, &mut analytic);
    }

    let used_rows: Vec<usize> = {
        let mut rows: Vec<usize> = segments.iter().flatten().map(|&i| i as usize).collect();
        rows.sort_unstable();
        rows.dedup();
        rows
    };
    let dim = model.hyper.model_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut picks: Vec<(usize, usize)> = Vec::new();
    for (t, tensor) in model.weights.tensors().iter().enumerate() {
        for _ in 0..opts.per_tensor {
            let coord = if t == 0 {
                used_rows[rng.gen_range(0..used_rows.len())] * dim + rng.gen_range(0..dim)
            } else {
                rng.gen_range(0..tensor.len())
            };
            picks.push((t, coord));
        }
    }

    let analytic_flat = analytic.tensors();
    let mut worst = 0.0f64;
    let mut probe = model.weights.clone();
    for (t, coord) in picks {
        let original = probe.tensors()[t][coord];
        probe.tensors_mut()[t][coord] = original + opts.epsilon;
        let (plus, plus_caches) = example_loss(&probe, model, &segments, opts)?;
        probe.tensors_mut()[t][coord] = original - opts.epsilon;
        let (minus, minus_caches) = example_loss(&probe, model, &segments, opts)?;
        probe.tensors_mut()[t][coord] = original;
        if relu_pattern(&plus_caches) != base_pattern || relu_pattern(&minus_caches) != base_pattern {
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.epsilon);
        let exact = analytic_flat[t][coord];
        let rel = (exact - numeric).abs() / exact.abs().max(numeric.abs()).max(ABS_FLOOR);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::super::{Hyper, Vocab};
    use super::*;

    fn tiny(seed: u64) -> TransformerModel {
        let seqs: Vec<Vec<String>> = vec![["a", "b", "c", "d", "e"].map(String::from).to_vec()];
        let vocab = Vocab::build(seqs.iter().map(|s| s.as_slice()), 100);
        let hyper = Hyper {
            model_dim: 8,
            head_count: 2,
            layer_count: 1,
            ff_dim: 16,
            max_len: 16,
            ..Hyper::default()
        };
        TransformerModel::initialize(vocab, hyper, seed).unwrap()
    }

    #[test]
    fn analytic_gradients_match_finite_differences() {
        for seed in [1, 2] {
            let m = tiny(seed);
            let t = TokenSeq::from_strs(&["a", "c", "b", "e", "a", "d"]);
            let err = gradient_check(&m, &t, 1e-6).unwrap();
            assert!(err < 1e-3, "seed {seed}: {err}");
        }
    }

    #[test]
    fn zero_weight_means_zero_gradient() {
        let m = tiny(4);
        let t = TokenSeq::from_strs(&["b", "d"]);
        let opts = GradCheckOptions {
            label_weight: 0.0,
            ..GradCheckOptions::default()
        };
        assert_eq!(gradient_check_with(&m, &t, &opts).unwrap(), 0.0);
    }

    #[test]
    fn epsilon_range_is_enforced() {
        let m = tiny(1);
        let t = TokenSeq::from_strs(&["a"]);
        assert!(gradient_check(&m, &t, 1e-2).is_err());
        assert!(gradient_check(&m, &t, 1e-8).is_err());
    }
}
