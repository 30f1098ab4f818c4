use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{self, round_to_f32, weighted_bce, Hyper, TransformerModel, Weights};
use super::vocab::Vocab;
use crate::corpus::{tokenize_note, Corpus};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

/// Training curve as CSV: `epoch,loss,train_accuracy`.
pub fn curve_csv(curve: &[EpochStats]) -> String {
    let mut out = String::from("epoch,loss,train_accuracy\n");
    for e in curve {
        let _ = writeln!(out, "{},{:.6},{:.6}", e.epoch, e.loss, e.train_accuracy);
    }
    out
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Adam {
    m: Weights,
    v: Weights,
    step: i32,
    lr: f64,
}

impl Adam {
    fn new(like: &Weights, lr: f64) -> Self {
        Adam {
            m: like.zeros_like(),
            v: like.zeros_like(),
            step: 0,
            lr,
        }
    }

    fn update(&mut self, weights: &mut Weights, grads: &Weights) {
        self.step += 1;
        let c1 = 1.0 - BETA1.powi(self.step);
        let c2 = 1.0 - BETA2.powi(self.step);
        let lr = self.lr;
        for (((w, g), m), v) in weights
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut())
        {
            for i in 0..w.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

fn clip_global_norm(grads: &mut Weights, max_norm: f64) {
    let norm = grads
        .tensors()
        .iter()
        .flat_map(|t| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|g| *g *= scale);
        }
    }
}

struct Example {
    ids: Vec<u32>,
    label: u8,
}

/// Trains with weighted binary cross-entropy and Adam. Deterministic given `seed`.
pub fn train(train_corpus: &Corpus, hyper: &Hyper, seed: u64) -> Result<TransformerModel> {
    hyper.validate()?;
    if train_corpus.is_empty() {
        return Err(Error::InvalidInput("training corpus is empty".into()));
    }
    let positives = train_corpus.notes.iter().filter(|n| n.label == 1).count();
    if positives == 0 || positives == train_corpus.len() {
        return Err(Error::SingleClass(train_corpus.notes[0].label));
    }
    let token_seqs: Vec<_> = train_corpus.notes.iter().map(tokenize_note).collect();
    let vocab = Vocab::build(token_seqs.iter().map(|t| t.tokens.as_slice()), hyper.vocab_size);
    let mut examples = Vec::new();
    for (note, toks) in train_corpus.notes.iter().zip(&token_seqs) {
        for chunk in toks.chunks(hyper.max_len) {
            examples.push(Example {
                ids: vocab.encode(chunk),
                label: note.label,
            });
        }
    }
    let pos = examples.iter().filter(|e| e.label == 1).count();
    let neg = examples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass((pos > 0) as u8));
    }
    let pos_weight = (neg as f64 / pos as f64).min(hyper.pos_weight_cap);

    let mut model = TransformerModel::initialize(vocab, hyper.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut adam = Adam::new(&model.weights, hyper.learning_rate);
    let mut grads = model.weights.zeros_like();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(hyper.epochs);

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, batch) in order.chunks(hyper.batch_size).enumerate() {
            grads.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let ex = &examples[i];
                let cache = model.forward(&ex.ids)?;
                let weight = if ex.label == 1 { pos_weight } else { 1.0 };
                let (loss, d_logit) = weighted_bce(cache.logit, ex.label, weight);
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                loss_sum += loss;
                correct += ((model::sigmoid(cache.logit) > super::THRESHOLD) == (ex.label == 1)) as usize;
                model::backward(&model.weights, &cache, d_logit * scale, &mut grads);
            }
            if let Some(max_norm) = hyper.grad_clip {
                clip_global_norm(&mut grads, max_norm);
            }
            adam.update(&mut model.weights, &grads);
            round_to_f32(&mut model.weights);
        }
        curve.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / examples.len() as f64,
            train_accuracy: correct as f64 / examples.len() as f64,
        });
    }
    model.training_curve = curve;
    Ok(model)
}
