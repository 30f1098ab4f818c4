use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sl_audit::corpus::{tokenize_note, Corpus, Note, TokenSeq};
use sl_audit::explain::{leave_one_out, mask_at};
use sl_audit::lexicon::{sl_mask, SlLexicon};
use sl_audit::tinyformer::{
    attention_dilution_report, gradient_check, read_checkpoint, self_attention_masked, train, write_checkpoint,
    AttentionLayer, Hyper, TransformerModel, Vocab,
};

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
}

/// Loop-based evaluation of masked multi-head attention.
fn dense_masked(x: &Array2<f64>, l: &AttentionLayer, keep: &[bool]) -> Array2<f64> {
    let (n, d) = x.dim();
    let dk = d / l.head_count;
    let mm = |a: &Array2<f64>, b: &Array2<f64>| {
        let mut out = Array2::<f64>::zeros((a.nrows(), b.ncols()));
        for i in 0..a.nrows() {
            for j in 0..b.ncols() {
                out[[i, j]] = (0..a.ncols()).map(|k| a[[i, k]] * b[[k, j]]).sum();
            }
        }
        out
    };
    let (q, k, v) = (mm(x, &l.w_q), mm(x, &l.w_k), mm(x, &l.w_v));
    let mut concat = Array2::<f64>::zeros((n, d));
    for h in 0..l.head_count {
        for i in 0..n {
            let scores: Vec<Option<f64>> = (0..n)
                .map(|j| {
                    keep[j].then(|| {
                        (0..dk).map(|c| q[[i, h * dk + c]] * k[[j, h * dk + c]]).sum::<f64>() / (dk as f64).sqrt()
                    })
                })
                .collect();
            let max = scores.iter().flatten().cloned().fold(f64::MIN, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            for c in 0..dk {
                concat[[i, h * dk + c]] = (0..n)
                    .filter_map(|j| scores[j].map(|s| (s - max).exp() / z * v[[j, h * dk + c]]))
                    .sum();
            }
        }
    }
    let mut out = mm(&concat, &l.w_o);
    for mut row in out.rows_mut() {
        row += &l.b_o;
    }
    out
}

#[test]
fn masked_attention_matches_dense_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (n, d, heads) = (rng.gen_range(2..7), 8, [1, 2, 4][rng.gen_range(0..3)]);
        let layer = AttentionLayer {
            w_q: random_matrix(&mut rng, d, d),
            w_k: random_matrix(&mut rng, d, d),
            w_v: random_matrix(&mut rng, d, d),
            w_o: random_matrix(&mut rng, d, d),
            b_o: Array1::from_shape_fn(d, |_| rng.gen_range(-1.0..1.0)),
            head_count: heads,
        };
        let x = random_matrix(&mut rng, n, d);
        let mut keep: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
        keep[0] = true;
        let (out, weights) = self_attention_masked(&x, &layer, &keep).unwrap();
        let oracle = dense_masked(&x, &layer, &keep);
        assert!((&out - &oracle).iter().all(|e| e.abs() < 1e-9));
        for w in &weights {
            for row in w.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().zip(&keep).all(|(a, &k)| k || *a == 0.0));
            }
        }
    }
}

fn note(i: usize, label: u8, text: String) -> Note {
    Note {
        note_id: format!("n{i:04}"),
        patient_id: format!("p{i:04}"),
        clinician_ids: vec!["c1".into()],
        category: "Nursing".into(),
        group: if i.is_multiple_of(2) { "white" } else { "black" }.into(),
        label,
        window_hours: 1.0,
        text,
    }
}

/// Label-1 notes carry one of the `up*` markers, label-0 notes one of the
/// `down*` markers; the rest is shared filler.
fn separable_corpus(n: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let notes = (0..n)
        .map(|i| {
            let label = (i % 3 == 0) as u8;
            let marker = if label == 1 { "up" } else { "down" };
            let mut words: Vec<String> = (0..12).map(|_| format!("w{}", rng.gen_range(0..30))).collect();
            for _ in 0..2 {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, format!("{marker}{}", rng.gen_range(0..3)));
            }
            note(i, label, words.join(" "))
        })
        .collect();
    Corpus::new(notes, "original").unwrap()
}

/// Bag-of-words logistic regression by full-batch gradient descent.
fn logistic_baseline_accuracy(c: &Corpus) -> f64 {
    let seqs: Vec<TokenSeq> = c.notes.iter().map(tokenize_note).collect();
    let vocab = Vocab::build(seqs.iter().map(|s| s.tokens.as_slice()), 1000);
    let mut w = vec![0.0; vocab.len()];
    let mut b = 0.0;
    let feats: Vec<Vec<u32>> = seqs.iter().map(|s| vocab.encode(s)).collect();
    let ys: Vec<f64> = c.notes.iter().map(|n| n.label as f64).collect();
    let logit = |w: &[f64], b: f64, f: &[u32]| b + f.iter().map(|&i| w[i as usize]).sum::<f64>();
    for _ in 0..300 {
        let mut gw = vec![0.0; w.len()];
        let mut gb = 0.0;
        for (f, y) in feats.iter().zip(&ys) {
            let err = 1.0 / (1.0 + (-logit(&w, b, f)).exp()) - y;
            gb += err;
            f.iter().for_each(|&i| gw[i as usize] += err);
        }
        b -= 0.5 * gb / feats.len() as f64;
        w.iter_mut()
            .zip(&gw)
            .for_each(|(wi, g)| *wi -= 0.5 * g / feats.len() as f64);
    }
    let correct = feats
        .iter()
        .zip(&ys)
        .filter(|(f, &y)| (logit(&w, b, f) > 0.0) == (y == 1.0))
        .count();
    correct as f64 / feats.len() as f64
}

#[test]
fn separable_corpus_is_learned() {
    let c = separable_corpus(200, 3);
    assert!(logistic_baseline_accuracy(&c) >= 0.95);
    let hyper = Hyper {
        epochs: 30,
        ..Hyper::default()
    };
    let model = train(&c, &hyper, 0).unwrap();
    let last = model.training_curve.last().unwrap();
    assert_eq!(model.training_curve.len(), 30);
    assert!(last.train_accuracy >= 0.95, "train accuracy {}", last.train_accuracy);
}

fn small_model(seed: u64) -> (TransformerModel, Corpus) {
    let c = separable_corpus(60, seed);
    let hyper = Hyper {
        model_dim: 8,
        head_count: 2,
        layer_count: 1,
        ff_dim: 16,
        max_len: 8,
        epochs: 3,
        ..Hyper::default()
    };
    (train(&c, &hyper, seed).unwrap(), c)
}

#[test]
fn gradients_match_finite_differences_for_two_seeds() {
    for seed in [1, 2] {
        let (model, c) = small_model(seed);
        let tokens = tokenize_note(&c.notes[0]);
        assert!(tokens.len() > model.hyper.max_len, "segmented input expected");
        let err = gradient_check(&model, &tokens, 1e-6).unwrap();
        assert!(err < 1e-3, "seed {seed}: relative error {err}");
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (model, c) = small_model(4);
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();
    let back = read_checkpoint(bytes.as_slice()).unwrap();
    assert_eq!(back.vocab.tokens(), model.vocab.tokens());
    assert_eq!(back.weights, model.weights);
    for n in &c.notes {
        let t = tokenize_note(n);
        assert_eq!(back.probability(&t).unwrap(), model.probability(&t).unwrap());
    }
    let mut again = Vec::new();
    write_checkpoint(&back, &mut again).unwrap();
    assert_eq!(bytes, again);
}

#[test]
fn truncated_checkpoint_is_rejected() {
    let (model, _) = small_model(5);
    let mut bytes = Vec::new();
    write_checkpoint(&model, &mut bytes).unwrap();
    bytes.truncate(bytes.len() / 2);
    assert!(read_checkpoint(bytes.as_slice()).is_err());
}

#[test]
fn training_is_deterministic() {
    let (a, _) = small_model(6);
    let (b, _) = small_model(6);
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.training_curve, b.training_curve);
}

#[test]
fn leave_one_out_matches_direct_rescoring() {
    let (model, c) = small_model(7);
    let tokens = tokenize_note(&c.notes[1]);
    let report = leave_one_out(&model, &tokens).unwrap();
    assert_eq!(report.original_probability, model.probability(&tokens).unwrap());
    for t in &report.tokens {
        let direct = model.probability(&mask_at(&tokens, t.position)).unwrap();
        assert_eq!(t.masked_probability, direct);
        assert_eq!(t.delta, direct - report.original_probability);
    }
    let mut ranks: Vec<usize> = report.tokens.iter().map(|t| t.rank).collect();
    ranks.sort_unstable();
    assert_eq!(ranks, (1..=tokens.len()).collect::<Vec<_>>());
}

#[test]
fn dilution_ratio_matches_recount_from_traces() {
    let (model, c) = small_model(8);
    let lex = SlLexicon::default();
    let notes: Vec<Note> = c
        .notes
        .iter()
        .take(12)
        .enumerate()
        .map(|(i, n)| {
            let mut n = n.clone();
            if i % 3 == 0 {
                n.text.push_str(" pt was combative and drug seeking");
            }
            n
        })
        .collect();
    let c = Corpus::new(notes, "original").unwrap();
    let report = attention_dilution_report(&model, &c, &lex).unwrap();
    let (mut all, mut all_n, mut sl, mut sl_n) = (0.0, 0, 0.0, 0);
    for n in &c.notes {
        let t = tokenize_note(n);
        let trace = model.predict(&t).unwrap().trace;
        assert!(trace.max_row_sum_error() < 1e-9);
        for (score, is_sl) in trace.token_scores.iter().zip(sl_mask(&t, &lex)) {
            all += score;
            all_n += 1;
            if is_sl {
                sl += score;
                sl_n += 1;
            }
        }
    }
    assert_eq!(report.token_count, all_n);
    assert_eq!(report.sl_token_count, sl_n);
    let expected = (sl / sl_n as f64) / (all / all_n as f64);
    assert!((report.ratio.unwrap() - expected).abs() < 1e-12);
}
