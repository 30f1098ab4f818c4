use std::collections::HashMap;

use sl_audit::corpus::{tokenize, Corpus, MASK_TOKEN};
use sl_audit::explain::{
    global_add_sentence, global_leave_one_out, input_reduction, leave_one_out, mask_at, FnScorer, ReplayScorer,
    StopRule, DEFAULT_SENTENCES,
};
use sl_audit::fairmetrics::{compute_metrics, ConfusionCounts};
use sl_audit::lexicon::{remove_sl, SlLexicon};
use sl_audit::synthgen::{generate, SynthConfig};

fn toks(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

/// Replay stub for the clause "when he aroused he was very combative ." whose
/// reduction path and probabilities follow a fixed reference trace.
/// At each step the masked variant of the scheduled victim scores highest,
/// so it is the one deleted.
fn reduction_stub() -> (ReplayScorer, Vec<String>, Vec<(&'static str, f64)>) {
    let start = toks(&["when", "he", "aroused", "he", "was", "very", "combative", "."]);
    // (victim position in the current sequence, token, probability after deletion)
    let schedule = [
        (6, "combative", 0.5991),
        (4, "was", 0.5902),
        (4, "very", 0.5378),
        (3, "he", 0.4930),
        (1, "he", 0.4390),
        (0, "when", 0.3062),
    ];
    let mut stub = ReplayScorer::new();
    stub.insert(&start, 0.4823);
    let mut current = start.clone();
    for &(victim, token, p_after) in &schedule {
        assert_eq!(current[victim], token);
        for pos in 0..current.len() {
            stub.insert(&mask_at(&current, pos), if pos == victim { 0.9 } else { 0.1 });
        }
        current.remove(victim);
        stub.insert(&current, p_after);
    }
    let expected = schedule.iter().map(|&(_, t, p)| (t, p)).collect();
    (stub, start, expected)
}

#[test]
fn reduction_follows_the_reference_path() {
    let (stub, start, expected) = reduction_stub();
    let trace = input_reduction(&stub, &start, StopRule::Budget(6)).unwrap();
    assert!((trace.original_probability - 0.4823).abs() < 1e-12);
    assert_eq!(trace.steps.len(), 6);
    for (step, (token, p)) in trace.steps.iter().zip(expected) {
        assert_eq!(step.removed_token, token);
        assert!((step.probability - p).abs() < 1e-12);
    }
    assert_eq!(trace.steps.last().unwrap().remaining, toks(&["aroused", "."]));
    let improvement: Vec<f64> = trace.steps.iter().map(|s| (s.probability - 0.4823) * 100.0).collect();
    let reference_pp = [11.68, 10.79, 5.55, 1.07, -4.33, -17.61];
    for (a, b) in improvement.iter().zip(reference_pp) {
        assert!((a - b).abs() < 0.01 + 1e-9, "{a} vs {b}");
    }
}

#[test]
fn reduction_on_a_two_token_linear_scorer_drops_the_negative_word() {
    let w: HashMap<&str, f64> = [("a", 0.3), ("b", -0.2)].into();
    let scorer =
        FnScorer(|t: &[String]| 0.5 + t.iter().map(|x| w.get(x.as_str()).copied().unwrap_or(0.0)).sum::<f64>() / 2.0);
    let trace = input_reduction(&scorer, &toks(&["a", "b"]), StopRule::Budget(1)).unwrap();
    assert_eq!(trace.steps[0].removed_token, "b");
    assert_eq!(trace.steps[0].remaining, toks(&["a"]));
}

#[test]
fn masking_uses_the_reserved_token() {
    let t = toks(&["x", "y"]);
    assert_eq!(mask_at(&t, 1), toks(&["x", MASK_TOKEN]));
    let seen = std::sync::Mutex::new(Vec::new());
    let scorer = FnScorer(|t: &[String]| {
        seen.lock().unwrap().push(t.to_vec());
        0.5
    });
    leave_one_out(&scorer, &t).unwrap();
    assert!(seen.lock().unwrap().contains(&toks(&[MASK_TOKEN, "y"])));
}

/// Logistic bag-of-words stub with a planted penalty on group words.
fn planted_scorer(t: &[String]) -> f64 {
    let mut z: f64 = -0.4;
    for w in t {
        z += match w.as_str() {
            s if s.starts_with("ma") => 0.35,
            s if s.starts_with("mb") => -0.35,
            "african" | "american" => -0.6,
            "drug" | "abuse" => -0.25,
            _ => 0.0,
        };
    }
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn planted_group_sensitivity_shows_in_the_global_sweep() {
    let c = generate(&SynthConfig {
        note_count: 3000,
        seed: 9,
        prevalence: 0.3,
        ..SynthConfig::default()
    })
    .unwrap();
    let sentences: Vec<String> = DEFAULT_SENTENCES.iter().map(|s| s.to_string()).collect();
    let table = global_add_sentence(&FnScorer(planted_scorer), &c, &sentences).unwrap();
    assert_eq!(table.rows.len(), 6);
    let drop = |i: usize| -table.rows[i].delta_pp.recall_positive;
    assert!(table.rows[0].metrics.recall_positive > 0.3);
    assert!(drop(2) > drop(1), "group sentence: {} vs {}", drop(2), drop(1));
    assert!(drop(5) > drop(4));
    let worst = (1..6).max_by(|&a, &b| drop(a).total_cmp(&drop(b))).unwrap();
    assert_eq!(worst, 5);
    // Oracle for one row: direct recount.
    let cc = ConfusionCounts::from_scores(c.notes.iter().map(|n| {
        let mut t = tokenize(&n.text).tokens;
        t.extend(tokenize(&sentences[1]).tokens);
        (n.label, planted_scorer(&t))
    }));
    assert_eq!(table.rows[2].metrics, compute_metrics(&cc).unwrap());
}

#[test]
fn global_leave_one_out_rows_match_a_recount() {
    let lex = SlLexicon::default();
    let c = generate(&SynthConfig {
        note_count: 800,
        seed: 10,
        prevalence: 0.3,
        ..SynthConfig::default()
    })
    .unwrap();
    let scorer = FnScorer(planted_scorer);
    let table = global_leave_one_out(&scorer, &c, &lex, 3, 1).unwrap();
    let sl_notes: Vec<_> = c
        .notes
        .iter()
        .filter(|n| sl_audit::lexicon::is_sl_note(&tokenize(&n.text), &lex))
        .collect();
    assert_eq!(table.sample_count, sl_notes.len());
    let cc = ConfusionCounts::from_scores(sl_notes.iter().map(|n| {
        let stripped = remove_sl(&tokenize(&n.text), &lex);
        (n.label, planted_scorer(&stripped))
    }));
    assert_eq!(table.row("sl_removed").unwrap().metrics, compute_metrics(&cc).unwrap());
    assert!(table.row("random_removal").is_some());
    let again = global_leave_one_out(&scorer, &c, &lex, 3, 1).unwrap();
    assert_eq!(table, again);
}

/// Bag-of-words scorer blind to SL: SL removal leaves every score intact,
/// while random removal of the same count deletes informative words.
fn sl_blind_scorer(t: &[String]) -> f64 {
    let z: f64 = t
        .iter()
        .map(|w| match w.as_bytes() {
            [b'm', b'a', ..] => 0.5,
            [b'm', b'b', ..] => -0.5,
            _ => 0.0,
        })
        .sum();
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn sl_removal_keeps_recall_while_random_removal_costs_it() {
    let lex = SlLexicon::default();
    let c: Corpus = generate(&SynthConfig {
        note_count: 1500,
        seed: 12,
        prevalence: 0.3,
        sl_burst_min: 4,
        sl_burst_max: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let table = global_leave_one_out(&FnScorer(sl_blind_scorer), &c, &lex, 5, 3).unwrap();
    let original = table.row("original").unwrap().metrics.recall_positive;
    let removed = table.row("sl_removed").unwrap().metrics.recall_positive;
    let random = table.row("random_removal").unwrap().metrics.recall_positive;
    assert_eq!(removed, original);
    assert!(random < removed, "random {random} vs sl_removed {removed}");
}
