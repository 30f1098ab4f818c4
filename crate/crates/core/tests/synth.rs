use std::collections::{BTreeMap, BTreeSet};

use sl_audit::carenet::{build_graph, centrality_sl_stats, centrality_split};
use sl_audit::corpus::{tokenize_note, Corpus};
use sl_audit::lexicon::{is_sl_note, SlLexicon};
use sl_audit::synthgen::{describe, generate, SignalScope, SlMode, SynthConfig};

fn sl_flags(c: &Corpus) -> Vec<bool> {
    let lex = SlLexicon::default();
    c.notes.iter().map(|n| is_sl_note(&tokenize_note(n), &lex)).collect()
}

/// Half-width of a `z`-sigma binomial interval.
fn bound(p: f64, n: usize, z: f64) -> f64 {
    z * (p * (1.0 - p) / n as f64).sqrt()
}

#[test]
fn group_sl_rates_follow_the_config() {
    let cfg = SynthConfig {
        note_count: 10_000,
        seed: 21,
        ..SynthConfig::default()
    };
    let c = generate(&cfg).unwrap();
    let flags = sl_flags(&c);
    for (group, &rate) in &cfg.sl_rates {
        let idx: Vec<usize> = (0..c.len()).filter(|&i| c.notes[i].group == *group).collect();
        let hits = idx.iter().filter(|&&i| flags[i]).count();
        let empirical = hits as f64 / idx.len() as f64;
        let tol = if group == "black" {
            0.02
        } else {
            bound(rate, idx.len(), 4.0)
        };
        assert!((empirical - rate).abs() <= tol, "{group}: {empirical} vs {rate}");
    }
}

fn correlation(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn noise_mode_sl_is_uncorrelated_with_the_label() {
    let c = generate(&SynthConfig {
        note_count: 10_000,
        seed: 22,
        ..SynthConfig::default()
    })
    .unwrap();
    let sl: Vec<f64> = sl_flags(&c).into_iter().map(|f| f as u8 as f64).collect();
    let label: Vec<f64> = c.notes.iter().map(|n| n.label as f64).collect();
    assert!(correlation(&sl, &label).abs() < 0.03);
}

#[test]
fn signal_mode_sl_tracks_the_label() {
    let c = generate(&SynthConfig {
        note_count: 10_000,
        seed: 23,
        sl_mode: SlMode::Signal,
        ..SynthConfig::default()
    })
    .unwrap();
    let sl: Vec<f64> = sl_flags(&c).into_iter().map(|f| f as u8 as f64).collect();
    let label: Vec<f64> = c.notes.iter().map(|n| n.label as f64).collect();
    assert!(correlation(&sl, &label) > 0.05);
}

#[test]
fn manifest_matches_a_large_draw() {
    let cfg = SynthConfig {
        note_count: 50_000,
        seed: 24,
        sl_author_bias: 1.8,
        ..SynthConfig::default()
    };
    let m = describe(&cfg).unwrap();
    let c = generate(&cfg).unwrap();
    assert_eq!(c.len(), cfg.note_count);
    let flags = sl_flags(&c);
    let n = c.len();

    // Labels are shared within a patient, so the effective sample is the
    // patient count.
    let patients: BTreeSet<&str> = c.notes.iter().map(|x| x.patient_id.as_str()).collect();
    assert!((patients.len() as f64 / m.expected_patients - 1.0).abs() < 0.05);
    let pos = c.notes.iter().filter(|x| x.label == 1).count() as f64 / n as f64;
    let z = 5.0;
    assert!((pos - m.expected_label_prevalence).abs() <= bound(m.expected_label_prevalence, patients.len(), z) * 2.0);

    let sl_rate = flags.iter().filter(|&&f| f).count() as f64 / n as f64;
    assert!((sl_rate - m.expected_sl_rate).abs() <= bound(m.expected_sl_rate, n, z));

    for label in [0u8, 1] {
        let idx: Vec<usize> = (0..n).filter(|&i| c.notes[i].label == label).collect();
        let r = idx.iter().filter(|&&i| flags[i]).count() as f64 / idx.len() as f64;
        let p = m.expected_sl_rate_by_label[label as usize];
        assert!((r - p).abs() <= bound(p, idx.len(), z), "label {label}: {r} vs {p}");
    }

    let late = c.notes.iter().filter(|x| x.window_hours > 24.0).count() as f64 / n as f64;
    assert!((late - m.expected_late_fraction).abs() <= bound(m.expected_late_fraction, n, z));

    let clinicians: BTreeSet<&str> = c
        .notes
        .iter()
        .flat_map(|x| x.clinician_ids.iter().map(String::as_str))
        .collect();
    assert_eq!(clinicians.len(), m.hub_count + m.spoke_count);
    let g = build_graph(&c, &SlLexicon::default());
    let split = centrality_split(&g).unwrap();
    assert_eq!(split.central.len(), m.expected_central_count);
    assert!(split.central.iter().all(|id| id.starts_with('h')));
}

#[test]
fn author_bias_makes_central_clinicians_write_more_sl() {
    let lex = SlLexicon::default();
    let mut ahead = 0;
    for seed in 0..10 {
        let c = generate(&SynthConfig {
            seed,
            sl_author_bias: 1.8,
            ..SynthConfig::default()
        })
        .unwrap();
        let g = build_graph(&c, &lex);
        let stats = centrality_sl_stats(&g, &c, &lex).unwrap();
        let central = stats.overall.central.sl_note_pct.unwrap();
        let non_central = stats.overall.non_central.sl_note_pct.unwrap();
        ahead += (central > non_central) as usize;
    }
    assert_eq!(ahead, 10);
}

#[test]
fn signal_scope_restricts_the_label_link_to_spokes() {
    let cfg = SynthConfig {
        note_count: 40_000,
        seed: 25,
        sl_mode: SlMode::Signal,
        signal_scope: SignalScope::NonCentral,
        signal_lift: 3.0,
        ..SynthConfig::default()
    };
    let c = generate(&cfg).unwrap();
    let flags = sl_flags(&c);
    let mut rates: BTreeMap<(bool, u8), (usize, usize)> = BTreeMap::new();
    for (n, &f) in c.notes.iter().zip(&flags) {
        let hub = n.clinician_ids.iter().any(|id| id.starts_with('h'));
        let e = rates.entry((hub, n.label)).or_default();
        e.0 += f as usize;
        e.1 += 1;
    }
    let rate = |k| {
        let (a, b) = rates[&k];
        a as f64 / b as f64
    };
    assert!(rate((false, 1)) > 2.0 * rate((false, 0)));
    assert!((rate((true, 1)) - rate((true, 0))).abs() < 0.05);
}
