//! Seeded synthetic corpora with planted structure: class-conditional
//! informative tokens, SL inserted as noise or as signal, group-dependent SL
//! rates, and hub-and-spoke clinician teams with author-dependent SL rates.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Note};
use crate::error::{Error, Result};
use crate::lexicon::DEFAULT_ENTRIES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlMode {
    /// SL presence is independent of the label.
    Noise,
    /// SL presence depends on the label (see `signal_lift`).
    Signal,
}

/// Which notes carry label-dependent SL in signal mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalScope {
    All,
    /// Only notes without a hub author; hub-authored SL stays noise.
    NonCentral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub note_count: usize,
    /// Mean notes per patient; counts are uniform on `1..=2m-1`.
    pub notes_per_patient: usize,
    /// Share of patients with label 1. All notes of a patient share its label.
    pub prevalence: f64,
    pub group_mix: BTreeMap<String, f64>,
    /// Probability that a note of the group contains SL.
    pub sl_rates: BTreeMap<String, f64>,
    pub sl_mode: SlMode,
    pub signal_scope: SignalScope,
    /// In signal mode, SL probability of label-1 notes relative to the group rate.
    pub signal_lift: f64,
    /// SL entries per SL note, uniform on `sl_burst_min..=sl_burst_max`.
    pub sl_burst_min: usize,
    pub sl_burst_max: usize,
    /// Chance that a note reuses its patient's SL draw instead of a fresh one.
    pub sl_patient_correlation: f64,
    pub clinician_count: usize,
    pub hub_fraction: f64,
    /// Share of notes written by the patient's hub clinician.
    pub hub_note_fraction: f64,
    /// Chance that a hub-written note also lists one of the patient's spokes.
    pub co_author_rate: f64,
    /// SL probability multiplier for hub-written notes. Group rates are
    /// rescaled so the per-group marginal stays at `sl_rates`.
    pub sl_author_bias: f64,
    pub min_words: usize,
    pub max_words: usize,
    /// Size of each label-leaning half of the informative vocabulary.
    pub informative_vocab: usize,
    pub noise_vocab: usize,
    /// Share of word slots holding an informative token.
    pub informative_rate: f64,
    /// Chance an informative token comes from the note's own label half.
    pub separation: f64,
    /// Share of notes written after the first 24 hours.
    pub late_fraction: f64,
    pub window_max_hours: f64,
    pub discharge_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            note_count: 2000,
            notes_per_patient: 4,
            prevalence: 0.095,
            group_mix: [("black", 0.3), ("other", 0.2), ("white", 0.5)]
                .iter()
                .map(|(g, p)| (g.to_string(), *p))
                .collect(),
            sl_rates: [("black", 0.2423), ("other", 0.1569), ("white", 0.2237)]
                .iter()
                .map(|(g, p)| (g.to_string(), *p))
                .collect(),
            sl_mode: SlMode::Noise,
            signal_scope: SignalScope::All,
            signal_lift: 2.0,
            sl_burst_min: 1,
            sl_burst_max: 3,
            sl_patient_correlation: 0.0,
            clinician_count: 60,
            hub_fraction: 0.1,
            hub_note_fraction: 0.3,
            co_author_rate: 0.2,
            sl_author_bias: 1.0,
            min_words: 24,
            max_words: 48,
            informative_vocab: 20,
            noise_vocab: 400,
            informative_rate: 0.15,
            separation: 0.75,
            late_fraction: 0.3,
            window_max_hours: 168.0,
            discharge_fraction: 0.0,
        }
    }
}

fn prob(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} = {v} is not a probability")))
    }
}

impl SynthConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: SynthConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hub_count(&self) -> usize {
        ((self.clinician_count as f64 * self.hub_fraction).round() as usize).clamp(1, self.clinician_count.max(1))
    }

    /// Group rate before the author multiplier, chosen so the marginal over
    /// hub and spoke notes equals the configured rate.
    fn base_rate(&self, rate: f64) -> f64 {
        let h = self.hub_note_fraction;
        rate / (h * self.sl_author_bias + 1.0 - h)
    }

    /// Label-1 and label-0 SL probabilities for a note whose unconditional
    /// probability is `p`, keeping the marginal at `p` when possible.
    fn signal_rates(&self, p: f64) -> (f64, f64) {
        let pi = self.prevalence;
        let r1 = (p * self.signal_lift).min(1.0);
        let r0 = if pi < 1.0 {
            ((p - pi * r1) / (1.0 - pi)).max(0.0)
        } else {
            p
        };
        (r1, r0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [
            ("prevalence", self.prevalence),
            ("sl_patient_correlation", self.sl_patient_correlation),
            ("hub_fraction", self.hub_fraction),
            ("hub_note_fraction", self.hub_note_fraction),
            ("co_author_rate", self.co_author_rate),
            ("informative_rate", self.informative_rate),
            ("separation", self.separation),
            ("late_fraction", self.late_fraction),
            ("discharge_fraction", self.discharge_fraction),
        ] {
            prob(name, v)?;
        }
        for (g, &r) in &self.sl_rates {
            prob(&format!("sl_rates.{g}"), r)?;
            if self.base_rate(r) * self.sl_author_bias.max(1.0) > 1.0 {
                return bad(format!(
                    "sl_rates.{g} = {r} cannot be reached with sl_author_bias {}",
                    self.sl_author_bias
                ));
            }
        }
        for (g, &m) in &self.group_mix {
            prob(&format!("group_mix.{g}"), m)?;
        }
        let mix: f64 = self.group_mix.values().sum();
        if self.group_mix.is_empty() || (mix - 1.0).abs() > 1e-9 {
            return bad(format!("group_mix must sum to 1, got {mix}"));
        }
        if !self.group_mix.keys().eq(self.sl_rates.keys()) {
            return bad("group_mix and sl_rates must name the same groups".into());
        }
        if self.note_count == 0 || self.notes_per_patient == 0 || self.clinician_count < 2 {
            return bad("note_count and notes_per_patient must be positive, clinician_count at least 2".into());
        }
        if self.hub_count() >= self.clinician_count {
            return bad("hub_fraction leaves no spoke clinicians".into());
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return bad(format!("word range {}..={} is empty", self.min_words, self.max_words));
        }
        if self.sl_burst_min == 0 || self.sl_burst_min > self.sl_burst_max {
            return bad(format!(
                "burst range {}..={} is empty",
                self.sl_burst_min, self.sl_burst_max
            ));
        }
        if self.informative_vocab == 0 || self.noise_vocab == 0 {
            return bad("vocabulary sizes must be positive".into());
        }
        if !(self.signal_lift >= 0.0 && self.signal_lift.is_finite()) {
            return bad(format!("signal_lift {} must be a nonnegative number", self.signal_lift));
        }
        if !(self.sl_author_bias > 0.0 && self.sl_author_bias.is_finite()) {
            return bad(format!("sl_author_bias {} must be positive", self.sl_author_bias));
        }
        if !(self.window_max_hours > 24.0 && self.window_max_hours.is_finite()) {
            return bad("window_max_hours must exceed 24".into());
        }
        Ok(())
    }
}

fn pick_weighted<'a>(rng: &mut ChaCha8Rng, items: &'a BTreeMap<String, f64>) -> &'a str {
    let mut u: f64 = rng.gen();
    let mut last = "";
    for (k, &w) in items {
        last = k;
        if u < w {
            return k;
        }
        u -= w;
    }
    last
}

pub fn hub_id(i: usize) -> String {
    format!("h{i:03}")
}

pub fn spoke_id(i: usize) -> String {
    format!("s{i:04}")
}

/// Generates a corpus. Deterministic given the config.
pub fn generate(cfg: &SynthConfig) -> Result<Corpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let hubs = cfg.hub_count();
    let spokes = cfg.clinician_count - hubs;
    // Spokes are dealt round-robin from reshuffled decks, so patient loads stay even.
    let mut deck: Vec<usize> = Vec::new();
    let mut next_spoke = |rng: &mut ChaCha8Rng| -> usize {
        if deck.is_empty() {
            deck = (0..spokes).collect();
            for i in (1..deck.len()).rev() {
                deck.swap(i, rng.gen_range(0..=i));
            }
        }
        deck.pop().expect("refilled deck")
    };

    let mut notes = Vec::with_capacity(cfg.note_count);
    let mut patient = 0usize;
    while notes.len() < cfg.note_count {
        let group = pick_weighted(&mut rng, &cfg.group_mix).to_string();
        let label = rng.gen_bool(cfg.prevalence) as u8;
        let count = rng
            .gen_range(1..=2 * cfg.notes_per_patient - 1)
            .min(cfg.note_count - notes.len());
        let hub = hub_id(patient % hubs);
        let team = [spoke_id(next_spoke(&mut rng)), spoke_id(next_spoke(&mut rng))];
        let patient_u: f64 = rng.gen();
        let rate = cfg.sl_rates[&group];
        for _ in 0..count {
            let hub_note = rng.gen_bool(cfg.hub_note_fraction);
            let spoke = team[rng.gen_range(0..team.len())].clone();
            let clinician_ids = if !hub_note {
                vec![spoke]
            } else if rng.gen_bool(cfg.co_author_rate) {
                vec![hub.clone(), spoke]
            } else {
                vec![hub.clone()]
            };
            let category = if rng.gen_bool(cfg.discharge_fraction) {
                "Discharge summary"
            } else if hub_note {
                "Physician"
            } else {
                "Nursing"
            };
            let window_hours = if rng.gen_bool(cfg.late_fraction) {
                rng.gen_range(24.0..cfg.window_max_hours).max(24.001)
            } else {
                rng.gen_range(0.0..=24.0)
            };

            let mut p = cfg.base_rate(rate) * if hub_note { cfg.sl_author_bias } else { 1.0 };
            let signal = cfg.sl_mode == SlMode::Signal && (cfg.signal_scope == SignalScope::All || !hub_note);
            if signal {
                let (r1, r0) = cfg.signal_rates(p);
                p = if label == 1 { r1 } else { r0 };
            }
            let u = if rng.gen_bool(cfg.sl_patient_correlation) {
                patient_u
            } else {
                rng.gen()
            };
            let has_sl = u < p;

            let len = rng.gen_range(cfg.min_words..=cfg.max_words);
            let mut words: Vec<String> = Vec::with_capacity(len);
            let mut noise_slots = Vec::new();
            for slot in 0..len {
                if rng.gen_bool(cfg.informative_rate) {
                    let own = rng.gen_bool(cfg.separation);
                    let positive = (label == 1) == own;
                    let idx = rng.gen_range(0..cfg.informative_vocab);
                    words.push(format!("{}{idx}", if positive { "ma" } else { "mb" }));
                } else {
                    words.push(format!("x{}", rng.gen_range(0..cfg.noise_vocab)));
                    noise_slots.push(slot);
                }
            }
            if has_sl {
                let burst = rng
                    .gen_range(cfg.sl_burst_min..=cfg.sl_burst_max)
                    .min(noise_slots.len());
                for _ in 0..burst {
                    let at = noise_slots.swap_remove(rng.gen_range(0..noise_slots.len()));
                    words[at] = DEFAULT_ENTRIES[rng.gen_range(0..DEFAULT_ENTRIES.len())].to_string();
                }
            }
            notes.push(Note {
                note_id: format!("n{:06}", notes.len()),
                patient_id: format!("p{patient:05}"),
                clinician_ids,
                category: category.to_string(),
                group: group.clone(),
                label,
                window_hours,
                text: words.join(" "),
            });
        }
        patient += 1;
    }
    Corpus::new(notes, "original")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedEffect {
    pub effect: String,
    pub mechanism: String,
    /// The audit result this effect is meant to make detectable.
    pub detects: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub expected_label_prevalence: f64,
    pub expected_patients: f64,
    pub expected_sl_rate_by_group: BTreeMap<String, f64>,
    pub expected_sl_rate: f64,
    /// Expected SL rate among label-1 and label-0 notes.
    pub expected_sl_rate_by_label: [f64; 2],
    pub expected_late_fraction: f64,
    pub hub_count: usize,
    pub spoke_count: usize,
    pub expected_central_count: usize,
    pub planted_effects: Vec<PlantedEffect>,
}

fn effect(effect: &str, mechanism: &str, detects: &str) -> PlantedEffect {
    PlantedEffect {
        effect: effect.into(),
        mechanism: mechanism.into(),
        detects: detects.into(),
    }
}

/// Config plus the population statistics `generate` is expected to realize.
pub fn describe(cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    let h = cfg.hub_note_fraction;
    let mut by_label = [0.0, 0.0];
    for (g, &mix) in &cfg.group_mix {
        let base = cfg.base_rate(cfg.sl_rates[g]);
        for (hub, weight) in [(true, h), (false, 1.0 - h)] {
            let p = base * if hub { cfg.sl_author_bias } else { 1.0 };
            let signal = cfg.sl_mode == SlMode::Signal && (cfg.signal_scope == SignalScope::All || !hub);
            let (r1, r0) = if signal { cfg.signal_rates(p) } else { (p, p) };
            by_label[1] += mix * weight * r1;
            by_label[0] += mix * weight * r0;
        }
    }
    let pi = cfg.prevalence;
    let hubs = cfg.hub_count();
    let mut effects = vec![effect(
        "label_signal",
        "informative tokens drawn from the note's own label half with probability `separation`",
        "a classifier trained on the corpus beats chance",
    )];
    effects.push(match cfg.sl_mode {
        SlMode::Noise => effect(
            "sl_noise",
            "SL entries replace noise tokens independently of the label",
            "removing SL does not lose label information; SL acts as noise",
        ),
        SlMode::Signal => effect(
            "sl_signal",
            "SL probability of label-1 notes scaled by `signal_lift` within `signal_scope`",
            "removing SL loses label information in the affected notes",
        ),
    });
    effects.push(effect(
        "group_skew",
        "per-group SL note rates from `sl_rates`",
        "SL prevalence differs by group and SL removal changes the group gap",
    ));
    effects.push(effect(
        "central_authorship",
        "hub clinicians see many patients; their notes carry SL at `sl_author_bias` times the spoke rate",
        "central clinicians write SL more often than non-central ones",
    ));
    Ok(Manifest {
        config: cfg.clone(),
        expected_label_prevalence: pi,
        expected_patients: cfg.note_count as f64 / cfg.notes_per_patient as f64,
        expected_sl_rate: cfg.group_mix.iter().map(|(g, m)| m * cfg.sl_rates[g]).sum(),
        expected_sl_rate_by_group: cfg.sl_rates.clone(),
        expected_sl_rate_by_label: by_label,
        expected_late_fraction: cfg.late_fraction,
        hub_count: hubs,
        spoke_count: cfg.clinician_count - hubs,
        expected_central_count: hubs,
        planted_effects: effects,
    })
}
