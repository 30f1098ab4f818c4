//! Command-line front end. Every command that writes an output directory
//! also writes `config.json` there, echoing the exact arguments used.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::carenet::{
    build_graph, centrality_sl_stats, centrality_split, export_graph, top_fraction_floor, CareGraph, GraphFormat,
};
use crate::corpus::{self, tokenize, tokenize_note, Corpus, Split};
use crate::error::{Error, Result};
use crate::explain::{
    add_sentence, global_add_sentence, global_leave_one_out, input_reduction, leave_one_out, ReplayScorer, Scorer,
    StopRule, DEFAULT_SENTENCES,
};
use crate::fairmetrics::{
    compute_metrics, group_slice, run_experiment_matrix, ConfusionCounts, ExperimentConfig, NotePrediction,
};
use crate::lexicon::{detect, sl_statistics, SlLexicon};
use crate::synthgen::{describe, generate, SynthConfig};
use crate::tinyformer::{
    attention_dilution_report, curve_csv, load_checkpoint, save_checkpoint, train, Hyper, TransformerModel,
};

#[derive(Debug, Parser)]
#[command(name = "sl-audit", version, about = "Audit clinical notes for stigmatizing language")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic corpus and its manifest
    Synth(SynthArgs),
    /// Validate and preprocess a corpus
    Ingest(IngestArgs),
    /// Flag SL notes and report SL statistics
    DetectSl(DetectArgs),
    /// Train a classifier on the training split
    Train(TrainArgs),
    /// Score a corpus with a trained model
    Evaluate(EvaluateArgs),
    /// Leave-one-out, input reduction and sentence perturbation
    #[command(subcommand)]
    Explain(ExplainCommand),
    /// Clinician co-treatment network
    #[command(subcommand)]
    Network(NetworkCommand),
    /// Run the full variant x window x slice experiment matrix
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct LexiconArgs {
    /// Lexicon file, one entry per line; the built-in list when absent
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    /// File of terms excluded from the lexicon
    #[arg(long, requires = "lexicon")]
    pub excluded: Option<PathBuf>,
}

impl LexiconArgs {
    fn load(&self) -> Result<SlLexicon> {
        match &self.lexicon {
            Some(p) => SlLexicon::load(p, self.excluded.as_deref()),
            None => Ok(SlLexicon::default()),
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Generator config (JSON); defaults for omitted fields
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = corpus::DEFAULT_MIN_WORDS)]
    pub min_words: usize,
    /// Categories to drop; defaults to discharge summaries
    #[arg(long = "exclude-category")]
    pub exclude_category: Vec<String>,
    /// Skip preprocessing and only validate
    #[arg(long)]
    pub raw: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub lexicon: LexiconArgs,
    /// Also write flags and statistics to this directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Hyperparameters (JSON); defaults for omitted fields
    #[arg(long)]
    pub hyper: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of patients held out; 0 trains on everything
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Split file written by `train`; only test notes are scored when given
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Demographic slices to report
    #[arg(long = "group")]
    pub groups: Vec<String>,
    #[command(flatten)]
    pub lexicon: LexiconArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ScorerArgs {
    /// Model checkpoint
    #[arg(long, conflicts_with = "replay", required_unless_present = "replay")]
    pub model: Option<PathBuf>,
    /// Replay table mapping space-joined token strings to probabilities
    #[arg(long)]
    pub replay: Option<PathBuf>,
}

impl ScorerArgs {
    fn load(&self) -> Result<Box<dyn Scorer>> {
        match (&self.model, &self.replay) {
            (Some(m), _) => Ok(Box::new(load_checkpoint(m)?)),
            (None, Some(r)) => Ok(Box::new(ReplayScorer::load(r)?)),
            (None, None) => Err(Error::InvalidInput("need --model or --replay".into())),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InputArgs {
    /// Raw note text to explain
    #[arg(long, conflicts_with = "note_id")]
    pub text: Option<String>,
    /// Explain this note from --corpus
    #[arg(long, requires = "corpus")]
    pub note_id: Option<String>,
    /// Corpus for --note-id or --global
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Split file; global sweeps use only its test notes
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Sweep every note of the corpus instead of one input
    #[arg(long, requires = "corpus")]
    pub global: bool,
    #[arg(long)]
    pub out: PathBuf,
}

impl InputArgs {
    fn tokens(&self) -> Result<Vec<String>> {
        if let Some(text) = &self.text {
            return Ok(tokenize(text).tokens);
        }
        match (&self.note_id, &self.corpus) {
            (Some(id), Some(path)) => {
                let c = corpus::ingest(path)?;
                let note = c
                    .note(id)
                    .ok_or_else(|| Error::InvalidInput(format!("note {id:?} not in corpus")))?;
                Ok(tokenize_note(note).tokens)
            }
            _ => Err(Error::InvalidInput(
                "need --text, --note-id with --corpus, or --global".into(),
            )),
        }
    }

    fn sweep_corpus(&self) -> Result<Corpus> {
        let path = self
            .corpus
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("--global needs --corpus".into()))?;
        let mut c = corpus::ingest(path)?;
        if let Some(split) = &self.split {
            apply_split(&mut c, split)?;
            c = c.subset(Split::Test);
        }
        Ok(c)
    }
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExplainCommand {
    /// Per-token leave-one-out importance
    Loo {
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        lexicon: LexiconArgs,
        /// Random-removal repetitions in the global sweep
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Iterative deletion of the least important token
    Reduce {
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Stop after this many deletions; default stops at one token
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Append sentences and measure the probability change
    Perturb {
        #[command(flatten)]
        scorer: ScorerArgs,
        #[command(flatten)]
        input: InputArgs,
        /// Sentence to append; repeatable; defaults to the built-in set
        #[arg(long = "sentence")]
        sentences: Vec<String>,
    },
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct NetworkArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub lexicon: LexiconArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatArg {
    Gexf,
    Dot,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NetworkCommand {
    /// Build the graph and write it as JSON
    Build(NetworkArgs),
    /// Centrality split and SL statistics by class and role
    Stats(NetworkArgs),
    /// Export GEXF or DOT
    Export {
        #[command(flatten)]
        net: NetworkArgs,
        #[arg(long, value_enum, default_value = "gexf")]
        format: FormatArg,
        /// Keep only edges heavier than this weight
        #[arg(long, conflicts_with = "top_fraction")]
        floor: Option<f64>,
        /// Keep roughly this fraction of the heaviest edges
        #[arg(long)]
        top_fraction: Option<f64>,
    },
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentArgs {
    /// Experiment config (JSON)
    #[arg(long)]
    pub config: PathBuf,
    /// Use seeds 0..N instead of the configured list
    #[arg(long)]
    pub seeds: Option<u64>,
    /// Concurrent training runs
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Experiment config file: a corpus source plus the matrix settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentFile {
    /// Corpus JSONL; relative paths resolve against the config file.
    pub corpus: Option<PathBuf>,
    /// Generator config used when no corpus path is given.
    pub synth: Option<SynthConfig>,
    pub lexicon: Option<PathBuf>,
    /// Apply default preprocessing before the runs.
    pub preprocess: bool,
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
}

impl Default for ExperimentFile {
    fn default() -> Self {
        ExperimentFile {
            corpus: None,
            synth: None,
            lexicon: None,
            preprocess: true,
            experiment: ExperimentConfig::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct ConfigEcho<'a, T: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    args: &'a T,
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn echo_config(dir: &Path, command: &str, args: &impl Serialize) -> Result<()> {
    out_dir(dir)?;
    write_json(
        &dir.join("config.json"),
        &ConfigEcho {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            args,
        },
    )
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn print_json(value: &impl Serialize) -> Result<()> {
    use std::io::Write;
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitFile {
    test_fraction: f64,
    seed: u64,
    test_note_ids: Vec<String>,
}

fn apply_split(c: &mut Corpus, path: &Path) -> Result<()> {
    let split: SplitFile = serde_json::from_str(&read_to_string(path)?)?;
    let test: BTreeSet<&str> = split.test_note_ids.iter().map(String::as_str).collect();
    c.split_assignment = c
        .notes
        .iter()
        .map(|n| {
            let s = if test.contains(n.note_id.as_str()) {
                Split::Test
            } else {
                Split::Train
            };
            (n.note_id.clone(), s)
        })
        .collect();
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_json(&read_to_string(p)?)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let corpus = generate(&cfg)?;
    let manifest = describe(&cfg)?;
    echo_config(&a.out, "synth", &cfg)?;
    corpus::export(&corpus, a.out.join("corpus.jsonl"))?;
    write_json(&a.out.join("manifest.json"), &manifest)?;
    print_json(&serde_json::json!({ "notes": corpus.len(), "corpus": a.out.join("corpus.jsonl") }))
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let raw = corpus::ingest(&a.corpus)?;
    let exclude: BTreeSet<String> = if a.exclude_category.is_empty() {
        BTreeSet::from([corpus::DISCHARGE_CATEGORY.to_string()])
    } else {
        a.exclude_category.iter().cloned().collect()
    };
    let kept = if a.raw {
        raw.clone()
    } else {
        corpus::preprocess(&raw, a.min_words, &exclude)
    };
    echo_config(&a.out, "ingest", a)?;
    corpus::export(&kept, a.out.join("corpus.jsonl"))?;
    let summary = serde_json::json!({
        "input_notes": raw.len(),
        "kept_notes": kept.len(),
        "dropped_notes": raw.len() - kept.len(),
        "groups": kept.groups(),
    });
    write_json(&a.out.join("summary.json"), &summary)?;
    print_json(&summary)
}

#[derive(Debug, Serialize)]
struct NoteFlag {
    note_id: String,
    sl: bool,
    matches: Vec<String>,
}

fn cmd_detect(a: &DetectArgs) -> Result<()> {
    let c = corpus::ingest(&a.corpus)?;
    let lex = a.lexicon.load()?;
    let flags: Vec<NoteFlag> = c
        .notes
        .iter()
        .map(|n| {
            let matches: Vec<String> = detect(&tokenize_note(n), &lex).into_iter().map(|m| m.entry).collect();
            NoteFlag {
                note_id: n.note_id.clone(),
                sl: !matches.is_empty(),
                matches,
            }
        })
        .collect();
    let stats = sl_statistics(&c, &lex);
    if let Some(out) = &a.out {
        echo_config(out, "detect-sl", a)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["note_id", "sl", "matches"]).map_err(csv_err)?;
        for f in &flags {
            w.write_record([
                f.note_id.as_str(),
                if f.sl { "true" } else { "false" },
                &f.matches.join("|"),
            ])
            .map_err(csv_err)?;
        }
        write(
            &out.join("sl_flags.csv"),
            w.into_inner().map_err(|e| csv_err(e.into_error()))?,
        )?;
        write_json(&out.join("sl_stats.json"), &stats)?;
    }
    print_json(&serde_json::json!({ "notes": flags, "statistics": stats }))
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let hyper: Hyper = match &a.hyper {
        Some(p) => serde_json::from_str(&read_to_string(p)?)?,
        None => Hyper::default(),
    };
    let mut c = corpus::ingest(&a.corpus)?;
    let train_corpus = if a.test_fraction > 0.0 {
        c.assign_patient_split(a.test_fraction, a.seed)?;
        c.subset(Split::Train)
    } else {
        c.clone()
    };
    let model = train(&train_corpus, &hyper, a.seed)?;
    echo_config(&a.out, "train", &serde_json::json!({ "args": a, "hyper": hyper }))?;
    save_checkpoint(&model, a.out.join("model.ckpt"))?;
    write(&a.out.join("training_curve.csv"), curve_csv(&model.training_curve))?;
    let split = SplitFile {
        test_fraction: a.test_fraction,
        seed: a.seed,
        test_note_ids: c.split_notes(Split::Test).iter().map(|n| n.note_id.clone()).collect(),
    };
    write_json(&a.out.join("split.json"), &split)?;
    print_json(&serde_json::json!({
        "train_notes": train_corpus.len(),
        "test_notes": split.test_note_ids.len(),
        "final_loss": model.training_curve.last().map(|e| e.loss),
    }))
}

fn predictions(model: &TransformerModel, c: &Corpus) -> Result<Vec<NotePrediction>> {
    c.notes
        .iter()
        .map(|n| {
            let toks = tokenize_note(n);
            let probability = if toks.is_empty() {
                0.0
            } else {
                model.probability(&toks)?
            };
            Ok(NotePrediction {
                note_id: n.note_id.clone(),
                probability,
            })
        })
        .collect()
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let lex = a.lexicon.load()?;
    let mut c = corpus::ingest(&a.corpus)?;
    if let Some(split) = &a.split {
        apply_split(&mut c, split)?;
        c = c.subset(Split::Test);
    }
    if c.is_empty() {
        return Err(Error::InvalidInput("no notes to evaluate".into()));
    }
    let preds = predictions(&model, &c)?;
    let labels: Vec<u8> = c.notes.iter().map(|n| n.label).collect();
    let overall = compute_metrics(&ConfusionCounts::from_scores(
        labels.iter().copied().zip(preds.iter().map(|p| p.probability)),
    ))?;
    let mut slices = serde_json::Map::new();
    for g in &a.groups {
        let cc = group_slice(&preds, &c, g, false)?;
        slices.insert(g.clone(), serde_json::to_value(compute_metrics(&cc)?)?);
    }
    let dilution = attention_dilution_report(&model, &c, &lex)?;
    echo_config(&a.out, "evaluate", a)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["note_id", "label", "probability", "at_risk"])
        .map_err(csv_err)?;
    for (p, label) in preds.iter().zip(&labels) {
        w.write_record([
            p.note_id.clone(),
            label.to_string(),
            format!("{:.6}", p.probability),
            crate::tinyformer::at_risk(p.probability).to_string(),
        ])
        .map_err(csv_err)?;
    }
    write(
        &a.out.join("predictions.csv"),
        w.into_inner().map_err(|e| csv_err(e.into_error()))?,
    )?;
    let metrics = serde_json::json!({ "all": overall, "groups": slices });
    write_json(&a.out.join("metrics.json"), &metrics)?;
    write_json(&a.out.join("dilution.json"), &dilution)?;
    print_json(&metrics)
}

fn cmd_explain(cmd: &ExplainCommand) -> Result<()> {
    match cmd {
        ExplainCommand::Loo {
            scorer,
            input,
            lexicon,
            reps,
            seed,
        } => {
            let s = scorer.load()?;
            echo_config(&input.out, "explain loo", cmd)?;
            if input.global {
                let lex = lexicon.load()?;
                let table = global_leave_one_out(s.as_ref(), &input.sweep_corpus()?, &lex, *reps, *seed)?;
                write(&input.out.join("global_loo.csv"), table.to_csv()?)?;
                write_json(&input.out.join("global_loo.json"), &table)?;
                print_json(&table)
            } else {
                let report = leave_one_out(s.as_ref(), &input.tokens()?)?;
                write(&input.out.join("importance.csv"), report.to_csv()?)?;
                write_json(&input.out.join("importance.json"), &report)?;
                print_json(&report)
            }
        }
        ExplainCommand::Reduce { scorer, input, budget } => {
            if input.global {
                return Err(Error::InvalidInput("input reduction has no global sweep".into()));
            }
            let s = scorer.load()?;
            let stop = budget.map_or(StopRule::SingleToken, StopRule::Budget);
            let trace = input_reduction(s.as_ref(), &input.tokens()?, stop)?;
            echo_config(&input.out, "explain reduce", cmd)?;
            write(&input.out.join("reduction.csv"), trace.to_csv()?)?;
            write_json(&input.out.join("reduction.json"), &trace)?;
            print_json(&trace)
        }
        ExplainCommand::Perturb {
            scorer,
            input,
            sentences,
        } => {
            let s = scorer.load()?;
            let sentences: Vec<String> = if sentences.is_empty() {
                DEFAULT_SENTENCES.iter().map(|s| s.to_string()).collect()
            } else {
                sentences.clone()
            };
            echo_config(&input.out, "explain perturb", cmd)?;
            if input.global {
                let table = global_add_sentence(s.as_ref(), &input.sweep_corpus()?, &sentences)?;
                write(&input.out.join("global_perturb.csv"), table.to_csv()?)?;
                write_json(&input.out.join("global_perturb.json"), &table)?;
                print_json(&table)
            } else {
                let tokens = input.tokens()?;
                let effects = sentences
                    .iter()
                    .map(|sent| add_sentence(s.as_ref(), &tokens, sent))
                    .collect::<Result<Vec<_>>>()?;
                write_json(&input.out.join("perturb.json"), &effects)?;
                print_json(&effects)
            }
        }
    }
}

fn load_graph(net: &NetworkArgs) -> Result<(CareGraph, Corpus, SlLexicon)> {
    let c = corpus::ingest(&net.corpus)?;
    let lex = net.lexicon.load()?;
    Ok((build_graph(&c, &lex), c, lex))
}

fn cmd_network(cmd: &NetworkCommand) -> Result<()> {
    match cmd {
        NetworkCommand::Build(net) => {
            let (g, _, _) = load_graph(net)?;
            echo_config(&net.out, "network build", cmd)?;
            write_json(&net.out.join("graph.json"), &g)?;
            print_json(&serde_json::json!({ "nodes": g.nodes.len(), "edges": g.edges.len() }))
        }
        NetworkCommand::Stats(net) => {
            let (g, c, lex) = load_graph(net)?;
            let split = centrality_split(&g)?;
            let stats = centrality_sl_stats(&g, &c, &lex)?;
            echo_config(&net.out, "network stats", cmd)?;
            write_json(&net.out.join("centrality.json"), &split)?;
            write_json(&net.out.join("centrality_stats.json"), &stats)?;
            print_json(&stats)
        }
        NetworkCommand::Export {
            net,
            format,
            floor,
            top_fraction,
        } => {
            let (g, _, _) = load_graph(net)?;
            let floor = match top_fraction {
                Some(f) if !(*f > 0.0 && *f <= 1.0) => {
                    return Err(Error::InvalidInput(format!("top fraction {f} must lie in (0, 1]")))
                }
                Some(f) => Some(top_fraction_floor(&g, *f)),
                None => *floor,
            };
            let (format, name) = match format {
                FormatArg::Gexf => (GraphFormat::Gexf, "graph.gexf"),
                FormatArg::Dot => (GraphFormat::Dot, "graph.dot"),
            };
            echo_config(&net.out, "network export", cmd)?;
            let path = net.out.join(name);
            export_graph(&g, format, floor, &path)?;
            print_json(&serde_json::json!({ "path": path, "floor": floor }))
        }
    }
}

fn cmd_experiment(a: &ExperimentArgs) -> Result<()> {
    let mut file: ExperimentFile = serde_json::from_str(&read_to_string(&a.config)?)?;
    if let Some(n) = a.seeds {
        file.experiment.seeds = (0..n).collect();
    }
    let base = a.config.parent().unwrap_or(Path::new(""));
    let lex = match &file.lexicon {
        Some(p) => SlLexicon::load(base.join(p), None)?,
        None => SlLexicon::default(),
    };
    let raw = match (&file.corpus, &file.synth) {
        (Some(p), _) => corpus::ingest(base.join(p))?,
        (None, Some(cfg)) => generate(cfg)?,
        (None, None) => {
            return Err(Error::InvalidConfig(
                "config needs a corpus path or a synth block".into(),
            ))
        }
    };
    let c = if file.preprocess {
        corpus::preprocess_default(&raw)
    } else {
        raw
    };
    let graph = build_graph(&c, &lex);
    let matrix = run_experiment_matrix(&c, &lex, &graph, &file.experiment, a.jobs)?;
    echo_config(&a.out, "experiment", &file)?;
    write(&a.out.join("matrix.csv"), matrix.to_csv()?)?;
    write(&a.out.join("gaps.csv"), matrix.gaps_csv()?)?;
    write(&a.out.join("runs.csv"), matrix.runs_csv()?)?;
    write_json(&a.out.join("matrix.json"), &matrix)?;
    print_json(&serde_json::json!({
        "settings": matrix.settings.len(),
        "gaps": matrix.gaps.len(),
        "out": a.out,
    }))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::DetectSl(a) => cmd_detect(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Explain(c) => cmd_explain(c),
        Command::Network(c) => cmd_network(c),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

/// Parses `argv` (program name first) and runs it. Returns the exit code:
/// 0 on success, 1 on a module error, 2 on a usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_arguments_is_a_usage_error() {
        assert_eq!(dispatch(["sl-audit"]), 2);
    }

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(dispatch(["sl-audit", "frobnicate"]), 2);
        assert_eq!(dispatch(["sl-audit", "detect-sl", "--nope"]), 2);
    }

    #[test]
    fn missing_input_is_a_module_error() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("absent.jsonl");
        assert_eq!(
            dispatch(["sl-audit", "detect-sl", "--corpus", missing.to_str().unwrap()]),
            1
        );
    }

    #[test]
    fn experiment_file_defaults() {
        let f: ExperimentFile = serde_json::from_str(r#"{"synth": {"note_count": 50}, "seeds": [3]}"#).unwrap();
        assert!(f.preprocess);
        assert_eq!(f.experiment.seeds, vec![3]);
        assert_eq!(f.synth.unwrap().note_count, 50);
        assert_eq!(f.experiment.test_fraction, 0.2);
    }
}
