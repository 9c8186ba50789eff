//! Command-line front end. `run` parses arguments and returns the process
//! exit code: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::alignment::{self, AnchorTable, Solver};
use crate::checkpoint::Checkpoint;
use crate::config::{TrainConfig, CONFIG_KEYS};
use crate::corpus::{self, BilingualDictionary, DictionaryOptions, TokenId, TokenSequence, Vocabulary};
use crate::eval::{self, SenseLabeledCorpus};
use crate::linalg::{pair_residual, DenseMatrix};
use crate::synth::{self, SynthSpec};
use crate::trainer::Trainer;
use crate::Error;

/// File names written under `--out-dir`.
pub mod files {
    pub const CONFIG_SNAPSHOT: &str = "config.resolved";
    pub const VOCAB: &str = "vocab.txt";
    pub const CHECKPOINT: &str = "checkpoint.bin";
    pub const DIVERGED: &str = "diverged.bin";
    pub const METRICS: &str = "metrics.tsv";
    pub const SUMMARY: &str = "summary.txt";
    pub const WSD_REPORT: &str = "wsd_report.tsv";
    pub const PROJECTION: &str = "projection.txt";
    pub const SENSES: &str = "senses.tsv";
    pub const SENSE_COORDS: &str = "sense_coords.tsv";
    pub const SPEC_SNAPSHOT: &str = "spec.resolved";
    pub const CORPUS: &str = "corpus.txt";
    pub const WSD_TRAIN: &str = "wsd_train.txt";
    pub const WSD_TEST: &str = "wsd_test.txt";
    pub const DICT_TRAIN: &str = "dict.train.txt";
    pub const DICT_TEST: &str = "dict.test.txt";

    pub fn periodic_checkpoint(step: u64) -> String {
        format!("checkpoint-{step:08}.bin")
    }

    pub fn anchors(lang: &str) -> String {
        format!("anchors.{lang}.tsv")
    }

    pub fn corpus_for(lang: &str) -> String {
        format!("corpus.{lang}.txt")
    }
}

fn config_key_help() -> String {
    let defaults = TrainConfig::default();
    let mut out = String::from("Config keys (file lines `key = value`, or --set key=value):\n");
    for (key, aliases) in CONFIG_KEYS {
        let value = defaults.get(key).unwrap_or_default();
        let _ = write!(out, "  {key:<30} default {value}");
        if !aliases.is_empty() {
            let _ = write!(out, "  (aliases: {})", aliases.join(", "));
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Parser)]
#[command(name = "sensealign", version, about = "Sense-aware language-model pretraining and cross-lingual alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count tokens over one or more corpora and write the joint vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Train a model, or resume one with --checkpoint.
    Train(TrainArgs),
    /// Nearest-anchor word sense disambiguation on sense-labeled files.
    EvalWsd(EvalWsdArgs),
    /// Translation retrieval precision@1/@5 over anchors.
    EvalRetrieval(EvalRetrievalArgs),
    /// Fit a linear map between the anchors of two languages.
    Align(AlignArgs),
    /// Anchor separation ratio and per-token sense statistics.
    Diagnose(DiagnoseArgs),
    /// Two-dimensional PCA coordinates of sense vectors.
    ExportSenses(ExportArgs),
    /// Generate a synthetic WSD or bilingual task from a spec file.
    GenSynth(GenSynthArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Directory receiving every output file.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Random seed [config: seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Representation mode, forward or masked [config: mode].
    #[arg(long)]
    mode: Option<String>,
    /// Any config key, repeatable: --set n_context=3.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
#[command(after_help = config_key_help())]
struct BuildVocabArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus file with its language, repeatable: --corpus en.txt:en.
    #[arg(long = "corpus", value_name = "PATH:LANG", required = true)]
    corpora: Vec<String>,
}

#[derive(Debug, Args)]
#[command(after_help = config_key_help())]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Corpus file with its language, repeatable: --corpus en.txt:en.
    #[arg(long = "corpus", value_name = "PATH:LANG", required = true)]
    corpora: Vec<String>,
    /// Bilingual dictionary (first corpus language to second).
    #[arg(long, value_name = "FILE")]
    dict: Option<PathBuf>,
    /// Vocabulary file; built from the corpora with min_count when absent.
    #[arg(long, value_name = "FILE")]
    vocab: Option<PathBuf>,
    /// Resume from this checkpoint. Only steps, checkpoint_interval and
    /// metrics_interval may be overridden.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(after_help = config_key_help())]
struct EvalWsdArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Sense-labeled training sentences (anchors).
    #[arg(long, value_name = "FILE")]
    train: PathBuf,
    /// Sense-labeled test sentences.
    #[arg(long, value_name = "FILE")]
    test: PathBuf,
    /// Language of the labeled files; defaults to the vocabulary's only
    /// language.
    #[arg(long)]
    lang: Option<String>,
}

#[derive(Debug, Args)]
#[command(after_help = config_key_help())]
struct EvalRetrievalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Source corpus then target corpus: --corpus a.txt:l1 --corpus b.txt:l2.
    #[arg(long = "corpus", value_name = "PATH:LANG", required = true)]
    corpora: Vec<String>,
    /// Held-out test dictionary.
    #[arg(long, value_name = "FILE")]
    dict: PathBuf,
    /// Linear map applied to the source anchors first (from `align`).
    #[arg(long, value_name = "FILE")]
    map: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(after_help = config_key_help())]
struct AlignArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Source corpus then target corpus: --corpus a.txt:l1 --corpus b.txt:l2.
    #[arg(long = "corpus", value_name = "PATH:LANG", required = true)]
    corpora: Vec<String>,
    /// Seed dictionary the map is fitted on.
    #[arg(long, value_name = "FILE")]
    dict: PathBuf,
    /// least_squares or orthogonal.
    #[arg(long, default_value = "least_squares")]
    solver: String,
    /// Ridge for least squares; defaults to 1e-6 per pair.
    #[arg(long)]
    ridge: Option<f64>,
    /// Held-out dictionary whose residual is reported before and after the map.
    #[arg(long, value_name = "FILE")]
    heldout: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(after_help = config_key_help())]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Corpus file with its language, repeatable.
    #[arg(long = "corpus", value_name = "PATH:LANG", required = true)]
    corpora: Vec<String>,
    /// Comma-separated target tokens (token or token:lang); all tokens when absent.
    #[arg(long)]
    targets: Option<String>,
}

#[derive(Debug, Args)]
#[command(after_help = config_key_help())]
struct ExportArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Comma-separated tokens (token or token:lang); all tokens when absent.
    #[arg(long)]
    tokens: Option<String>,
}

#[derive(Debug, Args)]
struct GenSynthArgs {
    /// Directory receiving every output file.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Synthetic task spec file (`task = wsd | bilingual` plus keys).
    #[arg(long, value_name = "FILE")]
    spec: PathBuf,
    /// Overrides the spec seed.
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

/// Runs the command line `argv` (including the program name).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match cli.command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Train(a) => train(a),
        Command::EvalWsd(a) => eval_wsd(a),
        Command::EvalRetrieval(a) => eval_retrieval(a),
        Command::Align(a) => align(a),
        Command::Diagnose(a) => diagnose(a),
        Command::ExportSenses(a) => export_senses(a),
        Command::GenSynth(a) => gen_synth(a),
    };
    match outcome {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn parse_corpus_arg(arg: &str) -> CliResult<(PathBuf, String)> {
    match arg.rsplit_once(':') {
        Some((path, lang)) if !path.is_empty() && !lang.is_empty() => {
            Ok((PathBuf::from(path), lang.to_string()))
        }
        _ => usage(format!("--corpus expects PATH:LANG, got '{arg}'")),
    }
}

fn parse_corpora(args: &[String]) -> CliResult<Vec<(PathBuf, String)>> {
    args.iter().map(|a| parse_corpus_arg(a)).collect()
}

/// Applies `--set`, `--seed` and `--mode` on top of `base`.
fn apply_overrides(common: &Common, mut cfg: TrainConfig) -> CliResult<TrainConfig> {
    for kv in &common.set {
        let Some((k, v)) = kv.split_once('=') else {
            return usage(format!("--set expects KEY=VALUE, got '{kv}'"));
        };
        cfg.set(k, v).map_err(|e| Failure::Usage(e.to_string()))?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &common.mode {
        cfg.mode = mode.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn resolve_config(common: &Common) -> CliResult<TrainConfig> {
    let base = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    let cfg = apply_overrides(common, base)?;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn prepare_out_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_out(dir: &Path, name: &str, contents: &str) -> CliResult<PathBuf> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    Ok(path)
}

fn load_corpora(
    corpora: &[(PathBuf, String)],
    vocab: &Vocabulary,
) -> CliResult<Vec<Vec<TokenSequence>>> {
    corpora
        .iter()
        .map(|(path, lang)| Ok(corpus::load_corpus(path, lang, vocab)?))
        .collect()
}

fn two_languages(corpora: &[(PathBuf, String)]) -> CliResult<(String, String)> {
    if corpora.len() != 2 {
        return usage("exactly two --corpus arguments are needed: source then target");
    }
    if corpora[0].1 == corpora[1].1 {
        return usage("the two corpora must have different languages");
    }
    Ok((corpora[0].1.clone(), corpora[1].1.clone()))
}

fn load_dict(
    path: &Path,
    vocab: &Vocabulary,
    source: &str,
    target: &str,
    add_identity: bool,
) -> CliResult<BilingualDictionary> {
    let opts = DictionaryOptions {
        source_lang: source.to_string(),
        target_lang: target.to_string(),
        add_identity,
    };
    let (dict, report) = corpus::load_dictionary(path, vocab, &opts)?;
    if report.dropped() > 0 {
        log::warn!(
            "{}: {} of {} lines dropped ({} out of vocabulary)",
            path.display(),
            report.dropped(),
            report.lines,
            report.out_of_vocab
        );
    }
    Ok(dict)
}

/// Resolves `token` or `token:lang` entries against the vocabulary.
fn resolve_tokens(list: &str, vocab: &Vocabulary) -> CliResult<Vec<TokenId>> {
    let langs = vocab.languages();
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let found = match item.rsplit_once(':') {
            Some((tok, lang)) if langs.iter().any(|l| l == lang) => vocab.id(tok, lang),
            _ => langs.iter().find_map(|l| vocab.id(item, l)),
        };
        match found {
            Some(id) => out.push(id),
            None => return usage(format!("token '{item}' is not in the vocabulary")),
        }
    }
    if out.is_empty() {
        return usage("empty token list");
    }
    Ok(out)
}

fn content_tokens(vocab: &Vocabulary) -> Vec<TokenId> {
    (0..vocab.len() as TokenId)
        .filter(|&t| !Vocabulary::is_reserved(t))
        .collect()
}

/// Loads a checkpoint and applies the command's overrides to its config.
fn load_checkpoint(path: &Path, common: &Common) -> CliResult<Checkpoint> {
    let mut ck = Checkpoint::load(path)?;
    if common.config.is_some() {
        return usage("--config cannot be combined with --checkpoint; use --set or --mode");
    }
    ck.config = apply_overrides(common, ck.config)?;
    ck.config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(ck)
}

fn summary(dir: &Path, metrics: &[(&str, Option<f64>)]) -> CliResult<()> {
    let owned: Vec<(String, Option<f64>)> =
        metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    write_out(dir, files::SUMMARY, &eval::summary_text(&owned))?;
    Ok(())
}

fn build_vocab(a: BuildVocabArgs) -> CliResult<()> {
    let cfg = resolve_config(&a.common)?;
    let corpora = parse_corpora(&a.corpora)?;
    let out = &a.common.out_dir;
    prepare_out_dir(out)?;
    write_out(out, files::CONFIG_SNAPSHOT, &cfg.to_text())?;
    let vocab = corpus::build_vocabulary(&corpora, cfg.min_count)?;
    vocab.save(&out.join(files::VOCAB))?;
    log::info!("vocabulary of {} entries", vocab.len());
    Ok(())
}

const RESUME_KEYS: &[&str] = &["steps", "checkpoint_interval", "metrics_interval"];

fn train(a: TrainArgs) -> CliResult<()> {
    let corpora = parse_corpora(&a.corpora)?;
    let out = a.common.out_dir.clone();
    let mut trainer = if let Some(ck_path) = &a.checkpoint {
        if a.dict.is_some() || a.vocab.is_some() || a.common.config.is_some() {
            return usage("--dict, --vocab and --config are taken from the checkpoint when resuming");
        }
        if a.common.seed.is_some() || a.common.mode.is_some() {
            return usage("--seed and --mode cannot change when resuming");
        }
        for kv in &a.common.set {
            let key = kv.split_once('=').map_or(kv.as_str(), |(k, _)| k).trim();
            if !RESUME_KEYS.contains(&key) {
                return usage(format!(
                    "cannot override '{key}' when resuming (allowed: {})",
                    RESUME_KEYS.join(", ")
                ));
            }
        }
        let ck = load_checkpoint(ck_path, &a.common)?;
        let corpus: Vec<TokenSequence> = load_corpora(&corpora, &ck.vocab)?.concat();
        prepare_out_dir(&out)?;
        Trainer::resume(ck, &corpus)?
    } else {
        let cfg = resolve_config(&a.common)?;
        let vocab = match &a.vocab {
            Some(p) => Vocabulary::load(p)?,
            None => corpus::build_vocabulary(&corpora, cfg.min_count)?,
        };
        let corpus: Vec<TokenSequence> = load_corpora(&corpora, &vocab)?.concat();
        let dict = match &a.dict {
            Some(p) => {
                let (src, tgt) = two_languages(&corpora)?;
                Some(load_dict(p, &vocab, &src, &tgt, cfg.add_identity)?)
            }
            None => None,
        };
        prepare_out_dir(&out)?;
        Trainer::new(cfg, vocab, &corpus, dict)?
    };
    write_out(&out, files::CONFIG_SNAPSHOT, &trainer.config().to_text())?;
    trainer.vocab().save(&out.join(files::VOCAB))?;

    let mut metrics = String::new();
    let mut logged = 0;
    let interval = trainer.config().checkpoint_interval;
    while trainer.step_count() < trainer.config().steps {
        if let Err(e) = trainer.step() {
            if matches!(e, Error::Diverged { .. }) {
                trainer.checkpoint().save(&out.join(files::DIVERGED))?;
                log::error!("diagnostic snapshot written to {}", files::DIVERGED);
            }
            return Err(e.into());
        }
        for record in &trainer.metrics_log()[logged..] {
            metrics.push_str(&record.to_line());
            metrics.push('\n');
            log::info!("{}", record.to_line());
        }
        logged = trainer.metrics_log().len();
        if interval > 0 && trainer.step_count() % interval == 0 {
            let name = files::periodic_checkpoint(trainer.step_count());
            trainer.checkpoint().save(&out.join(name))?;
            write_out(&out, files::METRICS, &metrics)?;
        }
    }
    write_out(&out, files::METRICS, &metrics)?;
    trainer.checkpoint().save(&out.join(files::CHECKPOINT))?;
    let m = trainer.current_metrics();
    let tran = (!m.tran_loss.is_nan()).then_some(m.tran_loss);
    summary(
        &out,
        &[
            ("steps", Some(m.step as f64)),
            ("loss", Some(m.loss).filter(|v| !v.is_nan())),
            ("sense_loss", Some(m.sense_loss).filter(|v| !v.is_nan())),
            ("tran_loss", tran),
            ("active_senses", Some(m.active_senses as f64)),
            ("pruned_total", Some(m.pruned_total as f64)),
            ("projection_refreshes", Some(m.projection_refreshes as f64)),
        ],
    )
}

fn default_lang(vocab: &Vocabulary, lang: Option<String>) -> CliResult<String> {
    if let Some(l) = lang {
        return Ok(l);
    }
    let langs = vocab.languages();
    match langs.as_slice() {
        [only] => Ok(only.clone()),
        _ => usage(format!(
            "the vocabulary has languages {langs:?}; pass --lang"
        )),
    }
}

fn eval_wsd(a: EvalWsdArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint, &a.common)?;
    let lang = default_lang(&ck.vocab, a.lang)?;
    let train = SenseLabeledCorpus::load(&a.train, &ck.vocab, &lang)?;
    let test = SenseLabeledCorpus::load(&a.test, &ck.vocab, &lang)?;
    let out = &a.common.out_dir;
    prepare_out_dir(out)?;
    write_out(out, files::CONFIG_SNAPSHOT, &ck.config.to_text())?;
    let report = eval::wsd_nearest_anchor(&ck.encoder, ck.config.mode, &train, &test)?;
    let mut table = String::from("token\tcorrect\ttotal\tunseen\taccuracy\n");
    for (&token, score) in &report.per_token {
        let _ = writeln!(
            table,
            "{}\t{}\t{}\t{}\t{:.6}",
            ck.vocab.decode(token).0,
            score.correct,
            score.total,
            score.unseen,
            score.accuracy()
        );
    }
    write_out(out, files::WSD_REPORT, &table)?;
    summary(
        out,
        &[
            ("wsd_f1", Some(report.f1())),
            ("wsd_correct", Some(report.correct as f64)),
            ("wsd_total", Some(report.total as f64)),
            ("wsd_unseen", Some(report.unseen as f64)),
        ],
    )
}

/// Anchors of the source and target corpora.
fn language_anchors(
    ck: &Checkpoint,
    corpora: &[(PathBuf, String)],
) -> CliResult<(AnchorTable, AnchorTable)> {
    let mut loaded = load_corpora(corpora, &ck.vocab)?;
    let tgt = loaded.pop().expect("two corpora");
    let src = loaded.pop().expect("two corpora");
    let a = alignment::compute_anchors(ck, &src)?;
    let b = alignment::compute_anchors(ck, &tgt)?;
    let (ls, lt) = (&corpora[0].1, &corpora[1].1);
    let a = a.filtered(|t| ck.vocab.decode(t).1 == ls.as_str());
    let b = b.filtered(|t| ck.vocab.decode(t).1 == lt.as_str());
    Ok((a, b))
}

fn eval_retrieval(a: EvalRetrievalArgs) -> CliResult<()> {
    let corpora = parse_corpora(&a.corpora)?;
    let (src, tgt) = two_languages(&corpora)?;
    let ck = load_checkpoint(&a.checkpoint, &a.common)?;
    let test = load_dict(&a.dict, &ck.vocab, &src, &tgt, false)?;
    let map = a.map.as_deref().map(alignment::load_matrix).transpose()?;
    let out = &a.common.out_dir;
    prepare_out_dir(out)?;
    write_out(out, files::CONFIG_SNAPSHOT, &ck.config.to_text())?;
    let (mut source, target) = language_anchors(&ck, &corpora)?;
    if let Some(w) = &map {
        source = source.projected(w)?;
    }
    let candidates = ck.vocab.ids_for_lang(&tgt);
    let r = eval::translation_retrieval(&source, &target, &candidates, &test)?;
    summary(
        out,
        &[
            ("retrieval_p_at_1", Some(r.precision_at_1)),
            ("retrieval_p_at_5", Some(r.precision_at_5)),
            ("retrieval_evaluated", Some(r.evaluated as f64)),
            ("retrieval_skipped", Some(r.skipped as f64)),
        ],
    )
}

fn align(a: AlignArgs) -> CliResult<()> {
    let corpora = parse_corpora(&a.corpora)?;
    let (src, tgt) = two_languages(&corpora)?;
    let solver: Solver = a.solver.parse().map_err(|e: Error| Failure::Usage(e.to_string()))?;
    if matches!(a.ridge, Some(r) if !(r >= 0.0)) {
        return usage("--ridge must be non-negative");
    }
    let ck = load_checkpoint(&a.checkpoint, &a.common)?;
    let dict = load_dict(&a.dict, &ck.vocab, &src, &tgt, ck.config.add_identity)?;
    let heldout = match &a.heldout {
        Some(p) => Some(load_dict(p, &ck.vocab, &src, &tgt, false)?),
        None => None,
    };
    let out = &a.common.out_dir;
    prepare_out_dir(out)?;
    write_out(out, files::CONFIG_SNAPSHOT, &ck.config.to_text())?;
    let (source, target) = language_anchors(&ck, &corpora)?;
    write_out(out, &files::anchors(&src), &source.to_text(&ck.vocab, None))?;
    write_out(out, &files::anchors(&tgt), &target.to_text(&ck.vocab, None))?;
    let fit = alignment::fit_projection(&source, &target, &dict, solver, a.ridge)?;
    if fit.degenerate {
        log::warn!("the orthogonal solution is not unique");
    }
    alignment::save_matrix(&out.join(files::PROJECTION), &fit.w)?;
    let mut rows = vec![
        ("pairs_used", Some(fit.pairs_used as f64)),
        ("pairs_skipped", Some(fit.pairs_skipped as f64)),
        ("ridge", Some(fit.ridge)),
        ("residual_identity", Some(fit.residual_before)),
        ("residual_projected", Some(fit.residual_after)),
    ];
    if let Some(h) = &heldout {
        let pairs = alignment::anchor_pairs(&source, &target, h)?;
        let before = pair_residual(&DenseMatrix::identity(source.dim()), &pairs.source, &pairs.target);
        let after = pair_residual(&fit.w, &pairs.source, &pairs.target);
        rows.push(("heldout_pairs", Some(pairs.pairs.len() as f64)));
        rows.push(("heldout_residual_identity", Some(before)));
        rows.push(("heldout_residual_projected", Some(after)));
        rows.push(("heldout_reduction", (before > 0.0).then(|| 1.0 - after / before)));
    }
    summary(out, &rows)
}

fn diagnose(a: DiagnoseArgs) -> CliResult<()> {
    let corpora = parse_corpora(&a.corpora)?;
    let ck = load_checkpoint(&a.checkpoint, &a.common)?;
    let targets = match &a.targets {
        Some(list) => resolve_tokens(list, &ck.vocab)?,
        None => content_tokens(&ck.vocab),
    };
    let corpus: Vec<TokenSequence> = load_corpora(&corpora, &ck.vocab)?.concat();
    let out = &a.common.out_dir;
    prepare_out_dir(out)?;
    write_out(out, files::CONFIG_SNAPSHOT, &ck.config.to_text())?;
    let sep = eval::anchor_separation_ratio(&ck.encoder, ck.config.mode, &corpus, &targets)?;

    let mut table = String::from("token\tlang\tactive\tcounts\n");
    let mut multi = 0usize;
    for &t in &targets {
        let (tok, lang) = ck.vocab.decode(t);
        let active = ck.store.active_senses(t);
        if active.len() > 1 {
            multi += 1;
        }
        let counts: Vec<String> =
            (0..ck.store.num_senses()).map(|s| ck.store.count(t, s).to_string()).collect();
        let _ = writeln!(table, "{tok}\t{lang}\t{}\t{}", active.len(), counts.join(","));
    }
    write_out(out, files::SENSES, &table)?;
    summary(
        out,
        &[
            ("separation_ratio", sep.ratio),
            ("separation_within", Some(sep.within)),
            ("separation_between", Some(sep.between)),
            ("separation_tokens_used", Some(sep.tokens_used.len() as f64)),
            ("separation_tokens_skipped", Some(sep.tokens_skipped.len() as f64)),
            ("active_senses", Some(ck.store.active_count() as f64)),
            ("multi_sense_tokens", Some(multi as f64)),
        ],
    )
}

fn export_senses(a: ExportArgs) -> CliResult<()> {
    let ck = load_checkpoint(&a.checkpoint, &a.common)?;
    let tokens = match &a.tokens {
        Some(list) => resolve_tokens(list, &ck.vocab)?,
        None => content_tokens(&ck.vocab),
    };
    let out = &a.common.out_dir;
    prepare_out_dir(out)?;
    write_out(out, files::CONFIG_SNAPSHOT, &ck.config.to_text())?;
    let coords = eval::export_sense_vectors(&ck.store, &tokens, 2)?;
    write_out(out, files::SENSE_COORDS, &eval::sense_coordinates_text(&coords, &ck.vocab))?;
    Ok(())
}

fn gen_synth(a: GenSynthArgs) -> CliResult<()> {
    let mut spec = SynthSpec::load(&a.spec)?;
    if let Some(seed) = a.seed {
        spec.set_seed(seed);
    }
    let out = &a.out_dir;
    prepare_out_dir(out)?;
    write_out(out, files::SPEC_SNAPSHOT, &spec.to_text())?;
    match &spec {
        SynthSpec::Wsd(s) => {
            let data = synth::generate_synthetic_wsd(s)?;
            write_out(out, files::CORPUS, &synth::sentences_text(&data.corpus))?;
            write_out(out, files::WSD_TRAIN, &data.train.to_text())?;
            write_out(out, files::WSD_TEST, &data.test.to_text())?;
        }
        SynthSpec::Bilingual(s) => {
            let data = synth::generate_synthetic_bilingual(s)?;
            write_out(out, &files::corpus_for(&s.lang1), &synth::sentences_text(&data.corpus1))?;
            write_out(out, &files::corpus_for(&s.lang2), &synth::sentences_text(&data.corpus2))?;
            write_out(out, files::DICT_TRAIN, &synth::pairs_text(&data.train_dict))?;
            write_out(out, files::DICT_TEST, &synth::pairs_text(&data.test_dict))?;
        }
    }
    Ok(())
}

/// Keys shown by `--help`; exposed for tests.
pub fn help_config_keys() -> Vec<&'static str> {
    CONFIG_KEYS.iter().map(|(k, _)| *k).collect()
}
