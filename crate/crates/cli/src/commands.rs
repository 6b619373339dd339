//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::{anyhow, Context, Result};

use nmtkit::corpus::{
    corpus_stats, filter_by_length, normalize_text, token_coverage, Corpus, Side, Split,
};
use nmtkit::decoding::{DecodeConfig, TranslationSession};
use nmtkit::evalkit::{
    corpus_bleu, evaluate_run, experiment_table, BleuReport, ExperimentRow, Smoothing,
};
use nmtkit::models::{LstmConfig, ModelConfig, ModelKind, TransformerConfig};
use nmtkit::report::render_key_values;
use nmtkit::subword::{train_unigram, SubwordModel, TokenizerPair, UnigramTrainOptions};
use nmtkit::toydata::{generate, ToyDataSpec};
use nmtkit::training::{run_strategy, Checkpoint, Strategy, TrainConfig, TrainData, TrainReport};
use nmtkit::Real;

use crate::config::RunConfig;

/// Command-line misuse distinct from data/numeric failures.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

/// Bad input data detected by command-level validation.
#[derive(Debug)]
pub struct DataError(pub String);

impl std::fmt::Display for DataError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for DataError {}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))
}

/// Timestamps live in this side file so the primary outputs of a rerun
/// stay byte-identical.
fn write_run_meta(dir: &Path, command: &str) -> Result<()> {
    let now = SystemTime::now()
        .duration_since(SystemTime::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let body = format!("command = {command}\nunix_time = {now}\n");
    fs::write(dir.join("run_meta.txt"), body).context("cannot write run_meta.txt")
}

fn load_pair_base(base: &Path, domain: &str, split: Split) -> Result<Corpus> {
    Corpus::load(base, domain, split)
        .with_context(|| format!("cannot load corpus {}", base.display()))
}

fn smoothing_from(name: &str) -> Result<Smoothing> {
    match name {
        "none" => Ok(Smoothing::None),
        "add-one" => Ok(Smoothing::AddOne),
        other => Err(UsageError(format!("unknown smoothing '{other}'")).into()),
    }
}

// ── preprocess ───────────────────────────────────────────────────────

pub struct PreprocessArgs {
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub out: PathBuf,
    pub max_words: usize,
    pub no_length_filter: bool,
    pub domain: String,
}

pub fn cmd_preprocess(args: &PreprocessArgs, command: &str) -> Result<()> {
    ensure_dir(&args.out)?;
    let src_text = fs::read_to_string(&args.src)
        .with_context(|| format!("cannot read {}", args.src.display()))?;
    let tgt_text = fs::read_to_string(&args.tgt)
        .with_context(|| format!("cannot read {}", args.tgt.display()))?;
    let src_lines: Vec<&str> = src_text.lines().collect();
    let tgt_lines: Vec<&str> = tgt_text.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(DataError(format!(
            "line count mismatch: {} has {} lines, {} has {}",
            args.src.display(),
            src_lines.len(),
            args.tgt.display(),
            tgt_lines.len()
        ))
        .into());
    }
    let normalized = Corpus::from_pairs(
        src_lines
            .iter()
            .zip(&tgt_lines)
            .map(|(s, t)| (normalize_text(s), normalize_text(t))),
        &args.domain,
        Split::Train,
    );
    let empties = src_lines.len() - normalized.len();
    let (kept, dropped_long) = if args.no_length_filter {
        (normalized, 0)
    } else {
        filter_by_length(&normalized, args.max_words)
    };
    kept.save(&args.out.join("corpus"))
        .context("cannot write corpus files")?;
    let stats = corpus_stats(&kept);
    let mut table = stats.table("corpus");
    let _ = writeln!(table, "dropped (empty after normalization): {empties}");
    let _ = writeln!(table, "dropped (longer than {} words): {dropped_long}", args.max_words);
    print!("{table}");
    fs::write(args.out.join("stats.txt"), &table)?;
    let mut kv = stats.key_values("corpus");
    kv.push(("dropped.empty".into(), empties.to_string()));
    kv.push(("dropped.too_long".into(), dropped_long.to_string()));
    fs::write(args.out.join("stats.kv"), render_key_values(&kv))?;
    write_run_meta(&args.out, command)
}

// ── tokenizer-train ──────────────────────────────────────────────────

pub struct TokenizerTrainArgs {
    pub corpus: Vec<PathBuf>,
    pub vocab_size: usize,
    pub out: PathBuf,
    pub max_piece_len: usize,
    pub char_coverage: f64,
    pub em_iters: usize,
    pub keep_ratio: f64,
}

fn unigram_options(args: &TokenizerTrainArgs) -> UnigramTrainOptions {
    let mut opts = UnigramTrainOptions::with_vocab_size(args.vocab_size);
    opts.max_piece_len = args.max_piece_len;
    opts.char_coverage = args.char_coverage;
    opts.em_iters_per_round = args.em_iters;
    opts.keep_ratio = args.keep_ratio;
    opts
}

pub fn cmd_tokenizer_train(args: &TokenizerTrainArgs, command: &str) -> Result<()> {
    if args.corpus.is_empty() {
        return Err(UsageError("at least one --corpus base path is required".into()).into());
    }
    ensure_dir(&args.out)?;
    let mut src_lines = Vec::new();
    let mut tgt_lines = Vec::new();
    for base in &args.corpus {
        let corpus = load_pair_base(base, "general", Split::Train)?;
        src_lines.extend(corpus.source_lines().map(|s| s.to_string()));
        tgt_lines.extend(corpus.target_lines().map(|s| s.to_string()));
    }
    let opts = unigram_options(args);
    let src_refs: Vec<&str> = src_lines.iter().map(|s| s.as_str()).collect();
    let tgt_refs: Vec<&str> = tgt_lines.iter().map(|s| s.as_str()).collect();
    let source = train_unigram(&src_refs, &opts)?;
    let target = train_unigram(&tgt_refs, &opts)?;
    let src_path = args.out.join("tokenizer.src.vocab");
    let tgt_path = args.out.join("tokenizer.tgt.vocab");
    source.save(&src_path)?;
    target.save(&tgt_path)?;
    let kv = vec![
        ("source.pieces".to_string(), source.piece_count().to_string()),
        ("source.fingerprint".to_string(), source.fingerprint()),
        ("target.pieces".to_string(), target.piece_count().to_string()),
        ("target.fingerprint".to_string(), target.fingerprint()),
    ];
    print!("{}", render_key_values(&kv));
    fs::write(args.out.join("tokenizer.kv"), render_key_values(&kv))?;
    write_run_meta(&args.out, command)
}

// ── train ────────────────────────────────────────────────────────────

pub struct TrainArgs {
    pub model: ModelKind,
    pub strategy: String,
    pub general: PathBuf,
    pub general_dev: PathBuf,
    pub domain: Option<PathBuf>,
    pub domain_dev: Option<PathBuf>,
    pub domain_name: String,
    pub factor: usize,
    pub base_checkpoint: Option<PathBuf>,
    pub finetune_epochs: Option<usize>,
    pub src_tokenizer: PathBuf,
    pub tgt_tokenizer: PathBuf,
    pub out: PathBuf,
    pub seed: u64,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: Option<f64>,
    pub full_scale: bool,
    pub dropout: Option<f64>,
}

fn model_config(
    kind: ModelKind,
    src_vocab: usize,
    tgt_vocab: usize,
    full_scale: bool,
    dropout: Option<f64>,
) -> ModelConfig {
    match kind {
        ModelKind::Lstm => {
            let mut c = if full_scale {
                LstmConfig::full_scale(src_vocab, tgt_vocab)
            } else {
                LstmConfig::desk(src_vocab, tgt_vocab)
            };
            if let Some(d) = dropout {
                c.dropout = d;
            }
            ModelConfig::Lstm(c)
        }
        ModelKind::Transformer => {
            let mut c = if full_scale {
                TransformerConfig::full_scale(src_vocab, tgt_vocab)
            } else {
                TransformerConfig::desk(src_vocab, tgt_vocab)
            };
            if let Some(d) = dropout {
                c.dropout = d;
            }
            ModelConfig::Transformer(c)
        }
    }
}

fn parse_strategy(args: &TrainArgs) -> Result<Strategy> {
    match args.strategy.as_str() {
        "general" => Ok(Strategy::GeneralOnly),
        "mixed" => Ok(Strategy::Mixed {
            factor: args.factor,
        }),
        "finetune" => {
            let base = args.base_checkpoint.clone().ok_or_else(|| {
                UsageError("--strategy finetune requires --base-checkpoint".into())
            })?;
            Ok(Strategy::FineTune {
                base,
                epochs: args.finetune_epochs.unwrap_or(args.epochs),
            })
        }
        other => Err(UsageError(format!(
            "unknown strategy '{other}' (expected general, mixed or finetune)"
        ))
        .into()),
    }
}

fn write_train_outputs(
    out: &Path,
    ckpt: &Checkpoint,
    report: &TrainReport,
    command: &str,
) -> Result<()> {
    ensure_dir(out)?;
    ckpt.save(&out.join("checkpoint.nmtc"))?;
    let table = report.table();
    print!("{table}");
    fs::write(out.join("report.txt"), &table)?;
    fs::write(out.join("report.kv"), render_key_values(&report.key_values()))?;
    // wall time is a timestamp-like quantity; it goes in the meta file
    let meta = format!("wall_time_secs = {:.3}\n", report.wall_time_secs);
    fs::write(out.join("timing.txt"), meta)?;
    write_run_meta(out, command)
}

pub fn cmd_train(args: &TrainArgs, command: &str) -> Result<()> {
    let strategy = parse_strategy(args)?;
    let needs_domain = !matches!(strategy, Strategy::GeneralOnly);
    if needs_domain && (args.domain.is_none() || args.domain_dev.is_none()) {
        return Err(UsageError(format!(
            "--strategy {} requires --domain and --domain-dev",
            args.strategy
        ))
        .into());
    }
    let source = SubwordModel::load(&args.src_tokenizer)?;
    let target = SubwordModel::load(&args.tgt_tokenizer)?;
    let tokenizers = TokenizerPair { source, target };

    let general_train = load_pair_base(&args.general, "general", Split::Train)?;
    let general_dev = load_pair_base(&args.general_dev, "general", Split::Dev)?;
    let domain_train = args
        .domain
        .as_ref()
        .map(|p| load_pair_base(p, &args.domain_name, Split::Train))
        .transpose()?;
    let domain_dev = args
        .domain_dev
        .as_ref()
        .map(|p| load_pair_base(p, &args.domain_name, Split::Dev))
        .transpose()?;

    let model = model_config(
        args.model,
        tokenizers.source.vocab_size(),
        tokenizers.target.vocab_size(),
        args.full_scale,
        args.dropout,
    );
    let mut cfg = TrainConfig::new(model, strategy);
    cfg.batch_size = args.batch_size;
    cfg.max_epochs = args.epochs;
    cfg.seed = args.seed;
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    let data = TrainData {
        general_train: &general_train,
        general_dev: &general_dev,
        domain_train: domain_train.as_ref(),
        domain_dev: domain_dev.as_ref(),
    };
    let (ckpt, report) = run_strategy::<Real>(&cfg, &data, &tokenizers)?;
    write_train_outputs(&args.out, &ckpt, &report, command)
}

// ── translate ────────────────────────────────────────────────────────

pub struct TranslateArgs {
    pub checkpoint: PathBuf,
    pub src_tokenizer: PathBuf,
    pub tgt_tokenizer: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub comma_split_threshold: usize,
    pub max_len: Option<usize>,
    pub joiner: String,
}

fn open_session(
    checkpoint: &Path,
    src_tokenizer: &Path,
    tgt_tokenizer: &Path,
) -> Result<TranslationSession<Real>> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let tokenizers = TokenizerPair {
        source: SubwordModel::load(src_tokenizer)?,
        target: SubwordModel::load(tgt_tokenizer)?,
    };
    Ok(TranslationSession::from_checkpoint(&ckpt, tokenizers)?)
}

pub fn cmd_translate(args: &TranslateArgs) -> Result<()> {
    let session = open_session(&args.checkpoint, &args.src_tokenizer, &args.tgt_tokenizer)?;
    let config = DecodeConfig {
        max_len: args.max_len,
        comma_split_threshold: args.comma_split_threshold,
        joiner: args.joiner.clone(),
    };
    let lines = session.translate_file(&args.input, &args.output, &config)?;
    eprintln!("translated {lines} lines -> {}", args.output.display());
    Ok(())
}

// ── evaluate ─────────────────────────────────────────────────────────

pub struct EvaluateArgs {
    pub hyp: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub src_tokenizer: Option<PathBuf>,
    pub tgt_tokenizer: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub domain_name: String,
    pub smoothing: String,
    pub comma_split_threshold: usize,
    pub out: Option<PathBuf>,
}

fn sentence_log_path(report_out: &Path) -> PathBuf {
    let mut name = report_out.as_os_str().to_os_string();
    name.push(".sentences.txt");
    PathBuf::from(name)
}

fn write_sentence_log(path: &Path, records: &[nmtkit::evalkit::SentenceRecord]) -> Result<()> {
    let mut body = String::new();
    for r in records {
        let _ = writeln!(body, "{} ||| {} ||| {}", r.source, r.hypothesis, r.reference);
    }
    fs::write(path, body).with_context(|| format!("cannot write {}", path.display()))
}

fn print_bleu(report: &BleuReport, out: &Option<PathBuf>) -> Result<()> {
    print!("{}", report.table());
    let mut lines = String::new();
    for (k, v) in report.key_values() {
        let _ = writeln!(lines, "{k}={v}");
    }
    print!("{lines}");
    if let Some(path) = out {
        fs::write(path, lines).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let smoothing = smoothing_from(&args.smoothing)?;
    match (&args.hyp, &args.reference, &args.checkpoint, &args.dev) {
        (Some(hyp), Some(reference), None, None) => {
            let read_lines = |p: &Path| -> Result<Vec<String>> {
                Ok(fs::read_to_string(p)
                    .with_context(|| format!("cannot read {}", p.display()))?
                    .lines()
                    .map(|l| l.to_string())
                    .collect())
            };
            let hyps = read_lines(hyp)?;
            let refs = read_lines(reference)?;
            let report = corpus_bleu(&hyps, &refs, smoothing)?;
            print_bleu(&report, &args.out)
        }
        (None, None, Some(ckpt), Some(dev)) => {
            let (src_tok, tgt_tok) = match (&args.src_tokenizer, &args.tgt_tokenizer) {
                (Some(s), Some(t)) => (s, t),
                _ => {
                    return Err(UsageError(
                        "--checkpoint mode requires --src-tokenizer and --tgt-tokenizer".into(),
                    )
                    .into())
                }
            };
            let session = open_session(ckpt, src_tok, tgt_tok)?;
            let dev_corpus = load_pair_base(dev, &args.domain_name, Split::Dev)?;
            let config = DecodeConfig {
                comma_split_threshold: args.comma_split_threshold,
                ..DecodeConfig::default()
            };
            let (report, records) = evaluate_run(&session, &dev_corpus, &config, smoothing)?;
            if let Some(out) = &args.out {
                write_sentence_log(&sentence_log_path(out), &records)?;
            }
            print_bleu(&report, &args.out)
        }
        _ => Err(UsageError(
            "pass either --hyp with --ref, or --checkpoint with --dev (plus tokenizers)".into(),
        )
        .into()),
    }
}

// ── coverage ─────────────────────────────────────────────────────────

pub struct CoverageArgs {
    pub reference: PathBuf,
    pub probe: PathBuf,
    pub out: Option<PathBuf>,
}

pub fn cmd_coverage(args: &CoverageArgs) -> Result<()> {
    let reference = load_pair_base(&args.reference, "general", Split::Train)?;
    let probe = load_pair_base(&args.probe, "probe", Split::Train)?;
    let mut table = String::new();
    let mut kv = Vec::new();
    for (side, label) in [(Side::Source, "source"), (Side::Target, "target")] {
        let report = token_coverage(&reference, &probe, side)?;
        table.push_str(&report.table(label));
        kv.extend(report.key_values(label));
    }
    print!("{table}");
    if let Some(path) = &args.out {
        fs::write(path, render_key_values(&kv))
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

// ── toydata ──────────────────────────────────────────────────────────

pub struct ToydataArgs {
    pub out: PathBuf,
    pub seed: u64,
}

pub fn cmd_toydata(args: &ToydataArgs, command: &str) -> Result<()> {
    ensure_dir(&args.out)?;
    let spec = ToyDataSpec {
        seed: args.seed,
        ..ToyDataSpec::default()
    };
    let data = generate(&spec);
    data.write_to(&args.out)?;
    eprintln!(
        "wrote general + {} domain corpora under {}",
        data.domains.len(),
        args.out.display()
    );
    write_run_meta(&args.out, command)
}

// ── experiment ───────────────────────────────────────────────────────

pub struct ExperimentArgs {
    pub config: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
    pub out: PathBuf,
    pub parallel: bool,
}

struct ExperimentData {
    general_train: Corpus,
    general_dev: Corpus,
    domain_train: Corpus,
    domain_dev: Corpus,
}

fn experiment_data(cfg: &RunConfig, out: &Path) -> Result<ExperimentData> {
    let paths = [
        &cfg.general_train,
        &cfg.general_dev,
        &cfg.domain_train,
        &cfg.domain_dev,
    ];
    if paths.iter().all(|p| p.is_some()) {
        Ok(ExperimentData {
            general_train: load_pair_base(cfg.general_train.as_ref().unwrap(), "general", Split::Train)?,
            general_dev: load_pair_base(cfg.general_dev.as_ref().unwrap(), "general", Split::Dev)?,
            domain_train: load_pair_base(cfg.domain_train.as_ref().unwrap(), &cfg.domain, Split::Train)?,
            domain_dev: load_pair_base(cfg.domain_dev.as_ref().unwrap(), &cfg.domain, Split::Dev)?,
        })
    } else if paths.iter().any(|p| p.is_some()) {
        Err(UsageError(
            "either set all of data.{general_train,general_dev,domain_train,domain_dev} or none (builtin toy data)".into(),
        )
        .into())
    } else {
        let spec = ToyDataSpec {
            seed: cfg.toy_seed,
            general_train: cfg.toy_general_train,
            general_dev: cfg.toy_general_dev,
            general_test: cfg.toy_general_test,
            domain_train: cfg.toy_domain_train,
            domain_dev: cfg.toy_domain_dev,
            domain_test: cfg.toy_domain_test,
            general_vocab: cfg.toy_vocab,
            domain_extra_vocab: cfg.toy_domain_extra_vocab,
            ..ToyDataSpec::default()
        };
        let data = generate(&spec);
        let data_dir = out.join("data");
        ensure_dir(&data_dir)?;
        data.write_to(&data_dir)?;
        let (_, splits) = data
            .domains
            .iter()
            .find(|(name, _)| *name == cfg.domain)
            .ok_or_else(|| {
                anyhow!(
                    "builtin toy data has domains alpha and beta; data.domain is '{}'",
                    cfg.domain
                )
            })?;
        Ok(ExperimentData {
            general_train: data.general.train.clone(),
            general_dev: data.general.dev.clone(),
            domain_train: splits.train.clone(),
            domain_dev: splits.dev.clone(),
        })
    }
}

fn cell_train_config(cfg: &RunConfig, kind: ModelKind, toks: &TokenizerPair, strategy: Strategy) -> TrainConfig {
    let (sv, tv) = (toks.source.vocab_size(), toks.target.vocab_size());
    let model = match kind {
        ModelKind::Lstm => ModelConfig::Lstm(LstmConfig {
            src_vocab: sv,
            tgt_vocab: tv,
            embed_dim: cfg.lstm_embed_dim,
            hidden_dim: cfg.lstm_hidden_dim,
            encoder_layers: 1,
            decoder_layers: 1,
            dropout: cfg.lstm_dropout,
        }),
        ModelKind::Transformer => ModelConfig::Transformer(TransformerConfig {
            src_vocab: sv,
            tgt_vocab: tv,
            layers: cfg.tf_layers,
            model_dim: cfg.tf_model_dim,
            heads: cfg.tf_heads,
            ff_dim: cfg.tf_ff_dim,
            max_positions: cfg.tf_max_positions,
            dropout: cfg.tf_dropout,
        }),
    };
    let mut tc = TrainConfig::new(model, strategy);
    tc.batch_size = cfg.batch_size;
    tc.max_epochs = cfg.epochs;
    tc.seed = cfg.seed;
    tc.clip_norm = cfg.clip_norm;
    tc.finetune_lr_scale = cfg.finetune_lr_scale;
    tc.learning_rate = match kind {
        ModelKind::Lstm => cfg.lstm_lr,
        ModelKind::Transformer => cfg.transformer_lr,
    };
    tc
}

/// Train the three strategy cells for one model family and score each
/// checkpoint on the in-domain dev set.
fn run_model_cells(
    cfg: &RunConfig,
    kind: ModelKind,
    data: &ExperimentData,
    toks: &TokenizerPair,
    out: &Path,
    command: &str,
) -> Result<Vec<ExperimentRow>> {
    let smoothing = smoothing_from(&cfg.smoothing)?;
    let decode_cfg = DecodeConfig {
        comma_split_threshold: cfg.comma_split_threshold,
        ..DecodeConfig::default()
    };
    let train_data_general = TrainData {
        general_train: &data.general_train,
        general_dev: &data.general_dev,
        domain_train: None,
        domain_dev: None,
    };
    let train_data_domain = TrainData {
        general_train: &data.general_train,
        general_dev: &data.general_dev,
        domain_train: Some(&data.domain_train),
        domain_dev: Some(&data.domain_dev),
    };

    let mut rows = Vec::new();
    let general_dir = out.join(format!("{}-general", kind.as_str()));
    let base_ckpt_path = general_dir.join("checkpoint.nmtc");
    let strategies: [(Strategy, &TrainData<'_>); 3] = [
        (Strategy::GeneralOnly, &train_data_general),
        (
            Strategy::Mixed {
                factor: cfg.oversample_factor,
            },
            &train_data_domain,
        ),
        (
            Strategy::FineTune {
                base: base_ckpt_path.clone(),
                epochs: cfg.finetune_epochs,
            },
            &train_data_domain,
        ),
    ];
    for (strategy, train_data) in strategies {
        let label = strategy.label();
        let cell_dir = out.join(format!("{}-{}", kind.as_str(), label));
        let tc = cell_train_config(cfg, kind, toks, strategy);
        let (ckpt, report) = run_strategy::<Real>(&tc, train_data, toks)?;
        write_train_outputs(&cell_dir, &ckpt, &report, command)?;
        let session = TranslationSession::<Real>::from_checkpoint(&ckpt, toks.clone())?;
        let (bleu, records) = evaluate_run(&session, &data.domain_dev, &decode_cfg, smoothing)?;
        write_sentence_log(&cell_dir.join("dev.sentences.txt"), &records)?;
        rows.push(ExperimentRow {
            model: kind.as_str().to_string(),
            strategy: label.to_string(),
            domain: cfg.domain.clone(),
            split: "dev".to_string(),
            report: bleu,
        });
    }
    Ok(rows)
}

pub fn cmd_experiment(args: &ExperimentArgs, command: &str) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for (key, value) in &args.overrides {
        cfg.set(key, value).map_err(|e| UsageError(format!("{e:#}")))?;
    }
    ensure_dir(&args.out)?;
    fs::write(args.out.join("effective.conf"), cfg.render())?;
    write_run_meta(&args.out, command)?;

    let data = experiment_data(&cfg, &args.out)?;

    // One tokenizer pair for the whole matrix, trained on general plus
    // in-domain training text so adaptation cells cover domain terms.
    let mut src_lines: Vec<&str> = data.general_train.source_lines().collect();
    src_lines.extend(data.domain_train.source_lines());
    let mut tgt_lines: Vec<&str> = data.general_train.target_lines().collect();
    tgt_lines.extend(data.domain_train.target_lines());
    let mut opts = UnigramTrainOptions::with_vocab_size(cfg.vocab_size);
    opts.max_piece_len = cfg.max_piece_len;
    opts.char_coverage = cfg.char_coverage;
    opts.em_iters_per_round = cfg.em_iters;
    opts.keep_ratio = cfg.keep_ratio;
    let toks = TokenizerPair {
        source: train_unigram(&src_lines, &opts)?,
        target: train_unigram(&tgt_lines, &opts)?,
    };
    toks.source.save(&args.out.join("tokenizer.src.vocab"))?;
    toks.target.save(&args.out.join("tokenizer.tgt.vocab"))?;

    let kinds = [ModelKind::Lstm, ModelKind::Transformer];
    let mut rows: Vec<ExperimentRow> = Vec::new();
    if args.parallel {
        // Cells across model families are independent; the finetune cell
        // of each family depends on its own general cell, so each family
        // stays sequential inside one thread.
        let results: Vec<Result<Vec<ExperimentRow>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = kinds
                .iter()
                .map(|&kind| {
                    let cfg = &cfg;
                    let data = &data;
                    let toks = &toks;
                    let out = &args.out;
                    scope.spawn(move || run_model_cells(cfg, kind, data, toks, out, command))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("cell thread")).collect()
        });
        for result in results {
            rows.extend(result?);
        }
    } else {
        for kind in kinds {
            rows.extend(run_model_cells(&cfg, kind, &data, &toks, &args.out, command)?);
        }
    }

    let mut csv = String::from(ExperimentRow::csv_header());
    csv.push('\n');
    for row in &rows {
        csv.push_str(&row.csv_line());
        csv.push('\n');
    }
    fs::write(args.out.join("matrix.csv"), &csv)?;
    let table = experiment_table(&rows);
    print!("{table}");
    fs::write(args.out.join("matrix.txt"), &table)?;
    Ok(())
}
