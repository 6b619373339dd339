//! `nmtkit` command-line entry point: preprocess, tokenizer training,
//! model training, translation, evaluation, coverage analysis, toy data
//! generation, and the full experiment matrix.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::*;
use nmtkit::decoding::DecodeError;
use nmtkit::models::ModelKind;
use nmtkit::optim::OptimError;
use nmtkit::tensor::TensorError;
use nmtkit::training::TrainError;

#[derive(Parser)]
#[command(
    name = "nmtkit",
    version,
    about = "Desk-scale neural machine translation pipeline",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize and length-filter an aligned corpus; write stats.
    Preprocess {
        /// Source-language text file, one sentence per line
        #[arg(long)]
        src: PathBuf,
        /// Target-language text file, aligned line by line
        #[arg(long)]
        tgt: PathBuf,
        /// Output directory (corpus.src, corpus.tgt, stats)
        #[arg(long)]
        out: PathBuf,
        /// Drop pairs where either side exceeds this many words
        #[arg(long, default_value_t = 20)]
        max_words: usize,
        /// Keep long pairs (for in-domain corpora)
        #[arg(long)]
        no_length_filter: bool,
        /// Provenance label stored with each pair
        #[arg(long, default_value = "general")]
        domain: String,
    },
    /// Train one unigram subword model per language side.
    TokenizerTrain {
        /// Corpus base path(s); expects BASE.src and BASE.tgt (repeatable)
        #[arg(long, required = true)]
        corpus: Vec<PathBuf>,
        /// Maximum piece count per side (special ids excluded)
        #[arg(long, default_value_t = 1000)]
        vocab_size: usize,
        /// Output directory (tokenizer.src.vocab, tokenizer.tgt.vocab)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        max_piece_len: usize,
        #[arg(long, default_value_t = 0.9995)]
        char_coverage: f64,
        #[arg(long, default_value_t = 2)]
        em_iters: usize,
        #[arg(long, default_value_t = 0.75)]
        keep_ratio: f64,
    },
    /// Train a translation model with one of the three regimes.
    Train {
        /// Model family: lstm or transformer
        #[arg(long)]
        model: ModelKind,
        /// Training regime: general, mixed or finetune
        #[arg(long)]
        strategy: String,
        /// General training corpus base path
        #[arg(long)]
        general: PathBuf,
        /// General dev corpus base path
        #[arg(long)]
        general_dev: PathBuf,
        /// In-domain training corpus base path (mixed/finetune)
        #[arg(long)]
        domain: Option<PathBuf>,
        /// In-domain dev corpus base path (mixed/finetune)
        #[arg(long)]
        domain_dev: Option<PathBuf>,
        /// Domain label for reports
        #[arg(long, default_value = "domain")]
        domain_name: String,
        /// Oversampling factor for the mixed strategy
        #[arg(long, default_value_t = 10)]
        factor: usize,
        /// Base checkpoint to continue from (finetune)
        #[arg(long)]
        base_checkpoint: Option<PathBuf>,
        /// Fine-tuning epochs (defaults to --epochs)
        #[arg(long)]
        finetune_epochs: Option<usize>,
        #[arg(long)]
        src_tokenizer: PathBuf,
        #[arg(long)]
        tgt_tokenizer: PathBuf,
        /// Output directory (checkpoint.nmtc, report)
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        /// Override the per-family default learning rate
        #[arg(long)]
        learning_rate: Option<f64>,
        /// Use full-scale dimensions instead of desk-scale defaults
        #[arg(long)]
        full_scale: bool,
        /// Override the model's dropout rate
        #[arg(long)]
        dropout: Option<f64>,
    },
    /// Translate a file of sentences with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        src_tokenizer: PathBuf,
        #[arg(long)]
        tgt_tokenizer: PathBuf,
        /// UTF-8 input, one source sentence per line
        #[arg(long)]
        input: PathBuf,
        /// Output file, one translation per line
        #[arg(long)]
        output: PathBuf,
        /// Split inputs longer than this many words at commas
        #[arg(long, default_value_t = 20)]
        comma_split_threshold: usize,
        /// Hard cap on emitted tokens (default: 2*source length + 8)
        #[arg(long)]
        max_len: Option<usize>,
        /// Joiner between comma-split segment translations
        #[arg(long, default_value = ", ")]
        joiner: String,
    },
    /// Score translations with corpus-level BLEU.
    Evaluate {
        /// Hypothesis file (with --ref)
        #[arg(long)]
        hyp: Option<PathBuf>,
        /// Reference file (with --hyp)
        #[arg(long = "ref")]
        reference: Option<PathBuf>,
        /// Checkpoint to decode with (with --dev)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        src_tokenizer: Option<PathBuf>,
        #[arg(long)]
        tgt_tokenizer: Option<PathBuf>,
        /// Dev corpus base path to translate and score
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long, default_value = "domain")]
        domain_name: String,
        /// none (canonical) or add-one (for tiny corpora)
        #[arg(long, default_value = "none")]
        smoothing: String,
        #[arg(long, default_value_t = 20)]
        comma_split_threshold: usize,
        /// Also write the machine-readable report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Word-level token coverage of a probe corpus against a reference.
    Coverage {
        /// Reference corpus base path (typically general train)
        #[arg(long)]
        reference: PathBuf,
        /// Probe corpus base path (typically an in-domain set)
        #[arg(long)]
        probe: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the bundled synthetic bilingual dataset.
    Toydata {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
    },
    /// Run the full {lstm,transformer} x {general,mixed,finetune} matrix.
    Experiment {
        /// Configuration file (`[section]` + `key = value` lines)
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override any config key, e.g. --set training.epochs=3
        #[arg(long = "set", value_parser = parse_override)]
        overrides: Vec<(String, String)>,
        #[arg(long)]
        out: PathBuf,
        /// Train the two model families in parallel
        #[arg(long)]
        parallel: bool,
    },
}

fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected section.key=value, got '{s}'"))
}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_INTERNAL: u8 = 5;

fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if cause.downcast_ref::<DataError>().is_some() {
            return EXIT_DATA;
        }
        if let Some(t) = cause.downcast_ref::<TrainError>() {
            return match t {
                TrainError::NonFiniteLoss { .. } => EXIT_NUMERIC,
                TrainError::MissingData { .. } => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
        if cause.downcast_ref::<OptimError>().is_some() {
            return EXIT_NUMERIC;
        }
        if let Some(t) = cause.downcast_ref::<TensorError>() {
            return match t {
                TensorError::NonFinite { .. } => EXIT_NUMERIC,
                _ => EXIT_INTERNAL,
            };
        }
        if cause.downcast_ref::<DecodeError>().is_some()
            || cause.downcast_ref::<nmtkit::corpus::CorpusError>().is_some()
            || cause.downcast_ref::<nmtkit::subword::SubwordError>().is_some()
            || cause.downcast_ref::<nmtkit::training::CheckpointError>().is_some()
            || cause.downcast_ref::<nmtkit::evalkit::EvalError>().is_some()
            || cause.downcast_ref::<std::io::Error>().is_some()
        {
            return EXIT_DATA;
        }
    }
    EXIT_INTERNAL
}

fn run(cli: Cli, command_line: &str) -> anyhow::Result<()> {
    match cli.command {
        Command::Preprocess {
            src,
            tgt,
            out,
            max_words,
            no_length_filter,
            domain,
        } => cmd_preprocess(
            &PreprocessArgs {
                src,
                tgt,
                out,
                max_words,
                no_length_filter,
                domain,
            },
            command_line,
        ),
        Command::TokenizerTrain {
            corpus,
            vocab_size,
            out,
            max_piece_len,
            char_coverage,
            em_iters,
            keep_ratio,
        } => cmd_tokenizer_train(
            &TokenizerTrainArgs {
                corpus,
                vocab_size,
                out,
                max_piece_len,
                char_coverage,
                em_iters,
                keep_ratio,
            },
            command_line,
        ),
        Command::Train {
            model,
            strategy,
            general,
            general_dev,
            domain,
            domain_dev,
            domain_name,
            factor,
            base_checkpoint,
            finetune_epochs,
            src_tokenizer,
            tgt_tokenizer,
            out,
            seed,
            batch_size,
            epochs,
            learning_rate,
            full_scale,
            dropout,
        } => cmd_train(
            &TrainArgs {
                model,
                strategy,
                general,
                general_dev,
                domain,
                domain_dev,
                domain_name,
                factor,
                base_checkpoint,
                finetune_epochs,
                src_tokenizer,
                tgt_tokenizer,
                out,
                seed,
                batch_size,
                epochs,
                learning_rate,
                full_scale,
                dropout,
            },
            command_line,
        ),
        Command::Translate {
            checkpoint,
            src_tokenizer,
            tgt_tokenizer,
            input,
            output,
            comma_split_threshold,
            max_len,
            joiner,
        } => cmd_translate(&TranslateArgs {
            checkpoint,
            src_tokenizer,
            tgt_tokenizer,
            input,
            output,
            comma_split_threshold,
            max_len,
            joiner,
        }),
        Command::Evaluate {
            hyp,
            reference,
            checkpoint,
            src_tokenizer,
            tgt_tokenizer,
            dev,
            domain_name,
            smoothing,
            comma_split_threshold,
            out,
        } => cmd_evaluate(&EvaluateArgs {
            hyp,
            reference,
            checkpoint,
            src_tokenizer,
            tgt_tokenizer,
            dev,
            domain_name,
            smoothing,
            comma_split_threshold,
            out,
        }),
        Command::Coverage {
            reference,
            probe,
            out,
        } => cmd_coverage(&CoverageArgs {
            reference,
            probe,
            out,
        }),
        Command::Toydata { out, seed } => cmd_toydata(&ToydataArgs { out, seed }, command_line),
        Command::Experiment {
            config,
            overrides,
            out,
            parallel,
        } => cmd_experiment(
            &ExperimentArgs {
                config,
                overrides,
                out,
                parallel,
            },
            command_line,
        ),
    }
}

fn main() -> ExitCode {
    let command_line: String = std::env::args().collect::<Vec<_>>().join(" ");
    let cli = Cli::parse();
    match run(cli, &command_line) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}
