//! `cemat`: vocabulary learning, masking inspection, pre-training,
//! fine-tuning, translation and scoring from one binary.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod run_dir;

/// Bad flags, paths or configuration values.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Training or decoding produced non-finite values.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct NumericError(pub String);

#[derive(Parser, Debug)]
#[command(name = "cemat", version, about = "Conditional masked pre-training for translation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// Starting configuration: toy or base.
    #[arg(long, default_value = "toy")]
    pub preset: String,
    /// Flat key=value file applied over the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single override, applied after --config; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
pub struct RunArgs {
    /// Output directory; defaults to $CEMAT_RUN_ROOT/<command>-seed<N>.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Continue an unfinished run from its latest checkpoint.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Args, Debug, Clone)]
pub struct PretrainData {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of `<a>-<b>.txt` dictionaries.
    #[arg(long)]
    pub lexicon: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct PairFiles {
    #[arg(long)]
    pub src: PathBuf,
    #[arg(long)]
    pub tgt: PathBuf,
    #[arg(long)]
    pub src_lang: String,
    #[arg(long)]
    pub tgt_lang: String,
}

#[derive(Args, Debug, Clone)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub pairs: PairFiles,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Checkpoint directory to start from, or `none`.
    #[arg(long)]
    pub init: String,
    #[command(flatten)]
    pub run: RunArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug, Clone)]
pub struct TranslateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// One whitespace-tokenized sentence per line.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub src_lang: String,
    #[arg(long)]
    pub tgt_lang: String,
    /// Defaults to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic cipher task (corpora, lexicon, workload.toml).
    MakeToy {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        bilingual: Option<usize>,
        #[arg(long)]
        monolingual: Option<usize>,
        #[arg(long)]
        finetune: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Learn the shared subword vocabulary from every corpus in a manifest.
    LearnVocab {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Write one epoch of masked pre-training examples as JSON lines.
    Preprocess {
        #[command(flatten)]
        data: PretrainData,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Code-switching coverage and masking-ratio histograms.
    Stats {
        #[command(flatten)]
        data: PretrainData,
        #[arg(long, default_value_t = 0)]
        epoch: u64,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Joint CMLM + MLM pre-training.
    Pretrain {
        #[command(flatten)]
        data: PretrainData,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Autoregressive fine-tuning with a causal decoder.
    FinetuneAt(FinetuneArgs),
    /// Non-autoregressive fine-tuning with random target masks.
    FinetuneNat(FinetuneArgs),
    /// Beam-search translation.
    TranslateAt(TranslateArgs),
    /// Mask-Predict translation.
    TranslateNat {
        #[command(flatten)]
        args: TranslateArgs,
        /// Reference file; with `decode.length_mode=gold` its lengths are used.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Write every iteration's tokens and confidences as JSON lines.
        #[arg(long)]
        dump_iterations: Option<PathBuf>,
    },
    /// Corpus BLEU of a hypothesis file against a reference file.
    ScoreBleu {
        #[arg(long)]
        hyp: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Disable add-one smoothing.
        #[arg(long)]
        no_smooth: bool,
    },
    /// Pre-train → fine-tune → BLEU for each grid cell and seed.
    Ablate {
        #[arg(long)]
        workload: PathBuf,
        /// Comma-separated: full, no-aligned-cs, no-dynamic, bilingual-only, scratch.
        #[arg(long, default_value = "full,no-aligned-cs,no-dynamic")]
        cells: String,
        #[arg(long, default_value = "1,2,3,4,5")]
        seeds: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// NAT test BLEU as a function of the iteration count.
    IterCurve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        workload: PathBuf,
        #[arg(long, default_value = "1,2,4,10")]
        iterations: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    use commands as c;
    match cli.command {
        Command::MakeToy { out, seed, bilingual, monolingual, finetune, test } => {
            c::make_toy(&out, seed, bilingual, monolingual, finetune, test)
        }
        Command::LearnVocab { manifest, out, cfg } => c::learn_vocab(&manifest, &out, &cfg),
        Command::Preprocess { data, out, epoch, cfg } => c::preprocess(&data, &out, epoch, &cfg),
        Command::Stats { data, epoch, cfg } => c::stats(&data, epoch, &cfg),
        Command::Pretrain { data, run, cfg } => c::pretrain(&data, &run, &cfg),
        Command::FinetuneAt(a) => c::finetune(cemat::training::Task::FinetuneAt, &a),
        Command::FinetuneNat(a) => c::finetune(cemat::training::Task::FinetuneNat, &a),
        Command::TranslateAt(a) => c::translate_at(&a),
        Command::TranslateNat { args, reference, dump_iterations } => {
            c::translate_nat(&args, reference.as_deref(), dump_iterations.as_deref())
        }
        Command::ScoreBleu { hyp, reference, no_smooth } => c::score_bleu(&hyp, &reference, !no_smooth),
        Command::Ablate { workload, cells, seeds, out, cfg } => c::ablate(&workload, &cells, &seeds, &out, &cfg),
        Command::IterCurve { checkpoint, vocab, workload, iterations, out, cfg } => {
            c::iter_curve(&checkpoint, &vocab, &workload, &iterations, &out, &cfg)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        1
    } else if err.chain().any(|e| e.is::<NumericError>()) {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
