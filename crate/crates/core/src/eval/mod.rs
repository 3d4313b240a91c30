//! BLEU scoring, the synthetic cipher task, and experiment drivers
//! (transfer comparisons, ablation tables, iteration curves).

use std::path::PathBuf;

use thiserror::Error;

pub mod bleu;
pub mod experiment;
pub mod toy;
pub mod workload;

pub use bleu::{bleu, BleuReport};
pub use experiment::{
    ablation_run, curve_csv, evaluate_at, evaluate_nat, finetune, iteration_curve, learn_toy_vocab, pretrain, run_cell,
    AblationCell, AblationRow, AblationTable, CellRun, CurvePoint, ExperimentConfig, Translations, Workload,
    ABLATION_HEADER, CURVE_HEADER,
};
pub use toy::{ToySpec, ToyTask};
pub use workload::{LoadedWorkload, WorkloadFile};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    CountMismatch { hyps: usize, refs: usize },
    #[error("invalid experiment: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] crate::training::TrainError),
    #[error(transparent)]
    Decode(#[from] crate::decoding::DecodeError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Vocab(#[from] crate::vocab::VocabError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Lexicon(#[from] crate::lexicon::LexiconError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}
