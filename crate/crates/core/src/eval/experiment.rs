//! Pre-train, fine-tune and score pipelines shared by the CLI and the
//! experiment tests.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{bleu, BleuReport, EvalError};
use crate::corpus::{LoadedCorpus, SentencePair};
use crate::decoding::{translate_at, translate_nat, DecodeConfig, LengthMode};
use crate::lexicon::Lexicon;
use crate::masking::MaskingPolicy;
use crate::model::{ModelConfig, ModelParams};
use crate::training::{
    EncodedPair, MetricRow, PairSource, PretrainSource, Regime, Task, TrainConfig, TrainState, Trainer,
};
use crate::vocab::{learn_vocab, sentences_by_language, BalancingPolicy, Vocabulary};

/// Every knob of a pre-train → fine-tune → evaluate run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub vocab_size: usize,
    /// Sentences sampled for learning merges.
    pub vocab_sample: usize,
    pub balancing: BalancingPolicy,
    pub masking: MaskingPolicy,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub finetune_nat: TrainConfig,
    pub decode: DecodeConfig,
    pub smooth_bleu: bool,
}

impl ExperimentConfig {
    /// Sizes that fit the synthetic cipher task on one CPU core.
    pub fn toy() -> Self {
        let model = ModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            model_dim: 48,
            heads: 4,
            ffn_dim: 96,
            dropout: 0.1,
            max_positions: 64,
            ..ModelConfig::default()
        };
        let pretrain = TrainConfig {
            lr_peak: 2e-3,
            warmup_steps: 100,
            total_steps: 1500,
            batch_tokens: 768,
            ..TrainConfig::default()
        };
        let finetune = TrainConfig {
            lr_peak: 1e-3,
            warmup_steps: 50,
            total_steps: 400,
            batch_tokens: 768,
            ..TrainConfig::default()
        };
        ExperimentConfig {
            model,
            vocab_size: 400,
            vocab_sample: 4000,
            balancing: BalancingPolicy::default(),
            masking: MaskingPolicy::default(),
            pretrain,
            finetune: finetune.clone(),
            finetune_nat: TrainConfig { total_steps: 800, ..finetune },
            decode: DecodeConfig {
                beam_size: 4,
                nat_iterations: 4,
                length_mode: LengthMode::Gold,
                ..DecodeConfig::default()
            },
            smooth_bleu: true,
        }
    }

    pub fn model_for(&self, vocab: &Vocabulary) -> ModelConfig {
        ModelConfig { vocab_size: vocab.len(), ..self.model.clone() }
    }
}

/// Shared vocabulary over every language in `corpora`.
pub fn learn_toy_vocab(corpora: &[LoadedCorpus], cfg: &ExperimentConfig, seed: u64) -> Result<Vocabulary, EvalError> {
    let by_lang = sentences_by_language(corpora);
    Ok(learn_vocab(&by_lang, cfg.vocab_size, &cfg.balancing, cfg.vocab_sample, seed)?)
}

/// Pre-trains a fresh model and returns its parameters.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    cfg: &ExperimentConfig,
    policy: &MaskingPolicy,
    regime: Regime,
    corpora: &[LoadedCorpus],
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    seed: u64,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<ModelParams<f32>, EvalError> {
    let tc = TrainConfig { seed, ..cfg.pretrain.clone() };
    let source =
        PretrainSource::new(corpora, vocab, lexicon, policy.clone(), &cfg.balancing, regime, tc.batch_tokens, seed)?;
    let params = ModelParams::init(&cfg.model_for(vocab), seed)?;
    let state = TrainState::new(params, &tc);
    let mut trainer = Trainer::pretrain(tc, state, &source)?;
    trainer.run(|_, row| {
        on_row(row);
        Ok(())
    })?;
    Ok(trainer.state.params)
}

/// Fine-tunes on `pairs` from `init`, or from a fresh model when `None`.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    cfg: &ExperimentConfig,
    task: Task,
    init: Option<&ModelParams<f32>>,
    pairs: &[SentencePair],
    vocab: &Vocabulary,
    seed: u64,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<ModelParams<f32>, EvalError> {
    let base = match task {
        Task::FinetuneAt => &cfg.finetune,
        Task::FinetuneNat => &cfg.finetune_nat,
        Task::Pretrain => return Err(EvalError::Config("fine-tuning task expected".into())),
    };
    let tc = TrainConfig { seed, ..base.clone() };
    let encoded = pairs.iter().map(|p| EncodedPair::encode(vocab, p)).collect::<Result<Vec<_>, _>>()?;
    let source = PairSource::new(encoded, tc.batch_tokens, seed)?;
    let params = match init {
        Some(p) => p.clone(),
        None => ModelParams::init(&cfg.model_for(vocab), seed)?,
    };
    let state = TrainState::new(params, &tc);
    let mut trainer = Trainer::finetune(tc, task, state, &source)?;
    trainer.run(|_, row| {
        on_row(row);
        Ok(())
    })?;
    Ok(trainer.state.params)
}

/// Decoded test outputs and their score.
#[derive(Debug, Clone, PartialEq)]
pub struct Translations {
    pub hypotheses: Vec<String>,
    pub report: BleuReport,
}

fn score(hyps: Vec<String>, test: &[SentencePair], smooth: bool) -> Result<Translations, EvalError> {
    let refs: Vec<String> = test.iter().map(|p| p.tgt.text()).collect();
    let report = bleu(&hyps, &refs, smooth)?;
    Ok(Translations { hypotheses: hyps, report })
}

fn tag_of(vocab: &Vocabulary, p: &SentencePair) -> Result<u32, EvalError> {
    vocab
        .tag_id(&p.tgt.lang)
        .ok_or_else(|| EvalError::Config(format!("language {} not in vocabulary", p.tgt.lang.code())))
}

/// Beam-search translation of every test pair, scored against its target.
pub fn evaluate_at(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    test: &[SentencePair],
    decode: &DecodeConfig,
    smooth: bool,
) -> Result<Translations, EvalError> {
    let mut hyps = Vec::with_capacity(test.len());
    for p in test {
        let src = vocab.encode(&p.src)?;
        let h = translate_at(params, vocab, &src, tag_of(vocab, p)?, decode)?;
        hyps.push(vocab.decode_tokens(h.content(), true)?.join(" "));
    }
    score(hyps, test, smooth)
}

/// Mask-Predict translation of every test pair. Gold length mode uses the
/// reference piece count.
pub fn evaluate_nat(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    test: &[SentencePair],
    decode: &DecodeConfig,
    smooth: bool,
) -> Result<Translations, EvalError> {
    let mut hyps = Vec::with_capacity(test.len());
    for p in test {
        let src = vocab.encode(&p.src)?;
        let reference = vocab.encode(&p.tgt)?.len() - 1;
        let (h, _) = translate_nat(params, vocab, &src, tag_of(vocab, p)?, decode, Some(reference))?;
        hyps.push(vocab.decode_tokens(h.content(), true)?.join(" "));
    }
    score(hyps, test, smooth)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub iterations: usize,
    pub bleu: f64,
}

/// NAT test BLEU for each iteration count in `ts`.
pub fn iteration_curve(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    test: &[SentencePair],
    ts: &[usize],
    decode: &DecodeConfig,
    smooth: bool,
) -> Result<Vec<CurvePoint>, EvalError> {
    ts.iter()
        .map(|&t| {
            let cfg = DecodeConfig { nat_iterations: t, ..decode.clone() };
            let r = evaluate_nat(params, vocab, test, &cfg, smooth)?;
            Ok(CurvePoint { iterations: t, bleu: r.report.bleu })
        })
        .collect()
}

pub const CURVE_HEADER: &str = "iterations,bleu";

pub fn curve_csv(points: &[CurvePoint]) -> String {
    let mut out = format!("{CURVE_HEADER}\n");
    for p in points {
        let _ = writeln!(out, "{},{:.4}", p.iterations, p.bleu);
    }
    out
}

/// One configuration of the ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    /// `false` fine-tunes from a fresh model.
    pub pretrain: bool,
    pub code_switching: bool,
    pub dynamic: bool,
    pub regime: Regime,
}

impl AblationCell {
    fn new(name: &str, pretrain: bool, code_switching: bool, dynamic: bool, regime: Regime) -> Self {
        AblationCell { name: name.into(), pretrain, code_switching, dynamic, regime }
    }

    pub fn full() -> Self {
        Self::new("full", true, true, true, Regime::Both)
    }

    pub fn without_code_switching() -> Self {
        Self::new("no-aligned-cs", true, false, true, Regime::Both)
    }

    pub fn without_dynamic() -> Self {
        Self::new("no-dynamic", true, true, false, Regime::Both)
    }

    pub fn bilingual_only() -> Self {
        Self::new("bilingual-only", true, true, true, Regime::Bilingual)
    }

    pub fn scratch() -> Self {
        Self::new("scratch", false, false, false, Regime::Both)
    }

    pub fn policy(&self, base: &MaskingPolicy) -> MaskingPolicy {
        MaskingPolicy { code_switching: self.code_switching, dynamic: self.dynamic, ..base.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub cell: String,
    pub seed: u64,
    pub bleu: f64,
    /// Mean drawn target and source masking ratios over the first epoch's
    /// examples; zero for cells without pre-training.
    pub tgt_ratio: f64,
    pub src_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub const ABLATION_HEADER: &str = "cell,seed,bleu,tgt_ratio,src_ratio";

impl AblationTable {
    /// Cell names in first-seen order.
    pub fn cells(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.cell.as_str()) {
                out.push(&r.cell);
            }
        }
        out
    }

    pub fn mean_bleu(&self, cell: &str) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.cell == cell).map(|r| r.bleu).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn bleu(&self, cell: &str, seed: u64) -> Option<f64> {
        self.rows.iter().find(|r| r.cell == cell && r.seed == seed).map(|r| r.bleu)
    }

    /// Per-seed rows followed by one `mean` row per cell.
    pub fn csv(&self) -> String {
        let mut out = format!("{ABLATION_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{:.4},{:.4},{:.4}", r.cell, r.seed, r.bleu, r.tgt_ratio, r.src_ratio);
        }
        for cell in self.cells() {
            let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.cell == cell).collect();
            let n = rows.len() as f64;
            let mean = |f: fn(&AblationRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
            let _ = writeln!(
                out,
                "{cell},mean,{:.4},{:.4},{:.4}",
                mean(|r| r.bleu),
                mean(|r| r.tgt_ratio),
                mean(|r| r.src_ratio)
            );
        }
        out
    }
}

/// Corpora, vocabulary and dictionary for pre-training plus the
/// fine-tuning and test pairs.
pub struct Workload<'a> {
    pub corpora: &'a [LoadedCorpus],
    pub vocab: &'a Vocabulary,
    pub lexicon: &'a Lexicon,
    pub finetune: &'a [SentencePair],
    pub test: &'a [SentencePair],
}

/// Result of one grid cell for one seed.
pub struct CellRun {
    pub row: AblationRow,
    pub pretrained: Option<ModelParams<f32>>,
    pub finetuned: ModelParams<f32>,
}

/// Mean drawn masking ratios over the first epoch; errors if a fixed-ratio
/// policy drew anything else.
fn check_ratios(source: &PretrainSource<'_>, policy: &MaskingPolicy) -> Result<(f64, f64), EvalError> {
    let (mut up, mut mu, mut n) = (0.0, 0.0, 0usize);
    let batches = source.len().min(64) as u64;
    for k in 0..batches {
        for ex in source.batch(k)? {
            if !policy.dynamic && (ex.upsilon != policy.fixed_ratio || ex.mu != policy.fixed_ratio) {
                return Err(EvalError::Config(format!("fixed-ratio policy drew υ={} μ={}", ex.upsilon, ex.mu)));
            }
            up += ex.upsilon;
            mu += ex.mu;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    Ok((up / n, mu / n))
}

/// Pre-trains (if the cell asks for it), fine-tunes AT, and scores.
pub fn run_cell(
    cfg: &ExperimentConfig,
    work: &Workload<'_>,
    cell: &AblationCell,
    seed: u64,
    mut on_row: impl FnMut(Task, &MetricRow),
) -> Result<CellRun, EvalError> {
    let (pretrained, tgt_ratio, src_ratio) = if cell.pretrain {
        let policy = cell.policy(&cfg.masking);
        let probe = PretrainSource::new(
            work.corpora,
            work.vocab,
            work.lexicon,
            policy.clone(),
            &cfg.balancing,
            cell.regime,
            cfg.pretrain.batch_tokens,
            seed,
        )?;
        let (t, s) = check_ratios(&probe, &policy)?;
        drop(probe);
        let p = pretrain(cfg, &policy, cell.regime, work.corpora, work.vocab, work.lexicon, seed, |r| {
            on_row(Task::Pretrain, r)
        })?;
        (Some(p), t, s)
    } else {
        (None, 0.0, 0.0)
    };
    let finetuned = finetune(cfg, Task::FinetuneAt, pretrained.as_ref(), work.finetune, work.vocab, seed, |r| {
        on_row(Task::FinetuneAt, r)
    })?;
    let bleu = evaluate_at(&finetuned, work.vocab, work.test, &cfg.decode, cfg.smooth_bleu)?.report.bleu;
    Ok(CellRun {
        row: AblationRow { cell: cell.name.clone(), seed, bleu, tgt_ratio, src_ratio },
        pretrained,
        finetuned,
    })
}

/// Every cell for every seed: pre-train → fine-tune AT → test BLEU.
pub fn ablation_run(
    cfg: &ExperimentConfig,
    work: &Workload<'_>,
    cells: &[AblationCell],
    seeds: &[u64],
    mut on_progress: impl FnMut(&AblationRow),
) -> Result<AblationTable, EvalError> {
    let mut table = AblationTable::default();
    for &seed in seeds {
        for cell in cells {
            let run = run_cell(cfg, work, cell, seed, |_, _| {})?;
            on_progress(&run.row);
            table.rows.push(run.row);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_bookkeeping() {
        let mut t = AblationTable::default();
        for seed in [1, 2] {
            for (i, cell) in ["full", "no-aligned-cs", "no-dynamic"].iter().enumerate() {
                t.rows.push(AblationRow {
                    cell: cell.to_string(),
                    seed,
                    bleu: 10.0 * i as f64 + seed as f64,
                    tgt_ratio: 0.35,
                    src_ratio: 0.15,
                });
            }
        }
        let csv = t.csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], ABLATION_HEADER);
        assert_eq!(lines.len(), 1 + 6 + 3);
        assert_eq!(lines[7], "full,mean,1.5000,0.3500,0.1500");
        assert_eq!(t.mean_bleu("no-dynamic"), Some(21.5));
        assert_eq!(t.bleu("no-aligned-cs", 2), Some(12.0));
        assert_eq!(t.cells(), vec!["full", "no-aligned-cs", "no-dynamic"]);
    }

    #[test]
    fn curve_format() {
        let pts = [CurvePoint { iterations: 1, bleu: 3.0 }, CurvePoint { iterations: 4, bleu: 5.25 }];
        assert_eq!(curve_csv(&pts), "iterations,bleu\n1,3.0000\n4,5.2500\n");
    }
}
