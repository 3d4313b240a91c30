use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    at_loss, clip_global_norm, draw_nat_masks, lr_schedule, nat_loss, pretrain_loss, Adam, Denominators, LossBreakdown,
    PairSource, PretrainSource, TrainConfig, TrainError,
};
use crate::model::{Forward, ModelConfig, ModelParams};
use crate::seed;
use crate::tensor::{io as tio, Array};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Pretrain,
    FinetuneAt,
    FinetuneNat,
}

/// Where batches come from.
pub enum Data<'s, 'a> {
    Pretrain(&'s PretrainSource<'a>),
    Pairs(&'s PairSource),
}

/// Everything needed to continue a run exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ModelParams<f32>,
    pub adam: Adam<f32>,
    /// Updates skipped because of non-finite gradients.
    pub skipped: u64,
}

impl TrainState {
    pub fn new(params: ModelParams<f32>, cfg: &TrainConfig) -> Self {
        let shapes: Vec<&[usize]> = params.arrays().iter().map(Array::shape).collect();
        let adam = Adam::new(&shapes, cfg.beta1, cfg.beta2, cfg.adam_eps);
        TrainState { step: 0, params, adam, skipped: 0 }
    }
}

/// One row of the metrics file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub cmlm: f64,
    pub mlm: f64,
    pub length: f64,
    pub tokens: usize,
}

pub const METRICS_HEADER: &str = "step,lr,loss,cmlm,mlm,length,tokens";

impl MetricRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{:e},{:.6},{:.6},{:.6},{:.6},{}",
            self.step, self.lr, self.loss, self.cmlm, self.mlm, self.length, self.tokens
        )
    }
}

/// Append-only metrics CSV.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self, TrainError> {
        let io = |source| TrainError::Io { path: path.to_path_buf(), source };
        let fresh = !path.exists() || fs::metadata(path).map_err(io)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{METRICS_HEADER}").map_err(io)?;
        }
        Ok(MetricsWriter { out, path: path.to_path_buf() })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<(), TrainError> {
        writeln!(self.out, "{}", row.csv())
            .and_then(|_| self.out.flush())
            .map_err(|source| TrainError::Io { path: self.path.clone(), source })
    }
}

const DROPOUT: u64 = 0x64_726f_70;
const NAT_MASK: u64 = 0x6e_6174;

pub struct Trainer<'s, 'a> {
    pub cfg: TrainConfig,
    pub task: Task,
    pub state: TrainState,
    data: Data<'s, 'a>,
}

impl<'s, 'a> Trainer<'s, 'a> {
    pub fn pretrain(cfg: TrainConfig, state: TrainState, data: &'s PretrainSource<'a>) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Trainer { cfg, task: Task::Pretrain, state, data: Data::Pretrain(data) })
    }

    pub fn finetune(cfg: TrainConfig, task: Task, state: TrainState, data: &'s PairSource) -> Result<Self, TrainError> {
        cfg.validate()?;
        assert!(task != Task::Pretrain, "pair data cannot drive pre-training");
        Ok(Trainer { cfg, task, state, data: Data::Pairs(data) })
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.cfg.total_steps
    }

    /// One optimiser update over `update_frequency` micro-batches.
    pub fn step(&mut self) -> Result<MetricRow, TrainError> {
        let step = self.state.step + 1;
        let uf = self.cfg.update_frequency as u64;
        let first = (step - 1) * uf;
        let seed = self.cfg.seed;

        enum Micro {
            Masked(Vec<crate::masking::MaskedExample>),
            Pairs(Vec<super::EncodedPair>, Vec<Vec<usize>>),
        }
        let mut micros = Vec::with_capacity(uf as usize);
        let mut den = (0usize, 0usize, 0usize);
        for u in 0..uf {
            match &self.data {
                Data::Pretrain(src) => {
                    let b = src.batch(first + u)?;
                    den.0 += b.iter().map(|e| e.tgt_targets().len()).sum::<usize>();
                    den.1 += b.iter().map(|e| e.src_dm.len()).sum::<usize>();
                    micros.push(Micro::Masked(b));
                }
                Data::Pairs(src) => {
                    let b = src.batch(first + u);
                    let masks = if self.task == Task::FinetuneNat {
                        draw_nat_masks(&b, &mut seed::rng(&[seed, NAT_MASK, step, u]))
                    } else {
                        Vec::new()
                    };
                    den.0 += match self.task {
                        Task::FinetuneNat => masks.iter().map(Vec::len).sum::<usize>(),
                        _ => b.iter().map(|p| p.tgt.len()).sum::<usize>(),
                    };
                    den.2 += b.len();
                    micros.push(Micro::Pairs(b, masks));
                }
            }
        }
        let denom = Denominators { cmlm: Some(den.0), mlm: Some(den.1), length: Some(den.2) };

        let mut grads: Option<Vec<Array<f32>>> = None;
        let mut parts = LossBreakdown::default();
        let mut tokens = 0;
        for (u, micro) in micros.iter().enumerate() {
            let mut fwd = Forward::new(&self.state.params, true, true, seed::derive(&[seed, DROPOUT, step, u as u64]));
            let (loss, p) = match micro {
                Micro::Masked(b) => {
                    tokens += b.iter().map(|e| e.src_ids.len() + e.tgt_ids.len()).sum::<usize>();
                    pretrain_loss(&mut fwd, b, self.cfg.lambda, self.cfg.label_smoothing, denom)?
                }
                Micro::Pairs(b, masks) => {
                    tokens += b.iter().map(|p| p.tokens()).sum::<usize>();
                    match self.task {
                        Task::FinetuneNat => {
                            nat_loss(&mut fwd, b, masks, self.cfg.label_smoothing, self.cfg.length_loss_weight, denom)?
                        }
                        _ => at_loss(&mut fwd, b, self.cfg.label_smoothing, denom)?,
                    }
                }
            };
            parts.merge(&p);
            if fwd.graph.requires_grad(loss) {
                fwd.graph.backward(loss)?;
            }
            let g = fwd.param_grads();
            match grads.as_mut() {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += *y;
                        }
                    }
                }
            }
        }
        let mut grads = grads.expect("update_frequency >= 1");
        if self.cfg.clip_norm > 0.0 {
            clip_global_norm(&mut grads, self.cfg.clip_norm);
        }
        let lr = lr_schedule(step, &self.cfg);
        if !self.state.adam.step(self.state.params.arrays_mut(), &grads, lr) {
            self.state.skipped += 1;
            log::warn!("step {step}: non-finite gradient, update skipped ({} so far)", self.state.skipped);
        }
        self.state.step = step;
        let loss = match self.task {
            Task::Pretrain => self.cfg.lambda * parts.cmlm() + (1.0 - self.cfg.lambda) * parts.mlm(),
            Task::FinetuneAt => parts.cmlm(),
            Task::FinetuneNat => parts.cmlm() + self.cfg.length_loss_weight * parts.length(),
        };
        Ok(MetricRow { step, lr, loss, cmlm: parts.cmlm(), mlm: parts.mlm(), length: parts.length(), tokens })
    }

    /// Runs until `total_steps`, calling `each` after every update.
    pub fn run(&mut self, mut each: impl FnMut(&Self, &MetricRow) -> Result<(), TrainError>) -> Result<(), TrainError> {
        while !self.done() {
            let row = self.step()?;
            if !row.loss.is_finite() {
                log::warn!("step {}: non-finite loss", row.step);
            }
            each(self, &row)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self, vocab_fingerprint: u64) -> Checkpoint {
        Checkpoint {
            task: self.task,
            model: self.state.params.config().clone(),
            train: self.cfg.clone(),
            step: self.state.step,
            skipped: self.state.skipped,
            adam_t: self.state.adam.t,
            vocab_fingerprint,
        }
    }
}

/// Checkpoint manifest. A checkpoint directory holds `manifest.json`,
/// `params.bin` (named parameter arrays) and `optimizer.bin` (Adam moments
/// named `m.<param>` and `v.<param>`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub task: Task,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub skipped: u64,
    pub adam_t: u64,
    pub vocab_fingerprint: u64,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path, state: &TrainState) -> Result<(), TrainError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TrainError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let manifest = dir.join("manifest.json");
        let json = serde_json::to_string_pretty(self).expect("checkpoint manifest serialises");
        fs::write(&manifest, json + "\n").map_err(io(&manifest))?;

        let params = dir.join("params.bin");
        let mut w = BufWriter::new(File::create(&params).map_err(io(&params))?);
        state.params.write(&mut w)?;
        w.flush().map_err(io(&params))?;

        let opt = dir.join("optimizer.bin");
        let names = state.params.names();
        let named: Vec<(String, Array<f32>)> = names
            .iter()
            .zip(&state.adam.m)
            .map(|(n, a)| (format!("m.{n}"), a.clone()))
            .chain(names.iter().zip(&state.adam.v).map(|(n, a)| (format!("v.{n}"), a.clone())))
            .collect();
        let mut w = BufWriter::new(File::create(&opt).map_err(io(&opt))?);
        tio::write_named(&mut w, &named)?;
        w.flush().map_err(io(&opt))?;
        Ok(())
    }

    pub fn load_manifest(dir: &Path) -> Result<Self, TrainError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|source| TrainError::Io { path: path.clone(), source })?;
        serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint { path, problem: e.to_string() })
    }

    pub fn load_params(dir: &Path) -> Result<(Self, ModelParams<f32>), TrainError> {
        let manifest = Self::load_manifest(dir)?;
        let path = dir.join("params.bin");
        let file = File::open(&path).map_err(|source| TrainError::Io { path: path.clone(), source })?;
        let params = ModelParams::read(manifest.model.clone(), &mut BufReader::new(file))?;
        Ok((manifest, params))
    }

    /// Full training state, for resuming.
    pub fn load_state(dir: &Path) -> Result<(Self, TrainState), TrainError> {
        let (manifest, params) = Self::load_params(dir)?;
        let path = dir.join("optimizer.bin");
        let file = File::open(&path).map_err(|source| TrainError::Io { path: path.clone(), source })?;
        let named = tio::read_named::<f32, _>(&mut BufReader::new(file))?;
        let mut state = TrainState::new(params, &manifest.train);
        let n = state.params.names().len();
        if named.len() != 2 * n {
            return Err(TrainError::Checkpoint {
                path,
                problem: format!("{} optimizer arrays, expected {}", named.len(), 2 * n),
            });
        }
        for (i, (name, arr)) in named.into_iter().enumerate() {
            let (slot, idx) = if i < n { (&mut state.adam.m, i) } else { (&mut state.adam.v, i - n) };
            if arr.shape() != slot[idx].shape() {
                return Err(TrainError::Checkpoint {
                    path: path.clone(),
                    problem: format!("optimizer array {name} has the wrong shape"),
                });
            }
            slot[idx] = arr;
        }
        state.step = manifest.step;
        state.skipped = manifest.skipped;
        state.adam.t = manifest.adam_t;
        Ok((manifest, state))
    }
}
