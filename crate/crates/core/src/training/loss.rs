use rand::seq::index;
use rand::Rng;

use super::{EncodedPair, TrainError};
use crate::masking::MaskedExample;
use crate::model::{length_class, Encoded, Forward, Head, Padded};
use crate::tensor::{Element, Var};
use crate::vocab::{TokenId, EOS_ID, MASK_ID};

/// Summed losses and their token counts. `total` combines the per-token
/// means with the same weights as the training objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Decoder side: CMLM during pre-training and NAT, next-token during AT.
    pub cmlm_sum: f64,
    pub cmlm_tokens: usize,
    pub mlm_sum: f64,
    pub mlm_tokens: usize,
    pub length_sum: f64,
    pub length_count: usize,
}

impl LossBreakdown {
    pub fn cmlm(&self) -> f64 {
        mean(self.cmlm_sum, self.cmlm_tokens)
    }

    pub fn mlm(&self) -> f64 {
        mean(self.mlm_sum, self.mlm_tokens)
    }

    pub fn length(&self) -> f64 {
        mean(self.length_sum, self.length_count)
    }

    pub fn merge(&mut self, other: &LossBreakdown) {
        self.cmlm_sum += other.cmlm_sum;
        self.cmlm_tokens += other.cmlm_tokens;
        self.mlm_sum += other.mlm_sum;
        self.mlm_tokens += other.mlm_tokens;
        self.length_sum += other.length_sum;
        self.length_count += other.length_count;
    }
}

fn mean(sum: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Normalisers for one optimiser update, which may span several
/// micro-batches. `None` fields default to the current batch's own counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Denominators {
    pub cmlm: Option<usize>,
    pub mlm: Option<usize>,
    pub length: Option<usize>,
}

fn value<T: Element>(fwd: &Forward<'_, T>, v: Var) -> f64 {
    fwd.graph.value(v).item().to_f64().unwrap()
}

/// Adds `weight / denom · term` to `acc`.
fn accumulate<T: Element>(
    fwd: &mut Forward<'_, T>,
    acc: Option<Var>,
    term: Var,
    weight: f64,
    denom: usize,
) -> Result<Var, TrainError> {
    let scaled = fwd.graph.scale(term, T::from_f64_lossy(weight / denom.max(1) as f64));
    Ok(match acc {
        Some(a) => fwd.graph.add(a, scaled)?,
        None => scaled,
    })
}

fn finish<T: Element>(fwd: &mut Forward<'_, T>, acc: Option<Var>) -> Var {
    acc.unwrap_or_else(|| fwd.graph.constant(crate::tensor::Array::scalar(T::zero())))
}

/// Joint objective `λ·CMLM + (1−λ)·MLM`, each term averaged over its own
/// masked tokens. A term with weight 0 is not computed at all.
pub fn pretrain_loss<T: Element>(
    fwd: &mut Forward<'_, T>,
    batch: &[MaskedExample],
    lambda: f64,
    smoothing: f64,
    denom: Denominators,
) -> Result<(Var, LossBreakdown), TrainError> {
    if let Some(i) = batch.iter().position(MaskedExample::needs_resample) {
        return Err(TrainError::EmptyTarget(i));
    }
    let src = Padded::new(&batch.iter().map(|e| e.src_ids.as_slice()).collect::<Vec<_>>());
    let tgt = Padded::new(&batch.iter().map(|e| e.tgt_ids.as_slice()).collect::<Vec<_>>());
    let enc = fwd.encode(&src)?;
    let eps = T::from_f64_lossy(smoothing);
    let mut parts = LossBreakdown::default();
    let mut acc = None;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (b, ex) in batch.iter().enumerate() {
        for (pos, label) in ex.tgt_targets() {
            rows.push(tgt.row(b, pos));
            labels.push(label as usize);
        }
    }
    parts.cmlm_tokens = rows.len();
    if lambda > 0.0 {
        let hidden = fwd.decode(&tgt, &enc, false)?;
        let logits = fwd.logits(hidden, &rows, Head::Cmlm)?;
        let ce = fwd.graph.cross_entropy(logits, &labels, eps)?;
        parts.cmlm_sum = value(fwd, ce);
        acc = Some(accumulate(fwd, acc, ce, lambda, denom.cmlm.unwrap_or(rows.len()))?);
    }

    rows.clear();
    labels.clear();
    for (b, ex) in batch.iter().enumerate() {
        for (pos, label) in ex.src_targets() {
            rows.push(src.row(b, pos));
            labels.push(label as usize);
        }
    }
    parts.mlm_tokens = rows.len();
    if lambda < 1.0 && !rows.is_empty() {
        let logits = fwd.logits(enc.hidden, &rows, Head::Mlm)?;
        let ce = fwd.graph.cross_entropy(logits, &labels, eps)?;
        parts.mlm_sum = value(fwd, ce);
        acc = Some(accumulate(fwd, acc, ce, 1.0 - lambda, denom.mlm.unwrap_or(rows.len()))?);
    }
    parts.total = lambda * parts.cmlm() + (1.0 - lambda) * parts.mlm();
    Ok((finish(fwd, acc), parts))
}

/// Teacher-forced next-token loss through the causal decoder. The target's
/// language tag is the first decoder input; the last position predicts eos.
pub fn at_loss<T: Element>(
    fwd: &mut Forward<'_, T>,
    batch: &[EncodedPair],
    smoothing: f64,
    denom: Denominators,
) -> Result<(Var, LossBreakdown), TrainError> {
    let src = Padded::new(&batch.iter().map(|p| p.src.as_slice()).collect::<Vec<_>>());
    let tgt = Padded::new(&batch.iter().map(|p| p.tgt.as_slice()).collect::<Vec<_>>());
    let enc = fwd.encode(&src)?;
    let hidden = fwd.decode(&tgt, &enc, true)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (b, p) in batch.iter().enumerate() {
        for t in 0..p.tgt.len() {
            rows.push(tgt.row(b, t));
            labels.push(p.tgt.get(t + 1).copied().unwrap_or(EOS_ID) as usize);
        }
    }
    let logits = fwd.logits(hidden, &rows, Head::Cmlm)?;
    let ce = fwd.graph.cross_entropy(logits, &labels, T::from_f64_lossy(smoothing))?;
    let mut parts = LossBreakdown { cmlm_sum: value(fwd, ce), cmlm_tokens: rows.len(), ..LossBreakdown::default() };
    parts.total = parts.cmlm();
    let loss = accumulate(fwd, None, ce, 1.0, denom.cmlm.unwrap_or(rows.len()))?;
    Ok((loss, parts))
}

/// Per pair, `k ~ U{1..|Y|}` target positions (excluding the tag) to mask.
pub fn draw_nat_masks<R: Rng + ?Sized>(batch: &[EncodedPair], rng: &mut R) -> Vec<Vec<usize>> {
    batch
        .iter()
        .map(|p| {
            let n = p.tgt.len() - 1;
            assert!(n > 0, "empty target");
            let k = rng.gen_range(1..=n);
            let mut pos: Vec<usize> = index::sample(rng, n, k).into_iter().map(|i| i + 1).collect();
            pos.sort_unstable();
            pos
        })
        .collect()
}

fn length_term<T: Element>(
    fwd: &mut Forward<'_, T>,
    enc: &Encoded,
    batch: &[EncodedPair],
    smoothing: f64,
) -> Result<Var, TrainError> {
    let logits = fwd.length_logits(enc)?;
    let labels: Vec<usize> = batch.iter().map(|p| length_class(p.src.len() - 1, p.tgt.len() - 1)).collect();
    Ok(fwd.graph.cross_entropy(logits, &labels, T::from_f64_lossy(smoothing))?)
}

/// Conditional masked loss at the given positions plus, when
/// `length_weight > 0`, the length-offset classifier loss.
pub fn nat_loss<T: Element>(
    fwd: &mut Forward<'_, T>,
    batch: &[EncodedPair],
    masks: &[Vec<usize>],
    smoothing: f64,
    length_weight: f64,
    denom: Denominators,
) -> Result<(Var, LossBreakdown), TrainError> {
    let src = Padded::new(&batch.iter().map(|p| p.src.as_slice()).collect::<Vec<_>>());
    let inputs: Vec<Vec<TokenId>> = batch
        .iter()
        .zip(masks)
        .map(|(p, m)| {
            let mut t = p.tgt.clone();
            for &i in m {
                t[i] = MASK_ID;
            }
            t
        })
        .collect();
    let tgt = Padded::new(&inputs);
    let enc = fwd.encode(&src)?;
    let hidden = fwd.decode(&tgt, &enc, false)?;
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (b, (p, m)) in batch.iter().zip(masks).enumerate() {
        for &i in m {
            rows.push(tgt.row(b, i));
            labels.push(p.tgt[i] as usize);
        }
    }
    let logits = fwd.logits(hidden, &rows, Head::Cmlm)?;
    let ce = fwd.graph.cross_entropy(logits, &labels, T::from_f64_lossy(smoothing))?;
    let mut parts = LossBreakdown { cmlm_sum: value(fwd, ce), cmlm_tokens: rows.len(), ..LossBreakdown::default() };
    let mut acc = Some(accumulate(fwd, None, ce, 1.0, denom.cmlm.unwrap_or(rows.len()))?);
    if length_weight > 0.0 && fwd.config().length_head {
        let lce = length_term(fwd, &enc, batch, smoothing)?;
        parts.length_sum = value(fwd, lce);
        parts.length_count = batch.len();
        acc = Some(accumulate(fwd, acc, lce, length_weight, denom.length.unwrap_or(batch.len()))?);
    }
    parts.total = parts.cmlm() + length_weight * parts.length();
    Ok((finish(fwd, acc), parts))
}

/// Pre-training losses on fixed examples with dropout off, in batches of
/// `batch_size`. Both terms are always computed; `total` uses `lambda`.
pub fn evaluate_pretrain<T: Element>(
    params: &crate::model::ModelParams<T>,
    examples: &[MaskedExample],
    lambda: f64,
    batch_size: usize,
) -> Result<LossBreakdown, TrainError> {
    let mut total = LossBreakdown::default();
    for chunk in examples.chunks(batch_size.max(1)) {
        let mut fwd = Forward::new(params, false, false, 0);
        let (_, parts) = pretrain_loss(&mut fwd, chunk, 0.5, 0.0, Denominators::default())?;
        total.merge(&parts);
    }
    total.total = lambda * total.cmlm() + (1.0 - lambda) * total.mlm();
    Ok(total)
}
