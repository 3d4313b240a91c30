//! Beam search for the causal decoder and Mask-Predict for the
//! bidirectional one.
//!
//! Both algorithms talk to the network through small scorer traits, so they
//! can be checked against hand-built toy models.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{length_from_class, Encoded, Forward, Head, ModelError, ModelParams, Padded};
use crate::tensor::Element;
use crate::vocab::{TokenId, Vocabulary, EOS_ID, MASK_ID};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error("target length must be at least 1")]
    ZeroLength,
    #[error("gold length mode needs a reference")]
    NoReference,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthMode {
    /// Reference length; for measurement only.
    Gold,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Final scores are `score / len^α`.
    pub length_penalty: f64,
    /// Maximum output length (eos included) is `ratio · |src| + extra`.
    pub max_len_ratio: f64,
    pub max_len_extra: usize,
    pub nat_iterations: usize,
    pub nat_length_candidates: usize,
    pub length_mode: LengthMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            length_penalty: 1.0,
            max_len_ratio: 1.5,
            max_len_extra: 10,
            nat_iterations: 10,
            nat_length_candidates: 1,
            length_mode: LengthMode::Predicted,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.beam_size == 0 || self.nat_iterations == 0 || self.nat_length_candidates == 0 {
            return Err(DecodeError::Config(
                "beam_size, nat_iterations and nat_length_candidates must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn max_len(&self, src_len: usize) -> usize {
        ((self.max_len_ratio * src_len as f64).ceil() as usize + self.max_len_extra).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Output ids without the language tag; AT hypotheses end with eos.
    pub tokens: Vec<TokenId>,
    /// Log-probability of each token when it was chosen.
    pub log_probs: Vec<f64>,
    /// Sum of `log_probs`.
    pub score: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn normalized(&self, alpha: f64) -> f64 {
        self.score / (self.tokens.len().max(1) as f64).powf(alpha)
    }

    pub fn mean_log_prob(&self) -> f64 {
        self.score / self.tokens.len().max(1) as f64
    }

    /// Tokens without a trailing eos.
    pub fn content(&self) -> &[TokenId] {
        match self.tokens.last() {
            Some(&EOS_ID) => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

/// Next-token log-probabilities for a set of prefixes. Disallowed tokens
/// must be `-inf`.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    fn next_log_probs(&mut self, prefixes: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>, DecodeError>;
}

/// Beam search. Candidates are visited best-first; eos candidates are
/// finalised until `beam_size` live hypotheses are admitted. The search
/// stops once `beam_size` hypotheses have finished, nothing is alive, or
/// `max_len` tokens (eos included) are reached, where eos is forced.
pub fn beam_search<S: StepScorer + ?Sized>(
    scorer: &mut S,
    beam_size: usize,
    max_len: usize,
    alpha: f64,
) -> Result<Hypothesis, DecodeError> {
    if beam_size == 0 || max_len == 0 {
        return Err(DecodeError::Config("beam_size and max_len must be positive".into()));
    }
    let mut alive = vec![Hypothesis { tokens: Vec::new(), log_probs: Vec::new(), score: 0.0, finished: false }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for t in 0..max_len {
        let prefixes: Vec<Vec<TokenId>> = alive.iter().map(|h| h.tokens.clone()).collect();
        let lps = scorer.next_log_probs(&prefixes)?;
        let last = t + 1 == max_len;
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::new();
        for (hi, row) in lps.iter().enumerate() {
            for (v, &lp) in row.iter().enumerate() {
                if lp == f64::NEG_INFINITY || (last && v as TokenId != EOS_ID) {
                    continue;
                }
                cands.push((alive[hi].score + lp, hi, v as TokenId));
            }
        }
        // best first; ties by hypothesis then token for determinism
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam_size);
        for (score, hi, v) in cands {
            let lp = lps[hi][v as usize];
            let mut h = alive[hi].clone();
            h.tokens.push(v);
            h.log_probs.push(lp);
            h.score = score;
            if v == EOS_ID {
                h.finished = true;
                finished.push(h);
            } else {
                next.push(h);
                if next.len() == beam_size {
                    break;
                }
            }
        }
        alive = next;
        if alive.is_empty() || finished.len() >= beam_size {
            break;
        }
    }
    finished
        .into_iter()
        .reduce(|best, h| if h.normalized(alpha) > best.normalized(alpha) { h } else { best })
        .ok_or_else(|| DecodeError::Config("no hypothesis finished".into()))
}

/// Argmax decoding, one token at a time.
pub fn greedy<S: StepScorer + ?Sized>(scorer: &mut S, max_len: usize) -> Result<Hypothesis, DecodeError> {
    let mut h = Hypothesis { tokens: Vec::new(), log_probs: Vec::new(), score: 0.0, finished: false };
    for t in 0..max_len {
        let row = scorer.next_log_probs(std::slice::from_ref(&h.tokens))?.remove(0);
        let (v, lp) = if t + 1 == max_len {
            (EOS_ID, row[EOS_ID as usize])
        } else {
            let mut best = (0, f64::NEG_INFINITY);
            for (v, &lp) in row.iter().enumerate() {
                if lp > best.1 {
                    best = (v as TokenId, lp);
                }
            }
            best
        };
        h.tokens.push(v);
        h.log_probs.push(lp);
        h.score += lp;
        if v == EOS_ID {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// For a fully specified target (masks included), the best token and its
/// probability at every position.
pub trait MaskScorer {
    fn predict(&mut self, tokens: &[TokenId]) -> Result<Vec<(TokenId, f64)>, DecodeError>;
}

/// Number of positions re-masked after iteration `t` of `iterations`.
pub fn remask_count(len: usize, t: usize, iterations: usize) -> usize {
    len * (iterations - t) / iterations
}

/// Snapshot after one Mask-Predict iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationState {
    pub iteration: usize,
    /// Tokens after re-masking (`[mask]` where re-masked).
    pub tokens: Vec<TokenId>,
    pub confidences: Vec<f64>,
    pub masked: usize,
}

/// Mask-Predict on a target of length `len`: start fully masked, predict
/// every masked position, then re-mask the `⌊len·(T−t)/T⌋` least confident.
pub fn mask_predict<S: MaskScorer + ?Sized>(
    scorer: &mut S,
    len: usize,
    iterations: usize,
) -> Result<(Hypothesis, Vec<IterationState>), DecodeError> {
    if len == 0 {
        return Err(DecodeError::ZeroLength);
    }
    if iterations == 0 {
        return Err(DecodeError::Config("at least one iteration".into()));
    }
    let mut tokens = vec![MASK_ID; len];
    let mut conf = vec![0.0f64; len];
    let mut masked: Vec<usize> = (0..len).collect();
    let mut trace = Vec::with_capacity(iterations);
    for t in 1..=iterations {
        let pred = scorer.predict(&tokens)?;
        for &p in &masked {
            tokens[p] = pred[p].0;
            conf[p] = pred[p].1;
        }
        let n = remask_count(len, t, iterations);
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));
        masked = order[..n].to_vec();
        masked.sort_unstable();
        for &p in &masked {
            tokens[p] = MASK_ID;
        }
        trace.push(IterationState { iteration: t, tokens: tokens.clone(), confidences: conf.clone(), masked: n });
        if n == 0 {
            break;
        }
    }
    let log_probs: Vec<f64> = conf.iter().map(|c| c.ln()).collect();
    let score = log_probs.iter().sum();
    Ok((Hypothesis { tokens, log_probs, score, finished: true }, trace))
}

/// Which token ids a decoder may emit.
fn allowed_ids(vocab: &Vocabulary, allow_eos: bool) -> Vec<bool> {
    (0..vocab.len() as TokenId).map(|id| !vocab.is_special(id) || (allow_eos && id == EOS_ID)).collect()
}

fn masked_log_softmax(row: &[f64], allowed: &[bool]) -> Vec<f64> {
    let max = row.iter().zip(allowed).filter(|(_, a)| **a).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().zip(allowed).filter(|(_, a)| **a).map(|(v, _)| (v - max).exp()).sum();
    let lse = max + z.ln();
    row.iter().zip(allowed).map(|(v, a)| if *a { v - lse } else { f64::NEG_INFINITY }).collect()
}

/// The causal decoder as a [`StepScorer`] for one source sentence.
pub struct AtScorer<'p, T> {
    fwd: Forward<'p, T>,
    enc: Encoded,
    tgt_tag: TokenId,
    allowed: Vec<bool>,
    mark: usize,
}

impl<'p, T: Element> AtScorer<'p, T> {
    pub fn new(
        params: &'p ModelParams<T>,
        vocab: &Vocabulary,
        src: &[TokenId],
        tgt_tag: TokenId,
    ) -> Result<Self, DecodeError> {
        let mut fwd = Forward::new(params, false, false, 0);
        let enc = fwd.encode(&Padded::new(&[src]))?;
        let mark = fwd.mark();
        Ok(AtScorer { fwd, enc, tgt_tag, allowed: allowed_ids(vocab, true), mark })
    }
}

impl<T: Element> StepScorer for AtScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.allowed.len()
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>, DecodeError> {
        let inputs: Vec<Vec<TokenId>> =
            prefixes.iter().map(|p| std::iter::once(self.tgt_tag).chain(p.iter().copied()).collect()).collect();
        let tgt = Padded::new(&inputs);
        let enc = self.fwd.repeat_encoded(&self.enc, inputs.len())?;
        let hidden = self.fwd.decode(&tgt, &enc, true)?;
        let rows: Vec<usize> = inputs.iter().enumerate().map(|(b, s)| tgt.row(b, s.len() - 1)).collect();
        let logits = self.fwd.logits(hidden, &rows, Head::Cmlm)?;
        let v = self.allowed.len();
        let data: Vec<f64> = self.fwd.graph.value(logits).data().iter().map(|x| x.to_f64().unwrap()).collect();
        self.fwd.rewind(self.mark);
        Ok(data.chunks(v).map(|row| masked_log_softmax(row, &self.allowed)).collect())
    }
}

/// The bidirectional decoder as a [`MaskScorer`] for one source sentence.
pub struct NatScorer<'p, T> {
    fwd: Forward<'p, T>,
    enc: Encoded,
    src_len: usize,
    tgt_tag: TokenId,
    allowed: Vec<bool>,
    mark: usize,
}

impl<'p, T: Element> NatScorer<'p, T> {
    pub fn new(
        params: &'p ModelParams<T>,
        vocab: &Vocabulary,
        src: &[TokenId],
        tgt_tag: TokenId,
    ) -> Result<Self, DecodeError> {
        let mut fwd = Forward::new(params, false, false, 0);
        let enc = fwd.encode(&Padded::new(&[src]))?;
        let mark = fwd.mark();
        Ok(NatScorer {
            fwd,
            enc,
            src_len: src.len().saturating_sub(1),
            tgt_tag,
            allowed: allowed_ids(vocab, false),
            mark,
        })
    }

    /// The `k` most likely target lengths from the length head, best first.
    pub fn length_candidates(&mut self, k: usize) -> Result<Vec<usize>, DecodeError> {
        let logits = self.fwd.length_logits(&self.enc)?;
        let row: Vec<f64> = self.fwd.graph.value(logits).data().iter().map(|x| x.to_f64().unwrap()).collect();
        self.fwd.rewind(self.mark);
        let mut classes: Vec<usize> = (0..row.len()).collect();
        classes.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut out = Vec::with_capacity(k);
        for c in classes {
            let len = length_from_class(self.src_len, c);
            if !out.contains(&len) {
                out.push(len);
            }
            if out.len() == k {
                break;
            }
        }
        Ok(out)
    }
}

impl<T: Element> MaskScorer for NatScorer<'_, T> {
    fn predict(&mut self, tokens: &[TokenId]) -> Result<Vec<(TokenId, f64)>, DecodeError> {
        let input: Vec<TokenId> = std::iter::once(self.tgt_tag).chain(tokens.iter().copied()).collect();
        let tgt = Padded::new(&[&input]);
        let hidden = self.fwd.decode(&tgt, &self.enc, false)?;
        let rows: Vec<usize> = (1..input.len()).collect();
        let logits = self.fwd.logits(hidden, &rows, Head::Cmlm)?;
        let v = self.allowed.len();
        let data: Vec<f64> = self.fwd.graph.value(logits).data().iter().map(|x| x.to_f64().unwrap()).collect();
        self.fwd.rewind(self.mark);
        Ok(data
            .chunks(v)
            .map(|row| {
                let lp = masked_log_softmax(row, &self.allowed);
                let mut best = (0 as TokenId, f64::NEG_INFINITY);
                for (id, &l) in lp.iter().enumerate() {
                    if l > best.1 {
                        best = (id as TokenId, l);
                    }
                }
                (best.0, best.1.exp())
            })
            .collect())
    }
}

/// Candidate target lengths: the reference length in gold mode, otherwise
/// the length head's top candidates.
pub fn predict_length<T: Element>(
    scorer: &mut NatScorer<'_, T>,
    cfg: &DecodeConfig,
    reference_len: Option<usize>,
) -> Result<Vec<usize>, DecodeError> {
    match cfg.length_mode {
        LengthMode::Gold => reference_len.map(|l| vec![l.max(1)]).ok_or(DecodeError::NoReference),
        LengthMode::Predicted => scorer.length_candidates(cfg.nat_length_candidates),
    }
}

/// Index of the hypothesis with the highest mean token log-probability;
/// the earliest wins ties.
pub fn rerank(hyps: &[Hypothesis]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, h) in hyps.iter().enumerate() {
        if best.map_or(true, |b| h.mean_log_prob() > hyps[b].mean_log_prob()) {
            best = Some(i);
        }
    }
    best
}

/// Beam-search translation of one tagged source sentence.
pub fn translate_at<T: Element>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    src: &[TokenId],
    tgt_tag: TokenId,
    cfg: &DecodeConfig,
) -> Result<Hypothesis, DecodeError> {
    cfg.validate()?;
    let max_len = cfg.max_len(src.len() - 1).min(params.config().max_positions - 1);
    let mut scorer = AtScorer::new(params, vocab, src, tgt_tag)?;
    beam_search(&mut scorer, cfg.beam_size, max_len, cfg.length_penalty)
}

/// Mask-Predict translation of one tagged source sentence. Returns the
/// chosen hypothesis and its per-iteration trace.
pub fn translate_nat<T: Element>(
    params: &ModelParams<T>,
    vocab: &Vocabulary,
    src: &[TokenId],
    tgt_tag: TokenId,
    cfg: &DecodeConfig,
    reference_len: Option<usize>,
) -> Result<(Hypothesis, Vec<IterationState>), DecodeError> {
    cfg.validate()?;
    let mut scorer = NatScorer::new(params, vocab, src, tgt_tag)?;
    let cap = params.config().max_positions - 1;
    let lengths = predict_length(&mut scorer, cfg, reference_len)?;
    let mut results = Vec::with_capacity(lengths.len());
    for len in lengths {
        results.push(mask_predict(&mut scorer, len.min(cap), cfg.nat_iterations)?);
    }
    let hyps: Vec<Hypothesis> = results.iter().map(|r| r.0.clone()).collect();
    let best = rerank(&hyps).expect("at least one length candidate");
    Ok(results.swap_remove(best))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed per-position distributions over {eos, a, b}.
    struct Table(Vec<[f64; 3]>);

    impl StepScorer for Table {
        fn vocab_size(&self) -> usize {
            3
        }

        fn next_log_probs(&mut self, prefixes: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>, DecodeError> {
            Ok(prefixes
                .iter()
                .map(|p| {
                    let row = self.0[p.len().min(self.0.len() - 1)];
                    let mut out = vec![f64::NEG_INFINITY; EOS_ID as usize + 3];
                    out[EOS_ID as usize] = row[0].ln();
                    out[EOS_ID as usize + 1] = row[1].ln();
                    out[EOS_ID as usize + 2] = row[2].ln();
                    out
                })
                .collect())
        }
    }

    #[test]
    fn beam_one_matches_greedy() {
        let mut s = Table(vec![[0.1, 0.6, 0.3], [0.2, 0.3, 0.5], [0.7, 0.2, 0.1]]);
        let g = greedy(&mut s, 5).unwrap();
        let b = beam_search(&mut s, 1, 5, 1.0).unwrap();
        assert_eq!(g.tokens, b.tokens);
        assert_eq!(g.tokens, vec![EOS_ID + 1, EOS_ID + 2, EOS_ID]);
    }

    #[test]
    fn last_step_forces_eos() {
        let mut s = Table(vec![[1e-6, 1.0 - 1e-6, 0.0]]);
        let h = beam_search(&mut s, 10, 4, 1.0).unwrap();
        assert_eq!(h.tokens.len(), 4);
        assert_eq!(*h.tokens.last().unwrap(), EOS_ID);
        assert!(h.tokens[..3].iter().all(|&t| t != EOS_ID));
    }

    #[test]
    fn schedule_counts() {
        let counts: Vec<usize> = (1..=10).map(|t| remask_count(10, t, 10)).collect();
        assert_eq!(counts, vec![9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
        assert_eq!(remask_count(7, 1, 1), 0);
    }

    struct Fixed(Vec<(TokenId, f64)>);

    impl MaskScorer for Fixed {
        fn predict(&mut self, tokens: &[TokenId]) -> Result<Vec<(TokenId, f64)>, DecodeError> {
            Ok(self.0[..tokens.len()].to_vec())
        }
    }

    #[test]
    fn mask_predict_basics() {
        let mut s = Fixed(vec![(10, 0.9), (11, 0.2), (12, 0.5), (13, 0.4)]);
        assert!(matches!(mask_predict(&mut s, 0, 3), Err(DecodeError::ZeroLength)));
        let (h, trace) = mask_predict(&mut s, 4, 1).unwrap();
        assert_eq!(h.tokens, vec![10, 11, 12, 13]);
        assert_eq!(trace.len(), 1);
        let (h, trace) = mask_predict(&mut s, 4, 2).unwrap();
        assert_eq!(trace[0].tokens, vec![10, MASK_ID, 12, MASK_ID]);
        assert_eq!(h.tokens, vec![10, 11, 12, 13]);
        assert!(!h.tokens.contains(&MASK_ID));
    }

    #[test]
    fn rerank_picks_best_mean() {
        let mk = |lps: &[f64]| Hypothesis {
            tokens: vec![9; lps.len()],
            log_probs: lps.to_vec(),
            score: lps.iter().sum(),
            finished: true,
        };
        let hyps = vec![mk(&[-1.0, -1.0]), mk(&[-0.5, -0.9, -0.7]), mk(&[-2.0])];
        assert_eq!(rerank(&hyps), Some(1));
        assert_eq!(rerank(&[]), None);
    }
}
