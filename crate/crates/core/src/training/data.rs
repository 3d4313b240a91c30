//! Deterministic batch sources. Batch `k` is a pure function of the seed and
//! `k`: each epoch's item order comes from a seeded permutation and is cut
//! into batches by a token budget.

use std::str::FromStr;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::corpus::{CorpusKind, LoadedCorpus, Sentence, SentencePair};
use crate::lexicon::Lexicon;
use crate::masking::{make_example, MaskedExample, MaskingPolicy};
use crate::seed;
use crate::vocab::{BalancingPolicy, PieceTable, TokenId, Vocabulary};

/// Which pre-training streams are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Both,
    Bilingual,
    Monolingual,
}

impl FromStr for Regime {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "both" => Ok(Regime::Both),
            "bilingual" => Ok(Regime::Bilingual),
            "monolingual" => Ok(Regime::Monolingual),
            other => Err(format!("unknown data regime {other:?} (both, bilingual, monolingual)")),
        }
    }
}

/// A source/target pair as ids, each starting with its language tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedPair {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

impl EncodedPair {
    pub fn encode(vocab: &Vocabulary, pair: &SentencePair) -> Result<Self, TrainError> {
        Ok(EncodedPair { src: vocab.encode(&pair.src)?, tgt: vocab.encode(&pair.tgt)? })
    }

    pub fn tokens(&self) -> usize {
        self.src.len() + self.tgt.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Item {
    stream: usize,
    line: usize,
}

/// Lazily computed epochs, each a list of batches.
#[derive(Debug, Default)]
struct EpochCache {
    epochs: Vec<Vec<Vec<Item>>>,
}

fn chunk(items: Vec<Item>, cost: impl Fn(Item) -> usize, budget: usize) -> Vec<Vec<Item>> {
    let mut out = Vec::new();
    let mut cur: Vec<Item> = Vec::new();
    let mut used = 0;
    for it in items {
        let c = cost(it);
        if !cur.is_empty() && used + c > budget {
            out.push(std::mem::take(&mut cur));
            used = 0;
        }
        used += c;
        cur.push(it);
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

impl EpochCache {
    /// Batch `index` counted across epochs, plus its epoch number.
    fn locate(&mut self, index: u64, mut make: impl FnMut(u64) -> Vec<Vec<Item>>) -> (u64, Vec<Item>) {
        let mut rest = index;
        let mut epoch = 0u64;
        loop {
            if epoch as usize == self.epochs.len() {
                let batches = make(epoch);
                assert!(!batches.is_empty(), "epoch without batches");
                self.epochs.push(batches);
            }
            let n = self.epochs[epoch as usize].len() as u64;
            if rest < n {
                return (epoch, self.epochs[epoch as usize][rest as usize].clone());
            }
            rest -= n;
            epoch += 1;
        }
    }
}

struct Stream {
    corpus: usize,
    pairs: Vec<SentencePair>,
    tokens: Vec<usize>,
}

fn piece_count(pieces: &PieceTable<'_>, s: &Sentence) -> usize {
    1 + s.tokens.iter().map(|w| pieces.pieces(w).len()).sum::<usize>()
}

const STREAM_MIX: u64 = 0x6d69_78;
const EPOCH_ORDER: u64 = 0x6f72_64;

/// Masked pre-training examples drawn from bilingual (both directions) and
/// pseudo-bilingual streams, balanced by a sampling temperature.
pub struct PretrainSource<'a> {
    pieces: PieceTable<'a>,
    lexicon: &'a Lexicon,
    policy: MaskingPolicy,
    streams: Vec<Stream>,
    weights: Vec<f64>,
    batch_tokens: usize,
    seed: u64,
    cache: Mutex<EpochCache>,
}

impl<'a> PretrainSource<'a> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        corpora: &[LoadedCorpus],
        vocab: &'a Vocabulary,
        lexicon: &'a Lexicon,
        policy: MaskingPolicy,
        balancing: &BalancingPolicy,
        regime: Regime,
        batch_tokens: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        policy.validate()?;
        let words = corpora
            .iter()
            .flat_map(|c| c.pairs.iter())
            .flat_map(|p| p.src.tokens.iter().chain(&p.tgt.tokens))
            .map(String::as_str)
            .chain(lexicon.words());
        let pieces = PieceTable::new(vocab, words);
        let mut streams = Vec::new();
        for (ci, c) in corpora.iter().enumerate() {
            let use_it = match (c.entry.kind, regime) {
                (_, Regime::Both) => true,
                (CorpusKind::Bilingual, Regime::Bilingual) => true,
                (CorpusKind::Monolingual, Regime::Monolingual) => true,
                _ => false,
            };
            if !use_it || c.pairs.is_empty() {
                continue;
            }
            let mut dirs = vec![c.pairs.clone()];
            if c.entry.kind == CorpusKind::Bilingual {
                let reversed = c.pairs.iter().map(|p| SentencePair::bilingual(p.tgt.clone(), p.src.clone())).collect();
                dirs.push(reversed);
            }
            for (d, pairs) in dirs.into_iter().enumerate() {
                let tokens =
                    pairs.iter().map(|p| piece_count(&pieces, &p.src) + piece_count(&pieces, &p.tgt)).collect();
                streams.push(Stream { corpus: 2 * ci + d, pairs, tokens });
            }
        }
        if streams.is_empty() {
            return Err(TrainError::NoData(format!("no corpus matches regime {regime:?}")));
        }
        let counts: Vec<usize> = streams.iter().map(|s| s.pairs.len()).collect();
        let weights = balancing.weights(&counts);
        Ok(PretrainSource {
            pieces,
            lexicon,
            policy,
            streams,
            weights,
            batch_tokens,
            seed,
            cache: Mutex::new(EpochCache::default()),
        })
    }

    pub fn stream_count(&self) -> usize {
        self.streams.len()
    }

    /// Lines in stream `i`.
    pub fn stream_len(&self, i: usize) -> usize {
        self.streams[i].pairs.len()
    }

    /// Number of stream examples; one epoch draws about this many items.
    pub fn len(&self) -> usize {
        self.streams.iter().map(|s| s.pairs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn epoch(&self, epoch: u64) -> Vec<Vec<Item>> {
        let total = self.len() as f64;
        let mut items = Vec::new();
        for (si, (s, w)) in self.streams.iter().zip(&self.weights).enumerate() {
            let want = ((w * total).round() as usize).max(1);
            let mut rng = seed::rng(&[self.seed, STREAM_MIX, epoch, si as u64]);
            let mut order: Vec<usize> = (0..s.pairs.len()).collect();
            order.shuffle(&mut rng);
            items.extend(order.iter().cycle().take(want).map(|&line| Item { stream: si, line }));
        }
        items.shuffle(&mut seed::rng(&[self.seed, EPOCH_ORDER, epoch]));
        chunk(items, |it| self.streams[it.stream].tokens[it.line], self.batch_tokens)
    }

    /// Masks one stream line for a given epoch.
    pub fn example(&self, stream: usize, line: usize, epoch: u64) -> Result<MaskedExample, TrainError> {
        let s = &self.streams[stream];
        let mut attempt = 0u64;
        loop {
            let base = seed::example_seed(self.seed, s.corpus as u64, line as u64, epoch);
            let mut rng = seed::rng(&[base, attempt]);
            let ex = make_example(&s.pairs[line], self.lexicon, &self.pieces, &self.policy, &mut rng)?;
            if !ex.needs_resample() || attempt >= 8 {
                return Ok(ex);
            }
            attempt += 1;
        }
    }

    /// The `index`-th batch of the run.
    pub fn batch(&self, index: u64) -> Result<Vec<MaskedExample>, TrainError> {
        let (epoch, items) = self.cache.lock().expect("cache lock").locate(index, |e| self.epoch(e));
        items
            .into_iter()
            .map(|it| self.example(it.stream, it.line, epoch))
            .filter(|r| !matches!(r, Ok(ex) if ex.needs_resample()))
            .collect()
    }
}

/// Encoded pairs for fine-tuning, reshuffled every epoch.
pub struct PairSource {
    pairs: Vec<EncodedPair>,
    batch_tokens: usize,
    seed: u64,
    cache: Mutex<EpochCache>,
}

impl PairSource {
    pub fn new(pairs: Vec<EncodedPair>, batch_tokens: usize, seed: u64) -> Result<Self, TrainError> {
        if pairs.is_empty() {
            return Err(TrainError::NoData("empty fine-tuning corpus".into()));
        }
        if pairs.iter().any(|p| p.tgt.len() < 2 || p.src.len() < 2) {
            return Err(TrainError::NoData("pair with an empty side".into()));
        }
        Ok(PairSource { pairs, batch_tokens, seed, cache: Mutex::new(EpochCache::default()) })
    }

    pub fn pairs(&self) -> &[EncodedPair] {
        &self.pairs
    }

    fn epoch(&self, epoch: u64) -> Vec<Vec<Item>> {
        let mut items: Vec<Item> = (0..self.pairs.len()).map(|line| Item { stream: 0, line }).collect();
        items.shuffle(&mut seed::rng(&[self.seed, EPOCH_ORDER, epoch]));
        chunk(items, |it| self.pairs[it.line].tokens(), self.batch_tokens)
    }

    pub fn batch(&self, index: u64) -> Vec<EncodedPair> {
        let (_, items) = self.cache.lock().expect("cache lock").locate(index, |e| self.epoch(e));
        items.into_iter().map(|it| self.pairs[it.line].clone()).collect()
    }
}
