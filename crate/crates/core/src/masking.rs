//! Two-stage masking of training pairs.
//!
//! 1. Aligned code-switching: a capped random subset of dictionary-aligned
//!    word pairs is chosen; each source word is replaced by a translation in
//!    some other language and its aligned target word becomes `[mask]`.
//!    These positions are protected from the next stage.
//! 2. Dynamic dual-masking: per-example ratios are drawn for target and
//!    source; the selected positions are corrupted 80/10/10
//!    (mask / keep / random token) and keep their original id as label.
//!    Pseudo pairs mask the same subset on both sides.

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{LanguageTag, Origin, SentencePair};
use crate::lexicon::{AlignmentSet, Lexicon};
use crate::vocab::{PieceTable, TokenId, VocabError, MASK_ID};

#[derive(Debug, Error)]
pub enum MaskingError {
    #[error("invalid masking policy: {0}")]
    Policy(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

/// Probabilities of what happens to a position chosen for dual-masking.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSplit {
    pub mask: f64,
    pub keep: f64,
    pub random: f64,
}

impl Default for CorruptionSplit {
    fn default() -> Self {
        CorruptionSplit { mask: 0.8, keep: 0.1, random: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskingPolicy {
    pub cs_ratio_bilingual: f64,
    pub cs_ratio_mono: f64,
    /// Target ratio υ range for bilingual pairs.
    pub dm_tgt_range_bilingual: (f64, f64),
    /// Source ratio μ range for bilingual pairs.
    pub dm_src_range_bilingual: (f64, f64),
    /// Shared ratio υ = μ range for pseudo pairs.
    pub dm_range_mono: (f64, f64),
    pub corruption: CorruptionSplit,
    /// Off: both ratios fixed to `fixed_ratio`.
    pub dynamic: bool,
    pub fixed_ratio: f64,
    /// Off: skip aligned code-switching entirely.
    pub code_switching: bool,
}

impl Default for MaskingPolicy {
    fn default() -> Self {
        MaskingPolicy {
            cs_ratio_bilingual: 0.15,
            cs_ratio_mono: 0.30,
            dm_tgt_range_bilingual: (0.2, 0.5),
            dm_src_range_bilingual: (0.1, 0.2),
            dm_range_mono: (0.3, 0.4),
            corruption: CorruptionSplit::default(),
            dynamic: true,
            fixed_ratio: 0.15,
            code_switching: true,
        }
    }
}

impl MaskingPolicy {
    pub fn validate(&self) -> Result<(), MaskingError> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(MaskingError::Policy(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        unit("cs_ratio_bilingual", self.cs_ratio_bilingual)?;
        unit("cs_ratio_mono", self.cs_ratio_mono)?;
        unit("fixed_ratio", self.fixed_ratio)?;
        for (name, (lo, hi)) in [
            ("dm_tgt_range_bilingual", self.dm_tgt_range_bilingual),
            ("dm_src_range_bilingual", self.dm_src_range_bilingual),
            ("dm_range_mono", self.dm_range_mono),
        ] {
            unit(name, lo)?;
            unit(name, hi)?;
            if lo > hi {
                return Err(MaskingError::Policy(format!("{name} = [{lo}, {hi}] is not ordered")));
            }
        }
        let c = self.corruption;
        for v in [c.mask, c.keep, c.random] {
            unit("corruption", v)?;
        }
        if (c.mask + c.keep + c.random - 1.0).abs() > 1e-9 {
            return Err(MaskingError::Policy("corruption split must sum to 1".into()));
        }
        Ok(())
    }
}

/// Upper bound on code-switched source words: `ceil(ratio · n)`.
pub fn cs_cap(ratio: f64, n_words: usize) -> usize {
    // the epsilon keeps 0.15·20 from landing a hair above 3
    (ratio * n_words as f64 - 1e-9).ceil().max(0.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsReplacement {
    pub src_word: usize,
    pub tgt_word: usize,
    pub original: String,
    pub lang: LanguageTag,
    pub replacement: String,
}

/// A pair after code-switching, already in id space with language tags at
/// position 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsPair {
    pub src_ids: Vec<TokenId>,
    pub tgt_ids: Vec<TokenId>,
    /// Piece positions of replaced source words.
    pub src_protected: Vec<usize>,
    /// Masked target positions with their original ids.
    pub tgt_masked: Vec<(usize, TokenId)>,
    pub replacements: Vec<CsReplacement>,
    pub src_words: usize,
    pub origin: Origin,
}

fn encode_words<'a>(
    pieces: &PieceTable<'_>,
    tag: TokenId,
    words: impl Iterator<Item = &'a str>,
) -> (Vec<TokenId>, Vec<std::ops::Range<usize>>) {
    let mut ids = vec![tag];
    let mut spans = Vec::new();
    for w in words {
        let start = ids.len();
        ids.extend_from_slice(&pieces.pieces(w));
        spans.push(start..ids.len());
    }
    (ids, spans)
}

fn tag_of(pieces: &PieceTable<'_>, lang: &LanguageTag) -> Result<TokenId, MaskingError> {
    pieces.vocab().tag_id(lang).ok_or_else(|| VocabError::UnknownLanguage(lang.clone()).into())
}

/// Code-switching replace on the source and code-switching mask on the target.
pub fn apply_cs<R: Rng + ?Sized>(
    pair: &SentencePair,
    alignment: &AlignmentSet,
    lex: &Lexicon,
    pieces: &PieceTable<'_>,
    policy: &MaskingPolicy,
    rng: &mut R,
) -> Result<CsPair, MaskingError> {
    let ratio = match pair.origin {
        Origin::Bilingual => policy.cs_ratio_bilingual,
        Origin::MonolingualPseudo => policy.cs_ratio_mono,
    };
    let cap = cs_cap(ratio, pair.src.len());
    let mut chosen: Vec<(usize, usize)> = alignment.pairs().to_vec();
    chosen.shuffle(rng);
    chosen.truncate(cap);
    chosen.sort_unstable();

    let mut replacements = Vec::new();
    for (i, j) in chosen {
        let original = &pair.src.tokens[i];
        if let Some((lang, replacement)) = lex.lookup_replacement(original, &pair.src.lang, rng) {
            replacements.push(CsReplacement {
                src_word: i,
                tgt_word: j,
                original: original.clone(),
                lang,
                replacement,
            });
        }
    }

    let src_words = pair
        .src
        .tokens
        .iter()
        .enumerate()
        .map(|(i, w)| replacements.iter().find(|r| r.src_word == i).map_or(w.as_str(), |r| r.replacement.as_str()));
    let (src_ids, src_spans) = encode_words(pieces, tag_of(pieces, &pair.src.lang)?, src_words);
    let (mut tgt_ids, tgt_spans) =
        encode_words(pieces, tag_of(pieces, &pair.tgt.lang)?, pair.tgt.tokens.iter().map(String::as_str));

    let mut src_protected = Vec::new();
    let mut tgt_masked = Vec::new();
    for r in &replacements {
        src_protected.extend(src_spans[r.src_word].clone());
        for p in tgt_spans[r.tgt_word].clone() {
            tgt_masked.push((p, tgt_ids[p]));
            tgt_ids[p] = MASK_ID;
        }
    }
    src_protected.sort_unstable();
    tgt_masked.sort_unstable();
    Ok(CsPair {
        src_ids,
        tgt_ids,
        src_protected,
        tgt_masked,
        replacements,
        src_words: pair.src.len(),
        origin: pair.origin,
    })
}

/// Encodes a pair with no code-switching.
pub fn identity_cs(pair: &SentencePair, pieces: &PieceTable<'_>) -> Result<CsPair, MaskingError> {
    let (src_ids, _) =
        encode_words(pieces, tag_of(pieces, &pair.src.lang)?, pair.src.tokens.iter().map(String::as_str));
    let (tgt_ids, _) =
        encode_words(pieces, tag_of(pieces, &pair.tgt.lang)?, pair.tgt.tokens.iter().map(String::as_str));
    Ok(CsPair {
        src_ids,
        tgt_ids,
        src_protected: Vec::new(),
        tgt_masked: Vec::new(),
        replacements: Vec::new(),
        src_words: pair.src.len(),
        origin: pair.origin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corruption {
    Mask,
    Keep,
    Random,
}

/// A position chosen by dual-masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DmSelection {
    pub pos: usize,
    pub label: TokenId,
    pub outcome: Corruption,
}

/// A fully masked training example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedExample {
    pub src_ids: Vec<TokenId>,
    pub tgt_ids: Vec<TokenId>,
    pub origin: Origin,
    /// Protected source positions (replaced words).
    pub src_cs: Vec<usize>,
    /// Code-switch masked target positions and labels.
    pub tgt_cs: Vec<(usize, TokenId)>,
    pub src_dm: Vec<DmSelection>,
    pub tgt_dm: Vec<DmSelection>,
    /// Drawn target ratio υ.
    pub upsilon: f64,
    /// Drawn source ratio μ.
    pub mu: f64,
    pub cs_words: usize,
    pub src_words: usize,
}

impl MaskedExample {
    /// Target positions the decoder must predict, sorted, with labels.
    pub fn tgt_targets(&self) -> Vec<(usize, TokenId)> {
        let mut t: Vec<_> = self.tgt_cs.iter().copied().chain(self.tgt_dm.iter().map(|s| (s.pos, s.label))).collect();
        t.sort_unstable();
        t
    }

    /// Source positions the encoder must predict, sorted, with labels.
    pub fn src_targets(&self) -> Vec<(usize, TokenId)> {
        self.src_dm.iter().map(|s| (s.pos, s.label)).collect()
    }

    /// True when the example carries no target label; the batcher re-masks it.
    pub fn needs_resample(&self) -> bool {
        self.tgt_cs.is_empty() && self.tgt_dm.is_empty()
    }

    /// Undoes dual-masking, giving back the code-switched pair's ids.
    pub fn revert_dm(&self) -> (Vec<TokenId>, Vec<TokenId>) {
        let mut src = self.src_ids.clone();
        let mut tgt = self.tgt_ids.clone();
        for s in &self.src_dm {
            src[s.pos] = s.label;
        }
        for s in &self.tgt_dm {
            tgt[s.pos] = s.label;
        }
        (src, tgt)
    }

    pub fn src_dm_positions(&self) -> Vec<usize> {
        self.src_dm.iter().map(|s| s.pos).collect()
    }

    pub fn tgt_dm_positions(&self) -> Vec<usize> {
        self.tgt_dm.iter().map(|s| s.pos).collect()
    }
}

fn eligible(len: usize, protected: &[usize]) -> Vec<usize> {
    (1..len).filter(|p| protected.binary_search(p).is_err()).collect()
}

fn draw_ratio<R: Rng + ?Sized>((lo, hi): (f64, f64), rng: &mut R) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

fn corrupt<R: Rng + ?Sized>(
    ids: &mut [TokenId],
    positions: &[usize],
    split: &CorruptionSplit,
    random_ids: std::ops::Range<TokenId>,
    rng: &mut R,
) -> Vec<DmSelection> {
    positions
        .iter()
        .map(|&pos| {
            let label = ids[pos];
            let u: f64 = rng.gen();
            let outcome = if u < split.mask {
                ids[pos] = MASK_ID;
                Corruption::Mask
            } else if u < split.mask + split.keep {
                Corruption::Keep
            } else {
                ids[pos] = rng.gen_range(random_ids.clone());
                Corruption::Random
            };
            DmSelection { pos, label, outcome }
        })
        .collect()
}

fn pick<R: Rng + ?Sized>(from: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    let mut out: Vec<usize> = index::sample(rng, from.len(), k.min(from.len())).into_iter().map(|i| from[i]).collect();
    out.sort_unstable();
    out
}

/// Dynamic dual-masking of a code-switched pair.
///
/// Counts are `⌊ratio · eligible⌋`, raised to 1 on the target side whenever
/// something is eligible. Language tags and protected positions are never
/// eligible.
pub fn apply_dm<R: Rng + ?Sized>(
    cs: CsPair,
    policy: &MaskingPolicy,
    random_ids: std::ops::Range<TokenId>,
    rng: &mut R,
) -> MaskedExample {
    let tgt_protected: Vec<usize> = cs.tgt_masked.iter().map(|p| p.0).collect();
    let src_elig = eligible(cs.src_ids.len(), &cs.src_protected);
    let tgt_elig = eligible(cs.tgt_ids.len(), &tgt_protected);
    let count = |ratio: f64, n: usize, at_least_one: bool| {
        let k = (ratio * n as f64).floor() as usize;
        if k == 0 && at_least_one && n > 0 {
            1
        } else {
            k
        }
    };

    let (upsilon, mu, src_sel, tgt_sel) = match cs.origin {
        Origin::Bilingual => {
            let (upsilon, mu) = if policy.dynamic {
                let u = draw_ratio(policy.dm_tgt_range_bilingual, rng);
                let m = draw_ratio(policy.dm_src_range_bilingual, rng);
                (u, m)
            } else {
                (policy.fixed_ratio, policy.fixed_ratio)
            };
            assert!(upsilon >= mu || !policy.dynamic, "target ratio {upsilon} below source ratio {mu}");
            let tgt_sel = pick(&tgt_elig, count(upsilon, tgt_elig.len(), true), rng);
            let src_sel = pick(&src_elig, count(mu, src_elig.len(), false), rng);
            (upsilon, mu, src_sel, tgt_sel)
        }
        Origin::MonolingualPseudo => {
            let r = if policy.dynamic { draw_ratio(policy.dm_range_mono, rng) } else { policy.fixed_ratio };
            // Outside protected words both sides hold the same pieces in the
            // same order, so one ordinal subset names the same words on each.
            debug_assert_eq!(src_elig.len(), tgt_elig.len());
            let n = src_elig.len().min(tgt_elig.len());
            let ordinals: Vec<usize> = (0..n).collect();
            let chosen = pick(&ordinals, count(r, n, true), rng);
            let src_sel = chosen.iter().map(|&o| src_elig[o]).collect();
            let tgt_sel = chosen.iter().map(|&o| tgt_elig[o]).collect();
            (r, r, src_sel, tgt_sel)
        }
    };

    let mut src_ids = cs.src_ids;
    let mut tgt_ids = cs.tgt_ids;
    let tgt_dm = corrupt(&mut tgt_ids, &tgt_sel, &policy.corruption, random_ids.clone(), rng);
    let src_dm = corrupt(&mut src_ids, &src_sel, &policy.corruption, random_ids, rng);
    MaskedExample {
        src_ids,
        tgt_ids,
        origin: cs.origin,
        src_cs: cs.src_protected,
        tgt_cs: cs.tgt_masked,
        src_dm,
        tgt_dm,
        upsilon,
        mu,
        cs_words: cs.replacements.len(),
        src_words: cs.src_words,
    }
}

/// Full pipeline: align → code-switch → dual-mask.
pub fn make_example<R: Rng + ?Sized>(
    pair: &SentencePair,
    lex: &Lexicon,
    pieces: &PieceTable<'_>,
    policy: &MaskingPolicy,
    rng: &mut R,
) -> Result<MaskedExample, MaskingError> {
    let cs = if policy.code_switching {
        let alignment = lex.align(pair, rng);
        apply_cs(pair, &alignment, lex, pieces, policy, rng)?
    } else {
        identity_cs(pair, pieces)?
    };
    let v = pieces.vocab();
    let random_ids = v.first_regular_id()..v.len() as TokenId;
    Ok(apply_dm(cs, policy, random_ids, rng))
}

/// Aggregate statistics over many masked examples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskingStats {
    pub examples: usize,
    pub bilingual: usize,
    pub src_words: usize,
    pub cs_words: usize,
    pub upsilon_sum: f64,
    pub mu_sum: f64,
    pub upsilon_hist: [usize; HIST_BINS],
    pub mu_hist: [usize; HIST_BINS],
    pub mask: usize,
    pub keep: usize,
    pub random: usize,
}

pub const HIST_BINS: usize = 20;

impl MaskingStats {
    pub fn add(&mut self, ex: &MaskedExample) {
        self.examples += 1;
        if ex.origin == Origin::Bilingual {
            self.bilingual += 1;
        }
        self.src_words += ex.src_words;
        self.cs_words += ex.cs_words;
        self.upsilon_sum += ex.upsilon;
        self.mu_sum += ex.mu;
        let bin = |r: f64| ((r * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
        self.upsilon_hist[bin(ex.upsilon)] += 1;
        self.mu_hist[bin(ex.mu)] += 1;
        for s in ex.src_dm.iter().chain(&ex.tgt_dm) {
            match s.outcome {
                Corruption::Mask => self.mask += 1,
                Corruption::Keep => self.keep += 1,
                Corruption::Random => self.random += 1,
            }
        }
    }

    pub fn cs_coverage(&self) -> f64 {
        self.cs_words as f64 / self.src_words.max(1) as f64
    }

    pub fn mean_upsilon(&self) -> f64 {
        self.upsilon_sum / self.examples.max(1) as f64
    }

    pub fn mean_mu(&self) -> f64 {
        self.mu_sum / self.examples.max(1) as f64
    }

    /// (mask, keep, random) fractions of dual-masked positions.
    pub fn corruption_split(&self) -> (f64, f64, f64) {
        let n = (self.mask + self.keep + self.random).max(1) as f64;
        (self.mask as f64 / n, self.keep as f64 / n, self.random as f64 / n)
    }

    pub fn report(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let (m, k, r) = self.corruption_split();
        let _ = writeln!(out, "examples\t{} ({} bilingual)", self.examples, self.bilingual);
        let _ = writeln!(out, "cs_coverage\t{:.2}% of source words", 100.0 * self.cs_coverage());
        let _ = writeln!(out, "mean_upsilon\t{:.4}", self.mean_upsilon());
        let _ = writeln!(out, "mean_mu\t{:.4}", self.mean_mu());
        let _ = writeln!(out, "corruption\tmask {:.2}% keep {:.2}% random {:.2}%", 100.0 * m, 100.0 * k, 100.0 * r);
        let _ = writeln!(out, "ratio_bin\tupsilon\tmu");
        for b in 0..HIST_BINS {
            let (u, mu) = (self.upsilon_hist[b], self.mu_hist[b]);
            if u + mu > 0 {
                let lo = b as f64 / HIST_BINS as f64;
                let _ = writeln!(out, "[{lo:.2},{:.2})\t{u}\t{mu}", lo + 1.0 / HIST_BINS as f64);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{monolingual_to_pseudo_pair, Sentence};
    use crate::vocab::{learn_vocab, BalancingPolicy, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn lang(s: &str) -> LanguageTag {
        LanguageTag::new(s).unwrap()
    }

    fn figure_setup() -> (Vocabulary, Lexicon, SentencePair) {
        let sents = vec![
            Sentence::from_text(&lang("en"), "i like to dance"),
            Sentence::from_text(&lang("de"), "ich tanze gern"),
            Sentence::from_text(&lang("fr"), "danse"),
        ];
        let mut by: BTreeMap<LanguageTag, Vec<&Sentence>> = BTreeMap::new();
        for s in &sents {
            by.entry(s.lang.clone()).or_default().push(s);
        }
        let v = learn_vocab(&by, 200, &BalancingPolicy::default(), 300, 0).unwrap();
        let mut lex = Lexicon::new();
        lex.insert(&lang("en"), &lang("de"), "dance", "tanze");
        lex.insert(&lang("en"), &lang("fr"), "dance", "danse");
        let pair = SentencePair::bilingual(sents[0].clone(), sents[1].clone());
        (v, lex, pair)
    }

    #[test]
    fn figure_code_switch() {
        let (v, lex, pair) = figure_setup();
        let pieces = PieceTable::new(&v, []);
        let align = AlignmentSet::from_pairs(vec![(3, 1)]);
        // find a seed whose replacement is French, like the worked example
        let seed = (0..64)
            .find(|s| {
                let cs = apply_cs(
                    &pair,
                    &align,
                    &lex,
                    &pieces,
                    &MaskingPolicy::default(),
                    &mut ChaCha8Rng::seed_from_u64(*s),
                )
                .unwrap();
                cs.replacements[0].lang == lang("fr")
            })
            .unwrap();
        let cs =
            apply_cs(&pair, &align, &lex, &pieces, &MaskingPolicy::default(), &mut ChaCha8Rng::seed_from_u64(seed))
                .unwrap();
        let src = v.decode(&cs.src_ids).unwrap();
        assert_eq!(src.tokens, ["i", "like", "to", "danse"]);
        let tgt_words = v.decode_tokens(&cs.tgt_ids[1..], false).unwrap();
        assert!(tgt_words.contains(&"[mask]".to_string()));
        let labels: Vec<TokenId> = cs.tgt_masked.iter().map(|p| p.1).collect();
        assert_eq!(v.decode_tokens(&labels, true).unwrap(), ["tanze"]);
        assert!(cs.src_protected.iter().all(|p| *p > 0));
    }

    #[test]
    fn empty_alignment_is_identity() {
        let (v, lex, pair) = figure_setup();
        let pieces = PieceTable::new(&v, []);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cs = apply_cs(&pair, &AlignmentSet::default(), &lex, &pieces, &MaskingPolicy::default(), &mut rng).unwrap();
        assert_eq!(cs, identity_cs(&pair, &pieces).unwrap());
        assert!(cs.src_protected.is_empty() && cs.tgt_masked.is_empty());
    }

    #[test]
    fn cs_cap_values() {
        assert_eq!(cs_cap(0.15, 20), 3);
        assert_eq!(cs_cap(0.15, 4), 1);
        assert_eq!(cs_cap(0.30, 10), 3);
        assert_eq!(cs_cap(0.15, 0), 0);
    }

    #[test]
    fn cs_respects_cap() {
        let words: Vec<String> = (0..20).map(|i| format!("w{i}")).collect();
        let mut lex = Lexicon::new();
        for w in words.iter().take(10) {
            lex.insert(&lang("en"), &lang("de"), w, &format!("{w}x"));
        }
        let src = Sentence::new(lang("en"), words.clone());
        let tgt = Sentence::new(lang("de"), words.iter().map(|w| format!("{w}x")).collect());
        let all: Vec<&Sentence> = vec![&src, &tgt];
        let mut by: BTreeMap<LanguageTag, Vec<&Sentence>> = BTreeMap::new();
        for s in all {
            by.entry(s.lang.clone()).or_default().push(s);
        }
        let v = learn_vocab(&by, 300, &BalancingPolicy::default(), 50, 0).unwrap();
        let pieces = PieceTable::new(&v, []);
        let pair = SentencePair::bilingual(src, tgt);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let align = lex.align(&pair, &mut rng);
        assert_eq!(align.len(), 10);
        for seed in 0..10_000u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cs = apply_cs(&pair, &align, &lex, &pieces, &MaskingPolicy::default(), &mut rng).unwrap();
            assert!(cs.replacements.len() <= 3);
        }
    }

    #[test]
    fn monolingual_same_subset() {
        let (v, lex, _) = figure_setup();
        let pieces = PieceTable::new(&v, []);
        let pair = monolingual_to_pseudo_pair(Sentence::from_text(&lang("en"), "i like to dance i like to"));
        for seed in 0..200 {
            let ex =
                make_example(&pair, &lex, &pieces, &MaskingPolicy::default(), &mut ChaCha8Rng::seed_from_u64(seed))
                    .unwrap();
            assert!((0.3..=0.4).contains(&ex.upsilon) && ex.upsilon == ex.mu);
            if ex.src_ids.len() == ex.tgt_ids.len() {
                assert_eq!(ex.src_dm_positions(), ex.tgt_dm_positions());
            }
            assert_eq!(ex.src_dm.len(), ex.tgt_dm.len());
        }
    }

    #[test]
    fn pseudo_pair_label_differs_from_visible_source() {
        let (v, lex, _) = figure_setup();
        let pieces = PieceTable::new(&v, []);
        let pair = monolingual_to_pseudo_pair(Sentence::from_text(&lang("en"), "dance"));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ex = make_example(&pair, &lex, &pieces, &MaskingPolicy::default(), &mut rng).unwrap();
        assert_eq!(ex.cs_words, 1);
        let visible = v.decode(&ex.src_ids).unwrap().tokens;
        let label: Vec<TokenId> = ex.tgt_cs.iter().map(|p| p.1).collect();
        assert_eq!(v.decode_tokens(&label, true).unwrap(), ["dance"]);
        assert_ne!(visible, ["dance"]);
    }

    #[test]
    fn fixed_ratio_without_dynamic() {
        let (v, _, pair) = figure_setup();
        let pieces = PieceTable::new(&v, []);
        let policy = MaskingPolicy { dynamic: false, ..MaskingPolicy::default() };
        let ex = make_example(&pair, &Lexicon::new(), &pieces, &policy, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!((ex.upsilon, ex.mu), (0.15, 0.15));
        assert!(ex.tgt_cs.is_empty());
        let tgt_elig = ex.tgt_ids.len() - 1;
        assert_eq!(ex.tgt_dm.len(), ((0.15 * tgt_elig as f64).floor() as usize).max(1));
    }

    #[test]
    fn deterministic_under_seed() {
        let (v, lex, pair) = figure_setup();
        let pieces = PieceTable::new(&v, []);
        let p = MaskingPolicy::default();
        let a = make_example(&pair, &lex, &pieces, &p, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = make_example(&pair, &lex, &pieces, &p, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn policy_validation() {
        assert!(MaskingPolicy::default().validate().is_ok());
        let bad = MaskingPolicy { dm_src_range_bilingual: (0.3, 0.1), ..MaskingPolicy::default() };
        assert!(bad.validate().is_err());
        let bad = MaskingPolicy {
            corruption: CorruptionSplit { mask: 0.8, keep: 0.1, random: 0.2 },
            ..MaskingPolicy::default()
        };
        assert!(bad.validate().is_err());
    }
}
