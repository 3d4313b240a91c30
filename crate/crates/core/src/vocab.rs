//! Shared subword vocabulary: greedy pair merges at word level with an
//! end-of-word marker, learned on a language-balanced sample.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{self, LanguageTag, LoadedCorpus, Sentence};

pub type TokenId = u32;

pub const PAD_ID: TokenId = 0;
pub const BOS_ID: TokenId = 1;
pub const EOS_ID: TokenId = 2;
pub const UNK_ID: TokenId = 3;
pub const MASK_ID: TokenId = 4;
const N_SPECIAL: usize = 5;
const SPECIALS: [&str; N_SPECIAL] = [corpus::PAD, corpus::BOS, corpus::EOS, corpus::UNK, corpus::MASK];

/// Suffix marking the last piece of a word.
pub const END_OF_WORD: &str = "</w>";

pub const DEFAULT_VOCAB_SIZE: usize = 4096;
const MIN_PAIR_COUNT: usize = 2;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("target size {target} leaves no room after {reserved} reserved tokens")]
    TargetTooSmall { target: usize, reserved: usize },
    #[error("no sentences to learn from")]
    EmptyCorpus,
    #[error("token id {0} is outside the vocabulary")]
    UnknownId(TokenId),
    #[error("language {0} has no tag token")]
    UnknownLanguage(LanguageTag),
    #[error("id sequence does not start with a language tag")]
    MissingLanguageTag,
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Language-balanced sampling: weight `w_i ∝ (n_i / Σn)^temperature`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalancingPolicy {
    pub temperature: f64,
}

impl Default for BalancingPolicy {
    fn default() -> Self {
        BalancingPolicy { temperature: 0.7 }
    }
}

impl BalancingPolicy {
    /// Normalised sampling weights for per-language sentence counts.
    pub fn weights(&self, counts: &[usize]) -> Vec<f64> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return vec![0.0; counts.len()];
        }
        let raw: Vec<f64> = counts
            .iter()
            .map(|&n| if n == 0 { 0.0 } else { (n as f64 / total as f64).powf(self.temperature) })
            .collect();
        let z: f64 = raw.iter().sum();
        raw.iter().map(|w| w / z).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    merges: Vec<(String, String)>,
    merge_rank: HashMap<(String, String), usize>,
    languages: Vec<LanguageTag>,
}

/// Groups every sentence of the loaded corpora by language. Pseudo pairs
/// contribute their sentence once.
pub fn sentences_by_language(corpora: &[LoadedCorpus]) -> BTreeMap<LanguageTag, Vec<&Sentence>> {
    let mut by_lang: BTreeMap<LanguageTag, Vec<&Sentence>> = BTreeMap::new();
    for c in corpora {
        by_lang.entry(c.entry.src_lang.clone()).or_default();
        by_lang.entry(c.entry.tgt_lang.clone()).or_default();
        for p in &c.pairs {
            by_lang.entry(p.src.lang.clone()).or_default().push(&p.src);
            if !p.is_pseudo() {
                by_lang.entry(p.tgt.lang.clone()).or_default().push(&p.tgt);
            }
        }
    }
    by_lang
}

/// Draws `n` sentences: a language by policy weight, then a sentence
/// uniformly within it. Returns the sample and the language index of each draw.
pub fn balanced_sample<'a, R: Rng>(
    by_lang: &BTreeMap<LanguageTag, Vec<&'a Sentence>>,
    policy: &BalancingPolicy,
    n: usize,
    rng: &mut R,
) -> Vec<(usize, &'a Sentence)> {
    let groups: Vec<&Vec<&Sentence>> = by_lang.values().collect();
    let counts: Vec<usize> = groups.iter().map(|g| g.len()).collect();
    let weights = policy.weights(&counts);
    let Ok(dist) = WeightedIndex::new(&weights) else {
        return Vec::new();
    };
    (0..n)
        .map(|_| {
            let l = dist.sample(rng);
            let g = groups[l];
            (l, g[rng.gen_range(0..g.len())])
        })
        .collect()
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    chars
        .iter()
        .enumerate()
        .map(|(i, c)| if i + 1 == chars.len() { format!("{c}{END_OF_WORD}") } else { c.to_string() })
        .collect()
}

/// Learns a vocabulary of at most `target_size` tokens.
///
/// The learning sample has `sample_size` sentences drawn by
/// [`balanced_sample`]; every key of `by_lang` gets a tag token.
pub fn learn_vocab(
    by_lang: &BTreeMap<LanguageTag, Vec<&Sentence>>,
    target_size: usize,
    policy: &BalancingPolicy,
    sample_size: usize,
    seed: u64,
) -> Result<Vocabulary, VocabError> {
    let languages: Vec<LanguageTag> = by_lang.keys().cloned().collect();
    let reserved = N_SPECIAL + languages.len();
    if target_size <= reserved {
        return Err(VocabError::TargetTooSmall { target: target_size, reserved });
    }
    if by_lang.values().all(|v| v.is_empty()) {
        return Err(VocabError::EmptyCorpus);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sample = balanced_sample(by_lang, policy, sample_size, &mut rng);

    let mut word_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for (_, s) in &sample {
        for t in &s.tokens {
            *word_freq.entry(t.as_str()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = word_freq.iter().map(|(w, f)| (word_symbols(w), *f)).collect();

    let mut symbol_freq: BTreeMap<&str, usize> = BTreeMap::new();
    for (syms, f) in &words {
        for s in syms {
            *symbol_freq.entry(s.as_str()).or_default() += f;
        }
    }
    let mut base: Vec<(&str, usize)> = symbol_freq.into_iter().collect();
    base.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    base.truncate(target_size - reserved);

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(languages.iter().map(LanguageTag::token));
    let mut known: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    for (s, _) in &base {
        if known.insert(s.to_string()) {
            tokens.push(s.to_string());
        }
    }
    let base_tokens: Vec<String> = tokens[reserved..].to_vec();

    let mut merges = Vec::new();
    while tokens.len() < target_size {
        let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, f) in &words {
            for w in syms.windows(2) {
                *counts.entry((w[0].as_str(), w[1].as_str())).or_default() += f;
            }
        }
        // highest count, ties to the lexicographically smallest pair
        let best =
            counts.into_iter().filter(|(_, c)| *c >= MIN_PAIR_COUNT).max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        let merged = format!("{l}{r}");
        for (syms, _) in words.iter_mut() {
            merge_pair(syms, &l, &r);
        }
        if known.insert(merged.clone()) {
            tokens.push(merged);
        }
        merges.push((l, r));
    }
    debug_assert!(base_tokens.iter().all(|t| known.contains(t)));
    Ok(Vocabulary::from_parts(tokens, merges, languages))
}

fn merge_pair(syms: &mut Vec<String>, l: &str, r: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == l && syms[i + 1] == r {
            let right = syms.remove(i + 1);
            syms[i].push_str(&right);
        }
        i += 1;
    }
}

impl Vocabulary {
    fn from_parts(tokens: Vec<String>, merges: Vec<(String, String)>, languages: Vec<LanguageTag>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        let merge_rank = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Vocabulary { tokens, index, merges, merge_rank, languages }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn languages(&self) -> &[LanguageTag] {
        &self.languages
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn tag_id(&self, lang: &LanguageTag) -> Option<TokenId> {
        self.languages.iter().position(|l| l == lang).map(|i| (N_SPECIAL + i) as TokenId)
    }

    pub fn lang_of(&self, id: TokenId) -> Option<&LanguageTag> {
        (id as usize).checked_sub(N_SPECIAL).and_then(|i| self.languages.get(i))
    }

    /// Specials and language tags.
    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < self.first_regular_id() as usize
    }

    pub fn first_regular_id(&self) -> TokenId {
        (N_SPECIAL + self.languages.len()) as TokenId
    }

    /// Segments one surface word into piece ids.
    pub fn encode_word(&self, word: &str) -> Vec<TokenId> {
        let mut syms = word_symbols(word);
        while syms.len() > 1 {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merge_rank.get(&(w[0].clone(), w[1].clone())).map(|r| (*r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let (l, r) = self.merges[rank].clone();
            merge_pair(&mut syms, &l, &r);
        }
        syms.iter().map(|s| self.id(s).unwrap_or(UNK_ID)).collect()
    }

    /// `[tag] pieces...` for a sentence.
    pub fn encode(&self, s: &Sentence) -> Result<Vec<TokenId>, VocabError> {
        let tag = self.tag_id(&s.lang).ok_or_else(|| VocabError::UnknownLanguage(s.lang.clone()))?;
        let mut ids = vec![tag];
        for t in &s.tokens {
            ids.extend(self.encode_word(t));
        }
        Ok(ids)
    }

    /// Surface words from piece ids. Special tokens are dropped when
    /// `strip_special`, otherwise emitted as standalone words.
    pub fn decode_tokens(&self, ids: &[TokenId], strip_special: bool) -> Result<Vec<String>, VocabError> {
        let mut words = Vec::new();
        let mut cur = String::new();
        for &id in ids {
            let tok = self.token(id).ok_or(VocabError::UnknownId(id))?;
            if self.is_special(id) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                if !strip_special {
                    words.push(tok.to_string());
                }
            } else if let Some(stem) = tok.strip_suffix(END_OF_WORD) {
                cur.push_str(stem);
                words.push(std::mem::take(&mut cur));
            } else {
                cur.push_str(tok);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        Ok(words)
    }

    /// Inverse of [`Vocabulary::encode`]: the sequence must lead with a tag.
    pub fn decode(&self, ids: &[TokenId]) -> Result<Sentence, VocabError> {
        let lang = ids.first().and_then(|id| self.lang_of(*id)).ok_or(VocabError::MissingLanguageTag)?.clone();
        Ok(Sentence { lang, tokens: self.decode_tokens(&ids[1..], true)? })
    }

    /// Diff-friendly text form: a header line, one token per line in id
    /// order, then one `left right` merge per line in learned order.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "cemat-vocab 1 tokens={} merges={} languages={}\n",
            self.tokens.len(),
            self.merges.len(),
            self.languages.len()
        );
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        for (l, r) in &self.merges {
            let _ = writeln!(out, "{l} {r}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| VocabError::Format("empty file".into()))?;
        let mut fields = header.split_whitespace();
        if fields.next() != Some("cemat-vocab") || fields.next() != Some("1") {
            return Err(VocabError::Format(format!("bad header {header:?}")));
        }
        let mut get = |key: &str| -> Result<usize, VocabError> {
            fields
                .next()
                .and_then(|f| f.strip_prefix(key))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| VocabError::Format(format!("header missing {key}")))
        };
        let (n_tok, n_merge, n_lang) = (get("tokens=")?, get("merges=")?, get("languages=")?);
        let tokens: Vec<String> = lines.by_ref().take(n_tok).map(str::to_owned).collect();
        if tokens.len() != n_tok || tokens.len() < N_SPECIAL + n_lang {
            return Err(VocabError::Format("truncated token list".into()));
        }
        if tokens[..N_SPECIAL] != SPECIALS {
            return Err(VocabError::Format("special tokens out of place".into()));
        }
        let languages = tokens[N_SPECIAL..N_SPECIAL + n_lang]
            .iter()
            .map(|t| {
                t.strip_prefix('[')
                    .and_then(|t| t.strip_suffix(']'))
                    .and_then(|c| LanguageTag::new(c).ok())
                    .ok_or_else(|| VocabError::Format(format!("bad language token {t:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let merges = lines
            .take(n_merge)
            .map(|l| {
                let mut it = l.split(' ');
                match (it.next(), it.next(), it.next()) {
                    (Some(a), Some(b), None) => Ok((a.to_string(), b.to_string())),
                    _ => Err(VocabError::Format(format!("bad merge line {l:?}"))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        if merges.len() != n_merge {
            return Err(VocabError::Format("truncated merge list".into()));
        }
        let v = Vocabulary::from_parts(tokens, merges, languages);
        if v.index.len() != v.tokens.len() {
            return Err(VocabError::Format("duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// FNV-1a hash of the text form; recorded in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_text().as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Memoised word segmentation over a fixed vocabulary.
#[derive(Debug, Clone)]
pub struct PieceTable<'v> {
    vocab: &'v Vocabulary,
    table: HashMap<String, Vec<TokenId>>,
}

impl<'v> PieceTable<'v> {
    pub fn new<'w>(vocab: &'v Vocabulary, words: impl IntoIterator<Item = &'w str>) -> Self {
        let table = words.into_iter().map(|w| (w.to_string(), vocab.encode_word(w))).collect();
        PieceTable { vocab, table }
    }

    pub fn vocab(&self) -> &'v Vocabulary {
        self.vocab
    }

    pub fn pieces(&self, word: &str) -> Cow<'_, [TokenId]> {
        match self.table.get(word) {
            Some(p) => Cow::Borrowed(p),
            None => Cow::Owned(self.vocab.encode_word(word)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lang(s: &str) -> LanguageTag {
        LanguageTag::new(s).unwrap()
    }

    fn corpus(lines: &[(&str, &str)]) -> Vec<Sentence> {
        lines.iter().map(|(l, t)| Sentence::from_text(&lang(l), t)).collect()
    }

    fn group(sents: &[Sentence]) -> BTreeMap<LanguageTag, Vec<&Sentence>> {
        let mut m: BTreeMap<LanguageTag, Vec<&Sentence>> = BTreeMap::new();
        for s in sents {
            m.entry(s.lang.clone()).or_default().push(s);
        }
        m
    }

    #[test]
    fn first_merge_on_repeated_pair() {
        let sents = corpus(&[("en", "ab ab ab")]);
        let v = learn_vocab(&group(&sents), 16, &BalancingPolicy::default(), 1, 0).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "b</w>".to_string()));
        assert!(v.len() <= 16);
        assert_eq!(v.encode_word("ab"), vec![v.id("ab</w>").unwrap()]);
    }

    #[test]
    fn balancing_weights() {
        let w = BalancingPolicy { temperature: 1.0 }.weights(&[9, 1]);
        assert!((w[0] - 0.9).abs() < 1e-12 && (w[1] - 0.1).abs() < 1e-12);
        let w = BalancingPolicy { temperature: 0.0 }.weights(&[9, 1]);
        assert_eq!(w, vec![0.5, 0.5]);
        let w = BalancingPolicy::default().weights(&[90, 10]);
        let expected = 0.9f64.powf(0.7) / (0.9f64.powf(0.7) + 0.1f64.powf(0.7));
        assert!((w[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn balanced_sample_matches_weights() {
        let mut sents = Vec::new();
        for i in 0..90 {
            sents.push(Sentence::from_text(&lang("en"), &format!("w{i}")));
        }
        for i in 0..10 {
            sents.push(Sentence::from_text(&lang("de"), &format!("v{i}")));
        }
        let by = group(&sents);
        let policy = BalancingPolicy::default();
        let weights = policy.weights(&[10, 90]); // BTreeMap order: de, en
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = balanced_sample(&by, &policy, 100_000, &mut rng);
        let de = draws.iter().filter(|(l, _)| *l == 0).count() as f64 / 1e5;
        assert!((de - weights[0]).abs() < 0.02, "{de} vs {}", weights[0]);
    }

    #[test]
    fn target_too_small() {
        let sents = corpus(&[("en", "a"), ("de", "b")]);
        let err = learn_vocab(&group(&sents), 7, &BalancingPolicy::default(), 10, 0).unwrap_err();
        assert!(matches!(err, VocabError::TargetTooSmall { reserved: 7, .. }));
    }

    #[test]
    fn specials_and_tags() {
        let sents = corpus(&[("en", "hello world"), ("de", "hallo welt")]);
        let v = learn_vocab(&group(&sents), 64, &BalancingPolicy::default(), 50, 1).unwrap();
        assert_eq!(v.id("[mask]"), Some(MASK_ID));
        assert_eq!(v.tokens.iter().filter(|t| *t == "[mask]").count(), 1);
        assert_eq!(v.tag_id(&lang("de")), Some(5));
        assert_eq!(v.tag_id(&lang("en")), Some(6));
        assert!(v.is_special(6) && !v.is_special(7));
        let ids = v.encode(&Sentence::from_text(&lang("en"), "hello")).unwrap();
        assert_eq!(ids[0], 6);
        assert!(!ids.contains(&MASK_ID));
    }

    #[test]
    fn roundtrip_and_unknown() {
        let sents = corpus(&[("en", "the cat sat on the mat"), ("en", "a dog ran"), ("fr", "le chat")]);
        let v = learn_vocab(&group(&sents), 40, &BalancingPolicy::default(), 200, 2).unwrap();
        for s in &sents {
            let ids = v.encode(s).unwrap();
            assert_eq!(&v.decode(&ids).unwrap(), s);
        }
        let ids = v.encode_word("zzz");
        assert!(ids.iter().all(|i| *i == UNK_ID));
        assert!(matches!(v.decode_tokens(&[9999], true), Err(VocabError::UnknownId(9999))));
        assert!(matches!(v.decode(&[20]), Err(VocabError::MissingLanguageTag)));
        let raw = v.decode_tokens(&[v.tag_id(&lang("en")).unwrap(), MASK_ID], false).unwrap();
        assert_eq!(raw, vec!["[en]", "[mask]"]);
    }

    #[test]
    fn deterministic_and_file_roundtrip() {
        let sents = corpus(&[("en", "lower lowest newer newest wider"), ("de", "niedriger neuer")]);
        let by = group(&sents);
        let a = learn_vocab(&by, 60, &BalancingPolicy::default(), 100, 9).unwrap();
        let b = learn_vocab(&by, 60, &BalancingPolicy::default(), 100, 9).unwrap();
        assert_eq!(a.merges(), b.merges());
        assert_eq!(a.fingerprint(), b.fingerprint());
        let back = Vocabulary::from_text(&a.to_text()).unwrap();
        assert_eq!(back, a);
    }
}
