//! Bilingual dictionaries, dictionary-driven word alignment, and the
//! cross-lingual replacement lookup used by code-switching.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::corpus::{LanguageTag, SentencePair};

#[derive(Debug, Error)]
pub enum LexiconError {
    #[error("{path}:{line}: expected \"source_word target_word\", got {text:?}")]
    Malformed { path: PathBuf, line: usize, text: String },
    #[error("{0}: dictionary files are named <src>-<tgt>.txt")]
    BadFileName(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type WordMap = BTreeMap<String, BTreeSet<String>>;

/// Per directed language pair, a multimap word → translations. Inserting
/// `a-b` entries also fills the inverse `b-a` map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Lexicon {
    maps: BTreeMap<(LanguageTag, LanguageTag), WordMap>,
    // (lang, word) → every (other lang, translation)
    cross: HashMap<(LanguageTag, String), BTreeSet<(LanguageTag, String)>>,
}

/// Per-file statistics from [`load_lexicon`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadReport {
    pub src_lang: LanguageTag,
    pub tgt_lang: LanguageTag,
    pub lines: usize,
    pub unique: usize,
}

/// `(i, j)`: source word `i` and target word `j` translate each other.
/// Indices count surface words, excluding the language tag.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignmentSet {
    pairs: Vec<(usize, usize)>,
}

impl AlignmentSet {
    pub fn from_pairs(mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        AlignmentSet { pairs }
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// No index is used twice on either side.
    pub fn is_one_to_one(&self) -> bool {
        let src: BTreeSet<_> = self.pairs.iter().map(|p| p.0).collect();
        let tgt: BTreeSet<_> = self.pairs.iter().map(|p| p.1).collect();
        src.len() == self.pairs.len() && tgt.len() == self.pairs.len()
    }
}

impl Lexicon {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: &LanguageTag, b: &LanguageTag, wa: &str, wb: &str) -> bool {
        let fresh = self
            .maps
            .entry((a.clone(), b.clone()))
            .or_default()
            .entry(wa.to_string())
            .or_default()
            .insert(wb.to_string());
        self.maps.entry((b.clone(), a.clone())).or_default().entry(wb.to_string()).or_default().insert(wa.to_string());
        if a != b {
            self.cross.entry((a.clone(), wa.to_string())).or_default().insert((b.clone(), wb.to_string()));
            self.cross.entry((b.clone(), wb.to_string())).or_default().insert((a.clone(), wa.to_string()));
        }
        fresh
    }

    /// Every word that has a translation in some other language.
    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.cross.keys().map(|(_, w)| w.as_str())
    }

    pub fn language_pairs(&self) -> impl Iterator<Item = &(LanguageTag, LanguageTag)> {
        self.maps.keys()
    }

    pub fn entry_count(&self, from: &LanguageTag, to: &LanguageTag) -> usize {
        self.maps.get(&(from.clone(), to.clone())).map_or(0, |m| m.values().map(BTreeSet::len).sum())
    }

    pub fn translations(&self, word: &str, from: &LanguageTag, to: &LanguageTag) -> Option<&BTreeSet<String>> {
        self.maps.get(&(from.clone(), to.clone()))?.get(word)
    }

    pub fn is_translation(&self, wa: &str, from: &LanguageTag, wb: &str, to: &LanguageTag) -> bool {
        self.translations(wa, from, to).is_some_and(|s| s.contains(wb))
    }

    /// Every (language, translation) for `word` in languages other than `lang`.
    pub fn cross_lingual(&self, word: &str, lang: &LanguageTag) -> Option<&BTreeSet<(LanguageTag, String)>> {
        self.cross.get(&(lang.clone(), word.to_string()))
    }

    pub fn has_cross_lingual(&self, word: &str, lang: &LanguageTag) -> bool {
        self.cross_lingual(word, lang).is_some_and(|s| !s.is_empty())
    }

    /// `F(word)`: a uniformly random (language, translation) over all
    /// languages other than `src_lang`, or `None` when the word is absent.
    pub fn lookup_replacement<R: Rng + ?Sized>(
        &self,
        word: &str,
        src_lang: &LanguageTag,
        rng: &mut R,
    ) -> Option<(LanguageTag, String)> {
        let options = self.cross_lingual(word, src_lang)?;
        if options.is_empty() {
            return None;
        }
        let k = rng.gen_range(0..options.len());
        options.iter().nth(k).cloned()
    }

    /// Dictionary alignment of a pair.
    ///
    /// Bilingual: every `(i, j)` where target word `j` translates source word
    /// `i`, reduced to a one-to-one set by visiting candidates in seeded random
    /// order and keeping those whose indices are still free. Pseudo pairs:
    /// `(i, i)` for every word with any cross-lingual entry.
    pub fn align<R: Rng + ?Sized>(&self, pair: &SentencePair, rng: &mut R) -> AlignmentSet {
        if pair.is_pseudo() {
            let pairs = pair
                .src
                .tokens
                .iter()
                .enumerate()
                .filter(|(_, w)| self.has_cross_lingual(w, &pair.src.lang))
                .map(|(i, _)| (i, i))
                .collect();
            return AlignmentSet::from_pairs(pairs);
        }
        let Some(map) = self.maps.get(&(pair.src.lang.clone(), pair.tgt.lang.clone())) else {
            return AlignmentSet::default();
        };
        let mut candidates = Vec::new();
        for (i, w) in pair.src.tokens.iter().enumerate() {
            if let Some(tr) = map.get(w) {
                for (j, t) in pair.tgt.tokens.iter().enumerate() {
                    if tr.contains(t) {
                        candidates.push((i, j));
                    }
                }
            }
        }
        candidates.shuffle(rng);
        let mut used_src = BTreeSet::new();
        let mut used_tgt = BTreeSet::new();
        let mut kept = Vec::new();
        for (i, j) in candidates {
            if !used_src.contains(&i) && !used_tgt.contains(&j) {
                used_src.insert(i);
                used_tgt.insert(j);
                kept.push((i, j));
            }
        }
        AlignmentSet::from_pairs(kept)
    }

    /// Writes the `a-b` direction in dictionary format.
    pub fn write_pair(&self, a: &LanguageTag, b: &LanguageTag, path: &Path) -> Result<(), LexiconError> {
        let mut out = String::new();
        if let Some(m) = self.maps.get(&(a.clone(), b.clone())) {
            for (w, ts) in m {
                for t in ts {
                    out.push_str(w);
                    out.push(' ');
                    out.push_str(t);
                    out.push('\n');
                }
            }
        }
        std::fs::write(path, out).map_err(|source| LexiconError::Io { path: path.to_path_buf(), source })
    }
}

/// Parses `<src>-<tgt>.txt` into its language pair.
pub fn pair_from_file_name(path: &Path) -> Result<(LanguageTag, LanguageTag), LexiconError> {
    let bad = || LexiconError::BadFileName(path.to_path_buf());
    let stem = path.file_name().and_then(|n| n.to_str()).and_then(|n| n.strip_suffix(".txt")).ok_or_else(bad)?;
    let (a, b) = stem.split_once('-').ok_or_else(bad)?;
    Ok((LanguageTag::new(a).map_err(|_| bad())?, LanguageTag::new(b).map_err(|_| bad())?))
}

/// Loads dictionary files of `source_word target_word` lines.
pub fn load_lexicon(files: &[(LanguageTag, LanguageTag, PathBuf)]) -> Result<(Lexicon, Vec<LoadReport>), LexiconError> {
    let mut lex = Lexicon::new();
    let mut reports = Vec::new();
    for (a, b, path) in files {
        let text = std::fs::read_to_string(path).map_err(|source| LexiconError::Io { path: path.clone(), source })?;
        let (mut lines, mut unique) = (0, 0);
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut f = line.split_whitespace();
            let (Some(wa), Some(wb), None) = (f.next(), f.next(), f.next()) else {
                return Err(LexiconError::Malformed { path: path.clone(), line: n + 1, text: line.to_string() });
            };
            lines += 1;
            if lex.insert(a, b, wa, wb) {
                unique += 1;
            }
        }
        reports.push(LoadReport { src_lang: a.clone(), tgt_lang: b.clone(), lines, unique });
    }
    Ok((lex, reports))
}

/// Loads every `<src>-<tgt>.txt` file in `dir`, in name order.
pub fn load_lexicon_dir(dir: &Path) -> Result<(Lexicon, Vec<LoadReport>), LexiconError> {
    let io = |source| LexiconError::Io { path: dir.to_path_buf(), source };
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().is_some_and(|e| e == "txt") {
            let (a, b) = pair_from_file_name(&path)?;
            files.push((a, b, path));
        }
    }
    files.sort_by(|x, y| x.2.cmp(&y.2));
    load_lexicon(&files)
}
