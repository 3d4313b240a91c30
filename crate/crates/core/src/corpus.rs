//! Plain-text corpus ingestion: one sentence per line, whitespace tokenised.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Lines, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default cap on sentence length; longer lines are dropped, not rejected.
pub const DEFAULT_MAX_TOKENS: usize = 128;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("line count mismatch: {src} has {src_lines} lines, {tgt} has {tgt_lines}")]
    LineCountMismatch { src: PathBuf, tgt: PathBuf, src_lines: usize, tgt_lines: usize },
    #[error("{path}:{line}: empty line")]
    EmptyLine { path: PathBuf, line: usize },
    #[error("{path}:{line}: token {token:?} is reserved")]
    ReservedToken { path: PathBuf, line: usize, token: String },
    #[error("invalid language tag {0:?} (expected lowercase alphanumeric)")]
    BadLanguageTag(String),
    #[error("unknown language tag {0}")]
    UnknownLanguage(LanguageTag),
    #[error("pseudo pair must copy the same sentence on both sides")]
    PseudoPairMismatch,
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io { path: path.to_path_buf(), source }
}

/// ISO-style language code such as `en` or `de`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageTag(String);

impl LanguageTag {
    pub fn new(code: impl Into<String>) -> Result<Self, CorpusError> {
        let code = code.into();
        let ok = !code.is_empty() && code.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit());
        if ok {
            Ok(LanguageTag(code))
        } else {
            Err(CorpusError::BadLanguageTag(code))
        }
    }

    pub fn code(&self) -> &str {
        &self.0
    }

    /// The reserved vocabulary token for this language, e.g. `[en]`.
    pub fn token(&self) -> String {
        format!("[{}]", self.0)
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for LanguageTag {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LanguageTag::new(s)
    }
}

impl TryFrom<String> for LanguageTag {
    type Error = CorpusError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        LanguageTag::new(s)
    }
}

impl From<LanguageTag> for String {
    fn from(t: LanguageTag) -> String {
        t.0
    }
}

/// Tokens with a fixed meaning in the vocabulary; never valid corpus words.
pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const MASK: &str = "[mask]";

/// True for special tokens and anything shaped like a language tag (`[xx]`).
pub fn is_reserved_token(token: &str) -> bool {
    if matches!(token, PAD | BOS | EOS | UNK | MASK) {
        return true;
    }
    token.len() > 2
        && token.starts_with('[')
        && token.ends_with(']')
        && token[1..token.len() - 1].chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sentence {
    pub lang: LanguageTag,
    pub tokens: Vec<String>,
}

impl Sentence {
    pub fn new(lang: LanguageTag, tokens: Vec<String>) -> Self {
        Sentence { lang, tokens }
    }

    /// Splits `text` on whitespace. Panics on reserved tokens; corpus loading
    /// reports those as errors instead.
    pub fn from_text(lang: &LanguageTag, text: &str) -> Self {
        let tokens: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
        assert!(tokens.iter().all(|t| !is_reserved_token(t)), "reserved token in {text:?}");
        Sentence { lang: lang.clone(), tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Origin {
    Bilingual,
    MonolingualPseudo,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Sentence,
    pub tgt: Sentence,
    pub origin: Origin,
}

impl SentencePair {
    pub fn bilingual(src: Sentence, tgt: Sentence) -> Self {
        SentencePair { src, tgt, origin: Origin::Bilingual }
    }

    pub fn is_pseudo(&self) -> bool {
        self.origin == Origin::MonolingualPseudo
    }
}

/// Pseudo-bilingual pair: the sentence copied to both sides.
pub fn monolingual_to_pseudo_pair(s: Sentence) -> SentencePair {
    SentencePair { src: s.clone(), tgt: s, origin: Origin::MonolingualPseudo }
}

/// A pair whose sides start with their `[lang]` token.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedPair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
    pub src_lang: LanguageTag,
    pub tgt_lang: LanguageTag,
    pub origin: Origin,
}

/// Prefixes both sides with their language token. Tags not in `known` are
/// rejected.
pub fn prepend_language_token(p: &SentencePair, known: &[LanguageTag]) -> Result<TaggedPair, CorpusError> {
    for lang in [&p.src.lang, &p.tgt.lang] {
        if !known.contains(lang) {
            return Err(CorpusError::UnknownLanguage(lang.clone()));
        }
    }
    let tag = |s: &Sentence| std::iter::once(s.lang.token()).chain(s.tokens.iter().cloned()).collect::<Vec<_>>();
    Ok(TaggedPair {
        src: tag(&p.src),
        tgt: tag(&p.tgt),
        src_lang: p.src.lang.clone(),
        tgt_lang: p.tgt.lang.clone(),
        origin: p.origin,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub max_tokens: usize,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { max_tokens: DEFAULT_MAX_TOKENS }
    }
}

fn count_lines(path: &Path) -> Result<usize, CorpusError> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut n = 0;
    for line in BufReader::new(f).lines() {
        line.map_err(io_err(path))?;
        n += 1;
    }
    Ok(n)
}

fn parse_line(path: &Path, line_no: usize, lang: &LanguageTag, line: &str) -> Result<Sentence, CorpusError> {
    let tokens: Vec<String> = line.split_whitespace().map(str::to_owned).collect();
    if tokens.is_empty() {
        return Err(CorpusError::EmptyLine { path: path.to_path_buf(), line: line_no });
    }
    if let Some(t) = tokens.iter().find(|t| is_reserved_token(t)) {
        return Err(CorpusError::ReservedToken { path: path.to_path_buf(), line: line_no, token: t.clone() });
    }
    Ok(Sentence { lang: lang.clone(), tokens })
}

struct LineSource {
    path: PathBuf,
    lines: Lines<BufReader<File>>,
}

impl LineSource {
    fn open(path: &Path) -> Result<Self, CorpusError> {
        let f = File::open(path).map_err(io_err(path))?;
        Ok(LineSource { path: path.to_path_buf(), lines: BufReader::new(f).lines() })
    }

    fn next_line(&mut self) -> Option<Result<String, CorpusError>> {
        self.lines.next().map(|r| r.map_err(|source| CorpusError::Io { path: self.path.clone(), source }))
    }
}

/// Lazily yields aligned pairs in file order. Over-long pairs are skipped and
/// counted in [`ParallelStream::dropped`].
pub struct ParallelStream {
    src: LineSource,
    tgt: LineSource,
    src_lang: LanguageTag,
    tgt_lang: LanguageTag,
    line: usize,
    dropped: usize,
    opts: LoadOptions,
}

impl ParallelStream {
    pub fn dropped(&self) -> usize {
        self.dropped
    }
}

impl Iterator for ParallelStream {
    type Item = Result<SentencePair, CorpusError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let (s, t) = match (self.src.next_line()?, self.tgt.next_line()?) {
                (Ok(s), Ok(t)) => (s, t),
                (Err(e), _) | (_, Err(e)) => return Some(Err(e)),
            };
            self.line += 1;
            let src = match parse_line(&self.src.path, self.line, &self.src_lang, &s) {
                Ok(v) => v,
                Err(e) => return Some(Err(e)),
            };
            let tgt = match parse_line(&self.tgt.path, self.line, &self.tgt_lang, &t) {
                Ok(v) => v,
                Err(e) => return Some(Err(e)),
            };
            if src.len() > self.opts.max_tokens || tgt.len() > self.opts.max_tokens {
                self.dropped += 1;
                continue;
            }
            return Some(Ok(SentencePair::bilingual(src, tgt)));
        }
    }
}

/// Opens an aligned pair of files. Line counts are checked up front.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    src_lang: &LanguageTag,
    tgt_lang: &LanguageTag,
    opts: LoadOptions,
) -> Result<ParallelStream, CorpusError> {
    let (src_lines, tgt_lines) = (count_lines(src_path)?, count_lines(tgt_path)?);
    if src_lines != tgt_lines {
        return Err(CorpusError::LineCountMismatch {
            src: src_path.to_path_buf(),
            tgt: tgt_path.to_path_buf(),
            src_lines,
            tgt_lines,
        });
    }
    Ok(ParallelStream {
        src: LineSource::open(src_path)?,
        tgt: LineSource::open(tgt_path)?,
        src_lang: src_lang.clone(),
        tgt_lang: tgt_lang.clone(),
        line: 0,
        dropped: 0,
        opts,
    })
}

/// Reads a monolingual file; returns the sentences and the over-length count.
pub fn load_monolingual(
    path: &Path,
    lang: &LanguageTag,
    opts: LoadOptions,
) -> Result<(Vec<Sentence>, usize), CorpusError> {
    let mut src = LineSource::open(path)?;
    let mut out = Vec::new();
    let (mut line, mut dropped) = (0, 0);
    while let Some(l) = src.next_line() {
        line += 1;
        let s = parse_line(path, line, lang, &l?)?;
        if s.len() > opts.max_tokens {
            dropped += 1;
        } else {
            out.push(s);
        }
    }
    Ok((out, dropped))
}

fn write_lines<'a>(path: &Path, sentences: impl Iterator<Item = &'a Sentence>) -> Result<(), CorpusError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for s in sentences {
        writeln!(w, "{}", s.text()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Writes both sides of a parallel corpus, one sentence per line.
pub fn write_parallel(pairs: &[SentencePair], src_path: &Path, tgt_path: &Path) -> Result<(), CorpusError> {
    write_lines(src_path, pairs.iter().map(|p| &p.src))?;
    write_lines(tgt_path, pairs.iter().map(|p| &p.tgt))
}

pub fn write_monolingual(sentences: &[Sentence], path: &Path) -> Result<(), CorpusError> {
    write_lines(path, sentences.iter())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusKind {
    Bilingual,
    Monolingual,
}

/// One corpus in a run manifest. Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub src: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tgt: Option<PathBuf>,
    pub src_lang: LanguageTag,
    pub tgt_lang: LanguageTag,
    pub kind: CorpusKind,
    pub count: usize,
}

/// The list of corpora for a run, stored as TOML:
///
/// ```toml
/// [[entry]]
/// src = "train.en-de.en"
/// tgt = "train.en-de.de"
/// src_lang = "en"
/// tgt_lang = "de"
/// kind = "bilingual"
/// count = 2000
/// ```
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    #[serde(rename = "entry", default)]
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// Corpora loaded from a manifest, in entry order.
#[derive(Debug, Clone)]
pub struct LoadedCorpus {
    pub entry: ManifestEntry,
    pub pairs: Vec<SentencePair>,
    pub dropped: usize,
}

impl CorpusManifest {
    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let mut m: CorpusManifest = toml::from_str(&text).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        for e in &m.entries {
            match (e.kind, &e.tgt) {
                (CorpusKind::Bilingual, None) => {
                    return Err(CorpusError::Manifest(format!("{}: bilingual entry without tgt", e.src.display())))
                }
                (CorpusKind::Monolingual, _) if e.src_lang != e.tgt_lang => {
                    return Err(CorpusError::Manifest(format!(
                        "{}: monolingual entry with different languages",
                        e.src.display()
                    )))
                }
                _ => {}
            }
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let text = toml::to_string(self).map_err(|e| CorpusError::Manifest(e.to_string()))?;
        std::fs::write(path, text).map_err(io_err(path))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Every language used by any entry, sorted.
    pub fn languages(&self) -> Vec<LanguageTag> {
        let mut langs: Vec<LanguageTag> =
            self.entries.iter().flat_map(|e| [e.src_lang.clone(), e.tgt_lang.clone()]).collect();
        langs.sort();
        langs.dedup();
        langs
    }

    /// Checks each entry's `count` against its file line counts.
    pub fn validate_counts(&self) -> Result<(), CorpusError> {
        for e in &self.entries {
            let mut paths = vec![self.resolve(&e.src)];
            paths.extend(e.tgt.as_ref().map(|t| self.resolve(t)));
            for p in paths {
                let n = count_lines(&p)?;
                if n != e.count {
                    return Err(CorpusError::Manifest(format!(
                        "{}: manifest count {} but file has {n} lines",
                        p.display(),
                        e.count
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads every entry; monolingual entries become pseudo pairs.
    pub fn load_all(&self, opts: LoadOptions) -> Result<Vec<LoadedCorpus>, CorpusError> {
        self.validate_counts()?;
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let src = self.resolve(&e.src);
            let (pairs, dropped) = match (e.kind, &e.tgt) {
                (CorpusKind::Bilingual, Some(tgt)) => {
                    let mut stream = load_parallel(&src, &self.resolve(tgt), &e.src_lang, &e.tgt_lang, opts)?;
                    let pairs = stream.by_ref().collect::<Result<Vec<_>, _>>()?;
                    (pairs, stream.dropped())
                }
                _ => {
                    let (sents, dropped) = load_monolingual(&src, &e.src_lang, opts)?;
                    (sents.into_iter().map(monolingual_to_pseudo_pair).collect(), dropped)
                }
            };
            out.push(LoadedCorpus { entry: e.clone(), pairs, dropped });
        }
        Ok(out)
    }
}
