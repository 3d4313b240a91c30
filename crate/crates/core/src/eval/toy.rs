//! Synthetic translation task: a small English fragment and three cipher
//! "languages" built from it by word substitution and reordering.
//!
//! * `xa`: adjectives follow their noun.
//! * `xb`: verb-final clauses.
//! * `xc`: adjectives follow their noun, adverbs come first.
//!
//! The substitution tables double as a bilingual lexicon; a fraction of
//! entries is held out so dictionary coverage is partial. `en`–`xa` and
//! `en`–`xb` are the high-resource pairs; `xc` only has monolingual text
//! plus a small fine-tuning set for `xc → en`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::workload::WorkloadFile;
use super::EvalError;
use crate::corpus::{
    write_monolingual, write_parallel, CorpusKind, CorpusManifest, LanguageTag, LoadedCorpus, ManifestEntry, Sentence,
    SentencePair,
};
use crate::lexicon::Lexicon;
use crate::seed;

const DETS: &[&str] = &["the", "a"];
const ADJS: &[&str] = &["big", "small", "red", "old", "young", "happy", "quiet", "green"];
const NOUNS: &[&str] =
    &["cat", "dog", "bird", "child", "farmer", "teacher", "river", "house", "garden", "tree", "book", "apple"];
const VERBS: &[&str] = &["sees", "likes", "finds", "takes", "helps", "watches", "follows", "paints"];
const PREPS: &[&str] = &["near", "behind", "under", "with"];
const ADVS: &[&str] = &["today", "often", "slowly", "again"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pos {
    Det,
    Adj,
    Noun,
    Verb,
    Prep,
    Adv,
}

type Word = (&'static str, Pos);

/// A parsed English sentence: subject, verb, object, optional PP and adverb.
#[derive(Debug, Clone)]
struct Clause {
    subj: Vec<Word>,
    verb: Word,
    obj: Vec<Word>,
    pp: Vec<Word>,
    adv: Option<Word>,
}

fn pick(rng: &mut ChaCha8Rng, words: &'static [&'static str]) -> &'static str {
    words[rng.gen_range(0..words.len())]
}

fn noun_phrase(rng: &mut ChaCha8Rng) -> Vec<Word> {
    let mut np = vec![(pick(rng, DETS), Pos::Det)];
    if rng.gen_bool(0.5) {
        np.push((pick(rng, ADJS), Pos::Adj));
    }
    np.push((pick(rng, NOUNS), Pos::Noun));
    np
}

fn clause(rng: &mut ChaCha8Rng) -> Clause {
    let subj = noun_phrase(rng);
    let verb = (pick(rng, VERBS), Pos::Verb);
    let obj = noun_phrase(rng);
    let pp = if rng.gen_bool(0.3) {
        let mut pp = vec![(pick(rng, PREPS), Pos::Prep)];
        pp.extend(noun_phrase(rng));
        pp
    } else {
        Vec::new()
    };
    let adv = rng.gen_bool(0.3).then(|| (pick(rng, ADVS), Pos::Adv));
    Clause { subj, verb, obj, pp, adv }
}

fn adj_after_noun(np: &[Word]) -> Vec<Word> {
    let mut out: Vec<Word> = np.iter().filter(|w| w.1 != Pos::Adj).copied().collect();
    out.extend(np.iter().filter(|w| w.1 == Pos::Adj));
    out
}

fn order(c: &Clause, lang: &str) -> Vec<Word> {
    let mut out = Vec::new();
    match lang {
        "xa" => {
            out.extend(adj_after_noun(&c.subj));
            out.push(c.verb);
            out.extend(adj_after_noun(&c.obj));
            out.extend(adj_after_noun(&c.pp));
            out.extend(c.adv);
        }
        "xb" => {
            out.extend(&c.subj);
            out.extend(&c.obj);
            out.extend(&c.pp);
            out.push(c.verb);
            out.extend(c.adv);
        }
        "xc" => {
            out.extend(c.adv);
            out.extend(adj_after_noun(&c.subj));
            out.push(c.verb);
            out.extend(adj_after_noun(&c.obj));
            out.extend(adj_after_noun(&c.pp));
        }
        _ => {
            out.extend(&c.subj);
            out.push(c.verb);
            out.extend(&c.obj);
            out.extend(&c.pp);
            out.extend(c.adv);
        }
    }
    out
}

pub const CIPHERS: [&str; 3] = ["xa", "xb", "xc"];

/// Sizes and seed of a generated task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySpec {
    pub seed: u64,
    /// Pairs for each of `en–xa` and `en–xb`.
    pub bilingual_pairs: usize,
    /// Sentences for each of `en`, `xa`, `xb`, `xc`.
    pub monolingual: usize,
    /// `xc → en` fine-tuning pairs.
    pub finetune_pairs: usize,
    pub test_pairs: usize,
    /// Fraction of dictionary entries withheld from the lexicon.
    pub lexicon_holdout: f64,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            seed: 0,
            bilingual_pairs: 1200,
            monolingual: 600,
            finetune_pairs: 200,
            test_pairs: 200,
            lexicon_holdout: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub spec: ToySpec,
    /// Pre-training corpora, in manifest order.
    pub corpora: Vec<LoadedCorpus>,
    pub lexicon: Lexicon,
    pub finetune: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
    /// Full substitution table per cipher: English word → cipher word.
    pub ciphers: BTreeMap<String, BTreeMap<String, String>>,
}

fn tag(code: &str) -> LanguageTag {
    LanguageTag::new(code).expect("static language code")
}

fn all_english_words() -> Vec<&'static str> {
    [DETS, ADJS, NOUNS, VERBS, PREPS, ADVS].concat()
}

fn pseudo_words(rng: &mut ChaCha8Rng, n: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.gen_range(2..=3);
        let w: String = (0..syllables)
            .flat_map(|_| [CONS[rng.gen_range(0..CONS.len())] as char, VOWELS[rng.gen_range(0..VOWELS.len())] as char])
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl ToyTask {
    pub fn generate(spec: &ToySpec) -> Self {
        let mut rng = seed::rng(&[spec.seed, 0x746f79]);
        let english = all_english_words();
        let mut taken: BTreeSet<String> = english.iter().map(|w| w.to_string()).collect();
        let mut ciphers = BTreeMap::new();
        for lang in CIPHERS {
            let words = pseudo_words(&mut rng, english.len(), &mut taken);
            let table: BTreeMap<String, String> = english.iter().map(|w| w.to_string()).zip(words).collect();
            ciphers.insert(lang.to_string(), table);
        }

        let render = |c: &Clause, lang: &str| -> Sentence {
            let words = order(c, lang)
                .into_iter()
                .map(|(w, _)| match lang {
                    "en" => w.to_string(),
                    l => ciphers[l][w].clone(),
                })
                .collect();
            Sentence::new(tag(lang), words)
        };

        // held-out evaluation clauses first, so nothing else repeats them
        let mut seen = BTreeSet::new();
        let fresh = |rng: &mut ChaCha8Rng, seen: &mut BTreeSet<String>| loop {
            let c = clause(rng);
            let key = render(&c, "en").text();
            if seen.insert(key) {
                return c;
            }
        };
        let test_clauses: Vec<Clause> = (0..spec.test_pairs).map(|_| fresh(&mut rng, &mut seen)).collect();
        let ft_clauses: Vec<Clause> = (0..spec.finetune_pairs).map(|_| fresh(&mut rng, &mut seen)).collect();
        let pair = |c: &Clause, s: &str, t: &str| SentencePair::bilingual(render(c, s), render(c, t));
        let test = test_clauses.iter().map(|c| pair(c, "xc", "en")).collect();
        let finetune = ft_clauses.iter().map(|c| pair(c, "xc", "en")).collect();

        let draw = |rng: &mut ChaCha8Rng| loop {
            let c = clause(rng);
            if !seen.contains(&render(&c, "en").text()) {
                return c;
            }
        };
        let mut corpora = Vec::new();
        for lang in ["xa", "xb"] {
            let pairs: Vec<SentencePair> =
                (0..spec.bilingual_pairs).map(|_| pair(&draw(&mut rng), "en", lang)).collect();
            corpora.push(LoadedCorpus {
                entry: ManifestEntry {
                    src: PathBuf::from(format!("train.en-{lang}.en")),
                    tgt: Some(PathBuf::from(format!("train.en-{lang}.{lang}"))),
                    src_lang: tag("en"),
                    tgt_lang: tag(lang),
                    kind: CorpusKind::Bilingual,
                    count: pairs.len(),
                },
                pairs,
                dropped: 0,
            });
        }
        for lang in ["en", "xa", "xb", "xc"] {
            let pairs: Vec<SentencePair> = (0..spec.monolingual)
                .map(|_| crate::corpus::monolingual_to_pseudo_pair(render(&draw(&mut rng), lang)))
                .collect();
            corpora.push(LoadedCorpus {
                entry: ManifestEntry {
                    src: PathBuf::from(format!("mono.{lang}")),
                    tgt: None,
                    src_lang: tag(lang),
                    tgt_lang: tag(lang),
                    kind: CorpusKind::Monolingual,
                    count: pairs.len(),
                },
                pairs,
                dropped: 0,
            });
        }

        let mut lexicon = Lexicon::new();
        for (lang, table) in &ciphers {
            let mut entries: Vec<(&String, &String)> = table.iter().collect();
            entries.shuffle(&mut rng);
            let keep = entries.len() - (spec.lexicon_holdout * entries.len() as f64).round() as usize;
            for (en, x) in entries.into_iter().take(keep) {
                lexicon.insert(&tag("en"), &tag(lang), en, x);
            }
        }

        ToyTask { spec: spec.clone(), corpora, lexicon, finetune, test, ciphers }
    }

    /// Writes corpora, `manifest.toml`, `lexicon/<a>-<b>.txt`, and the
    /// fine-tuning and test sets (`finetune.xc`/`.en`, `test.xc`/`.en`),
    /// and `workload.toml` tying them together. Returns the workload path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf, EvalError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| EvalError::Io { path, source }
        };
        std::fs::create_dir_all(dir.join("lexicon")).map_err(io(dir))?;
        for c in &self.corpora {
            let src = dir.join(&c.entry.src);
            match &c.entry.tgt {
                Some(tgt) => write_parallel(&c.pairs, &src, &dir.join(tgt))?,
                None => {
                    let sents: Vec<Sentence> = c.pairs.iter().map(|p| p.src.clone()).collect();
                    write_monolingual(&sents, &src)?;
                }
            }
        }
        let manifest = CorpusManifest {
            entries: self.corpora.iter().map(|c| c.entry.clone()).collect(),
            base_dir: dir.to_path_buf(),
        };
        manifest.save(&dir.join("manifest.toml"))?;
        for lang in self.ciphers.keys() {
            let path = dir.join("lexicon").join(format!("en-{lang}.txt"));
            self.lexicon.write_pair(&tag("en"), &tag(lang), &path)?;
        }
        write_parallel(&self.finetune, &dir.join("finetune.xc"), &dir.join("finetune.en"))?;
        write_parallel(&self.test, &dir.join("test.xc"), &dir.join("test.en"))?;
        let workload = WorkloadFile {
            manifest: PathBuf::from("manifest.toml"),
            lexicon: PathBuf::from("lexicon"),
            src_lang: tag("xc"),
            tgt_lang: tag("en"),
            finetune_src: PathBuf::from("finetune.xc"),
            finetune_tgt: PathBuf::from("finetune.en"),
            test_src: PathBuf::from("test.xc"),
            test_tgt: PathBuf::from("test.en"),
            base_dir: dir.to_path_buf(),
        };
        let path = dir.join("workload.toml");
        workload.save(&path)?;
        Ok(path)
    }

    /// Fraction of `xc` test source tokens the lexicon can translate.
    pub fn lexicon_coverage(&self) -> f64 {
        let (mut hit, mut total) = (0usize, 0usize);
        for p in &self.test {
            for w in &p.src.tokens {
                total += 1;
                if self.lexicon.has_cross_lingual(w, &p.src.lang) {
                    hit += 1;
                }
            }
        }
        hit as f64 / total.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToySpec {
        ToySpec { bilingual_pairs: 50, monolingual: 20, finetune_pairs: 10, test_pairs: 10, ..ToySpec::default() }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let a = ToyTask::generate(&small());
        let b = ToyTask::generate(&small());
        assert_eq!(a.test, b.test);
        assert_eq!(a.corpora[0].pairs, b.corpora[0].pairs);
        let test_en: BTreeSet<String> = a.test.iter().map(|p| p.tgt.text()).collect();
        for c in &a.corpora {
            for p in &c.pairs {
                if p.src.lang.code() == "en" {
                    assert!(!test_en.contains(&p.src.text()));
                }
            }
        }
        for p in &a.finetune {
            assert!(!test_en.contains(&p.tgt.text()));
        }
    }

    #[test]
    fn cipher_orders() {
        let t = ToyTask::generate(&small());
        let xa = &t.ciphers["xa"];
        // every xa sentence is a reordering of the substituted English words
        for p in &t.corpora[0].pairs {
            let mut want: Vec<&String> = p.src.tokens.iter().map(|w| &xa[w]).collect();
            let mut got: Vec<&String> = p.tgt.tokens.iter().collect();
            want.sort();
            got.sort();
            assert_eq!(want, got);
        }
        let c = Clause {
            subj: vec![("the", Pos::Det), ("big", Pos::Adj), ("cat", Pos::Noun)],
            verb: ("sees", Pos::Verb),
            obj: vec![("a", Pos::Det), ("dog", Pos::Noun)],
            pp: Vec::new(),
            adv: Some(("today", Pos::Adv)),
        };
        let words = |l: &str| order(&c, l).into_iter().map(|w| w.0).collect::<Vec<_>>().join(" ");
        assert_eq!(words("en"), "the big cat sees a dog today");
        assert_eq!(words("xa"), "the cat big sees a dog today");
        assert_eq!(words("xb"), "the big cat a dog sees today");
        assert_eq!(words("xc"), "today the cat big sees a dog");
    }

    #[test]
    fn write_and_read_back() {
        let t = ToyTask::generate(&small());
        let dir = tempfile::tempdir().unwrap();
        let path = t.write(dir.path()).unwrap();
        let w = WorkloadFile::load(&path).unwrap().read().unwrap();
        assert_eq!(w.test, t.test);
        assert_eq!(w.finetune, t.finetune);
        assert_eq!(w.corpora.len(), t.corpora.len());
        for (a, b) in w.corpora.iter().zip(&t.corpora) {
            assert_eq!(a.pairs, b.pairs);
        }
        assert_eq!(w.lexicon, t.lexicon);
    }

    #[test]
    fn lexicon_holdout() {
        let t = ToyTask::generate(&small());
        let n = all_english_words().len();
        let kept = n - (0.3 * n as f64).round() as usize;
        for lang in CIPHERS {
            assert_eq!(t.lexicon.entry_count(&tag("en"), &tag(lang)), kept);
        }
        let cov = t.lexicon_coverage();
        assert!(cov > 0.4 && cov < 0.95, "coverage {cov}");
    }
}
