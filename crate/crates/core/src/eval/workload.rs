//! `workload.toml`: everything a transfer or ablation experiment reads.
//!
//! ```toml
//! manifest = "manifest.toml"
//! lexicon = "lexicon"
//! src_lang = "xc"
//! tgt_lang = "en"
//! finetune_src = "finetune.xc"
//! finetune_tgt = "finetune.en"
//! test_src = "test.xc"
//! test_tgt = "test.en"
//! ```
//!
//! Relative paths resolve against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::{load_parallel, CorpusManifest, LanguageTag, LoadOptions, LoadedCorpus, SentencePair};
use crate::lexicon::{load_lexicon_dir, Lexicon};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadFile {
    pub manifest: PathBuf,
    pub lexicon: PathBuf,
    pub src_lang: LanguageTag,
    pub tgt_lang: LanguageTag,
    pub finetune_src: PathBuf,
    pub finetune_tgt: PathBuf,
    pub test_src: PathBuf,
    pub test_tgt: PathBuf,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// A workload read into memory.
#[derive(Debug, Clone)]
pub struct LoadedWorkload {
    pub corpora: Vec<LoadedCorpus>,
    pub lexicon: Lexicon,
    pub finetune: Vec<SentencePair>,
    pub test: Vec<SentencePair>,
}

impl WorkloadFile {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })?;
        let mut w: WorkloadFile =
            toml::from_str(&text).map_err(|e| EvalError::Config(format!("{}: {e}", path.display())))?;
        w.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(w)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let text = toml::to_string(self).map_err(|e| EvalError::Config(e.to_string()))?;
        std::fs::write(path, text).map_err(|source| EvalError::Io { path: path.to_path_buf(), source })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn pairs(&self, src: &Path, tgt: &Path) -> Result<Vec<SentencePair>, EvalError> {
        let stream = load_parallel(
            &self.resolve(src),
            &self.resolve(tgt),
            &self.src_lang,
            &self.tgt_lang,
            LoadOptions::default(),
        )?;
        Ok(stream.collect::<Result<Vec<_>, _>>()?)
    }

    pub fn read(&self) -> Result<LoadedWorkload, EvalError> {
        let corpora = CorpusManifest::load(&self.resolve(&self.manifest))?.load_all(LoadOptions::default())?;
        let (lexicon, _) = load_lexicon_dir(&self.resolve(&self.lexicon))?;
        Ok(LoadedWorkload {
            corpora,
            lexicon,
            finetune: self.pairs(&self.finetune_src, &self.finetune_tgt)?,
            test: self.pairs(&self.test_src, &self.test_tgt)?,
        })
    }
}
