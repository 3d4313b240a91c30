use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use cemat::corpus::{
    load_monolingual, load_parallel, CorpusManifest, LanguageTag, LoadOptions, LoadedCorpus, Sentence,
};
use cemat::decoding::{translate_at as decode_at, translate_nat as decode_nat, LengthMode};
use cemat::eval::{
    ablation_run, bleu, curve_csv, iteration_curve, learn_toy_vocab, AblationCell, ToySpec, ToyTask, Workload,
    WorkloadFile,
};
use cemat::lexicon::{load_lexicon_dir, Lexicon};
use cemat::masking::MaskingStats;
use cemat::model::ModelParams;
use cemat::training::{
    Checkpoint, EncodedPair, MetricRow, PairSource, PretrainSource, Task, TrainConfig, TrainState, Trainer,
};
use cemat::vocab::Vocabulary;

use crate::config::{parse_assignment, parse_lines, RunConfig};
use crate::run_dir::{self, RunDir};
use crate::{ConfigArgs, FinetuneArgs, NumericError, PretrainData, RunArgs, TranslateArgs, UsageError};

fn effective(args: &ConfigArgs) -> Result<RunConfig> {
    let mut pairs = Vec::new();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        pairs = parse_lines(&text, &path.display().to_string())?;
    }
    for s in &args.set {
        pairs.push(parse_assignment(s)?);
    }
    let mut cfg = RunConfig::preset(&args.preset)?.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn lang(code: &str) -> Result<LanguageTag> {
    LanguageTag::new(code).map_err(|e| UsageError(e.to_string()).into())
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(path).with_context(|| format!("loading vocabulary {}", path.display()))
}

fn load_corpora(manifest: &Path) -> Result<Vec<LoadedCorpus>> {
    let m = CorpusManifest::load(manifest).with_context(|| format!("loading manifest {}", manifest.display()))?;
    Ok(m.load_all(LoadOptions::default())?)
}

fn load_lexicon(dir: &Path) -> Result<Lexicon> {
    let (lex, reports) = load_lexicon_dir(dir).with_context(|| format!("loading lexicon {}", dir.display()))?;
    for r in reports {
        log::info!("lexicon {}-{}: {} unique of {} lines", r.src_lang.code(), r.tgt_lang.code(), r.unique, r.lines);
    }
    Ok(lex)
}

fn csv_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',').map(|p| p.trim().parse::<T>().map_err(|_| UsageError(format!("bad {what} {p:?}")).into())).collect()
}

/// A checkpoint directory, or a run directory whose latest checkpoint is used.
fn checkpoint_path(path: &Path) -> Result<PathBuf> {
    if path.join("manifest.json").exists() {
        return Ok(path.to_path_buf());
    }
    if path.join("checkpoints").is_dir() {
        let mut steps: Vec<PathBuf> = std::fs::read_dir(path.join("checkpoints"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("manifest.json").exists())
            .collect();
        steps.sort();
        if let Some(last) = steps.pop() {
            return Ok(last);
        }
    }
    bail!(UsageError(format!("{} is not a checkpoint or run directory", path.display())))
}

fn load_model(path: &Path, vocab: &Vocabulary) -> Result<ModelParams<f32>> {
    let dir = checkpoint_path(path)?;
    let (manifest, params) = Checkpoint::load_params(&dir)?;
    if manifest.vocab_fingerprint != vocab.fingerprint() {
        bail!("checkpoint {} was trained with a different vocabulary", dir.display());
    }
    Ok(params)
}

pub fn make_toy(
    out: &Path,
    seed: u64,
    bilingual: Option<usize>,
    monolingual: Option<usize>,
    finetune: Option<usize>,
    test: Option<usize>,
) -> Result<()> {
    let d = ToySpec::default();
    let spec = ToySpec {
        seed,
        bilingual_pairs: bilingual.unwrap_or(d.bilingual_pairs),
        monolingual: monolingual.unwrap_or(d.monolingual),
        finetune_pairs: finetune.unwrap_or(d.finetune_pairs),
        test_pairs: test.unwrap_or(d.test_pairs),
        ..d
    };
    let task = ToyTask::generate(&spec);
    let path = task.write(out)?;
    println!("{}", path.display());
    eprintln!("lexicon covers {:.1}% of test source tokens", 100.0 * task.lexicon_coverage());
    Ok(())
}

pub fn learn_vocab(manifest: &Path, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = effective(args)?;
    let corpora = load_corpora(manifest)?;
    let vocab = learn_toy_vocab(&corpora, &cfg.experiment, cfg.seed)?;
    vocab.save(out)?;
    eprintln!("{} tokens, {} merges", vocab.len(), vocab.merges().len());
    Ok(())
}

fn pretrain_source<'a>(
    cfg: &RunConfig,
    corpora: &[LoadedCorpus],
    vocab: &'a Vocabulary,
    lexicon: &'a Lexicon,
) -> Result<PretrainSource<'a>> {
    let e = &cfg.experiment;
    Ok(PretrainSource::new(
        corpora,
        vocab,
        lexicon,
        e.masking.clone(),
        &e.balancing,
        cfg.regime,
        e.pretrain.batch_tokens,
        cfg.seed,
    )?)
}

pub fn preprocess(data: &PretrainData, out: &Path, epoch: u64, args: &ConfigArgs) -> Result<()> {
    let cfg = effective(args)?;
    let (vocab, lexicon, corpora) =
        (load_vocab(&data.vocab)?, load_lexicon(&data.lexicon)?, load_corpora(&data.manifest)?);
    let source = pretrain_source(&cfg, &corpora, &vocab, &lexicon)?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    let mut n = 0usize;
    for s in 0..source.stream_count() {
        for line in 0..source.stream_len(s) {
            let ex = source.example(s, line, epoch)?;
            serde_json::to_writer(&mut w, &ex)?;
            writeln!(w)?;
            n += 1;
        }
    }
    w.flush()?;
    eprintln!("{n} examples");
    Ok(())
}

pub fn stats(data: &PretrainData, epoch: u64, args: &ConfigArgs) -> Result<()> {
    let cfg = effective(args)?;
    let (vocab, lexicon, corpora) =
        (load_vocab(&data.vocab)?, load_lexicon(&data.lexicon)?, load_corpora(&data.manifest)?);
    let source = pretrain_source(&cfg, &corpora, &vocab, &lexicon)?;
    let mut stats = MaskingStats::default();
    for s in 0..source.stream_count() {
        for line in 0..source.stream_len(s) {
            stats.add(&source.example(s, line, epoch)?);
        }
    }
    print!("{}", stats.report());
    Ok(())
}

fn open_run(run: &RunArgs, args: &ConfigArgs, name: &str) -> Result<(RunDir, RunConfig)> {
    if run.resume {
        if args.config.is_some() || !args.set.is_empty() || args.seed.is_some() {
            bail!(UsageError("--resume uses the run's snapshot; drop --config, --set and --seed".into()));
        }
        let path = run.run_dir.clone().ok_or_else(|| UsageError("--resume needs --run-dir".into()))?;
        RunDir::resume(&path)
    } else {
        let cfg = effective(args)?;
        let path = run_dir::resolve(run.run_dir.as_deref(), &format!("{name}-seed{}", cfg.seed));
        let dir = RunDir::create(&path, &cfg)?;
        Ok((dir, cfg))
    }
}

/// Latest checkpoint of a resumed run, checked against the vocabulary.
fn resume_state(dir: &RunDir, vocab: &Vocabulary) -> Result<Option<TrainState>> {
    let Some(ckpt) = dir.latest_checkpoint()? else {
        return Ok(None);
    };
    let (manifest, state) = Checkpoint::load_state(&ckpt)?;
    if manifest.vocab_fingerprint != vocab.fingerprint() {
        bail!("{} was trained with a different vocabulary", ckpt.display());
    }
    Ok(Some(state))
}

fn train_loop(dir: &mut RunDir, trainer: &mut Trainer<'_, '_>, every: u64, fingerprint: u64) -> Result<()> {
    let start = trainer.state.step;
    let total = trainer.cfg.total_steps;
    dir.log(&format!("{:?}: steps {}..{total}", trainer.task, start + 1))?;
    let mut metrics = dir.metrics(start)?;
    let log_every = (total / 20).max(1);
    let mut last: Option<MetricRow> = None;
    while !trainer.done() {
        let row = trainer.step()?;
        metrics.write(&row)?;
        if row.step % log_every == 0 {
            dir.log(&format!(
                "step {} lr {:.3e} loss {:.4} cmlm {:.4} mlm {:.4} length {:.4}",
                row.step, row.lr, row.loss, row.cmlm, row.mlm, row.length
            ))?;
        }
        if every > 0 && row.step % every == 0 && row.step < total {
            trainer.checkpoint(fingerprint).save(&dir.checkpoint_dir(row.step), &trainer.state)?;
        }
        last = Some(row);
    }
    if !trainer.state.params.all_finite() || last.is_some_and(|r| !r.loss.is_finite()) {
        bail!(NumericError(format!(
            "training diverged (non-finite loss or parameters); {} updates skipped",
            trainer.state.skipped
        )));
    }
    let final_dir = dir.checkpoint_dir(trainer.state.step);
    if !final_dir.join("manifest.json").exists() {
        trainer.checkpoint(fingerprint).save(&final_dir, &trainer.state)?;
    }
    if trainer.state.skipped > 0 {
        dir.log(&format!("{} updates skipped for non-finite gradients", trainer.state.skipped))?;
    }
    Ok(())
}

fn finish(dir: RunDir) -> Result<()> {
    let path = dir.path.clone();
    dir.finish(None)?;
    println!("{}", path.display());
    Ok(())
}

pub fn pretrain(data: &PretrainData, run: &RunArgs, args: &ConfigArgs) -> Result<()> {
    let (mut dir, cfg) = open_run(run, args, "pretrain")?;
    let (vocab, lexicon, corpora) =
        (load_vocab(&data.vocab)?, load_lexicon(&data.lexicon)?, load_corpora(&data.manifest)?);
    let source = pretrain_source(&cfg, &corpora, &vocab, &lexicon)?;
    let tc = TrainConfig { seed: cfg.seed, ..cfg.experiment.pretrain.clone() };
    let state = match resume_state(&dir, &vocab)? {
        Some(s) => s,
        None => TrainState::new(ModelParams::init(&cfg.experiment.model_for(&vocab), cfg.seed)?, &tc),
    };
    dir.log(&format!(
        "{} streams, {} examples, {} parameters",
        source.stream_count(),
        source.len(),
        state.params.scalar_count()
    ))?;
    let mut trainer = Trainer::pretrain(tc, state, &source)?;
    train_loop(&mut dir, &mut trainer, cfg.checkpoint_every, vocab.fingerprint())?;
    finish(dir)
}

fn read_pairs(p: &crate::PairFiles) -> Result<Vec<cemat::corpus::SentencePair>> {
    let stream = load_parallel(&p.src, &p.tgt, &lang(&p.src_lang)?, &lang(&p.tgt_lang)?, LoadOptions::default())?;
    Ok(stream.collect::<Result<Vec<_>, _>>()?)
}

pub fn finetune(task: Task, a: &FinetuneArgs) -> Result<()> {
    let name = match task {
        Task::FinetuneAt => "finetune-at",
        _ => "finetune-nat",
    };
    let (mut dir, cfg) = open_run(&a.run, &a.cfg, name)?;
    let vocab = load_vocab(&a.vocab)?;
    let pairs = read_pairs(&a.pairs)?;
    let encoded = pairs.iter().map(|p| EncodedPair::encode(&vocab, p)).collect::<Result<Vec<_>, _>>()?;
    let base = if task == Task::FinetuneAt { &cfg.experiment.finetune } else { &cfg.experiment.finetune_nat };
    let tc = TrainConfig { seed: cfg.seed, ..base.clone() };
    let source = PairSource::new(encoded, tc.batch_tokens, cfg.seed)?;
    let state = match resume_state(&dir, &vocab)? {
        Some(s) => s,
        None => {
            let params = if a.init == "none" {
                dir.log("initialised from scratch")?;
                ModelParams::init(&cfg.experiment.model_for(&vocab), cfg.seed)?
            } else {
                let path = PathBuf::from(&a.init);
                let params = load_model(&path, &vocab)?;
                dir.log(&format!("initialised from {}", checkpoint_path(&path)?.display()))?;
                params
            };
            TrainState::new(params, &tc)
        }
    };
    let mut trainer = Trainer::finetune(tc, task, state, &source)?;
    train_loop(&mut dir, &mut trainer, cfg.checkpoint_every, vocab.fingerprint())?;
    finish(dir)
}

fn read_input(path: &Path, code: &str) -> Result<Vec<Sentence>> {
    let opts = LoadOptions { max_tokens: usize::MAX };
    Ok(load_monolingual(path, &lang(code)?, opts)?.0)
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

pub fn translate_at(a: &TranslateArgs) -> Result<()> {
    let cfg = effective(&a.cfg)?;
    let vocab = load_vocab(&a.vocab)?;
    let params = load_model(&a.checkpoint, &vocab)?;
    let tag = vocab
        .tag_id(&lang(&a.tgt_lang)?)
        .ok_or_else(|| UsageError(format!("{} is not in the vocabulary", a.tgt_lang)))?;
    let mut out = output(a.output.as_deref())?;
    for s in read_input(&a.input, &a.src_lang)? {
        let h = decode_at(&params, &vocab, &vocab.encode(&s)?, tag, &cfg.experiment.decode)?;
        writeln!(out, "{}", vocab.decode_tokens(h.content(), true)?.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

pub fn translate_nat(a: &TranslateArgs, reference: Option<&Path>, dump: Option<&Path>) -> Result<()> {
    let cfg = effective(&a.cfg)?;
    let decode = &cfg.experiment.decode;
    let vocab = load_vocab(&a.vocab)?;
    let params = load_model(&a.checkpoint, &vocab)?;
    let tgt = lang(&a.tgt_lang)?;
    let tag = vocab.tag_id(&tgt).ok_or_else(|| UsageError(format!("{} is not in the vocabulary", a.tgt_lang)))?;
    let inputs = read_input(&a.input, &a.src_lang)?;
    let ref_lens: Option<Vec<usize>> = match (decode.length_mode, reference) {
        (LengthMode::Gold, None) => bail!(UsageError("decode.length_mode=gold needs --reference".into())),
        (LengthMode::Gold, Some(r)) => {
            let refs = read_input(r, &a.tgt_lang)?;
            if refs.len() != inputs.len() {
                bail!("{} inputs but {} references", inputs.len(), refs.len());
            }
            Some(refs.iter().map(|s| vocab.encode(s).map(|ids| ids.len() - 1)).collect::<Result<_, _>>()?)
        }
        (LengthMode::Predicted, _) => None,
    };
    let mut out = output(a.output.as_deref())?;
    let mut trace = dump.map(|p| output(Some(p))).transpose()?;
    for (i, s) in inputs.iter().enumerate() {
        let len = ref_lens.as_ref().map(|l| l[i]);
        let (h, iters) = decode_nat(&params, &vocab, &vocab.encode(s)?, tag, decode, len)?;
        writeln!(out, "{}", vocab.decode_tokens(h.content(), true)?.join(" "))?;
        if let Some(t) = trace.as_mut() {
            let steps: Vec<serde_json::Value> = iters
                .iter()
                .map(|it| {
                    let tokens: Vec<&str> = it.tokens.iter().map(|&id| vocab.token(id).unwrap_or("?")).collect();
                    serde_json::json!({
                        "iteration": it.iteration,
                        "masked": it.masked,
                        "tokens": tokens,
                        "confidences": it.confidences,
                    })
                })
                .collect();
            let line = serde_json::json!({ "line": i + 1, "length": h.tokens.len(), "iterations": steps });
            writeln!(t, "{line}")?;
        }
    }
    out.flush()?;
    if let Some(mut t) = trace {
        t.flush()?;
    }
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_owned).collect())
}

pub fn score_bleu(hyp: &Path, reference: &Path, smooth: bool) -> Result<()> {
    let report = bleu(&read_lines(hyp)?, &read_lines(reference)?, smooth)?;
    println!("{report}");
    Ok(())
}

fn cell(name: &str) -> Result<AblationCell> {
    Ok(match name {
        "full" => AblationCell::full(),
        "no-aligned-cs" => AblationCell::without_code_switching(),
        "no-dynamic" => AblationCell::without_dynamic(),
        "bilingual-only" => AblationCell::bilingual_only(),
        "scratch" => AblationCell::scratch(),
        other => bail!(UsageError(format!("unknown cell {other:?}"))),
    })
}

pub fn ablate(workload: &Path, cells: &str, seeds: &str, out: &Path, args: &ConfigArgs) -> Result<()> {
    let cfg = effective(args)?;
    let cells = cells.split(',').map(|c| cell(c.trim())).collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = csv_list(seeds, "seed")?;
    let w = WorkloadFile::load(workload)?.read()?;
    let vocab = learn_toy_vocab(&w.corpora, &cfg.experiment, cfg.seed)?;
    let work =
        Workload { corpora: &w.corpora, vocab: &vocab, lexicon: &w.lexicon, finetune: &w.finetune, test: &w.test };
    let table = ablation_run(&cfg.experiment, &work, &cells, &seeds, |row| {
        eprintln!("{} seed {}: BLEU {:.2}", row.cell, row.seed, row.bleu);
    })?;
    std::fs::write(out, table.csv()).with_context(|| format!("writing {}", out.display()))?;
    print!("{}", table.csv());
    Ok(())
}

pub fn iter_curve(
    checkpoint: &Path,
    vocab: &Path,
    workload: &Path,
    iterations: &str,
    out: &Path,
    args: &ConfigArgs,
) -> Result<()> {
    let cfg = effective(args)?;
    let ts: Vec<usize> = csv_list(iterations, "iteration count")?;
    if ts.contains(&0) {
        bail!(UsageError("iteration counts must be at least 1".into()));
    }
    let vocab = load_vocab(vocab)?;
    let params = load_model(checkpoint, &vocab)?;
    let w = WorkloadFile::load(workload)?.read()?;
    let curve = iteration_curve(&params, &vocab, &w.test, &ts, &cfg.experiment.decode, cfg.experiment.smooth_bleu)?;
    let csv = curve_csv(&curve);
    std::fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    print!("{csv}");
    Ok(())
}
