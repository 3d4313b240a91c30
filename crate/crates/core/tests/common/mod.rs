//! Fixtures and criterion checks shared by the integration tests and the
//! acceptance report.
#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fmt;

use cemat::corpus::{CorpusKind, SentencePair};
use cemat::decoding::{beam_search, greedy, mask_predict, DecodeError, MaskScorer, StepScorer};
use cemat::eval::{bleu, learn_toy_vocab, ExperimentConfig, ToySpec, ToyTask};
use cemat::masking::{apply_cs, apply_dm, cs_cap, MaskedExample, MaskingPolicy, MaskingStats};
use cemat::model::{Forward, Head, ModelConfig, ModelParams, Padded};
use cemat::training::{pretrain_loss, Denominators};
use cemat::vocab::{PieceTable, TokenId, Vocabulary, EOS_ID, MASK_ID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Result of one acceptance check.
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome { pass, detail: detail.into() }
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", if self.pass { "PASS" } else { "FAIL" }, self.detail)
    }
}

/// A small cipher task with its vocabulary.
pub struct Fixture {
    pub task: ToyTask,
    pub vocab: Vocabulary,
}

impl Fixture {
    pub fn small(seed: u64) -> Self {
        let task = ToyTask::generate(&ToySpec {
            seed,
            bilingual_pairs: 300,
            monolingual: 150,
            finetune_pairs: 64,
            test_pairs: 32,
            ..ToySpec::default()
        });
        let vocab = learn_toy_vocab(&task.corpora, &ExperimentConfig::toy(), seed).unwrap();
        Fixture { task, vocab }
    }

    pub fn pieces(&self) -> PieceTable<'_> {
        let words = self
            .task
            .corpora
            .iter()
            .flat_map(|c| c.pairs.iter())
            .flat_map(|p| p.src.tokens.iter().chain(&p.tgt.tokens))
            .map(String::as_str)
            .chain(self.task.lexicon.words());
        PieceTable::new(&self.vocab, words)
    }

    pub fn pairs(&self, kind: CorpusKind) -> Vec<&SentencePair> {
        self.task.corpora.iter().filter(|c| c.entry.kind == kind).flat_map(|c| c.pairs.iter()).collect()
    }
}

pub fn tiny_model(vocab: usize, seed: u64) -> ModelParams<f64> {
    let cfg = ModelConfig {
        enc_layers: 2,
        dec_layers: 2,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        dropout: 0.0,
        max_positions: 48,
        vocab_size: vocab,
        ..ModelConfig::default()
    };
    ModelParams::init(&cfg, seed).unwrap()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn decoder_rows(
    params: &ModelParams<f64>,
    src: &[Vec<TokenId>],
    tgt: &[Vec<TokenId>],
    pad_to: usize,
    causal: bool,
) -> Vec<f64> {
    let mut f = Forward::new(params, false, false, 0);
    let enc = f.encode(&Padded::with_len(src, pad_to.max(src.iter().map(Vec::len).max().unwrap()))).unwrap();
    let h =
        f.decode(&Padded::with_len(tgt, pad_to.max(tgt.iter().map(Vec::len).max().unwrap())), &enc, causal).unwrap();
    f.graph.value(h).data().to_vec()
}

/// Causal future-invariance, bidirectional future-dependence and padding
/// invariance on random models and sequences.
pub fn architecture_contracts(models: usize) -> Outcome {
    let vocab = 24u32;
    let dim = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut min_bidir = f64::INFINITY;
    for m in 0..models {
        let params = tiny_model(vocab as usize, m as u64);
        let len = rng.gen_range(3..12);
        let src: Vec<TokenId> = (0..rng.gen_range(2..10)).map(|_| rng.gen_range(5..vocab)).collect();
        let tgt: Vec<TokenId> = (0..len).map(|_| rng.gen_range(5..vocab)).collect();
        let k = rng.gen_range(1..len);
        let mut changed = tgt.clone();
        changed[k] = if tgt[k] == 5 { 6 } else { 5 };
        // future changes leave earlier causal rows untouched, bit for bit
        let a = decoder_rows(&params, &[src.clone()], &[tgt.clone()], 0, true);
        let b = decoder_rows(&params, &[src.clone()], &[changed.clone()], 0, true);
        if bits(&a[..k * dim]) != bits(&b[..k * dim]) {
            return Outcome::new(false, format!("model {m}: causal row before {k} moved"));
        }
        // the bidirectional decoder sees them
        let a = decoder_rows(&params, &[src.clone()], &[tgt.clone()], 0, false);
        let b = decoder_rows(&params, &[src.clone()], &[changed], 0, false);
        let moved = (0..k)
            .map(|r| (0..dim).map(|c| (a[r * dim + c] - b[r * dim + c]).abs()).fold(0.0, f64::max))
            .fold(f64::INFINITY, f64::min);
        min_bidir = min_bidir.min(moved);
        if moved <= 1e-6 {
            return Outcome::new(false, format!("model {m}: bidirectional row unchanged ({moved:e})"));
        }
        // padding and a longer batch neighbour change nothing
        for causal in [false, true] {
            let alone = decoder_rows(&params, &[src.clone()], &[tgt.clone()], 0, causal);
            let padded = decoder_rows(&params, &[src.clone()], &[tgt.clone()], len + 5, causal);
            let other_src: Vec<TokenId> = (0..src.len() + 4).map(|_| rng.gen_range(5..vocab)).collect();
            let other_tgt: Vec<TokenId> = (0..len + 3).map(|_| rng.gen_range(5..vocab)).collect();
            let batched = decoder_rows(&params, &[other_src, src.clone()], &[other_tgt, tgt.clone()], 0, causal);
            let row_len = (len + 3) * dim;
            let padded_rows = &padded[..len * dim];
            let batched_rows = &batched[row_len..row_len + len * dim];
            if bits(&alone) != bits(padded_rows) || bits(&alone) != bits(batched_rows) {
                return Outcome::new(false, format!("model {m}: padding changed decoder output (causal={causal})"));
            }
        }
    }
    Outcome::new(
        true,
        format!("{models} random models; causal bitwise, min bidirectional shift {min_bidir:.2e}, padding exact"),
    )
}

/// Masked examples for a batch of fixture pairs under dropout-free f64.
pub fn grad_check_examples(fx: &Fixture, n: usize, seed: u64) -> Vec<MaskedExample> {
    let pieces = fx.pieces();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bi = fx.pairs(CorpusKind::Bilingual);
    let mono = fx.pairs(CorpusKind::Monolingual);
    let policy = MaskingPolicy::default();
    let mut out = Vec::new();
    let mut i = 0;
    while out.len() < n {
        let pair = if i % 2 == 0 { bi[i * 7 % bi.len()] } else { mono[i * 5 % mono.len()] };
        let ex = cemat::masking::make_example(pair, &fx.task.lexicon, &pieces, &policy, &mut rng).unwrap();
        if !ex.needs_resample() && !ex.src_dm.is_empty() {
            out.push(ex);
        }
        i += 1;
    }
    out
}

/// Central differences against backprop on the full pre-training loss.
pub fn grad_check(fx: &Fixture, coords: usize) -> Outcome {
    let params = tiny_model(fx.vocab.len(), 11);
    let batch = grad_check_examples(fx, 4, 5);
    let (lambda, smoothing) = (0.7, 0.1);
    let loss_at = |p: &ModelParams<f64>| {
        let mut f = Forward::new(p, false, false, 0);
        let (l, _) = pretrain_loss(&mut f, &batch, lambda, smoothing, Denominators::default()).unwrap();
        f.graph.value(l).item()
    };
    let mut f = Forward::new(&params, true, false, 0);
    let (l, _) = pretrain_loss(&mut f, &batch, lambda, smoothing, Denominators::default()).unwrap();
    f.graph.backward(l).unwrap();
    let grads = f.param_grads();

    // every array at least once, the rest spread at random
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let arrays = params.arrays();
    let mut picks: BTreeSet<(usize, usize)> =
        (0..arrays.len()).map(|a| (a, rng.gen_range(0..arrays[a].len()))).collect();
    while picks.len() < coords.max(arrays.len()) {
        let a = rng.gen_range(0..arrays.len());
        picks.insert((a, rng.gen_range(0..arrays[a].len())));
    }
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let mut p = params.clone();
    for &(a, i) in &picks {
        let orig = p.arrays()[a].data()[i];
        p.arrays_mut()[a].data_mut()[i] = orig + h;
        let up = loss_at(&p);
        p.arrays_mut()[a].data_mut()[i] = orig - h;
        let down = loss_at(&p);
        p.arrays_mut()[a].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[a].data()[i];
        let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
        if rel > worst.0 {
            worst = (rel, format!("{}[{i}]", params.names()[a]));
        }
    }
    Outcome::new(
        worst.0 < 1e-4,
        format!("{} coordinates over {} arrays, max rel err {:.2e} at {}", picks.len(), arrays.len(), worst.0, worst.1),
    )
}

/// Monte Carlo statistics of dual-masking.
pub fn masking_stats(fx: &Fixture, bilingual: usize, mono: usize) -> Outcome {
    let pieces = fx.pieces();
    let policy = MaskingPolicy::default();
    let bi = fx.pairs(CorpusKind::Bilingual);
    let mono_pairs = fx.pairs(CorpusKind::Monolingual);
    let mut stats = MaskingStats::default();
    for i in 0..bilingual {
        let mut rng = cemat::seed::rng(&[1, i as u64]);
        let ex = cemat::masking::make_example(bi[i % bi.len()], &fx.task.lexicon, &pieces, &policy, &mut rng).unwrap();
        if ex.upsilon < ex.mu {
            return Outcome::new(false, format!("example {i}: υ {} below μ {}", ex.upsilon, ex.mu));
        }
        stats.add(&ex);
    }
    let (up, mu) = (stats.mean_upsilon(), stats.mean_mu());
    let (m, k, r) = stats.corruption_split();
    for i in 0..mono {
        let mut rng = cemat::seed::rng(&[2, i as u64]);
        let pair = mono_pairs[i % mono_pairs.len()];
        let ex = cemat::masking::make_example(pair, &fx.task.lexicon, &pieces, &policy, &mut rng).unwrap();
        if ex.upsilon != ex.mu || mono_ordinals(&ex, true) != mono_ordinals(&ex, false) {
            return Outcome::new(false, format!("mono example {i}: source and target selections differ"));
        }
    }
    let pass = (up - 0.35).abs() <= 0.005
        && (mu - 0.15).abs() <= 0.005
        && (m - 0.8).abs() <= 0.005
        && (k - 0.1).abs() <= 0.005
        && (r - 0.1).abs() <= 0.005;
    Outcome::new(
        pass,
        format!(
            "{bilingual} bilingual: mean υ {up:.4}, mean μ {mu:.4}, split {:.2}/{:.2}/{:.2}%; {mono} mono identical",
            100.0 * m,
            100.0 * k,
            100.0 * r
        ),
    )
}

/// Dual-masked positions of a pseudo pair as ordinals among eligible
/// positions (everything except the tag and code-switched words).
pub fn mono_ordinals(ex: &MaskedExample, src: bool) -> Vec<usize> {
    let (len, protected, dm): (usize, Vec<usize>, Vec<usize>) = if src {
        (ex.src_ids.len(), ex.src_cs.clone(), ex.src_dm_positions())
    } else {
        (ex.tgt_ids.len(), ex.tgt_cs.iter().map(|p| p.0).collect(), ex.tgt_dm_positions())
    };
    let eligible: Vec<usize> = (1..len).filter(|p| !protected.contains(p)).collect();
    dm.iter().map(|p| eligible.iter().position(|e| e == p).expect("selected position is eligible")).collect()
}

/// Piece spans of each word, after the tag at position 0.
fn spans(pieces: &PieceTable<'_>, words: &[String]) -> Vec<std::ops::Range<usize>> {
    let mut at = 1;
    words
        .iter()
        .map(|w| {
            let n = pieces.pieces(w).len();
            at += n;
            at - n..at
        })
        .collect()
}

/// Code-switching exactness: every replacement is a dictionary translation,
/// its aligned target word is masked with the true pieces, nothing else is
/// masked, protected positions are never dual-masked, and the cap holds.
pub fn cs_exactness(fx: &Fixture, examples: usize) -> Outcome {
    let pieces = fx.pieces();
    let policy = MaskingPolicy::default();
    let all: Vec<&SentencePair> =
        fx.pairs(CorpusKind::Bilingual).into_iter().chain(fx.pairs(CorpusKind::Monolingual)).collect();
    let v = &fx.vocab;
    let lex = &fx.task.lexicon;
    let (mut replaced, mut with_cs) = (0usize, 0usize);
    for i in 0..examples {
        let pair = all[i % all.len()];
        let mut rng = cemat::seed::rng(&[3, i as u64]);
        let align = lex.align(pair, &mut rng);
        let cs = apply_cs(pair, &align, lex, &pieces, &policy, &mut rng).unwrap();
        let replacements = cs.replacements.clone();
        let ex = apply_dm(cs, &policy, v.first_regular_id()..v.len() as TokenId, &mut rng);
        let fail = |m: String| Outcome::new(false, format!("example {i}: {m}"));

        let ratio = if pair.is_pseudo() { policy.cs_ratio_mono } else { policy.cs_ratio_bilingual };
        if replacements.len() > cs_cap(ratio, pair.src.len()) {
            return fail(format!("{} replacements over cap", replacements.len()));
        }
        let mut src_words = pair.src.tokens.clone();
        for r in &replacements {
            src_words[r.src_word] = r.replacement.clone();
        }
        let src_spans = spans(&pieces, &src_words);
        let tgt_spans = spans(&pieces, &pair.tgt.tokens);
        let mut expect_masked = Vec::new();
        let mut expect_protected = Vec::new();
        for r in &replacements {
            if !lex.is_translation(&r.original, &pair.src.lang, &r.replacement, &r.lang) {
                return fail(format!("{} -> {} is not a dictionary entry", r.original, r.replacement));
            }
            if !align.pairs().contains(&(r.src_word, r.tgt_word)) {
                return fail(format!("replacement at {} not aligned", r.src_word));
            }
            for p in src_spans[r.src_word].clone() {
                expect_protected.push(p);
            }
            let truth = pieces.pieces(&pair.tgt.tokens[r.tgt_word]);
            for (p, &label) in tgt_spans[r.tgt_word].clone().zip(truth.iter()) {
                if ex.tgt_ids[p] != MASK_ID {
                    return fail(format!("aligned target position {p} not masked"));
                }
                expect_masked.push((p, label));
            }
        }
        expect_masked.sort_unstable();
        expect_protected.sort_unstable();
        if ex.tgt_cs != expect_masked || ex.src_cs != expect_protected {
            return fail("code-switch positions or labels differ from the oracle".into());
        }
        for r in &replacements {
            let span = src_spans[r.src_word].clone();
            if ex.src_ids[span] != *pieces.pieces(&r.replacement) {
                return fail(format!("source word {} is not {}", r.src_word, r.replacement));
            }
        }
        if ex.src_dm.iter().any(|d| ex.src_cs.contains(&d.pos))
            || ex.tgt_dm.iter().any(|d| ex.tgt_cs.iter().any(|c| c.0 == d.pos))
            || ex.src_dm.iter().chain(&ex.tgt_dm).any(|d| d.pos == 0)
        {
            return fail("dual-masking touched a protected position".into());
        }
        replaced += replacements.len();
        with_cs += usize::from(!replacements.is_empty());
    }
    Outcome::new(true, format!("{examples} examples, {with_cs} code-switched, {replaced} replacements, 0 violations"))
}

/// A random conditional distribution over {eos, a, b} for every prefix.
pub struct RandomTree {
    seed: u64,
    temperature: f64,
}

impl RandomTree {
    pub fn new(seed: u64) -> Self {
        RandomTree { seed, temperature: 1.5 }
    }

    fn row(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut parts = vec![self.seed];
        parts.extend(prefix.iter().map(|&t| t as u64 + 1));
        let mut rng = cemat::seed::rng(&parts);
        let logits: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0) * self.temperature).collect();
        let lse = logits.iter().map(|l| l.exp()).sum::<f64>().ln();
        let mut out = vec![f64::NEG_INFINITY; EOS_ID as usize + 3];
        for (k, l) in logits.iter().enumerate() {
            out[EOS_ID as usize + k] = l - lse;
        }
        out
    }
}

impl StepScorer for RandomTree {
    fn vocab_size(&self) -> usize {
        EOS_ID as usize + 3
    }

    fn next_log_probs(&mut self, prefixes: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>, DecodeError> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}

/// Best complete sequence by exhaustive enumeration, eos forced at `max_len`.
pub fn exhaustive(tree: &RandomTree, max_len: usize, alpha: f64) -> (Vec<TokenId>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack = vec![(Vec::<TokenId>::new(), 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let row = tree.row(&prefix);
        for (v, &lp) in row.iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let v = v as TokenId;
            let mut seq = prefix.clone();
            seq.push(v);
            let s = score + lp;
            if v == EOS_ID {
                let norm = s / (seq.len() as f64).powf(alpha);
                if norm > best.1 {
                    best = (seq, norm);
                }
            } else if seq.len() < max_len - 1 {
                stack.push((seq, s));
            } else {
                // only eos may follow
                let mut done = seq;
                let s = s + tree.row(&done)[EOS_ID as usize];
                done.push(EOS_ID);
                let norm = s / (done.len() as f64).powf(alpha);
                if norm > best.1 {
                    best = (done, norm);
                }
            }
        }
    }
    best
}

/// Beam search against exhaustive search and greedy decoding.
pub fn beam_oracle(models: u64) -> Outcome {
    let (max_len, alpha) = (3, 1.0);
    for m in 0..models {
        let mut tree = RandomTree::new(m);
        let (want, _) = exhaustive(&tree, max_len, alpha);
        let got = beam_search(&mut tree, 5, max_len, alpha).unwrap();
        if got.tokens != want {
            return Outcome::new(false, format!("model {m}: beam-5 {:?} vs exhaustive {want:?}", got.tokens));
        }
        let g = greedy(&mut tree, max_len).unwrap();
        let b1 = beam_search(&mut tree, 1, max_len, 0.0).unwrap();
        if g.tokens != b1.tokens {
            return Outcome::new(false, format!("model {m}: beam-1 {:?} vs greedy {:?}", b1.tokens, g.tokens));
        }
    }
    Outcome::new(true, format!("{models} random models, vocabulary 3, max length 3"))
}

/// Confidences that differ at every call, so every position is re-ranked.
struct Noisy(ChaCha8Rng);

impl MaskScorer for Noisy {
    fn predict(&mut self, tokens: &[TokenId]) -> Result<Vec<(TokenId, f64)>, DecodeError> {
        Ok(tokens.iter().map(|_| (self.0.gen_range(5..9), self.0.gen_range(0.01..1.0))).collect())
    }
}

/// Re-mask counts for every length up to 64 and iteration budget up to 16.
pub fn remask_schedule() -> Outcome {
    let mut s = Noisy(ChaCha8Rng::seed_from_u64(0));
    let mut runs = 0;
    for len in 1..=64usize {
        for total in 1..=16usize {
            let (h, trace) = mask_predict(&mut s, len, total).unwrap();
            if h.tokens.contains(&MASK_ID) {
                return Outcome::new(false, format!("L={len} T={total}: masks left in output"));
            }
            for st in &trace {
                let want = len * (total - st.iteration) / total;
                let masked = st.tokens.iter().filter(|&&t| t == MASK_ID).count();
                if st.masked != want || masked != want {
                    return Outcome::new(
                        false,
                        format!("L={len} T={total} t={}: {masked} masked, want {want}", st.iteration),
                    );
                }
            }
            let expected_len = (1..=total).find(|&t| len * (total - t) / total == 0).unwrap();
            if trace.len() != expected_len {
                return Outcome::new(false, format!("L={len} T={total}: {} iterations", trace.len()));
            }
            runs += 1;
        }
    }
    Outcome::new(true, format!("{runs} (L, T) schedules"))
}

/// BLEU oracles: identity, the clipped hand example, and invariance to the
/// order of sentence pairs.
pub fn bleu_oracles() -> Outcome {
    let refs = ["the cat sat on the mat", "a dog ran in the park today", "one two three four five"];
    let id = bleu(&refs, &refs, false).unwrap();
    let hand = bleu(&["the the the the"], &["the cat sat down"], false).unwrap();
    let hyps = ["the cat sat on a mat", "a dog ran in park today", "one two three four"];
    let fwd = bleu(&hyps, &refs, false).unwrap();
    let order = [2, 0, 1];
    let ph: Vec<&str> = order.iter().map(|&i| hyps[i]).collect();
    let pr: Vec<&str> = order.iter().map(|&i| refs[i]).collect();
    let perm = bleu(&ph, &pr, false).unwrap();
    let pass = id.bleu == 100.0
        && hand.matches[0] == 1
        && hand.totals[0] == 4
        && hand.precisions[0] == 0.25
        && hand.bleu == 0.0
        && perm.bleu.to_bits() == fwd.bleu.to_bits();
    Outcome::new(
        pass,
        format!(
            "identity {:.1}, hand p1 {}/{} BLEU {}, permuted {:.4} = {:.4}",
            id.bleu, hand.matches[0], hand.totals[0], hand.bleu, perm.bleu, fwd.bleu
        ),
    )
}

/// Decoder one-shot argmax over an all-mask target, computed directly.
pub fn one_shot(
    params: &ModelParams<f32>,
    vocab: &Vocabulary,
    src: &[TokenId],
    tag: TokenId,
    len: usize,
) -> Vec<TokenId> {
    let mut f = Forward::new(params, false, false, 0);
    let enc = f.encode(&Padded::new(&[src])).unwrap();
    let tgt: Vec<TokenId> = std::iter::once(tag).chain(std::iter::repeat(MASK_ID).take(len)).collect();
    let h = f.decode(&Padded::new(&[&tgt]), &enc, false).unwrap();
    let rows: Vec<usize> = (1..=len).collect();
    let logits = f.logits(h, &rows, Head::Cmlm).unwrap();
    let v = vocab.len();
    f.graph
        .value(logits)
        .data()
        .chunks(v)
        .map(|row| {
            let mut best = (0, f32::NEG_INFINITY);
            for (id, &x) in row.iter().enumerate() {
                if !vocab.is_special(id as TokenId) && x > best.1 {
                    best = (id as TokenId, x);
                }
            }
            best.0
        })
        .collect()
}

/// Mean negative log-likelihood of masked target tokens.
pub fn cmlm_nll(params: &ModelParams<f32>, examples: &[MaskedExample]) -> f64 {
    cemat::training::evaluate_pretrain(params, examples, 1.0, 32).unwrap().cmlm()
}

/// The toy model on the first `pairs` bilingual lines, with a fixed set of
/// masked examples (epoch 0, source to target) for evaluation.
pub fn overfit_source<'a>(
    fx: &'a Fixture,
    corpora: &'a [cemat::corpus::LoadedCorpus],
    seed: u64,
) -> cemat::training::PretrainSource<'a> {
    let cfg = ExperimentConfig::toy();
    cemat::training::PretrainSource::new(
        corpora,
        &fx.vocab,
        &fx.task.lexicon,
        cfg.masking.clone(),
        &cfg.balancing,
        cemat::training::Regime::Bilingual,
        cfg.pretrain.batch_tokens,
        seed,
    )
    .unwrap()
}

/// Pre-training on 64 pairs drives the held-fixed CMLM loss below 0.1 nats
/// within 2000 updates.
pub fn trainability(fx: &Fixture, max_steps: u64) -> Outcome {
    use cemat::training::{TrainConfig, TrainState, Trainer};
    let start = std::time::Instant::now();
    let mut corpus = fx.task.corpora.iter().find(|c| c.entry.kind == CorpusKind::Bilingual).unwrap().clone();
    corpus.pairs.truncate(64);
    let corpora = [corpus];
    let source = overfit_source(fx, &corpora, 3);
    let eval: Vec<MaskedExample> = (0..64).map(|l| source.example(0, l, 0).unwrap()).collect();
    let mut cfg = ExperimentConfig::toy();
    // memorisation is the point here: no dropout, a higher peak rate
    cfg.model.dropout = 0.0;
    let tc = TrainConfig { total_steps: max_steps, lr_peak: 4e-3, seed: 3, ..cfg.pretrain.clone() };
    let params = ModelParams::init(&cfg.model_for(&fx.vocab), 3).unwrap();
    let mut trainer = Trainer::pretrain(tc, TrainState::new(params, &cfg.pretrain), &source).unwrap();
    let initial = cmlm_nll(&trainer.state.params, &eval);
    let mut last = initial;
    while !trainer.done() {
        trainer.step().unwrap();
        if trainer.state.step % 50 == 0 {
            last = cmlm_nll(&trainer.state.params, &eval);
            if last < 0.1 {
                break;
            }
        }
    }
    Outcome::new(
        last < 0.1,
        format!(
            "CMLM NLL {initial:.3} -> {last:.4} after {} updates in {:.0}s",
            trainer.state.step,
            start.elapsed().as_secs_f64()
        ),
    )
}

/// A small config for end-to-end runs that must finish in seconds.
pub fn quick_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy();
    cfg.model.model_dim = 16;
    cfg.model.ffn_dim = 32;
    cfg.model.heads = 2;
    cfg.model.enc_layers = 1;
    cfg.model.dec_layers = 1;
    for t in [&mut cfg.pretrain, &mut cfg.finetune, &mut cfg.finetune_nat] {
        t.total_steps = 12;
        t.warmup_steps = 3;
        t.batch_tokens = 300;
    }
    cfg
}

/// Everything a pipeline run reports, as raw bits.
fn pipeline_fingerprint(fx: &Fixture, seed: u64) -> Vec<u64> {
    use cemat::eval::{evaluate_at, evaluate_nat, finetune, pretrain};
    use cemat::training::{Regime, Task};
    let cfg = quick_config();
    let mut out = Vec::new();
    let mut record = |r: &cemat::training::MetricRow| {
        out.extend([r.lr, r.loss, r.cmlm, r.mlm, r.length].map(f64::to_bits));
        out.push(r.tokens as u64);
    };
    let t = &fx.task;
    let pre = pretrain(&cfg, &cfg.masking, Regime::Both, &t.corpora, &fx.vocab, &t.lexicon, seed, &mut record).unwrap();
    let at = finetune(&cfg, Task::FinetuneAt, Some(&pre), &t.finetune, &fx.vocab, seed, &mut record).unwrap();
    let nat = finetune(&cfg, Task::FinetuneNat, Some(&pre), &t.finetune, &fx.vocab, seed, &mut record).unwrap();
    let a = evaluate_at(&at, &fx.vocab, &t.test, &cfg.decode, true).unwrap();
    let n = evaluate_nat(&nat, &fx.vocab, &t.test, &cfg.decode, true).unwrap();
    out.push(a.report.bleu.to_bits());
    out.push(n.report.bleu.to_bits());
    out
}

/// Same config and seed, same metrics to the bit.
pub fn reproducibility(fx: &Fixture) -> Outcome {
    let a = pipeline_fingerprint(fx, 5);
    let b = pipeline_fingerprint(fx, 5);
    let c = pipeline_fingerprint(fx, 6);
    Outcome::new(
        a == b && a != c,
        format!("{} metric values identical across reruns; another seed differs: {}", a.len(), a != c),
    )
}
