mod common;

use cemat::decoding::{translate_nat, DecodeConfig, LengthMode};
use cemat::model::{ModelConfig, ModelParams};
use cemat::vocab::Vocabulary;
use common::Fixture;

#[test]
fn beam_matches_exhaustive_and_greedy() {
    let o = common::beam_oracle(100);
    assert!(o.pass, "{o}");
}

#[test]
fn remask_schedule_is_exact() {
    let o = common::remask_schedule();
    assert!(o.pass, "{o}");
}

fn random_model(vocab: &Vocabulary, seed: u64) -> ModelParams<f32> {
    let cfg = ModelConfig {
        enc_layers: 1,
        dec_layers: 2,
        model_dim: 16,
        heads: 2,
        ffn_dim: 32,
        max_positions: 64,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    };
    ModelParams::init(&cfg, seed).unwrap()
}

#[test]
fn one_iteration_is_one_shot_decoding() {
    let fx = Fixture::small(4);
    let cfg = DecodeConfig { nat_iterations: 1, length_mode: LengthMode::Gold, ..DecodeConfig::default() };
    for seed in 0..5 {
        let params = random_model(&fx.vocab, seed);
        for pair in fx.task.test.iter().take(8) {
            let src = fx.vocab.encode(&pair.src).unwrap();
            let tag = fx.vocab.tag_id(&pair.tgt.lang).unwrap();
            let len = fx.vocab.encode(&pair.tgt).unwrap().len() - 1;
            let (h, trace) = translate_nat(&params, &fx.vocab, &src, tag, &cfg, Some(len)).unwrap();
            assert_eq!(trace.len(), 1);
            assert_eq!(h.tokens, common::one_shot(&params, &fx.vocab, &src, tag, len));
        }
    }
}
