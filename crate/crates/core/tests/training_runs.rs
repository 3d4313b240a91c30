mod common;

use cemat::eval::ExperimentConfig;
use cemat::model::{Forward, ModelParams};
use cemat::training::{pretrain_loss, Checkpoint, Denominators, TrainConfig, TrainState, Trainer};
use common::Fixture;

#[test]
fn overfits_sixty_four_pairs() {
    let fx = Fixture::small(8);
    let o = common::trainability(&fx, 2000);
    assert!(o.pass, "{o}");
}

#[test]
fn split_batches_sum_to_the_whole() {
    let fx = Fixture::small(9);
    let params = common::tiny_model(fx.vocab.len(), 1);
    let batch = common::grad_check_examples(&fx, 6, 2);
    let grads = |p: &ModelParams<f64>, part: &[cemat::masking::MaskedExample], den: Denominators| {
        let mut f = Forward::new(p, true, false, 0);
        let (l, _) = pretrain_loss(&mut f, part, 0.7, 0.1, den).unwrap();
        f.graph.backward(l).unwrap();
        f.param_grads()
    };
    let den = Denominators {
        cmlm: Some(batch.iter().map(|e| e.tgt_targets().len()).sum()),
        mlm: Some(batch.iter().map(|e| e.src_dm.len()).sum()),
        length: None,
    };
    let whole = grads(&params, &batch, Denominators::default());
    let a = grads(&params, &batch[..2], den);
    let b = grads(&params, &batch[2..], den);
    for ((w, x), y) in whole.iter().zip(&a).zip(&b) {
        for ((w, x), y) in w.data().iter().zip(x.data()).zip(y.data()) {
            assert!((w - (x + y)).abs() <= 1e-12 * w.abs().max(1.0), "{w} vs {}", x + y);
        }
    }
}

#[test]
fn resume_reproduces_an_uninterrupted_run() {
    let fx = Fixture::small(10);
    let cfg = common::quick_config();
    let source = common::overfit_source(&fx, &fx.task.corpora, 4);
    let tc = TrainConfig { total_steps: 8, warmup_steps: 2, update_frequency: 2, ..cfg.pretrain.clone() };
    let fresh = || TrainState::new(ModelParams::init(&cfg.model_for(&fx.vocab), 4).unwrap(), &tc);

    let mut straight = Trainer::pretrain(tc.clone(), fresh(), &source).unwrap();
    let mut rows = Vec::new();
    straight.run(|_, r| Ok(rows.push(*r))).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = Trainer::pretrain(TrainConfig { total_steps: 8, ..tc.clone() }, fresh(), &source).unwrap();
    let mut resumed_rows = Vec::new();
    for _ in 0..3 {
        resumed_rows.push(first.step().unwrap());
    }
    first.checkpoint(fx.vocab.fingerprint()).save(dir.path(), &first.state).unwrap();
    drop(first);
    let (manifest, state) = Checkpoint::load_state(dir.path()).unwrap();
    assert_eq!(manifest.step, 3);
    let mut second = Trainer::pretrain(manifest.train, state, &source).unwrap();
    second.run(|_, r| Ok(resumed_rows.push(*r))).unwrap();

    assert_eq!(rows, resumed_rows);
    assert_eq!(straight.state, second.state);
}

#[test]
fn reruns_are_bit_identical() {
    let fx = Fixture::small(11);
    let o = common::reproducibility(&fx);
    assert!(o.pass, "{o}");
}

#[test]
fn toy_config_is_valid() {
    let cfg = ExperimentConfig::toy();
    for t in [&cfg.pretrain, &cfg.finetune, &cfg.finetune_nat] {
        t.validate().unwrap();
    }
    cfg.masking.validate().unwrap();
}
