mod common;

use sat_refine::toy::{self, ToySpec};
use sat_refine::trainer::{self, TrainConfig, Trainer};
use sat_refine::nets::Model;

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..3 {
        for c in common::op_cases(seed) {
            let err = common::gradcheck(&c.build, &c.inputs, 1e-6, seed);
            assert!(err < 1e-4, "{} seed {seed}: relative error {err:e}", c.name);
        }
    }
}

#[test]
fn refiner_loss_through_discriminator_matches_finite_differences() {
    for seed in [3, 4] {
        let gan = common::tiny_gan(seed);
        for lambda in [0.0, 40.0] {
            let (build, params) = common::refiner_objective(&gan, lambda);
            let err = common::gradcheck(&build, &params, 1e-6, seed);
            assert!(err < 1e-3, "seed {seed} lambda {lambda}: relative error {err:e}");
        }
    }
}

#[test]
fn discriminator_loss_matches_finite_differences() {
    let gan = common::tiny_gan(5);
    let (build, params) = common::discriminator_objective(&gan);
    let err = common::gradcheck(&build, &params, 1e-6, 5);
    assert!(err < 1e-3, "relative error {err:e}");
}

fn small_toy(seed: u64) -> (trainer::SampleSet, trainer::SampleSet) {
    toy::generate(&ToySpec {
        count: 24,
        size: 16,
        seed,
        ..ToySpec::default()
    })
    .unwrap()
}

#[test]
fn short_run_is_finite_and_reproducible() {
    let (x, y) = small_toy(1);
    let cfg = TrainConfig {
        max_steps: 60,
        seed: 2,
        log_every: 20,
        ..TrainConfig::default()
    };
    let (a, log_a) = trainer::train(&x, &y, &cfg).unwrap();
    let (b, log_b) = trainer::train(&x, &y, &cfg).unwrap();
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.iter().map(|r| r.step).collect::<Vec<_>>(), vec![20, 40, 60]);
    assert_eq!(a.to_checkpoint(), b.to_checkpoint());
    for r in &log_a {
        assert!(r.l_r.is_finite() && r.l_d.is_finite());
        assert!((0.0..=1.0).contains(&r.d_fake_mean) && (0.0..=1.0).contains(&r.d_real_mean));
    }
}

#[test]
fn resume_continues_from_checkpoint_state() {
    let (x, y) = small_toy(3);
    let cfg = TrainConfig {
        max_steps: 10,
        seed: 4,
        log_every: 5,
        ..TrainConfig::default()
    };
    let (model, _) = trainer::train(&x, &y, &cfg).unwrap();
    let ckpt = model.to_checkpoint();
    let restored = Model::from_checkpoint(&sat_refine::Checkpoint::decode(&ckpt.encode().unwrap()).unwrap(), cfg.optimizer).unwrap();
    assert_eq!(restored.to_checkpoint(), ckpt);

    let mut t = Trainer::resume(TrainConfig { max_steps: 15, ..cfg }, restored).unwrap();
    assert_eq!(t.step_count(), 10);
    let mut steps = Vec::new();
    t.run(&x, &y, |r| {
        steps.push(r.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, vec![15]);
    let done = t.into_model();
    assert_eq!(done.refiner_opt.unwrap().step_count(), 15);
}

#[test]
fn huge_lambda_keeps_refiner_near_identity() {
    let (x, y) = small_toy(5);
    let cfg = TrainConfig {
        max_steps: 100,
        lambda: 1e6,
        seed: 6,
        log_every: 100,
        ..TrainConfig::default()
    };
    let (model, _) = trainer::train(&x, &y, &cfg).unwrap();
    let xh = trainer::refine_dataset(&model.refiner, &x).unwrap();
    let total: f64 = xh
        .patches()
        .iter()
        .zip(x.patches())
        .flat_map(|(a, b)| a.pixels().iter().zip(b.pixels()).map(|(p, q)| (p - q).abs() as f64))
        .sum();
    let mean = total / (x.len() * 16 * 16 * 3) as f64;
    assert!(mean < 0.01, "mean |R(x) - x| = {mean}");
}
