use gdcan_core::adaptation::RegularizationSubset;
use gdcan_core::data::{generate, DomainPairSpec, LabeledImageSet};
use gdcan_core::layers::ParamGroup;
use gdcan_core::model::{Kernels, Model, Routing};
use gdcan_core::optim::{GroupRates, Sgd};
use gdcan_core::train::{train, TrainConfig, Trainer};
use gdcan_core::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_data() -> (LabeledImageSet, LabeledImageSet) {
    let spec = DomainPairSpec {
        classes: 3,
        samples_per_class: 12,
        image_size: [3, 16, 16],
        ..DomainPairSpec::bundled()
    };
    generate(&spec).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        widths: vec![4, 8],
        hidden: 8,
        batch_per_domain: 6,
        epochs: 2,
        calibration_samples: 12,
        p: 1.5,
        ..TrainConfig::default()
    }
}

#[test]
fn frozen_parameters_never_move() {
    let (s, t) = tiny_data();
    let mut trainer = Trainer::new(&tiny_config(), &s, &t).unwrap();
    let frozen = |m: &Model| -> Vec<_> {
        m.store
            .iter()
            .filter(|(_, p)| p.group == ParamGroup::Frozen)
            .map(|(_, p)| p.value.clone())
            .collect()
    };
    let before = frozen(&trainer.model);
    assert!(!before.is_empty());
    let trainable_before = trainer.model.store.values();
    for _ in 0..4 {
        trainer.step().unwrap();
    }
    assert_eq!(frozen(&trainer.model), before);
    assert_ne!(trainer.model.store.values(), trainable_before);
}

#[test]
fn target_labels_do_not_influence_training() {
    let (s, t) = tiny_data();
    let mut relabeled = t.clone();
    relabeled.labels.iter_mut().for_each(|l| *l = (*l + 1) % 3);
    let cfg = TrainConfig {
        epochs: 1,
        ..tiny_config()
    };
    let a = train(&cfg, &s, &t).unwrap();
    let b = train(&cfg, &s, &relabeled).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.steps, b.steps);
}

#[test]
fn training_is_deterministic_in_the_seed() {
    let (s, t) = tiny_data();
    let a = train(&tiny_config(), &s, &t).unwrap();
    let b = train(&tiny_config(), &s, &t).unwrap();
    assert_eq!(a, b);
    let other = train(&TrainConfig { seed: 1, ..tiny_config() }, &s, &t).unwrap();
    assert_ne!(a.steps, other.steps);
}

#[test]
fn logged_losses_respect_their_bounds() {
    let (s, t) = tiny_data();
    let out = train(&tiny_config(), &s, &t).unwrap();
    let ln_c = (3f64).ln();
    for r in &out.steps {
        assert!(r.l_e >= 0.0 && r.l_e <= ln_c + 1e-12, "{r:?}");
        assert!(r.l_m >= 0.0 && r.l_reg >= 0.0, "{r:?}");
    }
    assert!(out.decisions.iter().all(|d| (0.0..1.0).contains(&d.m_hat)));
    assert_eq!(out.metrics.len(), 2);
    assert_eq!(out.steps.len(), 2 * (36 / 6));
}

#[test]
fn source_loss_ignores_adaptation_blocks() {
    let (s, t) = tiny_data();
    let cfg = tiny_config();
    let mut model = Model::new(cfg.model_config(3), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let (xs, ys) = s.batch(&[0, 5, 13, 20, 27, 35]);
    let xt = t.images.select_rows(&[1, 2, 3, 4, 5, 6]);
    let (xs, xt) = (tape.constant(xs), tape.constant(xt));
    let subset = RegularizationSubset {
        indices: vec![0, 2],
        inclusion_prob: 0.5,
    };
    let routes = [true, false];
    let (nodes, _) = model
        .loss(&mut tape, &bound, xs, &ys, xt, &subset, &cfg.weights(), &Kernels::Median, Routing::Fixed(&routes))
        .unwrap();
    let grads = tape.backward(nodes.l_s).unwrap();
    let mut checked = 0;
    for (id, p) in model.store.iter() {
        if p.group == ParamGroup::Adaptation {
            checked += 1;
            if let Some(g) = grads.get(bound.var(id)) {
                assert!(g.data().iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
    }
    assert!(checked > 0);
    // The full objective does reach the blocks (fc1 sits behind a zero fc2).
    let total = tape.backward(nodes.total).unwrap();
    let block = model.blocks[0].fc2.weight;
    assert!(total.get(bound.var(block)).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn group_multipliers_scale_identical_gradients() {
    let (s, t) = tiny_data();
    let trainer = Trainer::new(&tiny_config(), &s, &t).unwrap();
    let mut store = trainer.model.store.clone();
    let before = store.values();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    // Sum of every parameter gives a gradient of one everywhere.
    let vars: Vec<_> = store.iter().map(|(id, _)| bound.var(id)).collect();
    let sums: Vec<_> = vars.iter().map(|&v| (1.0, tape.sum(v))).collect();
    let loss = tape.weighted_sum(&sums).unwrap();
    let grads = tape.backward(loss).unwrap();
    let mut sgd = Sgd::new(&store, 0.0);
    sgd.step(&mut store, &bound, &grads, &GroupRates::scaled(0.01, 10.0, 0.1)).unwrap();
    for ((_, p), old) in store.iter().zip(&before) {
        let want = match p.group {
            ParamGroup::Backbone => 0.01,
            ParamGroup::Classifier => 0.1,
            ParamGroup::Adaptation => 0.001,
            ParamGroup::Frozen => 0.0,
        };
        for (new, old) in p.value.data().iter().zip(old.data()) {
            assert!(((old - new) - want).abs() < 1e-12, "{}", p.name);
        }
    }
}

#[test]
fn untrained_attention_paths_agree() {
    let (s, t) = tiny_data();
    let cfg = tiny_config();
    let trainer = Trainer::new(&cfg, &s, &t).unwrap();
    let report = gdcan_core::diagnostics::attention_diff_report(&trainer.model, &s.images, &t.images, &cfg.policy(), 16).unwrap();
    assert_eq!(report.stage_means.len(), 2);
    assert_eq!(report.rows.len(), 4 + 8);
    assert!(report.rows.iter().all(|r| r.omega_diff == 0.0));
    assert!(report.to_csv().starts_with("stage,channel,omega_diff,stage_mean\n"));
}
