//! End-to-end training and evaluation behavior at reduced scale.

use dpa_core::eval::{
    embedding_distance, prepare_seed, run_ablation_cell, AblationMode, DataConfig,
    ExperimentConfig, PretrainConfig, VerificationProtocol,
};
use dpa_core::model::{BackboneParams, BackboneSpec, HeadParams, MarginSpec};
use dpa_core::synth::{generate, split};
use dpa_core::train::{run_dpo, select_checkpoints, TrainConfig, TrajectoryTag};
use dpa_core::attack::AttackConfig;

fn micro_config() -> ExperimentConfig {
    ExperimentConfig {
        data: DataConfig {
            classes: 6,
            per_class: 6,
            input_dim: 24,
            sigma: 14.0,
            train_fraction: 0.67,
        },
        pretrain: PretrainConfig {
            classes: 6,
            per_class: 6,
            epochs: 2,
        },
        hidden_widths: vec![16, 16],
        embedding_dim: 8,
        hooks: None,
        margin: MarginSpec::default(),
        train: TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 0,
            ..TrainConfig::default()
        },
        attack: AttackConfig {
            iterations: 20,
            ..AttackConfig::default()
        },
        victim_epochs: 3,
        attack_pairs: 6,
        genuine_pairs: 40,
        impostor_pairs: 120,
        far: 0.01,
    }
}

#[test]
fn training_reduces_loss_for_most_seeds() {
    let spec = BackboneSpec::new(32, vec![24], 8).unwrap();
    let margin = MarginSpec::default();
    let mut improved = 0;
    for seed in 0..10u64 {
        let data = generate(seed.wrapping_add(900), 6, 6, 32, 10.0).unwrap();
        let config = TrainConfig {
            epochs: 3,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        };
        let pretrained = BackboneParams::init(&spec, seed.wrapping_add(1));
        let run = run_dpo(&spec, &margin, &pretrained, &data, &config).unwrap();
        if run.pretrained_losses.last().unwrap() < run.pretrained_losses.first().unwrap() {
            improved += 1;
        }
    }
    assert!(improved >= 9, "loss improved for only {improved}/10 seeds");
}

#[test]
fn dpo_runs_are_bitwise_reproducible() {
    let spec = BackboneSpec::new(24, vec![16], 8).unwrap();
    let margin = MarginSpec::default();
    let data = generate(77, 5, 6, 24, 12.0).unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 6,
        seed: 13,
        ..TrainConfig::default()
    };
    let pretrained = BackboneParams::init(&spec, 5);
    let a = run_dpo(&spec, &margin, &pretrained, &data, &config).unwrap();
    let b = run_dpo(&spec, &margin, &pretrained, &data, &config).unwrap();
    assert_eq!(a.store.len(), b.store.len());
    for (ca, cb) in a.store.iter().zip(b.store.iter()) {
        assert_eq!(ca.tag, cb.tag);
        assert_eq!(ca.epoch, cb.epoch);
        assert!(ca.backbone.bitwise_eq(&cb.backbone));
        assert!(ca.head.bitwise_eq(&cb.head));
    }
    let sel = select_checkpoints(&a.store, 2).unwrap();
    assert_eq!(sel.len(), 3); // stride 1: P {0,2} ∪ A {2}
}

#[test]
fn trained_embeddings_separate_identities() {
    let spec = BackboneSpec::new(24, vec![16], 8).unwrap();
    let margin = MarginSpec::default();
    let data = generate(31, 6, 8, 24, 10.0).unwrap();
    let (train, eval) = split(&data, 0.7, 3).unwrap();
    let config = TrainConfig {
        epochs: 6,
        batch_size: 8,
        seed: 2,
        ..TrainConfig::default()
    };
    let pretrained = BackboneParams::init(&spec, 9);
    let run = run_dpo(&spec, &margin, &pretrained, &train, &config).unwrap();
    let model = &run
        .store
        .get(TrajectoryTag::Pretrained, 6)
        .unwrap()
        .backbone;

    let protocol = VerificationProtocol::build(&eval, 60, 60, 4).unwrap();
    let embeddings = dpa_core::eval::embed_dataset(&spec, model, &eval).unwrap();
    let row = |i: usize| {
        let c = embeddings.shape()[1];
        embeddings.data()[i * c..(i + 1) * c].to_vec()
    };
    let mean = |pairs: &[(usize, usize)]| {
        pairs
            .iter()
            .map(|&(a, b)| embedding_distance(&row(a), &row(b)).unwrap())
            .sum::<f64>()
            / pairs.len() as f64
    };
    let genuine = mean(&protocol.genuine);
    let impostor = mean(&protocol.impostor);
    assert!(
        genuine < impostor,
        "genuine mean {genuine} not below impostor mean {impostor}"
    );
}

#[test]
fn ablation_cell_runs_and_white_box_dominates_black_box() {
    let cfg = micro_config();
    let ctx = prepare_seed(&cfg, 42).unwrap();
    assert_eq!(ctx.selected.len(), 3); // c=2: P {0,2} + A {2}

    let outcome = run_ablation_cell(&cfg, &ctx, AblationMode::Dpo).unwrap();
    assert_eq!(outcome.black_box.pair_count, cfg.attack_pairs);
    assert!(outcome.white_box.asr_percent >= outcome.black_box.asr_percent);

    let vanilla = run_ablation_cell(&cfg, &ctx, AblationMode::Vanilla).unwrap();
    assert_eq!(vanilla.black_box.pair_count, cfg.attack_pairs);

    let trio = run_ablation_cell(&cfg, &ctx, AblationMode::FinalTrio).unwrap();
    assert_eq!(trio.black_box.pair_count, cfg.attack_pairs);
}

#[test]
fn head_is_stored_but_selection_returns_backbones_only() {
    let spec = BackboneSpec::new(24, vec![16], 8).unwrap();
    let margin = MarginSpec::default();
    let data = generate(55, 5, 6, 24, 12.0).unwrap();
    let config = TrainConfig {
        epochs: 2,
        batch_size: 6,
        seed: 1,
        ..TrainConfig::default()
    };
    let pretrained = BackboneParams::init(&spec, 3);
    let run = run_dpo(&spec, &margin, &pretrained, &data, &config).unwrap();
    for c in run.store.iter() {
        c.head.validate().unwrap();
        assert_eq!(c.head.classes(), 5);
    }
    let selected = select_checkpoints(&run.store, 2).unwrap();
    for params in &selected {
        params.matches_spec(&spec).unwrap();
    }
}

#[test]
fn head_params_initialization_is_valid_and_distinct_between_trajectories() {
    let head_a = HeadParams::init(5, 8, 1).unwrap();
    let head_b = HeadParams::init(5, 8, 2).unwrap();
    assert!(!head_a.bitwise_eq(&head_b));
}
