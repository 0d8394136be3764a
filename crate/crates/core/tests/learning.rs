mod common;

use common::{draw, equivariance_drift, gradient_relative_error, loss_value};
use mcra_core::gnn::{
    from_json, layer_offset, to_json, Aggregation, FeatureTransform, GnnModel, NormStats, PowerHead, LAYER_SHAPES,
};
use mcra_core::rng::Rng;
use mcra_core::trainer::{evaluate, init_model, sample_gradient, train, DualMode, OptimizerKind, TrainConfig};
use mcra_core::{ChannelInstance, Dataset, NetworkConfig};

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..4 {
        for mode in [DualMode::Pre, DualMode::Post] {
            let err = gradient_relative_error(&draw(seed, 4, 2), mode, 1e-6);
            assert!(err < 1e-4, "seed {seed} {mode:?}: {err}");
        }
    }
}

#[test]
fn other_aggregations_and_heads_differentiate() {
    for (agg, head) in [
        (Aggregation::Sum, PowerHead::Normalize),
        (Aggregation::Mean, PowerHead::ChannelCap),
    ] {
        let mut dr = draw(21, 4, 3);
        dr.model = dr.model.with_aggregation(agg).with_head(head);
        let err = gradient_relative_error(&dr, DualMode::Pre, 1e-6);
        assert!(err < 1e-4, "{agg:?} {head:?}: {err}");
    }
}

#[test]
fn lone_pair_leaves_message_layers_without_gradient() {
    let dr = draw(3, 1, 3);
    let feats = dr.model.features(&dr.inst);
    let (_, grad) = sample_gradient(&dr.model, &feats, &dr.inst, &dr.dual, &dr.config, DualMode::Pre).unwrap();
    let message_end = layer_offset(2);
    assert!(grad[..message_end].iter().all(|&g| g == 0.0));
    assert!(grad[message_end..].iter().any(|&g| g != 0.0));
}

#[test]
fn untied_copies_reproduce_tied_model() {
    let dr = draw(9, 5, 2);
    let model = &dr.model;
    let feats = model.features(&dr.inst);
    let copies = vec![model.params().to_vec(); model.rounds];
    let tied = model.forward(&feats).unwrap();
    let untied = model.forward_untied(&copies, &feats).unwrap();
    assert_eq!(tied.powers, untied.powers);

    let seed = mcra_core::Matrix::from_vec(5, 2, (0..10).map(|k| (k as f64 - 4.0) * 0.3).collect());
    let g = model.backward(&feats, &tied, &seed).unwrap();
    let per_round = model.backward_untied(&copies, &feats, &untied, &seed).unwrap();
    for k in 0..g.len() {
        let summed: f64 = per_round.iter().map(|r| r[k]).sum();
        assert!((summed - g[k]).abs() <= 1e-12 * g[k].abs().max(1.0), "param {k}");
    }
}

#[test]
fn loss_falls_along_the_negative_gradient() {
    let dr = draw(5, 6, 2);
    let feats = dr.model.features(&dr.inst);
    let (eval, grad) = sample_gradient(&dr.model, &feats, &dr.inst, &dr.dual, &dr.config, DualMode::Pre).unwrap();
    let norm2: f64 = grad.iter().map(|g| g * g).sum();
    let eps = 1e-7 / norm2.sqrt();
    let mut step = dr.model.clone();
    for (p, g) in step.params_mut().iter_mut().zip(&grad) {
        *p -= eps * g;
    }
    let after = loss_value(&step, &dr, DualMode::Pre);
    let predicted = eval.value - eps * norm2;
    assert!(after < eval.value);
    assert!((after - predicted).abs() < 1e-3 * (eval.value - predicted).abs());
}

#[test]
fn outputs_are_permutation_equivariant() {
    for seed in 0..20 {
        assert!(equivariance_drift(seed, Aggregation::Max) <= 1e-9, "seed {seed}");
        assert!(equivariance_drift(seed, Aggregation::Sum) <= 1e-9, "seed {seed}");
    }
}

#[test]
fn checkpoint_keeps_every_setting() {
    let model = GnnModel::init(&mut Rng::from_seed(4), NormStats { mean: -2.0, std: 0.5 }, 2.0)
        .with_rounds(5)
        .with_aggregation(Aggregation::Mean)
        .with_head(PowerHead::ChannelCap)
        .with_transform(FeatureTransform::Raw);
    let back = from_json(&to_json(&model).unwrap()).unwrap();
    assert_eq!(back, model);
    assert_eq!(LAYER_SHAPES.len(), 5);
}

#[test]
fn zero_network_closed_form() {
    let mut cfg = NetworkConfig::new(1, 1);
    cfg.noise_power = 1e-4;
    let data = Dataset::new(cfg, vec![ChannelInstance::new(1, 1, vec![1.0]).unwrap()]).unwrap();
    let model = GnnModel::zeros(NormStats::IDENTITY, 1.0);
    let report = evaluate(&model, &data).unwrap();
    // p = P_max / 2 on the only channel, SINR = g² p / σ².
    assert_eq!(report.violations, 0);
    assert!((report.mean_sum_rate - (1.0f64 + 0.5e4).log2()).abs() < 1e-12);
    assert_eq!(report.rows_csv(), evaluate(&model, &data).unwrap().rows_csv());
}

fn small_sets() -> (Dataset, Dataset) {
    let train_set = Dataset::generate(NetworkConfig::new(4, 2).with_seed(1), 64).unwrap();
    let val_set = Dataset::generate(NetworkConfig::new(4, 2).with_seed(999), 16).unwrap();
    (train_set, val_set)
}

#[test]
fn training_is_deterministic() {
    let (train_set, val_set) = small_sets();
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 16,
        optimizer: OptimizerKind::Adam,
        seed: 8,
        ..TrainConfig::default()
    };
    let run = || {
        train(
            &train_set,
            &val_set,
            init_model(&train_set, &tc, PowerHead::Normalize),
            &tc,
        )
        .unwrap()
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a.params(), b.params());
    assert!(log_a.same_trajectory(&log_b));
    assert_eq!(log_a.epochs.len(), 3);
}

#[test]
fn zero_step_keeps_weights() {
    let (train_set, val_set) = small_sets();
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr: 0.0,
            optimizer,
            ..TrainConfig::default()
        };
        let init = init_model(&train_set, &tc, PowerHead::Normalize);
        let (trained, _) = train(&train_set, &val_set, init.clone(), &tc).unwrap();
        assert_eq!(trained.params(), init.params());
    }
}

#[test]
fn post_mode_multipliers_stay_near_zero() {
    let (train_set, val_set) = small_sets();
    let tc = TrainConfig {
        epochs: 2,
        batch_size: 16,
        dual_lr: 0.5,
        dual_mode: DualMode::Post,
        ..TrainConfig::default()
    };
    let (_, log) = train(
        &train_set,
        &val_set,
        init_model(&train_set, &tc, PowerHead::Normalize),
        &tc,
    )
    .unwrap();
    assert!(
        log.epochs.iter().all(|e| e.mean_lambda.abs() < 1e-12),
        "{:?}",
        log.epochs.iter().map(|e| e.mean_lambda).collect::<Vec<_>>()
    );
}

#[test]
fn training_improves_on_the_initial_model() {
    let cfg = NetworkConfig::new(10, 2);
    let train_set = Dataset::generate(cfg.clone().with_seed(1), 2000).unwrap();
    let val_set = Dataset::generate(cfg.with_seed(1_000_003), 200).unwrap();
    let tc = TrainConfig {
        epochs: 5,
        seed: 1,
        ..TrainConfig::default()
    };
    let (_, log) = train(
        &train_set,
        &val_set,
        init_model(&train_set, &tc, PowerHead::Normalize),
        &tc,
    )
    .unwrap();
    let best = log.epochs.iter().map(|e| e.val_sum_rate).fold(f64::MIN, f64::max);
    assert!(
        best > log.initial_val_sum_rate,
        "{best} vs {}",
        log.initial_val_sum_rate
    );
}
