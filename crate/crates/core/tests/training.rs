use csi_ident::autodiff::Tensor;
use csi_ident::model::{Model, ModelConfig, ModelKind};
use csi_ident::training::{
    evaluate, history_csv, train, Example, MetricsReport, TrainConfig, TrainError,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Two classes decided by the sign of subcarrier 0 of the amplitude window,
/// with a margin so the rule is learnable exactly.
fn separable(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let label = i % 2;
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let offset = sign * rng.random_range(0.5..1.5);
            let amp = Tensor::from_fn([6, 3], |j| {
                let noise = rng.random_range(-0.3..0.3);
                if j % 3 == 0 { offset + noise } else { rng.random_range(-1.0..1.0) }
            });
            let phase = Tensor::from_fn([6, 3], |_| rng.random_range(-1.0..1.0));
            Example { amp, phase, label }
        })
        .collect()
}

fn small_model(seed: u64) -> Model {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        d_ff: 16,
        window_len: 6,
        subcarriers: 3,
        classes: 2,
        dropout: 0.1,
        ..Default::default()
    };
    Model::new(cfg, seed).unwrap()
}

fn fast_cfg() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        batch: 16,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn separable_fixture_reaches_full_accuracy_and_stops_early() {
    let (tr, va) = (separable(160, 1), separable(40, 2));
    let out = train(small_model(0), &tr, &va, &fast_cfg()).unwrap();
    assert_eq!(out.best_val_acc, 1.0, "{:?}", out.history);
    assert!(out.stopped_early);
    assert!(out.epochs_run < 50);
    assert_eq!(out.epochs_run, out.best_epoch + 10);

    let losses: Vec<f64> = out.history.iter().take(5).map(|r| r.train_loss).collect();
    let inversions = losses.windows(2).filter(|w| w[1] > w[0]).count();
    assert!(inversions <= 1, "{losses:?}");

    // the returned weights are the best epoch's, already f32-rounded
    let acc = evaluate(&out.model, &va, 1).unwrap().accuracy;
    assert_eq!(acc, out.best_val_acc);
    for p in out.model.params().iter() {
        assert!(p.value.data().iter().all(|v| (*v as f32) as f64 == *v));
    }
}

#[test]
fn frozen_weights_stop_after_patience() {
    let (tr, va) = (separable(40, 4), separable(20, 5));
    let cfg = TrainConfig {
        lr: 0.0,
        ..fast_cfg()
    };
    let out = train(small_model(1), &tr, &va, &cfg).unwrap();
    assert_eq!(out.epochs_run, 11);
    assert_eq!(out.best_epoch, 1);
    assert!(out.history.iter().all(|r| r.val_acc == out.history[0].val_acc));
}

#[test]
fn seeded_runs_are_bitwise_identical_across_thread_counts() {
    let (tr, va) = (separable(50, 6), separable(20, 7));
    let cfg = TrainConfig {
        max_epochs: 4,
        patience: 4,
        ..fast_cfg()
    };
    let a = train(small_model(2), &tr, &va, &cfg).unwrap();
    let b = train(small_model(2), &tr, &va, &cfg).unwrap();
    let c = train(small_model(2), &tr, &va, &TrainConfig { threads: 3, ..cfg.clone() }).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(history_csv(&a.history), history_csv(&c.history));
    assert_eq!(a.model, c.model);
    let d = train(small_model(2), &tr, &va, &TrainConfig { seed: 99, ..cfg }).unwrap();
    assert_ne!(a.model, d.model);
}

#[test]
fn baselines_train_on_the_fixture() {
    let (tr, va) = (separable(100, 8), separable(30, 9));
    for kind in [ModelKind::Mlp, ModelKind::Cnn] {
        let cfg = ModelConfig {
            kind,
            d_model: 8,
            window_len: 8,
            subcarriers: 8,
            classes: 2,
            cnn_channels: 4,
            ..Default::default()
        };
        // widen the fixture to 8x8 for the CNN's three poolings
        let widen = |e: &Example| Example {
            amp: Tensor::from_fn([8, 8], |i| if i / 8 < 6 && i % 8 < 3 { e.amp.at2(i / 8, i % 8) } else { 0.0 }),
            phase: Tensor::zeros([8, 8]),
            label: e.label,
        };
        let tr: Vec<Example> = tr.iter().map(widen).collect();
        let va: Vec<Example> = va.iter().map(widen).collect();
        let out = train(Model::new(cfg, 0).unwrap(), &tr, &va, &TrainConfig { max_epochs: 30, ..fast_cfg() }).unwrap();
        assert!(out.best_val_acc >= 0.9, "{kind}: {:?}", out.history);
    }
}

#[test]
fn config_and_input_errors() {
    let tr = separable(4, 0);
    assert!(matches!(
        train(small_model(0), &tr, &[], &fast_cfg()),
        Err(TrainError::EmptySplit(_))
    ));
    let bad = TrainConfig {
        patience: 60,
        ..fast_cfg()
    };
    assert!(matches!(train(small_model(0), &tr, &tr, &bad), Err(TrainError::Config(_))));
    let neg = TrainConfig {
        lr: -1.0,
        ..fast_cfg()
    };
    assert!(neg.validate().is_err());
}

#[test]
fn history_csv_format() {
    use csi_ident::training::EpochRecord;
    let csv = history_csv(&[EpochRecord {
        epoch: 1,
        train_loss: 0.1,
        val_acc: 0.5,
    }]);
    assert_eq!(csv, "epoch,train_loss,val_acc\n1,0.1,0.5\n");
}

proptest! {
    #[test]
    fn metrics_invariants(
        pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..80),
        perm_seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let preds: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let m = MetricsReport::from_predictions(&labels, &preds, 4);
        prop_assert_eq!(m.total(), pairs.len());
        let trace: usize = (0..4).map(|i| m.confusion[i][i]).sum();
        prop_assert_eq!(m.accuracy, trace as f64 / pairs.len() as f64);
        for (c, row) in m.confusion.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), m.per_class[c].support);
        }
        for v in [m.macro_f1, m.macro_precision, m.macro_recall] {
            prop_assert!((0.0..=1.0).contains(&v));
        }

        let mut perm: Vec<usize> = (0..4).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
        for i in (1..4).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
        let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
        let q = MetricsReport::from_predictions(&pl, &pp, 4);
        prop_assert!((m.macro_f1 - q.macro_f1).abs() < 1e-12);
        prop_assert!((m.macro_precision - q.macro_precision).abs() < 1e-12);
        prop_assert!((m.macro_recall - q.macro_recall).abs() < 1e-12);
        for c in 0..4 {
            prop_assert_eq!(m.per_class[c], q.per_class[perm[c]]);
        }
    }
}
