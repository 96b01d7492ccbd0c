use lsa_core::corpus::{generate_synthetic_corpus, SynthSpec};
use lsa_core::lsa::GROUP_ETA;
use lsa_core::training::{
    confusion_matrix, quantile, seed_sweep, static_eta_sweep, total_loss, train, Metrics, Spread, TrainConfig,
    TrainData,
};
use lsa_core::Error;
use proptest::prelude::*;

fn small_config() -> TrainConfig {
    TrainConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_dim: 16,
        batch_size: 8,
        epochs: 2,
        lr: 3e-3,
        ..TrainConfig::default()
    }
}

fn data(spec: SynthSpec, seed: u64) -> TrainData {
    let corpus = generate_synthetic_corpus(&spec, seed).unwrap();
    TrainData {
        train: corpus.train,
        val: None,
        test: Some(corpus.test),
        parses: None,
    }
}

fn small_data() -> TrainData {
    data(
        SynthSpec {
            train_examples: 40,
            test_examples: 20,
            ..SynthSpec::default()
        },
        1,
    )
}

#[test]
fn training_is_bitwise_deterministic() {
    let cfg = small_config();
    let d = small_data();
    let a = train(&cfg, &d).unwrap();
    let b = train(&cfg, &d).unwrap();
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    assert_eq!(a.loss_csv(), b.loss_csv());
    assert_eq!(a.trajectory.to_csv(), b.trajectory.to_csv());
    assert_eq!(a.checkpoint(&cfg).to_bytes(), b.checkpoint(&cfg).to_bytes());

    let other = train(&TrainConfig { seed: 1, ..cfg.clone() }, &d).unwrap();
    assert_ne!(a.checkpoint(&cfg).to_bytes(), other.checkpoint(&cfg).to_bytes());
}

#[test]
fn zero_epochs_record_only_the_initial_weights() {
    let cfg = TrainConfig { epochs: 0, ..small_config() };
    let out = train(&cfg, &small_data()).unwrap();
    assert_eq!(out.trajectory.records, vec![(0, 1.0, 1.0)]);
    assert_eq!(out.trajectory.to_csv(), "step,eta_l,eta_r\n0,1.0,1.0\n");
    assert_eq!(out.best_epoch, 0);
    assert_eq!(out.loss_csv(), "epoch,loss\n");
}

#[test]
fn eta_decays_geometrically_without_neighbours() {
    let spec = SynthSpec {
        train_examples: 30,
        test_examples: 5,
        aspects_per_example: vec![1.0],
        implicit_fraction: 0.0,
        ..SynthSpec::default()
    };
    let cfg = TrainConfig {
        freeze_encoder: true,
        eta_lr: 0.01,
        eta_l2: 0.5,
        epochs: 3,
        ..small_config()
    };
    let out = train(&cfg, &data(spec, 2)).unwrap();
    let steps = out.trajectory.records.len() - 1;
    assert!(steps >= 9);
    let decay = 1.0 - cfg.eta_lr * cfg.eta_l2;
    for &(t, l, r) in &out.trajectory.records {
        let want = decay.powi(t as i32);
        assert!((l - want).abs() <= 1e-10, "step {t}: {l} vs {want}");
        assert!((r - want).abs() <= 1e-10, "step {t}: {r} vs {want}");
    }
}

#[test]
fn frozen_encoder_keeps_encoder_weights() {
    let cfg = TrainConfig { freeze_encoder: true, ..small_config() };
    let d = small_data();
    let trained = train(&cfg, &d).unwrap();
    let untrained = train(&TrainConfig { epochs: 0, ..cfg.clone() }, &d).unwrap();
    let (a, b) = (&trained.model, &untrained.model);
    for id in a.encoder.param_ids(&a.params) {
        assert_eq!(a.params.value(id), b.params.value(id), "{}", a.params.get(id).name);
    }
    assert_ne!(a.params.value(a.decision.w), b.params.value(b.decision.w));
}

#[test]
fn static_sweep_point_equals_a_fixed_weight_run() {
    let cfg = small_config();
    let d = small_data();
    let rows = static_eta_sweep(&cfg, &d, &[0.5]).unwrap();
    let fixed = train(
        &TrainConfig {
            static_eta: Some([0.5, 0.5]),
            ..cfg.clone()
        },
        &d,
    )
    .unwrap();
    assert_eq!(fixed.final_eta, (0.5, 0.5));
    assert!(fixed.trajectory.records.iter().all(|&(_, l, r)| l == 0.5 && r == 0.5));
    let m = fixed.headline().unwrap();
    assert_eq!((rows[0].eta_l, rows[0].eta_r), (0.5, 0.5));
    assert_eq!(rows[0].accuracy, m.accuracy);
    assert_eq!(rows[0].macro_f1, m.macro_f1);
}

#[test]
fn seed_sweep_reports_every_seed_and_the_spread() {
    let cfg = TrainConfig { epochs: 1, ..small_config() };
    let sweep = seed_sweep(&cfg, &small_data(), &[0, 1, 2, 3, 4]).unwrap();
    assert_eq!(sweep.runs.iter().map(|r| r.seed).collect::<Vec<_>>(), [0, 1, 2, 3, 4]);
    let mut acc: Vec<f64> = sweep.runs.iter().map(|r| r.metrics.accuracy).collect();
    acc.sort_by(f64::total_cmp);
    assert_eq!(sweep.accuracy.median, acc[2]);
    assert_eq!(sweep.accuracy.iqr, acc[3] - acc[1]);
    let csv = sweep.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[0], "seed,best_epoch,acc,macro_f1,eta_l,eta_r");
    assert!(lines[6].starts_with("median,,"));
    assert!(lines[7].starts_with("iqr,,"));
    assert!(matches!(seed_sweep(&cfg, &small_data(), &[0]), Err(Error::Config(_))));
}

#[test]
fn training_loss_falls_over_the_first_epochs() {
    let cfg = TrainConfig { epochs: 3, d_model: 16, ff_dim: 32, ..small_config() };
    let d = data(
        SynthSpec {
            train_examples: 150,
            test_examples: 10,
            implicit_fraction: 0.0,
            ..SynthSpec::default()
        },
        3,
    );
    let out = train(&cfg, &d).unwrap();
    let losses: Vec<f64> = out.epochs[1..].iter().map(|e| e.train_loss.unwrap()).collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn best_epoch_has_the_highest_validation_accuracy() {
    let cfg = TrainConfig { epochs: 4, ..small_config() };
    let out = train(&cfg, &small_data()).unwrap();
    let acc: Vec<f64> = out.epochs.iter().map(|e| e.val.as_ref().unwrap().accuracy).collect();
    let first_max = acc.iter().position(|&a| a == acc.iter().cloned().fold(f64::MIN, f64::max)).unwrap();
    assert_eq!(out.best_epoch, first_max);
}

#[test]
fn missing_train_path_is_a_config_error() {
    assert!(matches!(TrainData::load(&TrainConfig::default()), Err(Error::Config(_))));
}

#[test]
fn total_loss_matches_hand_computation() {
    let cfg = small_config();
    let out = train(&TrainConfig { epochs: 0, ..cfg }, &small_data()).unwrap();
    let params = &out.model.params;
    let probs = [[0.7, 0.2, 0.1], [0.1, 0.1, 0.8], [0.0, 1.0, 0.0]];
    let gold = [0, 1, 0];
    let mut model_sq = 0.0;
    let mut eta_sq = 0.0;
    for (_, p) in params.iter() {
        let s: f64 = p.value.data().iter().map(|x| x * x).sum();
        if p.group == GROUP_ETA {
            eta_sq += s;
        } else {
            model_sq += s;
        }
    }
    assert_eq!(eta_sq, 2.0);
    let ce = -(0.7f64.ln()) - 0.1f64.ln() - 1e-12f64.ln();
    let want = ce + 0.01 * model_sq + 0.3 * eta_sq;
    let got = total_loss(&probs, &gold, params, 0.01, 0.3);
    assert!((got - want).abs() <= 1e-9 * want.abs(), "{got} vs {want}");
}

#[test]
fn quantiles_of_one_to_five() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0];
    assert_eq!(quantile(&v, 0.5), 3.0);
    assert_eq!(quantile(&v, 0.25), 2.0);
    assert_eq!(quantile(&v, 0.75), 4.0);
    assert_eq!(Spread::of(&[5.0, 1.0, 4.0, 2.0, 3.0]), Spread { median: 3.0, iqr: 2.0 });
    assert_eq!(Spread::of(&[1.0, 2.0]).median, 1.5);
}

/// Per-class F1 from explicit counts, without a confusion matrix.
fn macro_f1_oracle(gold: &[usize], pred: &[usize]) -> (f64, f64) {
    let mut f1_sum = 0.0;
    for c in 0..3 {
        let tp = gold.iter().zip(pred).filter(|&(&g, &p)| g == c && p == c).count() as f64;
        let fp = gold.iter().zip(pred).filter(|&(&g, &p)| g != c && p == c).count() as f64;
        let fn_ = gold.iter().zip(pred).filter(|&(&g, &p)| g == c && p != c).count() as f64;
        if tp > 0.0 {
            f1_sum += 2.0 * tp / (2.0 * tp + fp + fn_);
        }
    }
    let correct = gold.iter().zip(pred).filter(|(g, p)| g == p).count() as f64;
    (correct / gold.len() as f64, f1_sum / 3.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn metrics_match_count_oracle(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..60)) {
        let (gold, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = Metrics::from_predictions(&gold, &pred).unwrap();
        let (acc, f1) = macro_f1_oracle(&gold, &pred);
        prop_assert!((m.accuracy - acc).abs() <= 1e-12);
        prop_assert!((m.macro_f1 - f1).abs() <= 1e-12);
        let cm = confusion_matrix(&gold, &pred);
        prop_assert_eq!(cm.iter().flatten().sum::<usize>(), gold.len());
        prop_assert_eq!(m.n_examples, gold.len());
    }
}
