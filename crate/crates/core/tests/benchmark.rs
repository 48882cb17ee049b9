//! Planted-shortcut benchmark checked against closed-form group accuracies.
//!
//! For a two-class linear probe with score difference `d(x) = w.x + b` and
//! `x ~ N(mu_g, sigma^2 I)`, group `g` is classified correctly with
//! probability `Phi(s(y) (w.mu_g + b) / (sigma |w|))`. A probe applied after
//! a projector `P` behaves like one with weights `P w`.

use corelens::distiller::{build_basis, projector_matrix, DEFAULT_DROP_TOLERANCE};
use corelens::embstore::{generate_synthetic, split, SyntheticConfig, SyntheticData};
use corelens::linalg::{dot, norm};
use corelens::metrics::group_report;
use corelens::probe::{predict, train_dfr, train_erm, LinearProbe, TrainConfig};
use corelens::EmbeddingSet;
use statrs::distribution::{ContinuousCDF, Normal};

const SIGMA: f64 = 0.5;

fn config(seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        group_counts: [900, 100, 100, 900],
        dim: 64,
        beta_core: 1.0,
        beta_spur: 1.0,
        sigma: SIGMA,
        seed,
    }
}

fn phi(x: f64) -> f64 {
    Normal::new(0.0, 1.0).unwrap().cdf(x)
}

fn sign(bit: usize) -> f64 {
    if bit == 0 {
        -1.0
    } else {
        1.0
    }
}

fn score_difference(probe: &LinearProbe) -> (Vec<f64>, f64) {
    let w = probe.weights();
    let dw = w.row(1).iter().zip(w.row(0)).map(|(a, b)| a - b).collect();
    (dw, probe.bias()[1] - probe.bias()[0])
}

/// Exact worst-group accuracy of the score difference `(dw, db)`.
fn population_wga(dw: &[f64], db: f64, data: &SyntheticData) -> f64 {
    let spread = SIGMA * norm(dw);
    (0..4)
        .map(|g| {
            let (y, a) = (g / 2, g % 2);
            let mean = sign(y) * dot(dw, &data.core_dir) + sign(a) * dot(dw, &data.spur_dir) + db;
            phi(sign(y) * mean / spread)
        })
        .fold(f64::INFINITY, f64::min)
}

fn splits(data: &SyntheticData, seed: u64) -> (EmbeddingSet, EmbeddingSet, EmbeddingSet) {
    split(&data.set, (0.6, 0.2, 0.2), seed).unwrap()
}

#[test]
fn bayes_accuracy_of_the_core_direction() {
    // beta_core / sigma = 2 standard deviations.
    assert!((phi(1.0 / SIGMA) - 0.97725).abs() < 1e-5);
}

#[test]
fn cell_means_sit_on_the_planted_directions() {
    let data = generate_synthetic(&config(11)).unwrap();
    let set = &data.set;
    assert!(dot(&data.core_dir, &data.spur_dir).abs() < 1e-12);
    for g in 0..4 {
        let idx: Vec<usize> = (0..set.len()).filter(|&i| set.groups()[i] == g).collect();
        let n = idx.len() as f64;
        let core = idx.iter().map(|&i| dot(set.row(i), &data.core_dir)).sum::<f64>() / n;
        let spur = idx.iter().map(|&i| dot(set.row(i), &data.spur_dir)).sum::<f64>() / n;
        let tol = 5.0 * SIGMA / n.sqrt();
        assert!((core - sign(g / 2)).abs() < tol, "group {g}: core mean {core}");
        assert!((spur - sign(g % 2)).abs() < tol, "group {g}: spur mean {spur}");
    }
    assert_eq!(set.group_counts(), vec![900, 100, 100, 900]);
}

#[test]
fn erm_leans_on_the_shortcut_and_dfr_does_not() {
    for seed in [0, 1, 2] {
        let data = generate_synthetic(&config(seed)).unwrap();
        let (train, val, _) = splits(&data, seed);

        let erm = train_erm(&train, &val, &TrainConfig::erm(seed)).unwrap();
        let (dw, db) = score_difference(&erm.probe);
        let erm_wga = population_wga(&dw, db, &data);
        assert!(erm_wga <= 0.75, "seed {seed}: ERM population WGA {erm_wga}");

        let dfr = train_dfr(&train, &val, &TrainConfig::dfr(seed)).unwrap();
        let (dw, db) = score_difference(&dfr.probe);
        let dfr_wga = population_wga(&dw, db, &data);
        assert!(dfr_wga >= 0.90, "seed {seed}: DFR population WGA {dfr_wga}");
    }
}

#[test]
fn retraining_after_removing_the_spurious_direction() {
    for seed in [0, 1, 2] {
        let data = generate_synthetic(&config(seed)).unwrap();
        let (train, val, _) = splits(&data, seed);
        let basis = build_basis(std::slice::from_ref(&data.spur_dir), DEFAULT_DROP_TOLERANCE).unwrap();
        let p = projector_matrix(&basis).unwrap();
        let probe = train_erm(&p.apply_set(&train).unwrap(), &p.apply_set(&val).unwrap(), &TrainConfig::erm(seed))
            .unwrap()
            .probe;
        let (dw, db) = score_difference(&probe);
        let effective = p.apply(&dw).unwrap();
        assert!(dot(&effective, &data.spur_dir).abs() < 1e-9);
        let wga = population_wga(&effective, db, &data);
        assert!(wga >= 0.90, "seed {seed}: projected ERM population WGA {wga}");
    }
}

#[test]
fn training_log_is_consistent() {
    let data = generate_synthetic(&config(5)).unwrap();
    let (train, val, test) = splits(&data, 5);
    let cfg = TrainConfig::dfr(5);
    let run = train_dfr(&train, &val, &cfg).unwrap();
    let log = &run.log;

    assert_eq!(log.epochs.len(), cfg.epochs);
    let best = log.epochs.iter().map(|e| e.val_wga).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(log.selected_val_wga, best);
    let first_best = log.epochs.iter().position(|e| e.val_wga == best).unwrap() + 1;
    assert_eq!(log.selected_epoch, first_best);
    assert!(log.step_losses.iter().all(|l| l.is_finite()));
    assert!(log.epochs.last().unwrap().train_loss <= log.initial_train_loss);
    // Zero-initialized weights start at log(2) for two classes.
    assert!((log.initial_train_loss - 2f64.ln()).abs() < 1e-12);
    // Learning rates only ever shrink.
    assert!(log.epochs.windows(2).all(|w| w[1].learning_rate <= w[0].learning_rate));

    // Balanced-group weights: N / (G N_g).
    let counts = train.group_counts();
    for (g, &w) in log.group_weights.iter().enumerate() {
        let expected = train.len() as f64 / (4.0 * counts[g] as f64);
        assert!((w - expected).abs() < 1e-12);
    }

    let report = group_report(&predict(&run.probe, &test).unwrap().labels, &test).unwrap();
    assert_eq!(report.per_group.len(), 4);
}

#[test]
fn reweighting_is_a_no_op_on_balanced_groups() {
    let mut cfg = config(3);
    cfg.group_counts = [250, 250, 250, 250];
    let data = generate_synthetic(&cfg).unwrap();
    let (train, val, _) = splits(&data, 3);
    // Make the training split exactly balanced.
    let mut taken = [0usize; 4];
    let idx: Vec<usize> = (0..train.len())
        .filter(|&i| {
            let g = train.groups()[i];
            taken[g] += 1;
            taken[g] <= 120
        })
        .collect();
    let train = train.subset(&idx).unwrap();
    assert_eq!(train.group_counts(), vec![120; 4]);

    let tc = TrainConfig::dfr(3);
    let a = train_erm(&train, &val, &tc).unwrap();
    let b = train_dfr(&train, &val, &tc).unwrap();
    assert_eq!(a.probe.weights(), b.probe.weights());
    assert_eq!(a.probe.bias(), b.probe.bias());
}

#[test]
fn dfr_refuses_an_empty_group() {
    let data = generate_synthetic(&config(0)).unwrap();
    let (train, val, _) = splits(&data, 0);
    let keep: Vec<usize> = (0..train.len()).filter(|&i| train.groups()[i] != 1).collect();
    let train = train.subset(&keep).unwrap();
    let err = train_dfr(&train, &val, &TrainConfig::dfr(0)).unwrap_err();
    assert!(err.to_string().contains("group 1"), "{err}");
}
