mod common;

use common::*;
use gpdbn_core::checkpoint;
use gpdbn_core::data::{gen_stars, ImageDataset};
use gpdbn_core::decoder::DecoderConfig;
use gpdbn_core::gpdbn::{objective_with_noise, ObjectiveNoise, ObjectiveOptions};
use gpdbn_core::numerics::Tensor;
use gpdbn_core::trainer::*;
use gpdbn_core::Error;
use proptest::prelude::*;

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut params = vec![Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5])];
    let before = params.clone();
    let mut adam = Adam::new(0.1, &params);
    for _ in 0..5 {
        adam.step(&mut params, &[Tensor::zeros(1, 3)]);
    }
    assert_eq!(params, before);
}

#[test]
fn adam_first_step_moves_by_learning_rate() {
    let mut params = vec![Tensor::scalar(1.0)];
    let mut adam = Adam::new(0.01, &params);
    adam.step(&mut params, &[Tensor::scalar(5.0)]);
    assert!((params[0].item() - 0.99).abs() < 1e-9);
}

/// One-sided Jacobi eigensolver for small symmetric matrices.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j].powi(2)).sum();
        if off < 1e-22 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn toy_set() -> Tensor {
    // eight 4×4 images
    let rows: Vec<[u8; 16]> = vec![
        [1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
        [1, 1, 1, 0, 1, 1, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0],
        [0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0],
        [0, 1, 1, 1, 0, 1, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0],
        [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0],
        [0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 1, 0, 1, 1, 1, 0],
        [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1],
        [1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1],
    ];
    Tensor::matrix(8, 16, rows.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect())
}

/// Unit-variance principal scores from the Jacobi eigenvectors of the
/// covariance matrix, sign-aligned with `reference`.
fn oracle_scores(x: &Tensor, k: usize, reference: &[f64]) -> Vec<f64> {
    let (n, p) = x.dims();
    let mean = x.column_means();
    let c: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            (0..p)
                .map(|j| (0..n).map(|r| (x.get(r, i) - mean.get(0, i)) * (x.get(r, j) - mean.get(0, j))).sum())
                .collect()
        })
        .collect();
    let (vals, vecs) = jacobi_eigen(c);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let v: Vec<f64> = (0..p).map(|i| vecs[i][order[k]]).collect();
    let raw: Vec<f64> = (0..n).map(|r| (0..p).map(|i| (x.get(r, i) - mean.get(0, i)) * v[i]).sum()).collect();
    let sd = (raw.iter().map(|s| s * s).sum::<f64>() / n as f64).sqrt();
    let sign = raw.iter().zip(reference).map(|(a, b)| a * b).sum::<f64>().signum();
    raw.iter().map(|r| sign * r / sd).collect()
}

#[test]
fn pca_matches_brute_force_eigendecomposition() {
    // N < P takes the Gram path, N > P the covariance path
    let tall = Tensor::matrix(8, 3, (0..24).map(|i| ((i * 7 % 5) as f64 + 0.3 * i as f64).sin()).collect());
    for x in [toy_set(), tall] {
        let scores = pca_scores(&x, 2);
        for (k, got) in scores.iter().enumerate() {
            let got = got.as_ref().unwrap();
            let want = oracle_scores(&x, k, got);
            for r in 0..x.rows() {
                assert!((want[r] - got[r]).abs() < 1e-8, "component {k} row {r}");
            }
        }
    }
}

#[test]
fn init_is_deterministic_and_standardized() {
    let data = random_images(12, 4);
    let cfg = DecoderConfig::new(vec![4, 6, 8, 64]).unwrap();
    let a = init_model(&data, &cfg, 2, 9).unwrap();
    let b = init_model(&data, &cfg, 2, 9).unwrap();
    assert_eq!(checkpoint::encode(&a), checkpoint::encode(&b));
    let x = a.latents.tensor();
    for k in 0..2 {
        let col: Vec<f64> = (0..12).map(|i| x.get(i, k)).collect();
        let mu = col.iter().sum::<f64>() / 12.0;
        let var = col.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 12.0;
        assert!((var - 1.0).abs() < 1e-6, "{var}");
    }
}

#[test]
fn degenerate_data_falls_back_to_random_latents() {
    let same = ImageDataset::new(Tensor::full(5, 64, 1.0), 8, 8, "same").unwrap();
    let cfg = DecoderConfig::new(vec![4, 6, 8, 64]).unwrap();
    let m = init_model(&same, &cfg, 2, 1).unwrap();
    let x = m.latents.tensor();
    assert!(x.max_abs() > 0.0 && x.max_abs() < 1.0);
}

#[test]
fn zero_iterations_leave_model_unchanged() {
    let (model, data) = tiny(6, 2);
    let cfg = TrainConfig { iters: 0, ..TrainConfig::default() };
    let (after, log) = train(model.clone(), &data, &cfg).unwrap();
    assert_eq!(after, model);
    assert!(log.records.is_empty());
}

#[test]
fn training_is_reproducible() {
    let (model, data) = tiny(6, 3);
    let cfg = TrainConfig {
        iters: 20,
        learning_rate: 0.01,
        batch_size: BatchSize::Rows(3),
        log_every: 5,
        seed: 7,
        ..TrainConfig::default()
    };
    let (a, la) = train(model.clone(), &data, &cfg).unwrap();
    let (b, _) = train(model, &data, &cfg).unwrap();
    assert_eq!(checkpoint::encode(&a), checkpoint::encode(&b));
    let iters: Vec<u64> = la.records.iter().map(|r| r.iter).collect();
    assert_eq!(iters, vec![1, 5, 10, 15, 20]);
    assert!(a.all_finite());
    let line = la.records[0].to_string();
    assert!(line.starts_with("iter=1 total="), "{line}");
    for key in ["data=", "joint=", "complexity=", "prior=", "ms="] {
        assert!(line.contains(key));
    }
}

#[test]
fn full_size_batch_matches_full_objective_on_first_step() {
    let (model, data) = tiny(5, 6);
    let full = TrainConfig { iters: 1, seed: 3, ..TrainConfig::default() };
    let rows = TrainConfig { batch_size: BatchSize::Rows(5), ..full.clone() };
    let (a, la) = train(model.clone(), &data, &full).unwrap();
    let (b, lb) = train(model, &data, &rows).unwrap();
    assert_eq!(la.records[0].breakdown, lb.records[0].breakdown);
    assert_eq!(a.latents, b.latents);
    assert_eq!(a.layers, b.layers);
}

#[test]
fn objective_decreases_on_stars() {
    let stars = gen_stars(30, 16, 0).unwrap();
    let cfg = DecoderConfig::new(vec![10, 20, 40, 256]).unwrap();
    let model = init_model(&stars, &cfg, 2, 0).unwrap();
    let tc = TrainConfig { iters: 3000, learning_rate: 0.01, log_every: 1, ..TrainConfig::default() };
    let (_, log) = train(model, &stars, &tc).unwrap();
    let totals: Vec<f64> = log.records.iter().map(|r| r.breakdown.total).collect();
    assert_eq!(totals.len(), 3000);
    let mean = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    assert!(mean(&totals[2900..]) < mean(&totals[..100]));
    assert!(totals[totals.len() - 1] < totals[0]);
}

#[test]
fn checkpoints_are_written_and_resumable() {
    let (model, data) = tiny(6, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let cfg = TrainConfig {
        iters: 6,
        learning_rate: 0.01,
        checkpoint_path: Some(path.clone()),
        checkpoint_every: Some(2),
        ..TrainConfig::default()
    };
    let (trained, _) = train(model, &data, &cfg).unwrap();
    let loaded = checkpoint::load(&path).unwrap();
    assert_eq!(loaded, trained);
    assert_eq!(loaded.trained_iters, 6);
    let (more, log) = train(loaded, &data, &TrainConfig { checkpoint_path: None, ..cfg }).unwrap();
    assert_eq!(more.trained_iters, 12);
    assert_eq!(log.records[0].iter, 7);
}

#[test]
fn divergence_keeps_last_good_checkpoint() {
    let (model, data) = tiny(6, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let cfg = TrainConfig {
        iters: 50,
        learning_rate: 1e12,
        checkpoint_path: Some(path.clone()),
        ..TrainConfig::default()
    };
    match train(model.clone(), &data, &cfg) {
        Err(Error::Diverged { .. }) | Err(Error::NotPositiveDefinite { .. }) => {
            assert_eq!(checkpoint::load(&path).unwrap(), model);
        }
        Err(e) => panic!("unexpected error {e}"),
        Ok((m, _)) => assert!(m.all_finite()),
    }
}

#[test]
fn config_validation() {
    let (model, data) = tiny(4, 1);
    let bad = TrainConfig { batch_size: BatchSize::Rows(5), ..TrainConfig::default() };
    assert!(train(model.clone(), &data, &bad).is_err());
    let bad = TrainConfig { learning_rate: 0.0, ..TrainConfig::default() };
    assert!(train(model, &data, &bad).is_err());
    assert_eq!("full".parse::<BatchSize>().unwrap(), BatchSize::Full);
    assert_eq!("100".parse::<BatchSize>().unwrap(), BatchSize::Rows(100));
    assert!("0".parse::<BatchSize>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn parameters_stay_finite_and_terms_add_up(seed in 0u64..1000) {
        let (model, data) = tiny(5, seed);
        let cfg = TrainConfig { iters: 5, learning_rate: 0.01, seed, ..TrainConfig::default() };
        let (m, log) = train(model, &data, &cfg).unwrap();
        prop_assert!(m.all_finite());
        for r in &log.records {
            let b = r.breakdown;
            let sum = b.data_term + b.joint_term + b.complexity_term + b.prior_term;
            prop_assert!((b.total - sum).abs() <= 1e-12 * b.total.abs().max(1.0));
            prop_assert!(b.joint_term >= 0.0);
        }
        let noise = ObjectiveNoise::draw(&m.cfg, 5, &mut rng(seed));
        let b = objective_with_noise(&m, data.images(), None, &noise, ObjectiveOptions::default()).unwrap();
        prop_assert!(b.total.is_finite());
    }
}
