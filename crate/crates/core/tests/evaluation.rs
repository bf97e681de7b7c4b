mod common;

use std::sync::OnceLock;

use common::*;
use gpdbn_core::data::{gen_stars, ssim3, ImageDataset, NoiseMode};
use gpdbn_core::decoder::DecoderConfig;
use gpdbn_core::evaluation::*;
use gpdbn_core::gp::LatentPoints;
use gpdbn_core::gpdbn::{GpdbnModel, ProjectConfig};
use gpdbn_core::numerics::Tensor;
use gpdbn_core::trainer::{init_model, train, TrainConfig};
use proptest::prelude::*;

fn stars_model() -> &'static (GpdbnModel, ImageDataset) {
    static MODEL: OnceLock<(GpdbnModel, ImageDataset)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let stars = gen_stars(30, 16, 0).unwrap();
        let cfg = DecoderConfig::new(vec![10, 20, 40, 256]).unwrap();
        let model = init_model(&stars, &cfg, 2, 1).unwrap();
        let tc = TrainConfig { iters: 600, learning_rate: 0.01, ..TrainConfig::default() };
        (train(model, &stars, &tc).unwrap().0, stars)
    })
}

fn quick() -> ProjectConfig {
    ProjectConfig { restarts: 3, steps: 60, ..ProjectConfig::default() }
}

#[test]
fn report_csv_and_summary() {
    let report = ProjectionReport {
        records: vec![
            ProjectionRecord { index: 0, ssim_recon: 0.5, ssim_noisy: 0.25 },
            ProjectionRecord { index: 1, ssim_recon: 0.75, ssim_noisy: 0.25 },
        ],
    };
    assert_eq!(report.to_csv(), "index,ssim_recon,ssim_noisy\n0,0.500000,0.250000\n1,0.750000,0.250000\n");
    assert_eq!(report.recon(), (0.625, 0.125));
    assert_eq!(report.noisy(), (0.25, 0.0));
    assert!(report.summary().starts_with("images=2 "));
}

#[test]
fn clean_projection_beats_mean_image() {
    let (model, stars) = stars_model();
    let train_imgs = stars.subset(&[3, 20]).unwrap();
    let report = projection_experiment(model, &train_imgs, 0.0, NoiseMode::Resample, &quick(), &mut rng(1)).unwrap();
    assert_eq!(report.records.len(), 2);
    let mean = stars.mean_image();
    for r in &report.records {
        assert_eq!(r.ssim_noisy, 1.0);
        let base = ssim3(&mean, &train_imgs.image(r.index), 16, 16).unwrap();
        assert!(r.ssim_recon >= base, "{} < {base}", r.ssim_recon);
        assert!((0.0..=1.0).contains(&r.ssim_recon));
    }
}

fn uniform_grid(res: usize) -> VarianceGrid {
    VarianceGrid { res, bounds: vec![[0.0, 1.0], [0.0, 1.0]], log_variance: vec![0.0; res * res] }
}

#[test]
fn uniform_variance_gives_straight_paths() {
    let g = uniform_grid(11);
    let path = g.shortest_path(g.nearest([0.0, 0.5]), g.nearest([1.0, 0.5]));
    assert_eq!(path, (55..=65).collect::<Vec<_>>());
    let diag = g.shortest_path(0, 120);
    assert_eq!(diag, (0..=10).map(|i| i * 12).collect::<Vec<_>>());
    // off-axis: octile-optimal and inside the endpoints' bounding box
    let p = g.shortest_path(g.nearest([0.0, 0.0]), g.nearest([1.0, 0.5]));
    assert_eq!(p.len(), 11);
    assert!(p.iter().all(|&n| n / 11 <= 5));
}

#[test]
fn degenerate_geodesics_and_bounds() {
    let g = uniform_grid(8);
    assert_eq!(geodesic_on_grid(&g, [0.3, 0.3], [0.3, 0.3], 8).unwrap(), vec![[0.3, 0.3]]);
    assert!(geodesic_on_grid(&g, [0.3, 0.3], [1.3, 0.3], 8).is_err());
    let path = geodesic_on_grid(&g, [0.1, 0.2], [0.9, 0.7], 8).unwrap();
    assert_eq!(path.len(), 8);
    assert_eq!(path[0], [0.1, 0.2]);
    assert_eq!(path[7], [0.9, 0.7]);
}

#[test]
fn resampling_is_even_by_arc_length() {
    let pts = [[0.0, 0.0], [1.0, 0.0], [1.0, 2.0]];
    let r = resample_polyline(&pts, 4);
    let want = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [1.0, 2.0]];
    for (a, b) in r.iter().zip(want) {
        assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12, "{r:?}");
    }
}

fn random_grid(res: usize, vals: Vec<f64>) -> VarianceGrid {
    VarianceGrid { res, bounds: vec![[-1.0, 2.0], [0.0, 1.5]], log_variance: vals }
}

/// Straight chain: diagonal steps first, then axis steps.
fn straight_chain(res: usize, from: usize, to: usize) -> Vec<usize> {
    let (mut x, mut y) = ((from % res) as isize, (from / res) as isize);
    let (tx, ty) = ((to % res) as isize, (to / res) as isize);
    let mut out = vec![from];
    while (x, y) != (tx, ty) {
        x += (tx - x).signum();
        y += (ty - y).signum();
        out.push((y * res as isize + x) as usize);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn geodesics_are_symmetric_and_optimal(
        vals in proptest::collection::vec(-3.0f64..1.0, 81),
        a in 0usize..81,
        b in 0usize..81,
    ) {
        let g = random_grid(9, vals);
        let ab = g.shortest_path(a, b);
        let mut ba = g.shortest_path(b, a);
        ba.reverse();
        prop_assert_eq!(&ab, &ba);
        prop_assert_eq!(ab[0], a);
        prop_assert_eq!(*ab.last().unwrap(), b);
        let straight = straight_chain(9, a, b);
        prop_assert!(g.path_cost(&ab) <= g.path_cost(&straight) + 1e-12);
    }
}

fn spread_model() -> GpdbnModel {
    let (mut model, _) = tiny(6, 3);
    let x = Tensor::matrix(6, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 4.0, 4.0, 5.0, 4.0, 4.0, 5.0]);
    model.latents = LatentPoints::new(x).unwrap();
    model.kernel.log_lengthscale = 0.25f64.ln();
    model
}

#[test]
fn export_variance_limits_and_ranks() {
    let model = spread_model();
    let e = export_manifold(&model, 12, 2, &mut rng(1)).unwrap();
    assert_eq!(e.variance.len(), 144);
    assert_eq!(e.thumbs.len(), 144);
    assert_eq!(e.latents.len(), 6);
    let limit = (model.kernel.alpha2() + model.kernel.noise()).ln();
    assert!((e.variance[11] - limit).abs() < 1e-6, "{} vs {limit}", e.variance[11]);
    let mut sorted = e.variance.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[72];
    let grid = e.variance_grid();
    for x in &e.latents {
        assert!(e.variance[grid.nearest(*x)] < median);
    }
    assert_eq!(e.thumb(0).unwrap().len(), 64);
}

#[test]
fn export_is_deterministic_and_round_trips() {
    let model = spread_model();
    let a = export_manifold(&model, 6, 3, &mut rng(5)).unwrap();
    let b = export_manifold(&model, 6, 3, &mut rng(5)).unwrap();
    assert_eq!(a, b);
    let json = a.to_json();
    let back = ManifoldExport::from_json(&json).unwrap();
    assert_eq!(back, a);
    assert!(back.variance.iter().zip(&a.variance).all(|(x, y)| x.to_bits() == y.to_bits()));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    for key in ["grid", "bounds", "variance", "thumbs", "latents"] {
        assert!(v.get(key).is_some(), "{key}");
    }
    assert!(ManifoldExport::from_json("{\"grid\":3}").is_err());
}

#[test]
fn export_needs_two_latent_dimensions() {
    let data = random_images(5, 2);
    let cfg = DecoderConfig::new(vec![4, 6, 8, 64]).unwrap();
    let model = init_model(&data, &cfg, 3, 1).unwrap();
    assert!(export_manifold(&model, 5, 1, &mut rng(1)).is_err());
    assert!(geodesic_path(&model, [0.0, 0.0], [0.1, 0.1], 8, 8).is_err());
}

#[test]
fn interpolation_report_shape() {
    let (model, stars) = stars_model();
    let cfg = InterpolationConfig { frames: 5, repeats: 1, j: 4, grid_res: 24 };
    let r = interpolation_test(model, stars, &cfg, &mut rng(3)).unwrap();
    assert_eq!(r.sd, 0.0);
    assert_eq!(r.frame_scores.len(), 5);
    assert_eq!(r.repeats.len(), 1);
    assert!((0.0..=1.0).contains(&r.mean));
    let path = geodesic_path(model, [0.0, 0.0], [0.0, 0.0], 16, 8).unwrap();
    assert_eq!(path.len(), 1);
}

#[test]
fn scaling_experiment_shape_and_errors() {
    let data = random_images(12, 6);
    let test = random_images(2, 7);
    let cfg = ScalingConfig {
        q: 2,
        arch: "8,6,4".into(),
        train: TrainConfig { iters: 3, ..TrainConfig::default() },
        batch_threshold: 6,
        batch_size: 4,
        project: ProjectConfig { restarts: 1, steps: 3, v_samples: 1, j: 2, ..ProjectConfig::default() },
        ..ScalingConfig::default()
    };
    let out = scaling_experiment(&[4, 10], &data, &test, &cfg, &mut rng(1)).unwrap();
    assert_eq!(out.len(), 2);
    assert_eq!(out[1].report.records.len(), 2);
    assert!(scaling_experiment(&[10, 4], &data, &test, &cfg, &mut rng(1)).is_err());
    assert!(scaling_experiment(&[20], &data, &test, &cfg, &mut rng(1)).is_err());
}
