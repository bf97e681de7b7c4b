//! Experiments on trained models: projection under noise, geodesic
//! interpolation, dataset-size scaling and the gridded manifold export.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use base64::Engine;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{salt_pepper, ssim3, ImageDataset, NoiseMode};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::gpdbn::{GpdbnModel, Predictor, ProjectConfig};
use crate::numerics::Tensor;
use crate::trainer::{self, BatchSize, TrainConfig};

/// Fraction of the training-latent range added on each side of the grid.
pub const BOUNDS_PADDING: f64 = 0.2;

fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

// ---------------------------------------------------------------- projection

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionRecord {
    pub index: usize,
    pub ssim_recon: f64,
    pub ssim_noisy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProjectionReport {
    pub records: Vec<ProjectionRecord>,
}

impl ProjectionReport {
    pub fn recon(&self) -> (f64, f64) {
        mean_sd(&self.records.iter().map(|r| r.ssim_recon).collect::<Vec<_>>())
    }

    pub fn noisy(&self) -> (f64, f64) {
        mean_sd(&self.records.iter().map(|r| r.ssim_noisy).collect::<Vec<_>>())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,ssim_recon,ssim_noisy\n");
        for r in &self.records {
            out.push_str(&format!("{},{:.6},{:.6}\n", r.index, r.ssim_recon, r.ssim_noisy));
        }
        out
    }

    pub fn summary(&self) -> String {
        let (rm, rs) = self.recon();
        let (nm, ns) = self.noisy();
        format!(
            "images={} ssim_recon={rm:.6}±{rs:.6} ssim_noisy={nm:.6}±{ns:.6}",
            self.records.len()
        )
    }
}

/// Corrupts each test image, projects it and scores the reconstruction and
/// the corrupted input against the clean image.
pub fn projection_experiment(
    model: &GpdbnModel,
    test: &ImageDataset,
    noise_fraction: f64,
    mode: NoiseMode,
    cfg: &ProjectConfig,
    rng: &mut impl Rng,
) -> Result<ProjectionReport> {
    projection_experiment_with(model, test, noise_fraction, mode, cfg, rng, |_| {})
}

/// [`projection_experiment`] with a callback per finished image.
pub fn projection_experiment_with(
    model: &GpdbnModel,
    test: &ImageDataset,
    noise_fraction: f64,
    mode: NoiseMode,
    cfg: &ProjectConfig,
    rng: &mut impl Rng,
    mut on_record: impl FnMut(&ProjectionRecord),
) -> Result<ProjectionReport> {
    if (test.width(), test.height()) != (model.width, model.height) {
        return Err(Error::invalid(format!(
            "test images are {}x{}, model expects {}x{}",
            test.width(),
            test.height(),
            model.width,
            model.height
        )));
    }
    let pred = model.predictor()?;
    let (w, h) = (model.width, model.height);
    let mut report = ProjectionReport::default();
    for index in 0..test.len() {
        let clean = test.image(index);
        let noisy = salt_pepper(&clean, noise_fraction, mode, rng)?;
        let proj = pred.project(&noisy, cfg, rng)?;
        let record = ProjectionRecord {
            index,
            ssim_recon: ssim3(&proj.recon, &clean, w, h)?,
            ssim_noisy: ssim3(&noisy, &clean, w, h)?,
        };
        on_record(&record);
        report.records.push(record);
    }
    Ok(report)
}

// ---------------------------------------------------------------- grid

/// Axis-aligned latent bounds, `[min, max]` per dimension.
pub type Bounds = Vec<[f64; 2]>;

/// Training-latent bounds padded by [`BOUNDS_PADDING`] of the range.
pub fn latent_bounds(model: &GpdbnModel) -> Bounds {
    let x = model.latents.tensor();
    (0..x.cols())
        .map(|k| {
            let (lo, hi) = (0..x.rows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| {
                (lo.min(x.get(i, k)), hi.max(x.get(i, k)))
            });
            let pad = if hi > lo { BOUNDS_PADDING * (hi - lo) } else { 1.0 };
            [lo - pad, hi + pad]
        })
        .collect()
}

fn linspace(lo: f64, hi: f64, n: usize, i: usize) -> f64 {
    if n == 1 {
        0.5 * (lo + hi)
    } else {
        lo + (hi - lo) * i as f64 / (n - 1) as f64
    }
}

/// Log predictive variance on a `res×res` grid over 2-D latent bounds.
/// Cell `iy·res + ix` sits at `(x[ix], y[iy])`, with inclusive endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceGrid {
    pub res: usize,
    pub bounds: Bounds,
    pub log_variance: Vec<f64>,
}

impl VarianceGrid {
    pub fn compute(pred: &Predictor<'_>, res: usize, bounds: Bounds) -> Result<Self> {
        let model = pred.model();
        if model.q() != 2 || bounds.len() != 2 {
            return Err(Error::invalid(format!("grids need a 2-D latent space, model has {}", model.q())));
        }
        if res < 2 {
            return Err(Error::invalid("grid resolution must be at least 2"));
        }
        let mut pts = Vec::with_capacity(res * res * 2);
        for iy in 0..res {
            for ix in 0..res {
                pts.push(linspace(bounds[0][0], bounds[0][1], res, ix));
                pts.push(linspace(bounds[1][0], bounds[1][1], res, iy));
            }
        }
        let (_, vars) = pred.posterior().predict_batch(&Tensor::matrix(res * res, 2, pts))?;
        let noise = model.kernel.noise();
        let log_variance = vars.data().iter().map(|v| (v + noise).ln()).collect();
        Ok(VarianceGrid { res, bounds, log_variance })
    }

    /// Latent coordinates of a cell.
    pub fn point(&self, node: usize) -> [f64; 2] {
        let (ix, iy) = (node % self.res, node / self.res);
        [
            linspace(self.bounds[0][0], self.bounds[0][1], self.res, ix),
            linspace(self.bounds[1][0], self.bounds[1][1], self.res, iy),
        ]
    }

    pub fn contains(&self, x: [f64; 2]) -> bool {
        (0..2).all(|k| x[k] >= self.bounds[k][0] && x[k] <= self.bounds[k][1])
    }

    /// Cell nearest to `x`.
    pub fn nearest(&self, x: [f64; 2]) -> usize {
        let idx = |k: usize| {
            let [lo, hi] = self.bounds[k];
            let t = ((x[k] - lo) / (hi - lo) * (self.res - 1) as f64).round();
            t.clamp(0.0, (self.res - 1) as f64) as usize
        };
        idx(1) * self.res + idx(0)
    }

    fn rescaled(&self) -> Vec<f64> {
        let lo = self.log_variance.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.log_variance.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        self.log_variance
            .iter()
            .map(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.0 })
            .collect()
    }

    fn neighbours(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let (ix, iy) = ((node % self.res) as isize, (node / self.res) as isize);
        let r = self.res as isize;
        (-1..=1)
            .flat_map(move |dy| (-1..=1).map(move |dx| (dx, dy)))
            .filter(|&d| d != (0, 0))
            .filter_map(move |(dx, dy)| {
                let (x, y) = (ix + dx, iy + dy);
                (x >= 0 && y >= 0 && x < r && y < r).then(|| (y * r + x) as usize)
            })
    }

    fn edge_weight(&self, rescaled: &[f64], a: usize, b: usize) -> f64 {
        let (pa, pb) = (self.point(a), self.point(b));
        let len = ((pa[0] - pb[0]).powi(2) + (pa[1] - pb[1]).powi(2)).sqrt();
        len * (1.0 + (0.5 * (rescaled[a] + rescaled[b])).exp())
    }

    /// Weighted cost of a chain of adjacent cells.
    pub fn path_cost(&self, nodes: &[usize]) -> f64 {
        let r = self.rescaled();
        nodes.windows(2).map(|w| self.edge_weight(&r, w[0], w[1])).sum()
    }

    /// Cheapest 8-connected cell chain from `from` to `to`. Ties are broken
    /// by node index and the search always starts from the lower index, so
    /// swapping the endpoints reverses the path.
    pub fn shortest_path(&self, from: usize, to: usize) -> Vec<usize> {
        if from > to {
            let mut p = self.shortest_path(to, from);
            p.reverse();
            return p;
        }
        let r = self.rescaled();
        let n = self.res * self.res;
        let mut dist = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        dist[from] = 0.0;
        heap.push(Entry { cost: 0.0, node: from });
        while let Some(Entry { cost, node }) = heap.pop() {
            if done[node] {
                continue;
            }
            done[node] = true;
            if node == to {
                break;
            }
            for nb in self.neighbours(node) {
                if done[nb] {
                    continue;
                }
                let c = cost + self.edge_weight(&r, node, nb);
                if c < dist[nb] || (c == dist[nb] && node < prev[nb]) {
                    dist[nb] = c;
                    prev[nb] = node;
                    heap.push(Entry { cost: c, node: nb });
                }
            }
        }
        let mut path = vec![to];
        while *path.last().unwrap() != from {
            path.push(prev[*path.last().unwrap()]);
        }
        path.reverse();
        path
    }
}

#[derive(Debug, PartialEq)]
struct Entry {
    cost: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on cost, then node index
        other.cost.total_cmp(&self.cost).then(other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// `frames` points spaced evenly by arc length along a polyline.
pub fn resample_polyline(points: &[[f64; 2]], frames: usize) -> Vec<[f64; 2]> {
    if points.len() < 2 || frames < 2 {
        return points.iter().take(1).copied().collect();
    }
    let seg: Vec<f64> = points
        .windows(2)
        .map(|w| ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt())
        .collect();
    let total: f64 = seg.iter().sum();
    if total == 0.0 {
        return vec![points[0]];
    }
    let mut out = Vec::with_capacity(frames);
    let (mut k, mut acc) = (0, 0.0);
    for f in 0..frames {
        if f == frames - 1 {
            out.push(*points.last().unwrap());
            break;
        }
        let target = total * f as f64 / (frames - 1) as f64;
        while k < seg.len() - 1 && acc + seg[k] < target {
            acc += seg[k];
            k += 1;
        }
        let t = if seg[k] > 0.0 { ((target - acc) / seg[k]).clamp(0.0, 1.0) } else { 0.0 };
        let (a, b) = (points[k], points[k + 1]);
        out.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
    }
    out
}

/// Low-variance path from `a` to `b` on a precomputed grid, resampled to
/// `frames` points. The path starts and ends exactly at the endpoints.
pub fn geodesic_on_grid(grid: &VarianceGrid, a: [f64; 2], b: [f64; 2], frames: usize) -> Result<Vec<[f64; 2]>> {
    for x in [a, b] {
        if !grid.contains(x) {
            return Err(Error::invalid(format!("endpoint {x:?} lies outside the manifold bounds {:?}", grid.bounds)));
        }
    }
    if a == b {
        return Ok(vec![a]);
    }
    let nodes = grid.shortest_path(grid.nearest(a), grid.nearest(b));
    let mut pts: Vec<[f64; 2]> = nodes.iter().map(|&n| grid.point(n)).collect();
    pts[0] = a;
    *pts.last_mut().unwrap() = b;
    if pts.len() == 1 {
        pts.push(b);
    }
    Ok(resample_polyline(&pts, frames))
}

/// Geodesic between two latent points over the padded training bounds.
pub fn geodesic_path(model: &GpdbnModel, a: [f64; 2], b: [f64; 2], grid_res: usize, frames: usize) -> Result<Vec<[f64; 2]>> {
    let pred = model.predictor()?;
    let grid = VarianceGrid::compute(&pred, grid_res, latent_bounds(model))?;
    geodesic_on_grid(&grid, a, b, frames)
}

// ---------------------------------------------------------------- interpolation

#[derive(Debug, Clone)]
pub struct InterpolationConfig {
    pub frames: usize,
    pub repeats: usize,
    pub j: usize,
    pub grid_res: usize,
}

impl Default for InterpolationConfig {
    fn default() -> Self {
        InterpolationConfig {
            frames: 8,
            repeats: 10,
            j: 25,
            grid_res: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationReport {
    pub mean: f64,
    pub sd: f64,
    /// Mean frame score of each repeat.
    pub repeats: Vec<f64>,
    /// Per-frame scores of the first repeat.
    pub frame_scores: Vec<f64>,
}

fn row_latent(model: &GpdbnModel, i: usize) -> [f64; 2] {
    let x = model.latents.tensor();
    [x.get(i, 0), x.get(i, 1)]
}

/// Decodes frames along the geodesic between the latents of the first and
/// last training images and scores each against its best match in
/// `family` (max SSIM). Repeats differ only in sampling noise.
pub fn interpolation_test(
    model: &GpdbnModel,
    family: &ImageDataset,
    cfg: &InterpolationConfig,
    rng: &mut impl Rng,
) -> Result<InterpolationReport> {
    if cfg.repeats == 0 || cfg.frames == 0 {
        return Err(Error::invalid("interpolation needs at least one frame and one repeat"));
    }
    if (family.width(), family.height()) != (model.width, model.height) {
        return Err(Error::invalid("family images do not match the model size"));
    }
    let pred = model.predictor()?;
    let grid = VarianceGrid::compute(&pred, cfg.grid_res, latent_bounds(model))?;
    let path = geodesic_on_grid(&grid, row_latent(model, 0), row_latent(model, model.n() - 1), cfg.frames)?;
    let (w, h) = (model.width, model.height);
    let mut repeats = Vec::with_capacity(cfg.repeats);
    let mut frame_scores = Vec::new();
    for r in 0..cfg.repeats {
        let mut scores = Vec::with_capacity(path.len());
        for p in &path {
            let img = pred.predict_mean(&Tensor::row_vector(p.to_vec()), cfg.j, rng)?;
            let mut best = 0.0f64;
            for k in 0..family.len() {
                best = best.max(ssim3(&img, &family.image(k), w, h)?);
            }
            scores.push(best);
        }
        repeats.push(scores.iter().sum::<f64>() / scores.len() as f64);
        if r == 0 {
            frame_scores = scores;
        }
    }
    let (mean, sd) = mean_sd(&repeats);
    Ok(InterpolationReport {
        mean,
        sd,
        repeats,
        frame_scores,
    })
}

// ---------------------------------------------------------------- scaling

#[derive(Debug, Clone)]
pub struct ScalingConfig {
    pub q: usize,
    /// Hidden widths, bottom to top, as accepted by [`DecoderConfig::from_arch`].
    pub arch: String,
    pub train: TrainConfig,
    /// Sizes above this train with mini-batches of `batch_size`.
    pub batch_threshold: usize,
    pub batch_size: usize,
    pub noise: f64,
    pub mode: NoiseMode,
    pub project: ProjectConfig,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        ScalingConfig {
            q: 10,
            arch: "200,100,50".into(),
            train: TrainConfig::default(),
            batch_threshold: 500,
            batch_size: 100,
            noise: 0.2,
            mode: NoiseMode::Resample,
            project: ProjectConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ScalingPoint {
    pub size: usize,
    pub report: ProjectionReport,
}

/// Trains on the first `size` training images for each size (same
/// iteration budget) and projects the noisy test images.
pub fn scaling_experiment(
    sizes: &[usize],
    train: &ImageDataset,
    test: &ImageDataset,
    cfg: &ScalingConfig,
    rng: &mut impl Rng,
) -> Result<Vec<ScalingPoint>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sizes must be strictly ascending"));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s > train.len() || s == 0) {
        return Err(Error::invalid(format!("size {s} is not within 1..={}", train.len())));
    }
    let dcfg = DecoderConfig::from_arch(&cfg.arch, train.pixels())?;
    sizes
        .iter()
        .map(|&size| {
            let subset = train.head(size)?;
            let model = trainer::init_model(&subset, &dcfg, cfg.q, cfg.train.seed)?;
            let mut tc = cfg.train.clone();
            if size > cfg.batch_threshold {
                tc.batch_size = BatchSize::Rows(cfg.batch_size.min(size));
            }
            let (model, _) = trainer::train(model, &subset, &tc)?;
            let report = projection_experiment(&model, test, cfg.noise, cfg.mode, &cfg.project, rng)?;
            Ok(ScalingPoint { size, report })
        })
        .collect()
}

// ---------------------------------------------------------------- export

/// Gridded decode and variance bundle for 2-D models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldExport {
    pub grid: usize,
    pub bounds: Vec<[f64; 2]>,
    /// Log predictive variance per cell, row-major over `iy·grid + ix`.
    pub variance: Vec<f64>,
    /// Base64 of each cell's decoded mean image as raw 8-bit pixels.
    pub thumbs: Vec<String>,
    pub latents: Vec<[f64; 2]>,
    pub width: usize,
    pub height: usize,
}

impl ManifoldExport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("export serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let e: ManifoldExport = serde_json::from_str(s).map_err(|e| Error::invalid(format!("malformed manifold export: {e}")))?;
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.grid * self.grid;
        if self.grid < 2 || self.variance.len() != cells || self.thumbs.len() != cells || self.bounds.len() != 2 {
            return Err(Error::invalid("manifold export sizes are inconsistent"));
        }
        if self.variance.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "manifold variance" });
        }
        for t in &self.thumbs {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(t)
                .map_err(|e| Error::invalid(format!("bad thumbnail encoding: {e}")))?;
            if bytes.len() != self.width * self.height {
                return Err(Error::invalid("thumbnail size does not match width×height"));
            }
        }
        Ok(())
    }

    pub fn thumb(&self, cell: usize) -> Result<Vec<u8>> {
        base64::engine::general_purpose::STANDARD
            .decode(&self.thumbs[cell])
            .map_err(|e| Error::invalid(format!("bad thumbnail encoding: {e}")))
    }

    /// The variance part as a grid for path finding.
    pub fn variance_grid(&self) -> VarianceGrid {
        VarianceGrid {
            res: self.grid,
            bounds: self.bounds.clone(),
            log_variance: self.variance.clone(),
        }
    }
}

/// Log variance and a `j`-sample mean decode at every cell of a `grid×grid`
/// lattice over the padded training bounds.
pub fn export_manifold(model: &GpdbnModel, grid: usize, j: usize, rng: &mut impl Rng) -> Result<ManifoldExport> {
    if model.q() != 2 {
        return Err(Error::invalid(format!("manifold export needs a 2-D latent space, model has {}", model.q())));
    }
    let pred = model.predictor()?;
    let vg = VarianceGrid::compute(&pred, grid, latent_bounds(model))?;
    let mut thumbs = Vec::with_capacity(grid * grid);
    for cell in 0..grid * grid {
        let img = pred.predict_mean(&Tensor::row_vector(vg.point(cell).to_vec()), j, rng)?;
        thumbs.push(base64::engine::general_purpose::STANDARD.encode(crate::data::quantize(img.data())));
    }
    Ok(ManifoldExport {
        grid,
        bounds: vg.bounds,
        variance: vg.log_variance,
        thumbs,
        latents: (0..model.n()).map(|i| row_latent(model, i)).collect(),
        width: model.width,
        height: model.height,
    })
}
