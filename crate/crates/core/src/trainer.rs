//! Model initialization and the Adam training loop.

use std::path::PathBuf;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::SeedableRng;
use rand_pcg::Pcg64;

use crate::checkpoint;
use crate::data::ImageDataset;
use crate::decoder::{ConcreteLayer, DecoderConfig, GaussianTop};
use crate::error::{Error, Result};
use crate::gp::{KernelParams, LatentPoints};
use crate::gpdbn::{self, GpdbnModel, ModelVars, ObjectiveBreakdown, ObjectiveNoise, ObjectiveOptions};
use crate::numerics::{Graph, Tensor};

/// Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(learning_rate: f64, params: &[Tensor]) -> Self {
        Adam::with_moments(learning_rate, 0.9, 0.999, 1e-8, params)
    }

    pub fn with_moments(learning_rate: f64, beta1: f64, beta2: f64, eps: f64, params: &[Tensor]) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.rows(), t.cols());
        Adam {
            learning_rate,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed between Adam steps");
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let p = p.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, &gk) in g.data().iter().enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] -= self.learning_rate * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    Full,
    Rows(usize),
}

impl std::str::FromStr for BatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(BatchSize::Full);
        }
        match s.parse::<usize>() {
            Ok(b) if b > 0 => Ok(BatchSize::Rows(b)),
            _ => Err(Error::invalid(format!("batch size must be a positive count or \"full\", got {s:?}"))),
        }
    }
}

/// Multiply the learning rate by `factor` every `every` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepDecay {
    pub every: u64,
    pub factor: f64,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub iters: u64,
    pub batch_size: BatchSize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub log_every: u64,
    pub checkpoint_path: Option<PathBuf>,
    /// Also checkpoint every this many iterations.
    pub checkpoint_every: Option<u64>,
    pub decay: Option<StepDecay>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 1000,
            batch_size: BatchSize::Full,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            log_every: 100,
            checkpoint_path: None,
            checkpoint_every: None,
            decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        if let BatchSize::Rows(b) = self.batch_size {
            if b == 0 || b > n {
                return Err(Error::invalid(format!("batch size {b} outside 1..={n}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.log_every == 0 {
            return Err(Error::invalid("log_every must be at least 1"));
        }
        if let Some(d) = self.decay {
            if d.every == 0 || !(d.factor > 0.0) {
                return Err(Error::invalid("step decay needs a positive period and factor"));
            }
        }
        Ok(())
    }

    fn learning_rate_at(&self, iter: u64) -> f64 {
        match self.decay {
            Some(d) => self.learning_rate * d.factor.powi((iter / d.every) as i32),
            None => self.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainRecord {
    pub iter: u64,
    pub breakdown: ObjectiveBreakdown,
    /// Wall-clock milliseconds since training started.
    pub ms: f64,
}

impl std::fmt::Display for TrainRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let b = &self.breakdown;
        write!(
            f,
            "iter={} total={:.6e} data={:.6e} joint={:.6e} complexity={:.6e} prior={:.6e} ms={:.1}",
            self.iter, b.total, b.data_term, b.joint_term, b.complexity_term, b.prior_term, self.ms
        )
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        self.records.iter().map(|r| format!("{r}\n")).collect()
    }
}

/// First `q` principal-component scores of the rows of `data`, each column
/// rescaled to unit variance. Columns without signal are `None`.
pub fn pca_scores(data: &Tensor, q: usize) -> Vec<Option<Vec<f64>>> {
    let (n, p) = data.dims();
    let mean = data.column_means();
    let centered = DMatrix::from_fn(n, p, |i, j| data.get(i, j) - mean.get(0, j));
    // eigendecompose whichever of the Gram and covariance matrices is smaller
    let (eig, dual) = if n <= p {
        (SymmetricEigen::new(&centered * centered.transpose()), true)
    } else {
        (SymmetricEigen::new(centered.transpose() * &centered), false)
    };
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);

    (0..q)
        .map(|k| {
            let &idx = order.get(k)?;
            if eig.eigenvalues[idx] <= 1e-10 * scale {
                return None;
            }
            let vec = eig.eigenvectors.column(idx);
            let mut scores: Vec<f64> = if dual {
                vec.iter().copied().collect()
            } else {
                (centered.clone() * vec).iter().copied().collect()
            };
            let mu = scores.iter().sum::<f64>() / n as f64;
            let var = scores.iter().map(|s| (s - mu).powi(2)).sum::<f64>() / n as f64;
            if !(var > 0.0) {
                return None;
            }
            let sd = var.sqrt();
            // fix the sign so the largest-magnitude score is positive
            let pivot = scores
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |best, (i, &s)| if s.abs() > best.1.abs() { (i, s) } else { best });
            let sign = if pivot.1 < 0.0 { -1.0 } else { 1.0 };
            for s in &mut scores {
                *s = sign * (*s - mu) / sd;
            }
            Some(scores)
        })
        .collect()
}

/// PCA latents, small random activation means and freshly initialized
/// decoder weights. Deterministic in `seed`.
pub fn init_model(data: &ImageDataset, cfg: &DecoderConfig, q: usize, seed: u64) -> Result<GpdbnModel> {
    if q == 0 {
        return Err(Error::invalid("latent dimension must be at least 1"));
    }
    if cfg.pixels() != data.pixels() {
        return Err(Error::invalid(format!(
            "decoder emits {} pixels but images have {}",
            cfg.pixels(),
            data.pixels()
        )));
    }
    let mut rng = Pcg64::seed_from_u64(seed);
    let n = data.len();
    let d = cfg.top_dim();
    let scores = pca_scores(data.images(), q);
    let mut x = Tensor::zeros(n, q);
    for (k, col) in scores.into_iter().enumerate() {
        match col {
            Some(col) => {
                for (i, v) in col.into_iter().enumerate() {
                    x.set(i, k, v);
                }
            }
            None => {
                log::debug!("latent dimension {k} has no principal component, using random init");
                let noise = gpdbn::standard_normal(n, 1, &mut rng);
                for i in 0..n {
                    x.set(i, k, 0.1 * noise.get(i, 0));
                }
            }
        }
    }
    let a = gpdbn::standard_normal(n, d, &mut rng).scale(0.01);
    let layers = cfg
        .layer_sizes()
        .windows(2)
        .map(|w| ConcreteLayer::init(w[0], w[1], &mut rng))
        .collect();
    let mut model = GpdbnModel {
        latents: LatentPoints::new(x)?,
        a,
        kernel: KernelParams::default(),
        top: GaussianTop::new(d),
        layers,
        cfg: cfg.clone(),
        h_snapshot: Tensor::zeros(n, d),
        train_noise: true,
        width: data.width(),
        height: data.height(),
        trained_iters: 0,
    };
    model.refresh_snapshot(&mut rng)?;
    Ok(model)
}

fn params_of(model: &GpdbnModel) -> Vec<Tensor> {
    let k = model.kernel;
    let mut v = vec![
        model.latents.tensor().clone(),
        model.a.clone(),
        Tensor::scalar(k.log_alpha2),
        Tensor::scalar(k.log_lengthscale),
        Tensor::scalar(k.log_noise),
        model.top.log_sigma.clone(),
    ];
    for l in &model.layers {
        v.push(l.w.clone());
        v.push(l.b.clone());
    }
    v
}

fn set_params(model: &mut GpdbnModel, params: Vec<Tensor>) -> Result<()> {
    let mut it = params.into_iter();
    let mut next = || it.next().expect("parameter list matches model");
    model.latents = LatentPoints::new(next())?;
    model.a = next();
    model.kernel = KernelParams {
        log_alpha2: next().item(),
        log_lengthscale: next().item(),
        log_noise: next().item(),
    };
    model.top.log_sigma = next();
    for l in &mut model.layers {
        l.w = next();
        l.b = next();
    }
    Ok(())
}

/// Runs `cfg.iters` Adam steps on the objective (or its mini-batch
/// estimator). On a non-finite step the error is returned and any
/// checkpoint on disk is left at its last finite state.
pub fn train(model: GpdbnModel, data: &ImageDataset, cfg: &TrainConfig) -> Result<(GpdbnModel, TrainLog)> {
    train_with(model, data, cfg, |_| {})
}

/// [`train`] with a callback invoked on every logged record.
pub fn train_with(
    mut model: GpdbnModel,
    data: &ImageDataset,
    cfg: &TrainConfig,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<(GpdbnModel, TrainLog)> {
    model.validate()?;
    let n = model.n();
    if data.len() != n || data.pixels() != model.pixels() {
        return Err(Error::invalid(format!(
            "model expects {n} images of {} pixels, dataset has {} of {}",
            model.pixels(),
            data.len(),
            data.pixels()
        )));
    }
    cfg.validate(n)?;
    let mut log = TrainLog::default();
    if cfg.iters == 0 {
        return Ok((model, log));
    }

    let start_iter = model.trained_iters;
    let mut rng = Pcg64::seed_from_u64(cfg.seed ^ start_iter.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut params = params_of(&model);
    let mut adam = Adam::with_moments(cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, &params);
    let batch = match cfg.batch_size {
        BatchSize::Rows(b) if b < n => Some(b),
        _ => None,
    };
    let started = Instant::now();

    for step in 1..=cfg.iters {
        let iter = start_iter + step;
        let idx = batch.map(|b| index::sample(&mut rng, n, b).into_vec());
        let rows = idx.as_ref().map_or(n, Vec::len);
        let noise = ObjectiveNoise::draw(&model.cfg, rows, &mut rng);

        let mut g = Graph::new();
        let vars = ModelVars::params(&mut g, &model);
        let nodes = match gpdbn::objective_nodes(
            &mut g,
            &model,
            &vars,
            data.images(),
            idx.as_deref(),
            &noise,
            ObjectiveOptions::default(),
        ) {
            Ok(nodes) => nodes,
            Err(Error::NonFinite { .. }) => return Err(Error::Diverged { iter }),
            Err(e) => return Err(e),
        };
        let breakdown = nodes.breakdown(&g);
        let grads = g.gradient(nodes.total, &vars.list())?;
        if !breakdown.total.is_finite() || grads.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged { iter });
        }
        if batch.is_none() {
            model.h_snapshot = g.value(nodes.h).clone();
            model.top.h_mu = g.value(nodes.h_mu).clone();
        }
        drop(g);

        adam.learning_rate = cfg.learning_rate_at(step - 1);
        adam.step(&mut params, &grads);
        if params.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged { iter });
        }
        set_params(&mut model, params.clone())?;
        model.trained_iters = iter;

        if step % cfg.log_every == 0 || step == cfg.iters || step == 1 {
            let record = TrainRecord {
                iter,
                breakdown,
                ms: started.elapsed().as_secs_f64() * 1e3,
            };
            log::info!("{record}");
            on_record(&record);
            log.records.push(record);
        }
        let periodic = cfg.checkpoint_every.is_some_and(|e| step % e == 0);
        if periodic && step != cfg.iters {
            if let Some(path) = &cfg.checkpoint_path {
                if batch.is_some() {
                    // separate stream so checkpointing does not perturb training
                    let mut snap = model.clone();
                    snap.refresh_snapshot(&mut Pcg64::seed_from_u64(cfg.seed ^ iter))?;
                    checkpoint::save(&snap, path)?;
                } else {
                    checkpoint::save(&model, path)?;
                }
            }
        }
    }
    if batch.is_some() {
        model.refresh_snapshot(&mut rng)?;
    }
    if let Some(path) = &cfg.checkpoint_path {
        checkpoint::save(&model, path)?;
    }
    Ok((model, log))
}
