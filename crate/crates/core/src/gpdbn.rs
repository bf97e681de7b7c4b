//! The GPDBN model: GP latent space, Gaussian activations and the decoder,
//! tied together by a single differentiable objective.

use std::borrow::Cow;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::decoder::{self, ConcreteLayer, DecoderConfig, GaussianTop, LayerVars};
use crate::error::{Error, Result};
use crate::gp::{self, GpPosterior, KernelParams, KernelVars, LatentPoints};
use crate::numerics::{Graph, Tensor, Var};

/// Floor applied to GP variances before taking square roots or logs.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct GpdbnModel {
    pub latents: LatentPoints,
    /// Free activation means, `N×D`.
    pub a: Tensor,
    pub kernel: KernelParams,
    pub top: GaussianTop,
    pub layers: Vec<ConcreteLayer>,
    pub cfg: DecoderConfig,
    /// Normalized activations from the latest training iteration, `N×D`;
    /// the GP is conditioned on these at prediction time.
    pub h_snapshot: Tensor,
    /// Whether the observation noise σ² is optimized.
    pub train_noise: bool,
    pub width: usize,
    pub height: usize,
    /// Optimizer steps taken so far; resumed training continues from here.
    pub trained_iters: u64,
}

impl GpdbnModel {
    pub fn n(&self) -> usize {
        self.latents.len()
    }

    pub fn q(&self) -> usize {
        self.latents.dim()
    }

    pub fn d(&self) -> usize {
        self.cfg.top_dim()
    }

    pub fn pixels(&self) -> usize {
        self.cfg.pixels()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.n(), self.d());
        let bad = |what: &str| Err(Error::invalid(format!("inconsistent model: {what}")));
        if self.a.dims() != (n, d) {
            return bad("activation means shape");
        }
        if self.h_snapshot.dims() != (n, d) {
            return bad("activation snapshot shape");
        }
        if self.top.log_sigma.dims() != (1, d) || self.top.h_mu.dims() != (1, d) {
            return bad("Gaussian top shape");
        }
        if self.layers.len() != self.cfg.num_layers() {
            return bad("layer count");
        }
        for (k, l) in self.layers.iter().enumerate() {
            let (i, o) = (self.cfg.layer_sizes()[k], self.cfg.layer_sizes()[k + 1]);
            if l.w.dims() != (i, o) || l.b.dims() != (1, o) || !(l.lambda > 0.0) {
                return bad("layer shape");
            }
        }
        if self.width * self.height != self.pixels() {
            return bad("image size does not match pixel layer");
        }
        self.kernel.validate()?;
        if !self.all_finite() {
            return Err(Error::NonFinite { op: "model parameters" });
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.latents.tensor().is_finite()
            && self.a.is_finite()
            && self.kernel.to_vec().iter().all(|v| v.is_finite())
            && self.top.log_sigma.is_finite()
            && self.top.h_mu.is_finite()
            && self.h_snapshot.is_finite()
            && self.layers.iter().all(|l| l.w.is_finite() && l.b.is_finite())
    }

    /// GP conditioned on the stored activation snapshot.
    pub fn posterior(&self) -> Result<GpPosterior> {
        GpPosterior::new(&self.latents, &self.h_snapshot, &self.kernel)
    }

    pub fn predictor(&self) -> Result<Predictor<'_>> {
        Predictor::new(self)
    }
}

/// The four terms of the objective and their sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveBreakdown {
    pub data_term: f64,
    pub joint_term: f64,
    pub complexity_term: f64,
    pub prior_term: f64,
    pub total: f64,
}

/// Random draws consumed by one objective evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveNoise {
    /// Standard normal `B×D` matrix.
    pub e: Tensor,
    /// Uniform noise for each stochastic decoder layer, `B` rows each.
    pub u: Vec<Tensor>,
}

impl ObjectiveNoise {
    pub fn draw(cfg: &DecoderConfig, rows: usize, rng: &mut impl Rng) -> Self {
        let d = cfg.top_dim();
        let e = standard_normal(rows, d, rng);
        let u = decoder::draw_noise(cfg, rows, rng);
        ObjectiveNoise { e, u }
    }
}

pub(crate) fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

/// Diagnostic switches for the objective.
#[derive(Debug, Clone, Copy, Default)]
pub struct ObjectiveOptions {
    /// Replace the batch covariance with the identity.
    pub identity_kernel: bool,
}

/// Every trainable tensor of the model as a graph node.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub x: Var,
    pub a: Var,
    pub kernel: KernelVars,
    pub log_sigma: Var,
    pub layers: Vec<LayerVars>,
}

impl ModelVars {
    pub fn params(g: &mut Graph, model: &GpdbnModel) -> Self {
        ModelVars {
            x: g.param(model.latents.tensor().clone()),
            a: g.param(model.a.clone()),
            kernel: KernelVars::params(g, &model.kernel, model.train_noise),
            log_sigma: g.param(model.top.log_sigma.clone()),
            layers: model.layers.iter().map(|l| LayerVars::params(g, l)).collect(),
        }
    }

    /// Parameter nodes in the canonical order used by the optimizer.
    pub fn list(&self) -> Vec<Var> {
        let mut v = vec![
            self.x,
            self.a,
            self.kernel.log_alpha2,
            self.kernel.log_lengthscale,
            self.kernel.log_noise,
            self.log_sigma,
        ];
        for l in &self.layers {
            v.push(l.w);
            v.push(l.b);
        }
        v
    }
}

/// Graph nodes produced by one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub data: Var,
    pub joint: Var,
    pub complexity: Var,
    pub prior: Var,
    pub total: Var,
    /// Normalized activations `B×D`.
    pub h: Var,
    /// Column mean of the raw activations `1×D`.
    pub h_mu: Var,
    /// Per-row GP predictive standard deviation `B×1`.
    pub sigma_gp: Var,
}

impl ObjectiveNodes {
    pub fn breakdown(&self, g: &Graph) -> ObjectiveBreakdown {
        ObjectiveBreakdown {
            data_term: g.value(self.data).item(),
            joint_term: g.value(self.joint).item(),
            complexity_term: g.value(self.complexity).item(),
            prior_term: g.value(self.prior).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Differentiable predictive variances of the GP at its own training rows.
fn training_variances(g: &mut Graph, k0: Var, chol: Var, kv: &KernelVars) -> Result<Var> {
    // k0ᵢᵀ K⁻¹ k0ᵢ = ‖L⁻¹ k0ᵢ‖², one triangular solve for all rows
    let v = g.solve_lower(chol, k0)?;
    let sq = g.square(v)?;
    let explained = g.sum_rows(sq)?;
    let explained = g.transpose(explained)?;
    let alpha2 = g.exp(kv.log_alpha2)?;
    let var = g.sub(alpha2, explained)?;
    g.clamp(var, VARIANCE_FLOOR, f64::INFINITY)
}

/// Population standard deviation of every column of `a` over all rows.
fn activation_scale_node(g: &mut Graph, a: Var) -> Result<Var> {
    let mean = g.mean_rows(a)?;
    let centered = g.sub(a, mean)?;
    let sq = g.square(centered)?;
    let var = g.mean_rows(sq)?;
    let var = g.add_scalar(var, VARIANCE_FLOOR)?;
    g.sqrt(var)
}

/// `−Σ [t·log s + (1−t)·log(1−s)]`.
fn cross_entropy(g: &mut Graph, s: Var, target: &Tensor) -> Result<Var> {
    let t = g.constant(target.clone());
    let t1 = g.constant(target.map(|v| 1.0 - v));
    let ls = g.log(s)?;
    let l1s = g.log1m(s)?;
    let a = g.mul(t, ls)?;
    let b = g.mul(t1, l1s)?;
    let ab = g.add(a, b)?;
    let total = g.sum(ab)?;
    g.neg(total)
}

/// Records the (optionally mini-batched) objective on `g`.
///
/// `batch = None` evaluates the full objective; otherwise every term is
/// computed on the selected rows and rescaled by `N/B`.
pub fn objective_nodes(
    g: &mut Graph,
    model: &GpdbnModel,
    vars: &ModelVars,
    data: &Tensor,
    batch: Option<&[usize]>,
    noise: &ObjectiveNoise,
    opts: ObjectiveOptions,
) -> Result<ObjectiveNodes> {
    let n = model.n();
    let d = model.d();
    if data.rows() != n || data.cols() != model.pixels() {
        return Err(Error::ShapeMismatch {
            op: "objective data",
            lhs: vec![n, model.pixels()],
            rhs: data.shape().to_vec(),
        });
    }
    let (x, a, target, b) = match batch {
        None => (vars.x, vars.a, data.clone(), n),
        Some(idx) => {
            if idx.is_empty() {
                return Err(Error::invalid("empty mini-batch"));
            }
            let mut seen = vec![false; n];
            for &i in idx {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::invalid(format!("mini-batch index {i} is out of range or repeated")));
                }
            }
            (g.gather_rows(vars.x, idx)?, g.gather_rows(vars.a, idx)?, data.gather_rows(idx), idx.len())
        }
    };
    if noise.e.dims() != (b, d) {
        return Err(Error::ShapeMismatch {
            op: "objective noise",
            lhs: vec![b, d],
            rhs: noise.e.shape().to_vec(),
        });
    }
    let scale = n as f64 / b as f64;
    let kv = &vars.kernel;

    // GP covariance of the batch latents and the predictive spread at them.
    let k0 = gp::kernel_node(g, x, x, kv)?;
    let chol = if opts.identity_kernel {
        g.constant(Tensor::identity(b))
    } else {
        let eye = g.constant(Tensor::identity(b));
        let noise_var = g.exp(kv.log_noise)?;
        let noise_eye = g.mul(eye, noise_var)?;
        let k = g.add(k0, noise_eye)?;
        g.cholesky_with_retry(k)?
    };
    let var = training_variances(g, k0, chol, kv)?;
    let sigma_gp = g.sqrt(var)?;

    // H_raw = A + σ_GP ⊗ σ_DBN ⊙ E, centered and divided by the column
    // spread of A. Dividing by the free σ_DBN instead would let the kernel
    // and σ_DBN shrink together without bound.
    let sigma_dbn = g.exp(vars.log_sigma)?;
    let spread = g.mul(sigma_gp, sigma_dbn)?;
    let e = g.constant(noise.e.clone());
    let jitter = g.mul(spread, e)?;
    let h_raw = g.add(a, jitter)?;
    let h_mu = g.mean_rows(h_raw)?;
    let centered = g.sub(h_raw, h_mu)?;
    let a_scale = activation_scale_node(g, vars.a)?;
    let h = g.div(centered, a_scale)?;

    let probs = decoder::decode_node(g, &model.cfg, &vars.layers, h_raw, &noise.u, true)?;
    let data_raw = cross_entropy(g, probs, &target)?;
    let data_term = g.scale(data_raw, scale)?;

    let kinv_h = g.chol_solve(chol, h)?;
    let ht = g.transpose(h)?;
    let tr = g.trace_matmul(ht, kinv_h)?;
    let joint = g.scale(tr, 0.5 * scale)?;

    let logdet = g.chol_logdet(chol)?;
    let complexity = g.scale(logdet, 0.5 * d as f64 * scale)?;

    let xsq = g.square(x)?;
    let xsum = g.sum(xsq)?;
    let prior = g.scale(xsum, scale)?;

    let t = g.add(data_term, joint)?;
    let t = g.add(t, complexity)?;
    let total = g.add(t, prior)?;
    Ok(ObjectiveNodes {
        data: data_term,
        joint,
        complexity,
        prior,
        total,
        h,
        h_mu,
        sigma_gp,
    })
}

/// Full objective with noise drawn from `rng`.
pub fn objective(model: &GpdbnModel, data: &Tensor, rng: &mut impl Rng) -> Result<ObjectiveBreakdown> {
    let noise = ObjectiveNoise::draw(&model.cfg, model.n(), rng);
    objective_with_noise(model, data, None, &noise, ObjectiveOptions::default())
}

/// Mini-batch estimator of the objective on the rows in `batch`.
pub fn minibatch_objective(
    model: &GpdbnModel,
    data: &Tensor,
    batch: &[usize],
    rng: &mut impl Rng,
) -> Result<ObjectiveBreakdown> {
    if batch.is_empty() {
        return Err(Error::invalid("empty mini-batch"));
    }
    let noise = ObjectiveNoise::draw(&model.cfg, batch.len(), rng);
    objective_with_noise(model, data, Some(batch), &noise, ObjectiveOptions::default())
}

pub fn objective_with_noise(
    model: &GpdbnModel,
    data: &Tensor,
    batch: Option<&[usize]>,
    noise: &ObjectiveNoise,
    opts: ObjectiveOptions,
) -> Result<ObjectiveBreakdown> {
    let mut g = Graph::new();
    let vars = ModelVars::params(&mut g, model);
    let nodes = objective_nodes(&mut g, model, &vars, data, batch, noise, opts)?;
    Ok(nodes.breakdown(&g))
}

/// Normalized activations and their column mean, `(H, h_mu)`, with `E`
/// drawn from `rng`.
pub fn build_h(model: &GpdbnModel, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let e = standard_normal(model.n(), model.d(), rng);
    build_h_with_noise(model, &e)
}

pub fn build_h_with_noise(model: &GpdbnModel, e: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, vars) = model.posterior_training_variances()?;
    let sigma = model.top.sigma();
    let (n, d) = (model.n(), model.d());
    if e.dims() != (n, d) {
        return Err(Error::ShapeMismatch {
            op: "build_h noise",
            lhs: vec![n, d],
            rhs: e.shape().to_vec(),
        });
    }
    let mut raw = model.a.clone();
    for i in 0..n {
        let s = vars.get(i, 0).max(VARIANCE_FLOOR).sqrt();
        for j in 0..d {
            let v = raw.get(i, j) + s * sigma.get(0, j) * e.get(i, j);
            raw.set(i, j, v);
        }
    }
    let h_mu = raw.column_means();
    let scale = model.activation_scale();
    let mut h = raw;
    for i in 0..n {
        for j in 0..d {
            let v = (h.get(i, j) - h_mu.get(0, j)) / scale.get(0, j);
            h.set(i, j, v);
        }
    }
    Ok((h.check_finite("build_h")?, h_mu))
}

impl GpdbnModel {
    /// Column spread of the activation means, `1×D`; the divisor that
    /// normalizes H and maps GP outputs back to activations.
    pub fn activation_scale(&self) -> Tensor {
        let (n, d) = (self.n(), self.d());
        let mu = self.a.column_means();
        let mut out = vec![0.0; d];
        for i in 0..n {
            for (j, o) in out.iter_mut().enumerate() {
                let c = self.a.get(i, j) - mu.get(0, j);
                *o += c * c;
            }
        }
        Tensor::matrix(1, d, out.into_iter().map(|v| (v / n as f64 + VARIANCE_FLOOR).sqrt()).collect())
    }

    /// Predictive means and variances of the GP at the training latents,
    /// conditioned on the activation means.
    fn posterior_training_variances(&self) -> Result<(Tensor, Tensor)> {
        gp::predict_batch(&self.latents, &self.a, &self.kernel, self.latents.tensor())
    }

    /// Recomputes `h_snapshot` and `top.h_mu` from a fresh `build_h` draw.
    pub fn refresh_snapshot(&mut self, rng: &mut impl Rng) -> Result<()> {
        let (h, h_mu) = build_h(self, rng)?;
        self.h_snapshot = h;
        self.top.h_mu = h_mu;
        Ok(())
    }
}

/// Sampling and prediction against a fixed model, sharing one GP
/// factorization across queries.
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    model: &'a GpdbnModel,
    posterior: Cow<'a, GpPosterior>,
    sigma: Tensor,
    scale: Tensor,
}

impl<'a> Predictor<'a> {
    pub fn new(model: &'a GpdbnModel) -> Result<Self> {
        Ok(Self::build(model, Cow::Owned(model.posterior()?)))
    }

    /// Reuses a posterior previously built with [`GpdbnModel::posterior`].
    pub fn with_posterior(model: &'a GpdbnModel, posterior: &'a GpPosterior) -> Self {
        Self::build(model, Cow::Borrowed(posterior))
    }

    fn build(model: &'a GpdbnModel, posterior: Cow<'a, GpPosterior>) -> Self {
        Predictor {
            model,
            posterior,
            sigma: model.top.sigma(),
            scale: model.activation_scale(),
        }
    }

    pub fn model(&self) -> &GpdbnModel {
        self.model
    }

    pub fn posterior(&self) -> &GpPosterior {
        &self.posterior
    }

    fn check_query(&self, x: &Tensor) -> Result<()> {
        if x.dims() != (1, self.model.q()) {
            return Err(Error::ShapeMismatch {
                op: "latent query",
                lhs: vec![1, self.model.q()],
                rhs: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Latent-function variance of the GP at `x`.
    pub fn variance(&self, x: &Tensor) -> Result<f64> {
        self.check_query(x)?;
        Ok(self.posterior.predict(x)?.variance)
    }

    /// Log of the observation variance (latent variance plus σ²) at `x`,
    /// the quantity shown on the manifold heat map.
    pub fn log_variance(&self, x: &Tensor) -> Result<f64> {
        Ok((self.variance(x)? + self.model.kernel.noise()).ln())
    }

    /// Decodes `eps.rows()` samples at `x` with explicit noise: the Gaussian
    /// draws `eps` (`J×D`) and per-layer uniforms `u` (`J` rows each).
    pub fn decode_at(&self, x: &Tensor, eps: &Tensor, u: &[Tensor]) -> Result<Tensor> {
        self.check_query(x)?;
        let pred = self.posterior.predict(x)?;
        let sd = pred.variance.max(VARIANCE_FLOOR).sqrt();
        let (j, d) = eps.dims();
        if d != self.model.d() {
            return Err(Error::ShapeMismatch {
                op: "decode_at noise",
                lhs: vec![j, self.model.d()],
                rhs: eps.shape().to_vec(),
            });
        }
        let m = pred.mean.data();
        let (s, a, mu) = (self.sigma.data(), self.scale.data(), self.model.top.h_mu.data());
        let mut h = Vec::with_capacity(j * d);
        for r in 0..j {
            for c in 0..d {
                h.push(m[c] * a[c] + sd * eps.get(r, c) * s[c] + mu[c]);
            }
        }
        let h = Tensor::matrix(j, d, h);
        decoder::decode(&self.model.cfg, &self.model.layers, &h, u, true)
    }

    /// `j` independent samples at `x`, one per row.
    pub fn samples(&self, x: &Tensor, j: usize, rng: &mut impl Rng) -> Result<Tensor> {
        if j == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        let eps = standard_normal(j, self.model.d(), rng);
        let u = decoder::draw_noise(&self.model.cfg, j, rng);
        self.decode_at(x, &eps, &u)
    }

    pub fn sample(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        self.samples(x, 1, rng)
    }

    /// Empirical mean of `j` samples.
    pub fn predict_mean(&self, x: &Tensor, j: usize, rng: &mut impl Rng) -> Result<Tensor> {
        Ok(self.samples(x, j, rng)?.column_means())
    }
}

/// One sample from the model at latent location `x` (`1×Q`).
pub fn sample_at(model: &GpdbnModel, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    model.predictor()?.sample(x, rng)
}

/// Mean of `j` samples at `x`.
pub fn predict_mean(model: &GpdbnModel, x: &Tensor, j: usize, rng: &mut impl Rng) -> Result<Tensor> {
    model.predictor()?.predict_mean(x, j, rng)
}

/// How the weight of the log-variance term is chosen during projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaMode {
    /// Balance the two terms at the best random start.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct ProjectConfig {
    pub restarts: usize,
    pub v_samples: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub gamma: GammaMode,
    /// Samples averaged for the returned reconstruction.
    pub j: usize,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        ProjectConfig {
            restarts: 10,
            v_samples: 5,
            steps: 200,
            learning_rate: 0.05,
            gamma: GammaMode::Auto,
            j: 25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Projection {
    pub x: Tensor,
    pub recon: Tensor,
    /// Final loss of the winning restart.
    pub loss: f64,
    pub gamma: f64,
    /// Loss after every step of the winning restart.
    pub trace: Vec<f64>,
}

/// Value and gradient pieces of the projection loss at one location.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionLoss {
    pub reconstruction: f64,
    pub log_variance: f64,
    pub total: f64,
}

impl<'a> Predictor<'a> {
    /// Projection loss `(1/(V·P))·NLL + γ·log σ²(x)` and its gradient in `x`.
    pub fn projection_loss(
        &self,
        x: &Tensor,
        target: &Tensor,
        gamma: f64,
        eps: &Tensor,
        u: &[Tensor],
    ) -> Result<(ProjectionLoss, Tensor)> {
        self.check_query(x)?;
        let model = self.model;
        let v = eps.rows();
        let p = model.pixels();
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let train_x = g.constant(model.latents.tensor().clone());
        let kv = KernelVars::constants(&mut g, &model.kernel);
        let k = gp::kernel_node(&mut g, xv, train_x, &kv)?;
        let w = g.constant(self.posterior.weights().clone());
        let mean = g.matmul(k, w)?;
        let chol = g.constant(self.posterior.cholesky().clone());
        let kt = g.transpose(k)?;
        let solved = g.chol_solve(chol, kt)?;
        let explained = g.matmul(k, solved)?;
        let alpha2 = g.exp(kv.log_alpha2)?;
        let var = g.sub(alpha2, explained)?;
        let var = g.clamp(var, VARIANCE_FLOOR, f64::INFINITY)?;
        let sd = g.sqrt(var)?;

        let e = g.constant(eps.clone());
        let spread = g.mul(sd, e)?;
        let sigma = g.constant(self.sigma.clone());
        let spread = g.mul(spread, sigma)?;
        let scale = g.constant(self.scale.clone());
        let mean = g.mul(mean, scale)?;
        let h = g.add(mean, spread)?;
        let mu = g.constant(model.top.h_mu.clone());
        let h = g.add(h, mu)?;
        let layers: Vec<LayerVars> = model.layers.iter().map(|l| LayerVars::constants(&mut g, l)).collect();
        let probs = decoder::decode_node(&mut g, &model.cfg, &layers, h, u, true)?;

        let t = g.constant(target.clone());
        let t1 = g.constant(target.map(|v| 1.0 - v));
        let ls = g.log(probs)?;
        let l1s = g.log1m(probs)?;
        let a = g.mul(t, ls)?;
        let b = g.mul(t1, l1s)?;
        let ab = g.add(a, b)?;
        let nll = g.sum(ab)?;
        let recon = g.scale(nll, -1.0 / (v * p) as f64)?;
        let logvar = g.log(var)?;
        let penalty = g.scale(logvar, gamma)?;
        let total = g.add(recon, penalty)?;
        let grad = g.gradient(total, &[xv])?.remove(0);
        Ok((
            ProjectionLoss {
                reconstruction: g.value(recon).item(),
                log_variance: g.value(logvar).item(),
                total: g.value(total).item(),
            },
            grad,
        ))
    }

    fn draw_projection_noise(&self, v: usize, rng: &mut impl Rng) -> (Tensor, Vec<Tensor>) {
        let eps = standard_normal(v, self.model.d(), rng);
        let u = decoder::draw_noise(&self.model.cfg, v, rng);
        (eps, u)
    }

    /// Finds the latent location whose samples best explain `target`.
    pub fn project(&self, target: &Tensor, cfg: &ProjectConfig, rng: &mut impl Rng) -> Result<Projection> {
        let p = self.model.pixels();
        if target.dims() != (1, p) {
            return Err(Error::ShapeMismatch {
                op: "project target",
                lhs: vec![1, p],
                rhs: target.shape().to_vec(),
            });
        }
        if cfg.restarts == 0 || cfg.v_samples == 0 {
            return Err(Error::invalid("projection needs at least one restart and one sample"));
        }
        let q = self.model.q();
        let starts: Vec<Tensor> = (0..cfg.restarts).map(|_| standard_normal(1, q, rng)).collect();

        let gamma = match cfg.gamma {
            GammaMode::Fixed(v) => v,
            GammaMode::Auto => {
                let mut best: Option<ProjectionLoss> = None;
                for x0 in &starts {
                    let (eps, u) = self.draw_projection_noise(cfg.v_samples, rng);
                    let (l, _) = self.projection_loss(x0, target, 0.0, &eps, &u)?;
                    if best.is_none_or(|b| l.reconstruction < b.reconstruction) {
                        best = Some(l);
                    }
                }
                let best = best.expect("at least one restart");
                best.reconstruction.abs() / best.log_variance.abs().max(1e-3)
            }
        };

        let mut winner: Option<(Tensor, f64, Vec<f64>)> = None;
        for x0 in starts {
            let mut x = x0;
            let mut adam = crate::trainer::Adam::new(cfg.learning_rate, &[x.clone()]);
            let mut trace = Vec::with_capacity(cfg.steps);
            for _ in 0..cfg.steps {
                let (eps, u) = self.draw_projection_noise(cfg.v_samples, rng);
                let (loss, grad) = self.projection_loss(&x, target, gamma, &eps, &u)?;
                trace.push(loss.total);
                adam.step(std::slice::from_mut(&mut x), &[grad]);
            }
            let (eps, u) = self.draw_projection_noise(cfg.v_samples, rng);
            let (loss, _) = self.projection_loss(&x, target, gamma, &eps, &u)?;
            if !loss.total.is_finite() {
                continue;
            }
            if winner.as_ref().is_none_or(|(_, l, _)| loss.total < *l) {
                winner = Some((x, loss.total, trace));
            }
        }
        let (x, loss, trace) = winner.ok_or(Error::NonFinite { op: "projection" })?;
        let recon = self.predict_mean(&x, cfg.j, rng)?;
        Ok(Projection {
            x,
            recon,
            loss,
            gamma,
            trace,
        })
    }
}

/// Projects `target` (`1×P`, binary) onto the learned manifold.
pub fn project(model: &GpdbnModel, target: &Tensor, cfg: &ProjectConfig, rng: &mut impl Rng) -> Result<Projection> {
    model.predictor()?.project(target, cfg, rng)
}
