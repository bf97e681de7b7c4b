//! Downward stochastic decoder: Gaussian top activations pushed through
//! Concrete-relaxed sigmoid layers to pixel probabilities.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, Graph, Tensor, Var};

/// Concrete temperature.
pub const LAMBDA: f64 = 0.1;
/// Output probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-6;
/// Concrete inputs `p` and `u` are clamped to `[CONCRETE_EPS, 1 - CONCRETE_EPS]`.
pub const CONCRETE_EPS: f64 = 1e-7;

/// Layer widths from the Gaussian top (`D`) down to the pixel count (`P`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderConfig {
    layer_sizes: Vec<usize>,
}

impl DecoderConfig {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "decoder needs at least two positive layer sizes, got {layer_sizes:?}"
            )));
        }
        Ok(DecoderConfig { layer_sizes })
    }

    /// Parses a bottom-to-top hidden architecture such as `"200,100,50"`
    /// (the last entry is the Gaussian width) and appends `pixels`.
    pub fn from_arch(arch: &str, pixels: usize) -> Result<Self> {
        let mut sizes = arch
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::invalid(format!("bad layer size {s:?} in architecture {arch:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        sizes.reverse();
        sizes.push(pixels);
        DecoderConfig::new(sizes)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Width of the Gaussian top layer.
    pub fn top_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn pixels(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// Number of layers whose output is a Concrete sample when decoding
    /// stochastically (all but the pixel layer).
    pub fn num_stochastic(&self) -> usize {
        self.num_layers() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteLayer {
    /// `in×out`
    pub w: Tensor,
    /// `1×out`
    pub b: Tensor,
    pub lambda: f64,
}

impl ConcreteLayer {
    pub fn init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (inputs + outputs) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        ConcreteLayer {
            w: Tensor::matrix(inputs, outputs, (0..inputs * outputs).map(|_| normal.sample(rng)).collect()),
            b: Tensor::zeros(1, outputs),
            lambda: LAMBDA,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        ConcreteLayer {
            w: Tensor::zeros(inputs, outputs),
            b: Tensor::zeros(1, outputs),
            lambda: LAMBDA,
        }
    }

    pub fn inputs(&self) -> usize {
        self.w.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w.cols()
    }

    fn affine(&self, h: &Tensor) -> Result<Tensor> {
        let z = h.matmul(&self.w)?;
        let b = self.b.data();
        let mut z = z;
        let cols = z.cols();
        for (i, v) in z.data_mut().iter_mut().enumerate() {
            *v += b[i % cols];
        }
        z.check_finite("layer affine")
    }
}

/// Gaussian top-layer parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTop {
    /// `log σ^DBN`, `1×D`
    pub log_sigma: Tensor,
    /// Column mean removed from the activations at the latest normalization, `1×D`.
    pub h_mu: Tensor,
}

impl GaussianTop {
    pub fn new(d: usize) -> Self {
        GaussianTop {
            log_sigma: Tensor::zeros(1, d),
            h_mu: Tensor::zeros(1, d),
        }
    }

    pub fn sigma(&self) -> Tensor {
        self.log_sigma.map(f64::exp)
    }
}

fn clamp_unit(v: f64, eps: f64) -> f64 {
    v.clamp(eps, 1.0 - eps)
}

fn logit(v: f64) -> f64 {
    v.ln() - (-v).ln_1p()
}

/// Relaxed Bernoulli draw `sigmoid((logit p + logit u) / λ)`.
pub fn concrete_sample(p: &Tensor, u: &Tensor, lambda: f64) -> Result<Tensor> {
    if p.shape() != u.shape() {
        return Err(Error::ShapeMismatch {
            op: "concrete_sample",
            lhs: p.shape().to_vec(),
            rhs: u.shape().to_vec(),
        });
    }
    Ok(p.zip_map(u, |p, u| {
        let p = clamp_unit(p, CONCRETE_EPS);
        let u = clamp_unit(u, CONCRETE_EPS);
        sigmoid((logit(p) + logit(u)) / lambda)
    }))
}

/// One downward layer: `sigmoid(h·w + b)`, Concrete-sampled when `u` is given.
pub fn layer_down(layer: &ConcreteLayer, h: &Tensor, u: Option<&Tensor>) -> Result<Tensor> {
    let p = layer.affine(h)?.map(sigmoid);
    match u {
        Some(u) => concrete_sample(&p, u, layer.lambda),
        None => Ok(p),
    }
}

fn check_noise(cfg: &DecoderConfig, rows: usize, noise: &[Tensor], stochastic: bool) -> Result<()> {
    if !stochastic {
        return Ok(());
    }
    if noise.len() != cfg.num_stochastic() {
        return Err(Error::invalid(format!(
            "decoder expects {} noise tensors, got {}",
            cfg.num_stochastic(),
            noise.len()
        )));
    }
    for (k, u) in noise.iter().enumerate() {
        let want = (rows, cfg.layer_sizes()[k + 1]);
        if u.dims() != want {
            return Err(Error::ShapeMismatch {
                op: "decoder noise",
                lhs: vec![want.0, want.1],
                rhs: u.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Draws the uniform noise for a stochastic decode of `rows` activations.
pub fn draw_noise(cfg: &DecoderConfig, rows: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    (0..cfg.num_stochastic())
        .map(|k| {
            let c = cfg.layer_sizes()[k + 1];
            Tensor::matrix(rows, c, (0..rows * c).map(|_| rng.random::<f64>()).collect())
        })
        .collect()
}

/// Decodes un-normalized top activations (`M×D`) to clamped pixel
/// probabilities (`M×P`). Hidden layers are Concrete-sampled when
/// `stochastic`; the pixel layer always emits probabilities.
pub fn decode(
    cfg: &DecoderConfig,
    layers: &[ConcreteLayer],
    h: &Tensor,
    noise: &[Tensor],
    stochastic: bool,
) -> Result<Tensor> {
    if layers.len() != cfg.num_layers() || h.cols() != cfg.top_dim() {
        return Err(Error::invalid(format!(
            "decoder with {} layers and top width {} does not match config {:?}",
            layers.len(),
            h.cols(),
            cfg.layer_sizes()
        )));
    }
    check_noise(cfg, h.rows(), noise, stochastic)?;
    let mut x = h.clone();
    for (k, layer) in layers.iter().enumerate() {
        let last = k + 1 == layers.len();
        let u = if stochastic && !last { Some(&noise[k]) } else { None };
        x = layer_down(layer, &x, u)?;
    }
    Ok(x.map(|p| clamp_unit(p, PROB_EPS)))
}

/// Decoder layer parameters as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub w: Var,
    pub b: Var,
    pub lambda: f64,
}

impl LayerVars {
    pub fn params(g: &mut Graph, layer: &ConcreteLayer) -> Self {
        LayerVars {
            w: g.param(layer.w.clone()),
            b: g.param(layer.b.clone()),
            lambda: layer.lambda,
        }
    }

    pub fn constants(g: &mut Graph, layer: &ConcreteLayer) -> Self {
        LayerVars {
            w: g.constant(layer.w.clone()),
            b: g.constant(layer.b.clone()),
            lambda: layer.lambda,
        }
    }
}

/// Differentiable [`concrete_sample`] with constant noise `u`.
pub fn concrete_node(g: &mut Graph, p: Var, u: &Tensor, lambda: f64) -> Result<Var> {
    let pc = g.clamp(p, CONCRETE_EPS, 1.0 - CONCRETE_EPS)?;
    let lp = g.logit(pc)?;
    let lu = g.constant(u.map(|u| logit(clamp_unit(u, CONCRETE_EPS))));
    let s = g.add(lp, lu)?;
    let s = g.scale(s, 1.0 / lambda)?;
    g.sigmoid(s)
}

/// Differentiable [`decode`].
pub fn decode_node(
    g: &mut Graph,
    cfg: &DecoderConfig,
    layers: &[LayerVars],
    h: Var,
    noise: &[Tensor],
    stochastic: bool,
) -> Result<Var> {
    if layers.len() != cfg.num_layers() {
        return Err(Error::invalid("layer count does not match decoder config"));
    }
    check_noise(cfg, g.value(h).rows(), noise, stochastic)?;
    let mut x = h;
    for (k, layer) in layers.iter().enumerate() {
        let z = g.matmul(x, layer.w)?;
        let z = g.add(z, layer.b)?;
        let p = g.sigmoid(z)?;
        x = if stochastic && k + 1 < layers.len() {
            concrete_node(g, p, &noise[k], layer.lambda)?
        } else {
            p
        };
    }
    g.clamp(x, PROB_EPS, 1.0 - PROB_EPS)
}
