//! Squared-exponential GP: Gram matrices and the predictive equations, both
//! as plain functions and as graph nodes for training.

use crate::error::{Error, Result};
use crate::numerics::{linalg, Graph, Tensor, Var};

/// Kernel hyperparameters, stored in log space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelParams {
    /// log α² (signal variance)
    pub log_alpha2: f64,
    /// log ℓ
    pub log_lengthscale: f64,
    /// log σ² (observation noise)
    pub log_noise: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        KernelParams {
            log_alpha2: 0.0,
            log_lengthscale: 0.0,
            log_noise: 0.01f64.ln(),
        }
    }
}

impl KernelParams {
    pub fn new(alpha2: f64, lengthscale: f64, noise: f64) -> Result<Self> {
        let p = KernelParams {
            log_alpha2: alpha2.ln(),
            log_lengthscale: lengthscale.ln(),
            log_noise: noise.ln(),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn alpha2(&self) -> f64 {
        self.log_alpha2.exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn noise(&self) -> f64 {
        self.log_noise.exp()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha2", self.alpha2()),
            ("lengthscale", self.lengthscale()),
            ("noise", self.noise()),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("kernel {name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    pub fn to_vec(&self) -> [f64; 3] {
        [self.log_alpha2, self.log_lengthscale, self.log_noise]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        KernelParams {
            log_alpha2: v[0],
            log_lengthscale: v[1],
            log_noise: v[2],
        }
    }
}

/// Latent coordinates, one row per datapoint.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPoints {
    x: Tensor,
}

impl LatentPoints {
    pub fn new(x: Tensor) -> Result<Self> {
        let (n, q) = x.dims();
        if n == 0 || q == 0 {
            return Err(Error::invalid(format!("latent points need N >= 1 and Q >= 1, got {n}x{q}")));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite { op: "latent points" });
        }
        Ok(LatentPoints { x })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.x
    }

    pub fn into_tensor(self) -> Tensor {
        self.x
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }
}

/// GP prediction at one query location.
#[derive(Debug, Clone, PartialEq)]
pub struct GpPrediction {
    pub mean: Tensor,
    /// Variance of the latent function value (noise excluded), shared by
    /// every output dimension.
    pub variance: f64,
}

impl GpPrediction {
    /// Variance of a noisy observation at the query: `variance + σ²`.
    pub fn observation_variance(&self, p: &KernelParams) -> f64 {
        self.variance + p.noise()
    }
}

/// `α²·exp(−‖x − x2‖² / 2ℓ²)`.
pub fn se_kernel(x: &Tensor, x2: &Tensor, p: &KernelParams) -> Result<f64> {
    if x.len() != x2.len() {
        return Err(Error::ShapeMismatch {
            op: "se_kernel",
            lhs: x.shape().to_vec(),
            rhs: x2.shape().to_vec(),
        });
    }
    let d: f64 = x.data().iter().zip(x2.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(p.alpha2() * (-d / (2.0 * p.lengthscale().powi(2))).exp())
}

fn kernel_matrix(a: &Tensor, b: &Tensor, p: &KernelParams) -> Result<Tensor> {
    let (m, q) = a.dims();
    let (n, q2) = b.dims();
    if q != q2 {
        return Err(Error::ShapeMismatch {
            op: "kernel",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let alpha2 = p.alpha2();
    let scale = -0.5 / p.lengthscale().powi(2);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..n {
            let d: f64 = ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            out.push(alpha2 * (d * scale).exp());
        }
    }
    Ok(Tensor::matrix(m, n, out))
}

/// `k(X, X)`, plus `σ²I` when `with_noise`.
pub fn gram(xs: &LatentPoints, p: &KernelParams, with_noise: bool) -> Tensor {
    let mut k = kernel_matrix(xs.tensor(), xs.tensor(), p).expect("same latent dimension");
    if with_noise {
        let n = xs.len();
        let s = p.noise();
        for i in 0..n {
            let v = k.get(i, i) + s;
            k.set(i, i, v);
        }
    }
    k
}

/// `k(q, X)` as an `M×N` matrix; never includes noise.
pub fn cross_gram(xs: &LatentPoints, q: &Tensor, p: &KernelParams) -> Result<Tensor> {
    kernel_matrix(q, xs.tensor(), p)
}

/// Factorized GP conditioned on targets `h`, reusable across queries.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    xs: LatentPoints,
    params: KernelParams,
    chol: Tensor,
    /// `K⁻¹·h`
    weights: Tensor,
    jitter: f64,
}

impl GpPosterior {
    pub fn new(xs: &LatentPoints, h: &Tensor, p: &KernelParams) -> Result<Self> {
        if h.rows() != xs.len() {
            return Err(Error::ShapeMismatch {
                op: "gp posterior",
                lhs: xs.tensor().shape().to_vec(),
                rhs: h.shape().to_vec(),
            });
        }
        p.validate()?;
        let k = gram(xs, p, true);
        let (chol, jitter) = linalg::cholesky_with_retry(&k)?;
        let weights = linalg::chol_solve(&chol, h)?;
        Ok(GpPosterior {
            xs: xs.clone(),
            params: *p,
            chol,
            weights,
            jitter,
        })
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    /// Lower Cholesky factor of `K + jitter·I`.
    pub fn cholesky(&self) -> &Tensor {
        &self.chol
    }

    /// `K⁻¹·h`.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// The diagonal jitter the factorization needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn latents(&self) -> &LatentPoints {
        &self.xs
    }

    /// Means (`M×D`) and latent-function variances (`M×1`).
    pub fn predict_batch(&self, q: &Tensor) -> Result<(Tensor, Tensor)> {
        if q.cols() != self.xs.dim() {
            return Err(Error::ShapeMismatch {
                op: "predict",
                lhs: self.xs.tensor().shape().to_vec(),
                rhs: q.shape().to_vec(),
            });
        }
        let ks = cross_gram(&self.xs, q, &self.params)?;
        let means = ks.matmul(&self.weights)?;
        let v = linalg::solve_lower(&self.chol, &ks.transpose())?;
        let alpha2 = self.params.alpha2();
        let m = q.rows();
        let n = self.xs.len();
        let mut vars = Vec::with_capacity(m);
        for j in 0..m {
            let explained: f64 = (0..n).map(|i| v.get(i, j).powi(2)).sum();
            let var = alpha2 - explained;
            debug_assert!(var > -1e-8, "predictive variance {var} is substantially negative");
            vars.push(var.max(0.0));
        }
        Ok((means, Tensor::matrix(m, 1, vars)))
    }

    pub fn predict(&self, q: &Tensor) -> Result<GpPrediction> {
        if q.rows() != 1 {
            return Err(Error::invalid(format!("predict expects a single query row, got {}", q.rows())));
        }
        let (mean, var) = self.predict_batch(q)?;
        Ok(GpPrediction {
            mean,
            variance: var.item(),
        })
    }
}

/// GP predictive mean and variance at one query.
pub fn predict(xs: &LatentPoints, h: &Tensor, p: &KernelParams, q: &Tensor) -> Result<GpPrediction> {
    GpPosterior::new(xs, h, p)?.predict(q)
}

/// `M` predictions sharing one factorization.
pub fn predict_batch(xs: &LatentPoints, h: &Tensor, p: &KernelParams, q: &Tensor) -> Result<(Tensor, Tensor)> {
    GpPosterior::new(xs, h, p)?.predict_batch(q)
}

/// Kernel hyperparameters as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct KernelVars {
    pub log_alpha2: Var,
    pub log_lengthscale: Var,
    pub log_noise: Var,
}

impl KernelVars {
    pub fn params(g: &mut Graph, p: &KernelParams, train_noise: bool) -> Self {
        KernelVars {
            log_alpha2: g.param(Tensor::scalar(p.log_alpha2)),
            log_lengthscale: g.param(Tensor::scalar(p.log_lengthscale)),
            log_noise: if train_noise {
                g.param(Tensor::scalar(p.log_noise))
            } else {
                g.constant(Tensor::scalar(p.log_noise))
            },
        }
    }

    pub fn constants(g: &mut Graph, p: &KernelParams) -> Self {
        KernelVars {
            log_alpha2: g.constant(Tensor::scalar(p.log_alpha2)),
            log_lengthscale: g.constant(Tensor::scalar(p.log_lengthscale)),
            log_noise: g.constant(Tensor::scalar(p.log_noise)),
        }
    }
}

/// Differentiable `k(a, b)`.
pub fn kernel_node(g: &mut Graph, a: Var, b: Var, kv: &KernelVars) -> Result<Var> {
    let d = g.sq_dist(a, b)?;
    let neg2 = g.scale(kv.log_lengthscale, -2.0)?;
    let inv_l2 = g.exp(neg2)?;
    let scaled = g.mul(d, inv_l2)?;
    let scaled = g.scale(scaled, -0.5)?;
    let logk = g.add(scaled, kv.log_alpha2)?;
    g.exp(logk)
}

/// Differentiable Gram matrix of the latent rows `x` (`N×Q`).
pub fn gram_node(g: &mut Graph, x: Var, kv: &KernelVars, with_noise: bool) -> Result<Var> {
    let k = kernel_node(g, x, x, kv)?;
    if !with_noise {
        return Ok(k);
    }
    let n = g.value(x).rows();
    let eye = g.constant(Tensor::identity(n));
    let noise = g.exp(kv.log_noise)?;
    let noise_eye = g.mul(eye, noise)?;
    g.add(k, noise_eye)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_pcg::Pcg64 {
        rand_pcg::Pcg64::seed_from_u64(seed)
    }

    fn random(r: usize, c: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn se_kernel_values() {
        let p = KernelParams::new(1.0, 1.0, 0.01).unwrap();
        let x = Tensor::row_vector(vec![0.3, -0.2]);
        assert_eq!(se_kernel(&x, &x, &p).unwrap(), 1.0);
        let y = Tensor::row_vector(vec![1.3, 0.8]);
        assert!((se_kernel(&x, &y, &p).unwrap() - 0.3678794).abs() < 1e-7);
        let wide = KernelParams::new(2.5, 1e8, 0.01).unwrap();
        assert!((se_kernel(&x, &Tensor::row_vector(vec![40.0, -7.0]), &wide).unwrap() - 2.5).abs() < 1e-9);
        assert!(se_kernel(&x, &Tensor::row_vector(vec![1.0]), &p).is_err());
    }

    #[test]
    fn gram_single_point_and_symmetry() {
        let p = KernelParams::new(1.7, 0.8, 0.05).unwrap();
        let xs = LatentPoints::new(Tensor::row_vector(vec![0.4, 0.1])).unwrap();
        let k = gram(&xs, &p, true);
        assert!((k.item() - (1.7 + 0.05)).abs() < 1e-12);

        let mut r = rng(3);
        let xs = LatentPoints::new(random(5, 2, &mut r)).unwrap();
        let k = gram(&xs, &p, false);
        assert_eq!(k.zip_map(&k.transpose(), |a, b| a - b).max_abs(), 0.0);
        for i in 0..5 {
            for j in 0..5 {
                let oracle = se_kernel(&xs.tensor().row_tensor(i), &xs.tensor().row_tensor(j), &p).unwrap();
                assert!((k.get(i, j) - oracle).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn cross_gram_cases() {
        let mut r = rng(9);
        let xs = LatentPoints::new(random(4, 2, &mut r)).unwrap();
        let wide = KernelParams::new(0.7, 1e8, 0.01).unwrap();
        let c = cross_gram(&xs, xs.tensor(), &wide).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.7).abs() < 1e-9));

        let p = KernelParams::new(1.2, 0.9, 0.01).unwrap();
        let row = cross_gram(&xs, &xs.tensor().row_tensor(2), &p).unwrap();
        let k = gram(&xs, &p, false);
        assert_eq!(row.data(), k.row(2));

        let q = random(3, 2, &mut r);
        let c = cross_gram(&xs, &q, &p).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let oracle = se_kernel(&q.row_tensor(i), &xs.tensor().row_tensor(j), &p).unwrap();
                assert!((c.get(i, j) - oracle).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_point_closed_form() {
        let (a2, s2) = (1.3, 0.2);
        let p = KernelParams::new(a2, 0.7, s2).unwrap();
        let xs = LatentPoints::new(Tensor::row_vector(vec![0.5, -0.5])).unwrap();
        let h = Tensor::row_vector(vec![1.0, -2.0, 0.5]);
        let post = GpPosterior::new(&xs, &h, &p).unwrap();
        let pred = post.predict(xs.tensor()).unwrap();
        let denom = a2 + s2 + post.jitter();
        for (m, hv) in pred.mean.data().iter().zip(h.data()) {
            assert!((m - a2 / denom * hv).abs() < 1e-12);
        }
        assert!((pred.variance - (a2 - a2 * a2 / denom)).abs() < 1e-12);
    }

    #[test]
    fn noise_free_interpolation_limit() {
        let p = KernelParams::new(1.0, 1.0, 1e-12).unwrap();
        let xs = LatentPoints::new(Tensor::row_vector(vec![0.2])).unwrap();
        let h = Tensor::row_vector(vec![3.0, -1.0]);
        let pred = predict(&xs, &h, &p, xs.tensor()).unwrap();
        assert!(pred.mean.zip_map(&h, |a, b| a - b).max_abs() < 1e-5);
        assert!(pred.variance < 1e-5);
    }

    #[test]
    fn far_query_reverts_to_prior() {
        let mut r = rng(1);
        let p = KernelParams::new(1.4, 0.5, 0.03).unwrap();
        let xs = LatentPoints::new(random(6, 2, &mut r)).unwrap();
        let h = random(6, 3, &mut r);
        let pred = predict(&xs, &h, &p, &Tensor::row_vector(vec![500.0, -500.0])).unwrap();
        assert!(pred.mean.max_abs() < 1e-12);
        assert!((pred.variance - 1.4).abs() < 1e-12);
        assert!((pred.observation_variance(&p) - 1.43).abs() < 1e-6);
    }

    #[test]
    fn batch_matches_single_queries() {
        let mut r = rng(5);
        let p = KernelParams::new(1.1, 0.8, 0.02).unwrap();
        let xs = LatentPoints::new(random(9, 2, &mut r)).unwrap();
        let h = random(9, 4, &mut r);
        let q = random(7, 2, &mut r);
        let (means, vars) = predict_batch(&xs, &h, &p, &q).unwrap();
        for i in 0..7 {
            let single = predict(&xs, &h, &p, &q.row_tensor(i)).unwrap();
            let dm = single.mean.data().iter().zip(means.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(dm < 1e-12);
            assert!((single.variance - vars.get(i, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn graph_gram_matches_plain_gram() {
        let mut r = rng(2);
        let p = KernelParams::new(0.9, 1.3, 0.04).unwrap();
        let x = random(5, 2, &mut r);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let kv = KernelVars::constants(&mut g, &p);
        let k = gram_node(&mut g, xv, &kv, true).unwrap();
        let plain = gram(&LatentPoints::new(x).unwrap(), &p, true);
        assert!(g.value(k).zip_map(&plain, |a, b| a - b).max_abs() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn gram_with_noise_is_factorizable(
            xs in proptest::collection::vec(-3.0f64..3.0, 2..24),
            la in -3.0f64..3.0, ll in -3.0f64..2.0, ln in -8.0f64..0.0,
        ) {
            let n = xs.len() / 2;
            prop_assume!(n >= 1);
            let x = Tensor::matrix(n, 2, xs[..2 * n].to_vec());
            let p = KernelParams { log_alpha2: la, log_lengthscale: ll, log_noise: ln };
            let k = gram(&LatentPoints::new(x).unwrap(), &p, true);
            prop_assert!(linalg::cholesky_with_retry(&k).is_ok());
        }

        #[test]
        fn variance_bounds_linearity_and_independence(
            seed in 0u64..1000, scale in -3.0f64..3.0, ll in -1.0f64..1.0,
        ) {
            let mut r = rng(seed);
            let p = KernelParams { log_alpha2: 0.2, log_lengthscale: ll, log_noise: -3.0 };
            let xs = LatentPoints::new(random(6, 2, &mut r)).unwrap();
            let h = random(6, 3, &mut r);
            let (m1, v1) = predict_batch(&xs, &h, &p, xs.tensor()).unwrap();
            for v in v1.data() {
                prop_assert!(*v >= 0.0 && *v <= p.alpha2() + p.noise());
            }
            let (m2, v2) = predict_batch(&xs, &h.scale(scale), &p, xs.tensor()).unwrap();
            prop_assert!(m2.zip_map(&m1.scale(scale), |a, b| a - b).max_abs() < 1e-9 * (1.0 + scale.abs()) * (1.0 + m1.max_abs()));
            prop_assert_eq!(v1, v2);
        }
    }
}
