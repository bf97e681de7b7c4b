#![allow(dead_code)]

use gpdbn_core::data::ImageDataset;
use gpdbn_core::decoder::DecoderConfig;
use gpdbn_core::gpdbn::GpdbnModel;
use gpdbn_core::numerics::Tensor;
use gpdbn_core::trainer::init_model;
use gpdbn_core::ModelRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> ModelRng {
    ModelRng::seed_from_u64(seed)
}

/// `n` random 8×8 binary images.
pub fn random_images(n: usize, seed: u64) -> ImageDataset {
    let mut r = rng(seed);
    let data = (0..n * 64).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect();
    ImageDataset::new(Tensor::matrix(n, 64, data), 8, 8, "random").unwrap()
}

/// Model on random 8×8 data with decoder widths [4, 6, 8, 64].
pub fn tiny(n: usize, seed: u64) -> (GpdbnModel, ImageDataset) {
    let data = random_images(n, seed);
    let cfg = DecoderConfig::new(vec![4, 6, 8, 64]).unwrap();
    let model = init_model(&data, &cfg, 2, seed).unwrap();
    (model, data)
}

pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.zip_map(b, |x, y| (x - y).abs()).max_abs()
}

use gpdbn_core::gpdbn::{objective_nodes, objective_with_noise, ModelVars, ObjectiveNoise, ObjectiveOptions};
use gpdbn_core::numerics::Graph;

/// Names of the parameter groups in `ModelVars::list` order.
pub fn group_names(model: &GpdbnModel) -> Vec<String> {
    let mut v: Vec<String> = ["X", "A", "log_alpha2", "log_lengthscale", "log_noise", "log_sigma_dbn"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for k in 0..model.layers.len() {
        v.push(format!("W{k}"));
        v.push(format!("b{k}"));
    }
    v
}

fn nudge(model: &mut GpdbnModel, group: usize, entry: usize, delta: f64) {
    match group {
        0 => {
            let mut x = model.latents.tensor().clone();
            x.data_mut()[entry] += delta;
            model.latents = gpdbn_core::gp::LatentPoints::new(x).unwrap();
        }
        1 => model.a.data_mut()[entry] += delta,
        2 => model.kernel.log_alpha2 += delta,
        3 => model.kernel.log_lengthscale += delta,
        4 => model.kernel.log_noise += delta,
        5 => model.top.log_sigma.data_mut()[entry] += delta,
        g => {
            let l = &mut model.layers[(g - 6) / 2];
            if (g - 6) % 2 == 0 {
                l.w.data_mut()[entry] += delta
            } else {
                l.b.data_mut()[entry] += delta
            }
        }
    }
}

pub struct GradCheck {
    pub group: String,
    pub entry: usize,
    pub fd: f64,
    pub ad: f64,
}

impl GradCheck {
    pub fn rel_err(&self) -> f64 {
        (self.fd - self.ad).abs() / self.fd.abs().max(self.ad.abs()).max(1e-8)
    }
}

/// Compares the reverse-mode gradient of the full objective with central
/// differences (step 1e-5) at one random entry of every parameter group,
/// with the objective's noise frozen.
pub fn objective_gradcheck(model: &GpdbnModel, data: &ImageDataset, seed: u64) -> Vec<GradCheck> {
    let mut r = rng(seed);
    let noise = ObjectiveNoise::draw(&model.cfg, model.n(), &mut r);
    let opts = ObjectiveOptions::default();
    let mut g = Graph::new();
    let vars = ModelVars::params(&mut g, model);
    let nodes = objective_nodes(&mut g, model, &vars, data.images(), None, &noise, opts).unwrap();
    let grads = g.gradient(nodes.total, &vars.list()).unwrap();
    let eval = |m: &GpdbnModel| objective_with_noise(m, data.images(), None, &noise, opts).unwrap().total;
    let step = 1e-5;
    group_names(model)
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let entry = r.random_range(0..grads[k].len());
            let mut plus = model.clone();
            nudge(&mut plus, k, entry, step);
            let mut minus = model.clone();
            nudge(&mut minus, k, entry, -step);
            GradCheck {
                group: name,
                entry,
                fd: (eval(&plus) - eval(&minus)) / (2.0 * step),
                ad: grads[k].data()[entry],
            }
        })
        .collect()
}
