//! Binary model container: magic, a length-prefixed `key=value` header,
//! then every parameter as little-endian `f64` in a fixed order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::decoder::{ConcreteLayer, DecoderConfig, GaussianTop};
use crate::error::{Error, Result};
use crate::gp::{KernelParams, LatentPoints};
use crate::gpdbn::GpdbnModel;
use crate::numerics::Tensor;

const MAGIC: &[u8; 7] = b"GPDBN1\0";

fn layers_string(cfg: &DecoderConfig) -> String {
    cfg.layer_sizes().iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

pub fn encode(model: &GpdbnModel) -> Vec<u8> {
    let lambdas: Vec<String> = model.layers.iter().map(|l| format!("{:e}", l.lambda)).collect();
    let header = [
        ("n", model.n().to_string()),
        ("q", model.q().to_string()),
        ("layers", layers_string(&model.cfg)),
        ("lambda", lambdas.join(",")),
        ("width", model.width.to_string()),
        ("height", model.height.to_string()),
        ("train_noise", model.train_noise.to_string()),
        ("trained_iters", model.trained_iters.to_string()),
    ]
    .iter()
    .map(|(k, v)| format!("{k}={v}\n"))
    .collect::<String>();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    let mut put = |t: &[f64]| {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(model.latents.tensor().data());
    put(model.a.data());
    put(&model.kernel.to_vec());
    put(model.top.log_sigma.data());
    put(model.top.h_mu.data());
    put(model.h_snapshot.data());
    for l in &model.layers {
        put(l.w.data());
        put(l.b.data());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn floats(&mut self, count: usize) -> Result<Vec<f64>> {
        let need = count * 8;
        let chunk = self
            .bytes
            .get(self.pos..self.pos + need)
            .ok_or_else(|| Error::format(self.path, self.bytes.len(), format!("payload truncated, need {need} more bytes")))?;
        self.pos += need;
        Ok(chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Tensor> {
        Ok(Tensor::matrix(rows, cols, self.floats(rows * cols)?))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<GpdbnModel> {
    if bytes.len() < 11 || &bytes[..7] != MAGIC {
        return Err(Error::format(path, 0, "missing GPDBN1 magic"));
    }
    let hlen = u32::from_le_bytes(bytes[7..11].try_into().unwrap()) as usize;
    let header = bytes
        .get(11..11 + hlen)
        .ok_or_else(|| Error::format(path, 7, "header length exceeds file size"))?;
    let header = std::str::from_utf8(header).map_err(|e| Error::format(path, 11 + e.valid_up_to(), "header is not UTF-8"))?;
    let mut fields = BTreeMap::new();
    let mut offset = 11;
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(path, offset, format!("header line {line:?} lacks '='")))?;
        fields.insert(k.to_string(), v.to_string());
        offset += line.len() + 1;
    }
    let get = |k: &str| {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::format(path, 11, format!("header is missing {k:?}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::format(path, 11, format!("header field {k:?} is not a count")))
    };
    let n = num("n")?;
    let q = num("q")?;
    let width = num("width")?;
    let height = num("height")?;
    let sizes = get("layers")?
        .split(',')
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::format(path, 11, "bad layer list"))?;
    let cfg = DecoderConfig::new(sizes)?;
    let lambdas = get("lambda")?
        .split(',')
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::format(path, 11, "bad lambda list"))?;
    if lambdas.len() != cfg.num_layers() {
        return Err(Error::format(path, 11, "lambda count does not match layers"));
    }
    let train_noise = get("train_noise")? == "true";
    let trained_iters = fields.get("trained_iters").map_or(Ok(0), |v| {
        v.parse::<u64>()
            .map_err(|_| Error::format(path, 11, "bad trained_iters"))
    })?;

    let d = cfg.top_dim();
    let mut r = Reader {
        bytes,
        pos: 11 + hlen,
        path,
    };
    let latents = LatentPoints::new(r.matrix(n, q)?)?;
    let a = r.matrix(n, d)?;
    let kernel = KernelParams::from_slice(&r.floats(3)?);
    let log_sigma = r.matrix(1, d)?;
    let h_mu = r.matrix(1, d)?;
    let h_snapshot = r.matrix(n, d)?;
    let mut layers = Vec::with_capacity(cfg.num_layers());
    for (k, lambda) in lambdas.into_iter().enumerate() {
        let (i, o) = (cfg.layer_sizes()[k], cfg.layer_sizes()[k + 1]);
        layers.push(ConcreteLayer {
            w: r.matrix(i, o)?,
            b: r.matrix(1, o)?,
            lambda,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, r.pos, "trailing bytes after parameters"));
    }
    let model = GpdbnModel {
        latents,
        a,
        kernel,
        top: GaussianTop { log_sigma, h_mu },
        layers,
        cfg,
        h_snapshot,
        train_noise,
        width,
        height,
        trained_iters,
    };
    model.validate()?;
    Ok(model)
}

pub fn save(model: &GpdbnModel, path: &Path) -> Result<()> {
    // write then rename so an interrupted save never clobbers a good file
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&encode(model)).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<GpdbnModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
