//! Binary silhouette datasets: file formats, the synthetic stars family,
//! salt-and-pepper corruption and SSIM.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

const BSIL_MAGIC: &[u8; 6] = b"BSIL1\0";
const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `N` binary images of identical size, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDataset {
    images: Tensor,
    width: usize,
    height: usize,
    pub name: String,
}

impl ImageDataset {
    pub fn new(images: Tensor, width: usize, height: usize, name: impl Into<String>) -> Result<Self> {
        if width == 0 || height == 0 || images.cols() != width * height {
            return Err(Error::invalid(format!(
                "{} columns do not match a {width}x{height} image",
                images.cols()
            )));
        }
        if images.rows() == 0 {
            return Err(Error::invalid("dataset is empty"));
        }
        if let Some(v) = images.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid(format!("dataset entries must be 0 or 1, found {v}")));
        }
        Ok(ImageDataset {
            images,
            width,
            height,
            name: name.into(),
        })
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row `i` as a `1×P` tensor.
    pub fn image(&self, i: usize) -> Tensor {
        self.images.row_tensor(i)
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        if let Some(&i) = idx.iter().find(|&&i| i >= self.len()) {
            return Err(Error::invalid(format!("index {i} out of range for {} images", self.len())));
        }
        ImageDataset::new(self.images.gather_rows(idx), self.width, self.height, self.name.clone())
    }

    /// The first `n` images.
    pub fn head(&self, n: usize) -> Result<Self> {
        if n > self.len() {
            return Err(Error::invalid(format!("requested {n} images from a set of {}", self.len())));
        }
        self.subset(&(0..n).collect::<Vec<_>>())
    }

    /// The images from `start` onwards.
    pub fn tail_from(&self, start: usize) -> Result<Self> {
        self.subset(&(start..self.len()).collect::<Vec<_>>())
    }

    /// Mean image, `1×P`.
    pub fn mean_image(&self) -> Tensor {
        self.images.column_means()
    }
}

fn binarize(v: u32) -> f64 {
    if v > 127 {
        1.0
    } else {
        0.0
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- PGM

/// A decoded greyscale image with raw sample values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub values: Vec<u32>,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(self.path, start, format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::format(self.path, start, format!("{what} out of range")))
    }
}

/// Parses a P2 (ASCII) or P5 (binary) PGM.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Pgm> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'2' | b'5') {
        return Err(Error::format(path, 0, "not a P2 or P5 PGM file"));
    }
    let binary = bytes[1] == b'5';
    let mut r = HeaderReader { bytes, pos: 2, path };
    let width = r.number("width")? as usize;
    let height = r.number("height")? as usize;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, r.pos, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, r.pos, format!("maxval {maxval} outside 1..=65535")));
    }
    let count = width * height;
    let mut values = Vec::with_capacity(count);
    if binary {
        // exactly one whitespace byte separates the header from the raster
        if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
            return Err(Error::format(path, r.pos, "missing whitespace after maxval"));
        }
        let start = r.pos + 1;
        let sample = if maxval > 255 { 2 } else { 1 };
        let end = start + count * sample;
        if bytes.len() < end {
            return Err(Error::format(path, bytes.len(), format!("raster truncated, need {} bytes", count * sample)));
        }
        let raster = &bytes[start..end];
        if sample == 1 {
            values.extend(raster.iter().map(|&b| b as u32));
        } else {
            values.extend(raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as u32));
        }
    } else {
        for _ in 0..count {
            values.push(r.number("pixel value")?);
        }
    }
    if let Some(i) = values.iter().position(|&v| v > maxval) {
        return Err(Error::format(path, r.pos, format!("pixel {i} exceeds maxval {maxval}")));
    }
    Ok(Pgm {
        width,
        height,
        maxval,
        values,
    })
}

pub fn read_pgm(path: &Path) -> Result<Pgm> {
    parse_pgm(&read_file(path)?, path)
}

/// P5 encoding of 8-bit values.
pub fn encode_pgm(width: usize, height: usize, values: &[u8]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::invalid(format!("{} values for a {width}x{height} image", values.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(values);
    Ok(out)
}

/// P2 encoding of 8-bit values.
pub fn encode_pgm_ascii(width: usize, height: usize, values: &[u8]) -> Result<Vec<u8>> {
    if values.len() != width * height {
        return Err(Error::invalid(format!("{} values for a {width}x{height} image", values.len())));
    }
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width) {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    Ok(out.into_bytes())
}

/// Probabilities in `[0,1]` to 8-bit values.
pub fn quantize(row: &[f64]) -> Vec<u8> {
    row.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Writes a row of probabilities in `[0,1]` as a P5 PGM.
pub fn write_pgm(path: &Path, row: &Tensor, width: usize, height: usize) -> Result<()> {
    write_file(path, &encode_pgm(width, height, &quantize(row.data()))?)
}

/// Loads one PGM as a binary `1×P` row.
pub fn load_pgm(path: &Path) -> Result<(Tensor, usize, usize)> {
    let pgm = read_pgm(path)?;
    let row = Tensor::matrix(1, pgm.width * pgm.height, pgm.values.iter().map(|&v| binarize(v)).collect());
    Ok((row, pgm.width, pgm.height))
}

/// Sorted `.pgm` files of a directory.
pub fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_pgm = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
        if is_pgm && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads every `.pgm` in `dir`, in lexicographic order.
pub fn load_pgm_dir(dir: &Path) -> Result<ImageDataset> {
    let files = pgm_files(dir)?;
    if files.is_empty() {
        return Err(Error::invalid(format!("no .pgm files in {}", dir.display())));
    }
    let mut data = Vec::new();
    let mut dims = None;
    for f in &files {
        let (row, w, h) = load_pgm(f)?;
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::invalid(format!(
                    "{} is {w}x{h} but earlier images are {}x{}",
                    f.display(),
                    d.0,
                    d.1
                )))
            }
            Some(_) => {}
        }
        data.extend_from_slice(row.data());
    }
    let (w, h) = dims.unwrap();
    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ImageDataset::new(Tensor::matrix(files.len(), w * h, data), w, h, name)
}

/// Writes every image as `<prefix><index>.pgm` with zero-padded indices.
pub fn write_pgm_dir(ds: &ImageDataset, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let digits = ds.len().to_string().len().max(2);
    (0..ds.len())
        .map(|i| {
            let path = dir.join(format!("{prefix}{i:0digits$}.pgm"));
            write_pgm(&path, &ds.image(i), ds.width(), ds.height())?;
            Ok(path)
        })
        .collect()
}

// ---------------------------------------------------------------- IDX

#[derive(Debug, Clone, Default)]
pub struct IdxOptions {
    /// Keep at most this many images (after filtering).
    pub limit: Option<usize>,
    /// Keep only these labels; requires a labels file.
    pub labels: Option<Vec<u8>>,
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(path, at, "truncated header"))
}

/// Parses an IDX image file (`0x00000803`), binarizing at `> 127`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::format(path, 0, format!("bad IDX image magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let need = n * rows * cols;
    if bytes.len() < 16 + need {
        return Err(Error::format(path, bytes.len(), format!("payload truncated, need {need} bytes")));
    }
    Ok((n, cols, rows, bytes[16..16 + need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::format(path, 0, format!("bad IDX label magic {magic:#010x}")));
    }
    let n = be_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::format(path, bytes.len(), format!("payload truncated, need {n} labels")));
    }
    Ok(bytes[8..8 + n].to_vec())
}

pub fn load_idx(images: &Path, labels: Option<&Path>, opts: &IdxOptions) -> Result<ImageDataset> {
    let (n, width, height, raw) = parse_idx_images(&read_file(images)?, images)?;
    let p = width * height;
    let labels = match labels {
        Some(l) => {
            let labs = parse_idx_labels(&read_file(l)?, l)?;
            if labs.len() != n {
                return Err(Error::invalid(format!("{} labels for {n} images", labs.len())));
            }
            Some(labs)
        }
        None => None,
    };
    if opts.labels.is_some() && labels.is_none() {
        return Err(Error::invalid("label filter needs a labels file"));
    }
    let limit = opts.limit.unwrap_or(usize::MAX);
    let mut data = Vec::new();
    let mut kept = 0;
    for i in 0..n {
        if kept == limit {
            break;
        }
        if let (Some(want), Some(labs)) = (&opts.labels, &labels) {
            if !want.contains(&labs[i]) {
                continue;
            }
        }
        data.extend(raw[i * p..(i + 1) * p].iter().map(|&b| binarize(b as u32)));
        kept += 1;
    }
    let name = images.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ImageDataset::new(Tensor::matrix(kept, p, data), width, height, name)
}

// ---------------------------------------------------------------- BSIL1

/// Packs a dataset: magic, `u32` LE `N`, width, height, then `N·P` bits
/// row-major, most significant bit first.
pub fn encode_bsil(ds: &ImageDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(18 + ds.images().len().div_ceil(8));
    out.extend_from_slice(BSIL_MAGIC);
    for v in [ds.len(), ds.width(), ds.height()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut byte = 0u8;
    for (i, &v) in ds.images().data().iter().enumerate() {
        if v == 1.0 {
            byte |= 0x80 >> (i % 8);
        }
        if i % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if ds.images().len() % 8 != 0 {
        out.push(byte);
    }
    out
}

pub fn decode_bsil(bytes: &[u8], path: &Path) -> Result<ImageDataset> {
    if bytes.len() < 18 || &bytes[..6] != BSIL_MAGIC {
        return Err(Error::format(path, 0, "missing BSIL1 magic"));
    }
    let le = |at: usize| u32::from_le_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]]) as usize;
    let (n, w, h) = (le(6), le(10), le(14));
    let bits = n * w * h;
    let need = 18 + bits.div_ceil(8);
    if bytes.len() != need {
        return Err(Error::format(path, bytes.len().min(need), format!("expected {need} bytes, found {}", bytes.len())));
    }
    let packed = &bytes[18..];
    let data = (0..bits)
        .map(|i| if packed[i / 8] & (0x80 >> (i % 8)) != 0 { 1.0 } else { 0.0 })
        .collect();
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    ImageDataset::new(Tensor::matrix(n, w * h, data), w, h, name)
}

pub fn load_bsil(path: &Path) -> Result<ImageDataset> {
    decode_bsil(&read_file(path)?, path)
}

pub fn save_bsil(ds: &ImageDataset, path: &Path) -> Result<()> {
    write_file(path, &encode_bsil(ds))
}

// ---------------------------------------------------------------- stars

/// Radii at a 32-pixel reference size.
const STAR_OUTER: f64 = 14.0;
const STAR_INNER_START: f64 = 5.0;

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// One frame of the stars family at `t ∈ [0,1]`: an 8-vertex polygon with
/// outer radius on the axes and inner radius `(1−t)·5 + t·14` on the
/// diagonals, scaled for `size`.
pub fn star_frame(t: f64, size: usize) -> Vec<f64> {
    let scale = size as f64 / 32.0;
    let outer = STAR_OUTER * scale;
    let inner = ((1.0 - t) * STAR_INNER_START + t * STAR_OUTER) * scale;
    let poly: Vec<(f64, f64)> = (0..8)
        .map(|k| {
            let r = if k % 2 == 0 { outer } else { inner };
            let a = k as f64 * std::f64::consts::FRAC_PI_4;
            (r * a.cos(), r * a.sin())
        })
        .collect();
    let c = size as f64 / 2.0;
    let mut out = vec![0.0; size * size];
    for iy in 0..size {
        for ix in 0..size {
            let (mut dx, mut dy) = (ix as f64 + 0.5 - c, iy as f64 + 0.5 - c);
            // rotate into the quadrant dx > 0, dy >= 0 so the raster is
            // exactly symmetric under quarter turns
            while !(dx > 0.0 && dy >= 0.0) && (dx, dy) != (0.0, 0.0) {
                (dx, dy) = (dy, -dx);
            }
            if (dx, dy) == (0.0, 0.0) || point_in_polygon(dx, dy, &poly) {
                out[iy * size + ix] = 1.0;
            }
        }
    }
    out
}

/// The stars dataset: `n` frames at `t = k/(n−1)`. The seed is reserved
/// and does not affect the output.
pub fn gen_stars(n: usize, size: usize, _seed: u64) -> Result<ImageDataset> {
    if n < 2 || size < 4 {
        return Err(Error::invalid(format!("stars need n >= 2 and size >= 4, got n={n} size={size}")));
    }
    let data = (0..n).flat_map(|k| star_frame(k as f64 / (n - 1) as f64, size)).collect();
    ImageDataset::new(Tensor::matrix(n, size * size, data), size, size, "stars")
}

// ---------------------------------------------------------------- noise

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    /// Chosen pixels are redrawn uniformly from {0,1}.
    #[default]
    Resample,
    /// Chosen pixels are inverted.
    Flip,
}

impl std::str::FromStr for NoiseMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resample" => Ok(NoiseMode::Resample),
            "flip" => Ok(NoiseMode::Flip),
            _ => Err(Error::invalid(format!("unknown noise mode {s:?} (expected resample or flip)"))),
        }
    }
}

/// Corrupts exactly `round(fraction·P)` distinct pixels.
pub fn salt_pepper(row: &Tensor, fraction: f64, mode: NoiseMode, rng: &mut impl Rng) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::invalid(format!("noise fraction {fraction} outside [0,1]")));
    }
    let p = row.len();
    let k = (fraction * p as f64).round() as usize;
    let mut out = row.clone();
    for i in index::sample(rng, p, k) {
        let v = &mut out.data_mut()[i];
        *v = match mode {
            NoiseMode::Resample => {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            }
            NoiseMode::Flip => 1.0 - *v,
        };
    }
    Ok(out)
}

// ---------------------------------------------------------------- SSIM

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean SSIM over every valid `window×window` position, uniform weights,
/// dynamic range 1.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, window: usize) -> Result<f64> {
    if a.len() != width * height || b.len() != a.len() {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if window == 0 || window % 2 == 0 {
        return Err(Error::invalid(format!("SSIM window must be odd, got {window}")));
    }
    if width < window || height < window {
        return Err(Error::invalid(format!("{width}x{height} image is smaller than the SSIM window")));
    }
    let m = (window * window) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for y0 in 0..=height - window {
        for x0 in 0..=width - window {
            let (mut sa, mut sb) = (0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    sa += a[y * width + x];
                    sb += b[y * width + x];
                }
            }
            let (ma, mb) = (sa / m, sb / m);
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for y in y0..y0 + window {
                for x in x0..x0 + window {
                    let da = a[y * width + x] - ma;
                    let db = b[y * width + x] - mb;
                    va += da * da;
                    vb += db * db;
                    cov += da * db;
                }
            }
            let (va, vb, cov) = (va / m, vb / m, cov / m);
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}

/// SSIM with the default window of 3.
pub fn ssim3(a: &Tensor, b: &Tensor, width: usize, height: usize) -> Result<f64> {
    ssim(a.data(), b.data(), width, height, 3)
}
