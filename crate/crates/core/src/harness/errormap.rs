//! Equivariance error maps `E = F″ − F′` for one input image.
//!
//! `F` is the feature map of the image, `F′` that of the rotated image and
//! `F″` the rotated, group-permuted copy of `F`. Each channel is written as
//! a PGM tile strip (one tile per group element) plus a CSV of raw values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::attention::{Domain, FeatureMap};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{load_idx, train_val_split};
use crate::group::{FiniteGroup, GroupElement};
use crate::harness::{io_err, HarnessError, Result};
use crate::network::Model;
use crate::scalar::{Precision, Scalar};

/// Which feature map to compare.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layer {
    Lifting,
    Block(usize),
    Last,
}

impl FromStr for Layer {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lifting" => Ok(Layer::Lifting),
            "last" => Ok(Layer::Last),
            _ => s
                .strip_prefix("block")
                .and_then(|k| k.parse().ok())
                .map(Layer::Block)
                .ok_or_else(|| HarnessError::Usage(format!("unknown layer '{s}' (lifting, last, blockK)"))),
        }
    }
}

/// Input image for the map.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Pgm(PathBuf),
    /// Index into the configured validation split.
    Sample(usize),
}

#[derive(Debug, Clone)]
pub struct ErrorMapOptions {
    pub checkpoint: Option<PathBuf>,
    pub image: ImageSource,
    pub layer: Layer,
    /// Index of the point-group element used as input rotation.
    pub element: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorMapReport {
    pub layer: String,
    pub transformation: String,
    pub precision: Precision,
    pub width: usize,
    pub height: usize,
    pub fibers: usize,
    pub channels: usize,
    /// `E` laid out like the feature map: `[(pos·fibers + g)·C + c]`.
    pub errors: Vec<f64>,
    pub mean_abs: f64,
    pub max_abs: f64,
    pub files: Vec<PathBuf>,
}

/// Binary 8-bit grayscale PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).map_err(io_err(format!("writing {}", path.display())))
}

/// Reads a binary PGM, scaling intensities to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(io_err(format!("reading {}", path.display())))?;
    parse_pgm(&bytes).map_err(|msg| HarnessError::Usage(format!("{}: {msg}", path.display())))
}

pub fn parse_pgm(bytes: &[u8]) -> std::result::Result<(usize, usize, Vec<f32>), String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected binary PGM (P5), got {}", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field '{s}'"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let data = bytes.get(pos + 1..pos + 1 + w * h).ok_or("truncated pixel data")?;
    Ok((w, h, data.iter().map(|&b| b as f32 / maxval as f32).collect()))
}

/// `F″(g·p, h̄k) = F(p, k)`: spatial rotation about the grid centre and a
/// regular-representation shift of the group axis.
pub fn rotate_and_permute<T: Scalar>(
    group: &FiniteGroup,
    f: &FeatureMap<T>,
    element: GroupElement,
) -> Result<Vec<T>> {
    let (w, h, fib, c) = (f.domain.width(), f.domain.height(), f.domain.fibers(), f.channels());
    let perm = if fib > 1 {
        group.regular_permutation(element)?
    } else {
        vec![0]
    };
    let x = f.values.data();
    let mut out = vec![T::zero(); x.len()];
    for p in 0..w * h {
        let q = group.act_grid(element, p, w, h)?;
        for k in 0..fib {
            out[(q * fib + k) * c..][..c].copy_from_slice(&x[(p * fib + perm[k]) * c..][..c]);
        }
    }
    Ok(out)
}

fn select<T: Scalar>(trace: &crate::network::Trace<T>, layer: Layer) -> Result<(FeatureMap<T>, String)> {
    match layer {
        Layer::Lifting => Ok((trace.lifting.clone(), "lifting".into())),
        Layer::Last if trace.blocks.is_empty() => Ok((trace.lifting.clone(), "lifting".into())),
        Layer::Last => Ok((trace.blocks.last().unwrap().clone(), format!("block{}", trace.blocks.len() - 1))),
        Layer::Block(k) => trace
            .blocks
            .get(k)
            .cloned()
            .map(|b| (b, format!("block{k}")))
            .ok_or_else(|| HarnessError::Usage(format!("model has {} blocks, no block{k}", trace.blocks.len()))),
    }
}

/// Error map of `model` at `layer` for `pixels` under the exact rotation
/// `element`. No files are written.
pub fn error_map<T: Scalar>(
    model: &Model<T>,
    pixels: &[f32],
    layer: Layer,
    element: GroupElement,
) -> Result<ErrorMapReport> {
    let g = &model.group;
    let (w, h) = (model.config.image_width, model.config.image_height);
    if !g.is_exact_on_grid(element, w, h) {
        return Err(HarnessError::Usage(format!(
            "element {} of {} is not an exact rotation of a {w}x{h} grid",
            element.index(),
            g.name()
        )));
    }
    let image = model.image(pixels)?;
    let perm = g.grid_permutation(element, w, h)?;
    let c_in = model.config.in_channels;
    let mut rotated = vec![0.0f32; pixels.len()];
    for (p, &q) in perm.iter().enumerate() {
        rotated[q * c_in..][..c_in].copy_from_slice(&pixels[p * c_in..][..c_in]);
    }
    let (f, name) = select(&model.trace(&image, None)?, layer)?;
    let (f_rot, _) = select(&model.trace(&model.image(&rotated)?, None)?, layer)?;
    let truth = rotate_and_permute(g, &f, element)?;
    let errors: Vec<f64> = truth
        .iter()
        .zip(f_rot.values.data())
        .map(|(a, b)| a.to_f64_lossy() - b.to_f64_lossy())
        .collect();
    let n = errors.len().max(1) as f64;
    let (fw, fh) = (f.domain.width(), f.domain.height());
    Ok(ErrorMapReport {
        layer: name,
        transformation: crate::harness::certify::transformation_name(
            g,
            crate::group::AffineElement::rotation(element),
        ),
        precision: if T::NAME == "f64" { Precision::F64 } else { Precision::F32 },
        width: fw,
        height: fh,
        fibers: f.domain.fibers(),
        channels: f.channels(),
        mean_abs: errors.iter().map(|e| e.abs()).sum::<f64>() / n,
        max_abs: errors.iter().fold(0.0, |m, e| m.max(e.abs())),
        errors,
        files: Vec::new(),
    })
}

impl ErrorMapReport {
    fn at(&self, pos: usize, g: usize, c: usize) -> f64 {
        self.errors[(pos * self.fibers + g) * self.channels + c]
    }

    /// 8-bit tile strip of one channel: group elements left to right,
    /// min-max normalised over the whole strip. A constant map is mid-gray.
    pub fn channel_image(&self, c: usize) -> (usize, usize, Vec<u8>) {
        let (w, h, fib) = (self.width, self.height, self.fibers);
        let vals: Vec<f64> = (0..w * h).flat_map(|p| (0..fib).map(move |g| (p, g))).map(|(p, g)| self.at(p, g, c)).collect();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut img = vec![0u8; w * fib * h];
        for y in 0..h {
            for g in 0..fib {
                for x in 0..w {
                    let v = self.at(y * w + x, g, c);
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    img[y * w * fib + g * w + x] = (t * 255.0).round() as u8;
                }
            }
        }
        (w * fib, h, img)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("channel,group_element,x,y,error\n");
        for c in 0..self.channels {
            for g in 0..self.fibers {
                for p in 0..self.width * self.height {
                    let _ = writeln!(out, "{c},{g},{},{},{:e}", p % self.width, p / self.width, self.at(p, g, c));
                }
            }
        }
        out
    }

    pub fn summary(&self) -> String {
        format!(
            "layer={} transformation={} precision={} maps={}x{}x{} channels={} mean_abs_error={:.6e} max_abs_error={:.6e}\n",
            self.layer,
            self.transformation,
            self.precision,
            self.width,
            self.height,
            self.fibers,
            self.channels,
            self.mean_abs,
            self.max_abs
        )
    }

    /// Writes `error_c{K}.pgm` per channel, `errors.csv` and `summary.txt`.
    pub fn write(&mut self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(io_err(format!("creating {}", out_dir.display())))?;
        self.files.clear();
        for c in 0..self.channels {
            let (w, h, img) = self.channel_image(c);
            let path = out_dir.join(format!("error_c{c:02}.pgm"));
            write_pgm(&path, w, h, &img)?;
            self.files.push(path);
        }
        let csv = out_dir.join("errors.csv");
        std::fs::write(&csv, self.csv()).map_err(io_err("writing errors.csv"))?;
        self.files.push(csv);
        let summary = out_dir.join("summary.txt");
        std::fs::write(&summary, self.summary()).map_err(io_err("writing summary.txt"))?;
        self.files.push(summary);
        Ok(())
    }
}

fn run<T: Scalar>(cfg: &RunConfig, opts: &ErrorMapOptions, pixels: &[f32]) -> Result<ErrorMapReport> {
    let model = match &opts.checkpoint {
        Some(p) => {
            let mut m = Model::<T>::build(&cfg.model, cfg.train.seed)?;
            checkpoint::load(&mut m, p)?;
            m
        }
        None => Model::<T>::build_random(&cfg.model, cfg.train.seed)?,
    };
    let element = model.group.element(opts.element)?;
    error_map(&model, pixels, opts.layer, element)
}

/// Loads or draws a model, computes the map and writes it to `out_dir`.
/// Without a checkpoint every weight is random, so that encoders are not
/// zero and the baseline encoding shows its error.
pub fn cmd_errormap(cfg: &RunConfig, opts: &ErrorMapOptions, out_dir: &Path) -> Result<ErrorMapReport> {
    cfg.validate()?;
    let m = &cfg.model;
    let pixels = match &opts.image {
        ImageSource::Pgm(p) => {
            let (w, h, px) = read_pgm(p)?;
            if (w, h) != (m.image_width, m.image_height) || m.in_channels != 1 {
                return Err(HarnessError::Network(crate::network::NetworkError::Input {
                    got: Domain::Planar { width: w, height: h },
                    width: m.image_width,
                    height: m.image_height,
                    channels: m.in_channels,
                }));
            }
            px
        }
        ImageSource::Sample(i) => {
            let t = &cfg.train;
            let base = load_idx(Path::new(&t.images), Path::new(&t.labels))?;
            let (_, val) = train_val_split(&base, t.seed, t.train_count, t.val_count, t.angle_mode)?;
            if *i >= val.len() {
                return Err(HarnessError::Usage(format!("sample {i} out of range ({} validation images)", val.len())));
            }
            val.image(*i).to_vec()
        }
    };
    let mut report = match m.precision {
        Precision::F32 => run::<f32>(cfg, opts, &pixels)?,
        Precision::F64 => run::<f64>(cfg, opts, &pixels)?,
    };
    report.write(out_dir)?;
    Ok(report)
}
