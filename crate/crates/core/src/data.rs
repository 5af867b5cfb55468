//! MNIST IDX ingestion and synthetic rotated-MNIST construction.

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::AngleMode;
use crate::group::{FiniteGroup, GroupElement, GroupError};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic number {found} (expected {expected})")]
    Magic { expected: u32, found: u32 },
    #[error("bad header: {0}")]
    Header(String),
    #[error("file truncated: header declares {declared} bytes of data, found {found}")]
    Truncated { declared: usize, found: usize },
    #[error("{images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("label {0} at index {1} is not a digit")]
    Label(u8, usize),
    #[error("requested {requested} samples, only {available} available")]
    Count { requested: usize, available: usize },
    #[error("exact rotation needs a multiple of 90 degrees, got {0}")]
    Angle(f64),
    #[error(transparent)]
    Group(#[from] GroupError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Everything needed to rebuild a dataset bit for bit.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Provenance {
    pub images_path: String,
    pub labels_path: String,
    pub seed: Option<u64>,
    pub angle_mode: Option<AngleMode>,
    /// Offset and length of this slice within the seeded draw.
    pub range: Option<(usize, usize)>,
}

impl Provenance {
    /// `# key: value` header lines.
    pub fn header(&self, name: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# dataset {name}");
        let _ = writeln!(s, "#   images: {}", self.images_path);
        let _ = writeln!(s, "#   labels: {}", self.labels_path);
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "#   seed: {seed}");
        }
        if let Some(mode) = self.angle_mode {
            let _ = writeln!(s, "#   rotation: uniform, {}", mode.as_str());
        }
        if let Some((start, len)) = self.range {
            let _ = writeln!(s, "#   draw range: [{start}, {})", start + len);
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[0, 1]`, one image after another.
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.pixels()..(i + 1) * self.pixels()]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.pixels());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            width: self.width,
            height: self.height,
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Every image rotated exactly by a quarter turn.
    pub fn rotated90(&self) -> Result<Dataset> {
        let mut out = self.clone();
        for i in 0..self.len() {
            let r = rotate_image(self.image(i), self.width, self.height, 90.0, AngleMode::Exact90)?;
            out.images[i * self.pixels()..(i + 1) * self.pixels()].copy_from_slice(&r);
        }
        Ok(out)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let io = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let raw = std::fs::read(path).map_err(io)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(io)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Header(format!("file ends inside the header at byte {at}")))
}

/// Parses an IDX image file: magic 2051, count, rows, cols, then `u8`
/// pixels. Returns `(count, rows, cols, intensities / 255)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0)?;
    if magic != IMAGE_MAGIC {
        return Err(DataError::Magic {
            expected: IMAGE_MAGIC,
            found: magic,
        });
    }
    let (n, rows, cols) = (be_u32(bytes, 4)? as usize, be_u32(bytes, 8)? as usize, be_u32(bytes, 12)? as usize);
    if rows == 0 || cols == 0 {
        return Err(DataError::Header(format!("image dimensions {rows}x{cols}")));
    }
    let declared = n * rows * cols;
    let body = &bytes[16..];
    if body.len() != declared {
        return Err(DataError::Truncated {
            declared,
            found: body.len(),
        });
    }
    Ok((n, rows, cols, body.iter().map(|&b| f32::from(b) / 255.0).collect()))
}

/// Parses an IDX label file: magic 2049, count, then `u8` labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0)?;
    if magic != LABEL_MAGIC {
        return Err(DataError::Magic {
            expected: LABEL_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(DataError::Truncated {
            declared: n,
            found: body.len(),
        });
    }
    if let Some((i, &l)) = body.iter().enumerate().find(|(_, &l)| l >= 10) {
        return Err(DataError::Label(l, i));
    }
    Ok(body.to_vec())
}

/// Loads an image/label IDX pair; gzip-compressed files are detected.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, rows, cols, images) = parse_idx_images(&read_maybe_gz(images_path)?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path)?)?;
    if labels.len() != n {
        return Err(DataError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    Ok(Dataset {
        width: cols,
        height: rows,
        images,
        labels,
        provenance: Provenance {
            images_path: images_path.display().to_string(),
            labels_path: labels_path.display().to_string(),
            ..Provenance::default()
        },
    })
}

/// Rotation about the image centre by `angle` degrees, in the same sense as
/// the group's rotation generator. `Exact90` permutes pixels; `Bilinear`
/// samples `in(R⁻¹(p − c) + c)` with zeros outside the image.
pub fn rotate_image(img: &[f32], width: usize, height: usize, angle: f64, mode: AngleMode) -> Result<Vec<f32>> {
    match mode {
        AngleMode::Exact90 => {
            let quarter = angle / 90.0;
            if quarter.fract() != 0.0 {
                return Err(DataError::Angle(angle));
            }
            let k = (quarter as i64).rem_euclid(4) as usize;
            let c4 = FiniteGroup::cyclic(4)?;
            let mut out = vec![0.0; img.len()];
            for (p, &v) in img.iter().enumerate() {
                out[c4.act_grid(GroupElement(k), p, width, height)?] = v;
            }
            Ok(out)
        }
        AngleMode::Bilinear => {
            let (sin, cos) = angle.to_radians().sin_cos();
            let (cx, cy) = ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0);
            let at = |x: i64, y: i64| -> f64 {
                if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
                    0.0
                } else {
                    f64::from(img[y as usize * width + x as usize])
                }
            };
            let mut out = vec![0.0; img.len()];
            for y in 0..height {
                for x in 0..width {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    // R(−θ) applied to the output offset
                    let sx = cos * dx + sin * dy + cx;
                    let sy = -sin * dx + cos * dy + cy;
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (fx, fy) = (sx - x0, sy - y0);
                    let (x0, y0) = (x0 as i64, y0 as i64);
                    let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                        + at(x0 + 1, y0) * fx * (1.0 - fy)
                        + at(x0, y0 + 1) * (1.0 - fx) * fy
                        + at(x0 + 1, y0 + 1) * fx * fy;
                    out[y * width + x] = v.clamp(0.0, 1.0) as f32;
                }
            }
            Ok(out)
        }
    }
}

/// Seeded subsample of `count` images, each rotated by an independent
/// uniform angle (continuous for `Bilinear`, a random quarter turn for
/// `Exact90`).
pub fn make_rotmnist(base: &Dataset, seed: u64, count: usize, mode: AngleMode) -> Result<Dataset> {
    if count > base.len() {
        return Err(DataError::Count {
            requested: count,
            available: base.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.shuffle(&mut rng);
    order.truncate(count);
    let mut out = base.subset(&order);
    for i in 0..count {
        let angle = match mode {
            AngleMode::Bilinear => rng.gen_range(0.0..360.0),
            AngleMode::Exact90 => 90.0 * rng.gen_range(0..4) as f64,
        };
        let r = rotate_image(base.image(order[i]), base.width, base.height, angle, mode)?;
        out.images[i * base.pixels()..(i + 1) * base.pixels()].copy_from_slice(&r);
    }
    out.provenance.seed = Some(seed);
    out.provenance.angle_mode = Some(mode);
    out.provenance.range = Some((0, count));
    Ok(out)
}

/// Disjoint train and validation sets from one seeded draw of
/// `train + val` samples.
pub fn train_val_split(
    base: &Dataset,
    seed: u64,
    train: usize,
    val: usize,
    mode: AngleMode,
) -> Result<(Dataset, Dataset)> {
    let all = make_rotmnist(base, seed, train + val, mode)?;
    let mut tr = all.subset(&(0..train).collect::<Vec<_>>());
    let mut va = all.subset(&(train..train + val).collect::<Vec<_>>());
    tr.provenance.range = Some((0, train));
    va.provenance.range = Some((train, val));
    Ok((tr, va))
}

/// Index batches for one epoch: a shuffle keyed on `(seed, epoch)`, cut
/// into `batch_size` chunks with a short final batch.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
