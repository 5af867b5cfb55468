//! Model and training configuration, read from `key=value` files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::attention::{AttentionSettings, Boundary, Neighborhood, PeSharing};
use crate::encoding::PeVariant;
use crate::group::FiniteGroup;
use crate::scalar::Precision;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value for '{key}': {msg}")]
    Value { key: String, msg: String },
    #[error("invalid configuration: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub group: String,
    /// Side of the square attention window.
    pub neighborhood: usize,
    pub boundary: Boundary,
    pub image_width: usize,
    pub image_height: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Heads of the lifting layer.
    pub lift_heads: usize,
    pub lift_head_dim: usize,
    pub blocks: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub pe_hidden: usize,
    pub pe_share_heads: bool,
    pub pe_variant: PeVariant,
    /// Fixed multiplier on encoder outputs.
    pub pe_scale: f64,
    pub scale_scores: bool,
    pub attn_dropout: f64,
    pub value_dropout: f64,
    pub precision: Precision,
    /// Mean-pooling factor applied to the image before embedding (1 = none).
    pub spatial_pool: usize,
    /// Pixels enter the model as `(p - pixel_mean) / pixel_std`.
    pub pixel_mean: f64,
    pub pixel_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            group: "c4".into(),
            neighborhood: 5,
            boundary: Boundary::Torus,
            image_width: 28,
            image_height: 28,
            in_channels: 1,
            embed_dim: 32,
            heads: 4,
            head_dim: 8,
            lift_heads: 4,
            lift_head_dim: 8,
            blocks: 2,
            mlp_hidden: 32,
            classes: 10,
            pe_hidden: 16,
            pe_share_heads: true,
            pe_variant: PeVariant::Gevit,
            pe_scale: 1.0,
            scale_scores: false,
            attn_dropout: 0.1,
            value_dropout: 0.1,
            precision: Precision::F32,
            spatial_pool: 1,
            pixel_mean: 0.0,
            pixel_std: 1.0,
        }
    }
}

impl ModelConfig {
    /// Under 5k parameters; trains on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            embed_dim: 16,
            heads: 2,
            head_dim: 4,
            lift_heads: 16,
            lift_head_dim: 1,
            mlp_hidden: 16,
            spatial_pool: 2,
            pixel_mean: 0.1307,
            pixel_std: 0.3081,
            pe_scale: 30.0,
            ..Self::default()
        }
    }

    pub fn group(&self) -> Result<FiniteGroup, ConfigError> {
        FiniteGroup::from_str(&self.group).map_err(|e| ConfigError::Value {
            key: "group".into(),
            msg: e.to_string(),
        })
    }

    pub fn attention_settings(&self) -> AttentionSettings {
        AttentionSettings {
            neighborhood: Neighborhood::window(self.neighborhood, self.boundary),
            scale_scores: self.scale_scores,
            pe_sharing: if self.pe_share_heads {
                PeSharing::Shared
            } else {
                PeSharing::PerHead
            },
            pe_variant: self.pe_variant,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut v = Vec::new();
        if let Err(e) = self.group() {
            v.push(e.to_string());
        }
        if self.neighborhood == 0 || self.neighborhood % 2 == 0 {
            v.push(format!("neighborhood must be odd and >= 1, got {}", self.neighborhood));
        }
        for (name, d) in [
            ("image_width", self.image_width),
            ("image_height", self.image_height),
            ("in_channels", self.in_channels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("lift_heads", self.lift_heads),
            ("lift_head_dim", self.lift_head_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("classes", self.classes),
            ("pe_hidden", self.pe_hidden),
            ("spatial_pool", self.spatial_pool),
        ] {
            if d == 0 {
                v.push(format!("{name} must be >= 1"));
            }
        }
        if self.spatial_pool > 0
            && (self.image_width % self.spatial_pool != 0 || self.image_height % self.spatial_pool != 0)
        {
            v.push(format!(
                "spatial_pool {} does not divide the {}x{} image",
                self.spatial_pool, self.image_width, self.image_height
            ));
        }
        for (name, x) in [
            ("pe_scale", self.pe_scale),
            ("pixel_std", self.pixel_std),
        ] {
            if !(x.is_finite() && x > 0.0) {
                v.push(format!("{name} must be positive and finite, got {x}"));
            }
        }
        if !self.pixel_mean.is_finite() {
            v.push(format!("pixel_mean must be finite, got {}", self.pixel_mean));
        }
        for (name, p) in [("attn_dropout", self.attn_dropout), ("value_dropout", self.value_dropout)] {
            if !(0.0..1.0).contains(&p) {
                v.push(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngleMode {
    Exact90,
    #[default]
    Bilinear,
}

impl AngleMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AngleMode::Exact90 => "exact90",
            AngleMode::Bilinear => "bilinear",
        }
    }
}

impl FromStr for AngleMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "exact90" => Ok(AngleMode::Exact90),
            "bilinear" => Ok(AngleMode::Bilinear),
            other => Err(format!("unknown angle mode '{other}' (expected exact90|bilinear)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub angle_mode: AngleMode,
    pub images: String,
    pub labels: String,
    /// Log every this many optimizer steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 10,
            train_count: 2000,
            val_count: 500,
            angle_mode: AngleMode::Bilinear,
            images: "data/mnist5k-images-idx3-ubyte.gz".into(),
            labels: "data/mnist5k-labels-idx1-ubyte.gz".into(),
            log_every: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V, ConfigError>
where
    V::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: V::Err| ConfigError::Value {
        key: key.into(),
        msg: e.to_string(),
    })
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let m = &mut self.model;
        let t = &mut self.train;
        let v = value.trim();
        match key.trim() {
            "group" => m.group = v.to_string(),
            "neighborhood" => m.neighborhood = parse_value(key, v)?,
            "boundary" => m.boundary = parse_value(key, v)?,
            "image_width" => m.image_width = parse_value(key, v)?,
            "image_height" => m.image_height = parse_value(key, v)?,
            "in_channels" => m.in_channels = parse_value(key, v)?,
            "embed_dim" => m.embed_dim = parse_value(key, v)?,
            "heads" => m.heads = parse_value(key, v)?,
            "head_dim" => m.head_dim = parse_value(key, v)?,
            "lift_heads" => m.lift_heads = parse_value(key, v)?,
            "lift_head_dim" => m.lift_head_dim = parse_value(key, v)?,
            "blocks" => m.blocks = parse_value(key, v)?,
            "mlp_hidden" => m.mlp_hidden = parse_value(key, v)?,
            "classes" => m.classes = parse_value(key, v)?,
            "pe_hidden" => m.pe_hidden = parse_value(key, v)?,
            "pe_share_heads" => m.pe_share_heads = parse_value(key, v)?,
            "pe_variant" => m.pe_variant = parse_value(key, v)?,
            "pe_scale" => m.pe_scale = parse_value(key, v)?,
            "pixel_mean" => m.pixel_mean = parse_value(key, v)?,
            "pixel_std" => m.pixel_std = parse_value(key, v)?,
            "scale_scores" => m.scale_scores = parse_value(key, v)?,
            "attn_dropout" => m.attn_dropout = parse_value(key, v)?,
            "value_dropout" => m.value_dropout = parse_value(key, v)?,
            "dropout" => {
                m.attn_dropout = parse_value(key, v)?;
                m.value_dropout = m.attn_dropout;
            }
            "precision" => m.precision = parse_value(key, v)?,
            "spatial_pool" => m.spatial_pool = parse_value(key, v)?,
            "seed" => t.seed = parse_value(key, v)?,
            "lr" => t.lr = parse_value(key, v)?,
            "weight_decay" => t.weight_decay = parse_value(key, v)?,
            "batch_size" => t.batch_size = parse_value(key, v)?,
            "epochs" => t.epochs = parse_value(key, v)?,
            "train_count" => t.train_count = parse_value(key, v)?,
            "val_count" => t.val_count = parse_value(key, v)?,
            "angle_mode" => t.angle_mode = parse_value(key, v)?,
            "images" => t.images = v.to_string(),
            "labels" => t.labels = v.to_string(),
            "log_every" => t.log_every = parse_value(key, v)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the desk defaults. Blank lines and
    /// `#` comments are ignored.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::desk();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate()?;
        let mut v = Vec::new();
        if self.train.batch_size == 0 {
            v.push("batch_size must be >= 1".to_string());
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            v.push(format!("lr must be positive, got {}", self.train.lr));
        }
        if self.train.weight_decay < 0.0 {
            v.push("weight_decay must be >= 0".to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(v))
        }
    }

    /// Canonical `key=value` rendering; parsing it yields `self`.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("group", m.group.clone());
        kv.insert("neighborhood", m.neighborhood.to_string());
        kv.insert("boundary", m.boundary.as_str().into());
        kv.insert("image_width", m.image_width.to_string());
        kv.insert("image_height", m.image_height.to_string());
        kv.insert("in_channels", m.in_channels.to_string());
        kv.insert("embed_dim", m.embed_dim.to_string());
        kv.insert("heads", m.heads.to_string());
        kv.insert("lift_heads", m.lift_heads.to_string());
        kv.insert("lift_head_dim", m.lift_head_dim.to_string());
        kv.insert("head_dim", m.head_dim.to_string());
        kv.insert("blocks", m.blocks.to_string());
        kv.insert("mlp_hidden", m.mlp_hidden.to_string());
        kv.insert("classes", m.classes.to_string());
        kv.insert("pe_hidden", m.pe_hidden.to_string());
        kv.insert("pe_share_heads", m.pe_share_heads.to_string());
        kv.insert("pe_variant", m.pe_variant.as_str().into());
        kv.insert("pe_scale", m.pe_scale.to_string());
        kv.insert("pixel_mean", m.pixel_mean.to_string());
        kv.insert("pixel_std", m.pixel_std.to_string());
        kv.insert("scale_scores", m.scale_scores.to_string());
        kv.insert("attn_dropout", m.attn_dropout.to_string());
        kv.insert("value_dropout", m.value_dropout.to_string());
        kv.insert("precision", m.precision.as_str().into());
        kv.insert("spatial_pool", m.spatial_pool.to_string());
        kv.insert("seed", t.seed.to_string());
        kv.insert("lr", t.lr.to_string());
        kv.insert("weight_decay", t.weight_decay.to_string());
        kv.insert("batch_size", t.batch_size.to_string());
        kv.insert("epochs", t.epochs.to_string());
        kv.insert("train_count", t.train_count.to_string());
        kv.insert("val_count", t.val_count.to_string());
        kv.insert("angle_mode", t.angle_mode.as_str().into());
        kv.insert("images", t.images.clone());
        kv.insert("labels", t.labels.clone());
        kv.insert("log_every", t.log_every.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
