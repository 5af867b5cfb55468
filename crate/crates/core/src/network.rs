//! The full classifier: pixel embedding, lifting self-attention, residual
//! group self-attention blocks, invariant pooling and a linear head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::attention::{
    group_attention, lifting_attention, AttentionError, AttentionParams, Domain, Dropout, FeatureMap,
};
use crate::config::{ConfigError, ModelConfig};
use crate::encoding::{EncoderKind, EncoderNet};
use crate::group::FiniteGroup;
use crate::layers::{join, LayerNorm, Linear, Parameters};
use crate::optim::Adam;
use crate::scalar::{s, Scalar};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input is {got:?}, model expects a {width}x{height} image with {channels} channel(s)")]
    Input {
        got: Domain,
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
}

pub type Result<T> = std::result::Result<T, NetworkError>;

/// Pre-norm residual block: `x + GSA(LN x)`, then `x + W₂ swish(W₁ LN x)`.
#[derive(Debug, Clone)]
pub struct Block<T: Scalar> {
    pub norm1: LayerNorm<T>,
    pub attn: AttentionParams<T>,
    pub pe: EncoderNet<T>,
    pub norm2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Parameters<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.norm1.visit(&join(prefix, "norm1"), f);
        self.attn.visit(&join(prefix, "attn"), f);
        self.pe.visit(&join(prefix, "pe"), f);
        self.norm2.visit(&join(prefix, "norm2"), f);
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.norm1.visit_mut(&join(prefix, "norm1"), f);
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.pe.visit_mut(&join(prefix, "pe"), f);
        self.norm2.visit_mut(&join(prefix, "norm2"), f);
        self.fc1.visit_mut(&join(prefix, "fc1"), f);
        self.fc2.visit_mut(&join(prefix, "fc2"), f);
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub config: ModelConfig,
    pub group: FiniteGroup,
    pub embed: Linear<T>,
    pub lift: AttentionParams<T>,
    pub lift_pe: EncoderNet<T>,
    pub lift_norm: LayerNorm<T>,
    pub blocks: Vec<Block<T>>,
    pub final_norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> Parameters<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.embed.visit(&join(prefix, "embed"), f);
        self.lift.visit(&join(prefix, "lift"), f);
        self.lift_pe.visit(&join(prefix, "lift_pe"), f);
        self.lift_norm.visit(&join(prefix, "lift_norm"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("block{i}")), f);
        }
        self.final_norm.visit(&join(prefix, "final_norm"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.embed.visit_mut(&join(prefix, "embed"), f);
        self.lift.visit_mut(&join(prefix, "lift"), f);
        self.lift_pe.visit_mut(&join(prefix, "lift_pe"), f);
        self.lift_norm.visit_mut(&join(prefix, "lift_norm"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("block{i}")), f);
        }
        self.final_norm.visit_mut(&join(prefix, "final_norm"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Number of scalar parameters.
pub fn parameter_count<T: Scalar>(p: &impl Parameters<T>) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.len());
    n
}

/// Named parameter tensors in visiting order.
pub fn named_parameters<T: Scalar>(p: &impl Parameters<T>) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    p.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
    out
}

/// Intermediate feature maps of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T: Scalar> {
    /// Raw lifting-layer output.
    pub lifting: FeatureMap<T>,
    /// Output of each residual block.
    pub blocks: Vec<FeatureMap<T>>,
    pub logits: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    /// Deterministic initialisation; the encoders' output layers start at zero.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let group = config.group()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = config.embed_dim;
        let (h, ch) = (config.heads, config.head_dim);
        let pe_out = if config.pe_share_heads { c } else { h * ch };
        let (lh, lch) = (config.lift_heads, config.lift_head_dim);
        let lift_pe_out = if config.pe_share_heads { c } else { lh * lch };
        let radius = config.neighborhood / 2;
        let embed = Linear::new(&mut rng, config.in_channels, c, true);
        let enc = |rng: &mut ChaCha8Rng, kind, out| {
            EncoderNet::new(rng, kind, radius, config.pe_hidden, out).with_scale(config.pe_scale)
        };
        let lift = AttentionParams::new(&mut rng, c, lh, lch, c);
        let lift_pe = enc(&mut rng, EncoderKind::Lifting, lift_pe_out);
        let blocks = (0..config.blocks)
            .map(|_| Block {
                norm1: LayerNorm::new(c),
                attn: AttentionParams::new(&mut rng, c, h, ch, c),
                pe: enc(&mut rng, EncoderKind::Group, pe_out),
                norm2: LayerNorm::new(c),
                fc1: Linear::new(&mut rng, c, config.mlp_hidden, true),
                fc2: Linear::new(&mut rng, config.mlp_hidden, c, true),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            group,
            embed,
            lift,
            lift_pe,
            lift_norm: LayerNorm::new(c),
            blocks,
            final_norm: LayerNorm::new(c),
            head: Linear::new(&mut rng, c, config.classes, true),
        })
    }

    /// Every parameter drawn at random, including encoder outputs, biases
    /// and norm gains. Used where a zero encoding would hide errors.
    /// Matrices are `U(±3/√fan_in)`, vectors `U(±0.5)` around their
    /// initial value, so attention is neither uniform nor saturated.
    pub fn build_random(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::build(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        m.visit_mut("", &mut |_, t| {
            let data = match t.shape() {
                [fan_in, _] => {
                    let b = 3.0 / (*fan_in as f64).sqrt();
                    (0..t.len()).map(|_| s(rng.gen_range(-b..b))).collect()
                }
                _ => t.data().iter().map(|v| s(v.to_f64_lossy() + rng.gen_range(-0.5..0.5))).collect(),
            };
            *t = Tensor::param(t.shape(), data).unwrap();
        });
        Ok(m)
    }

    pub fn parameter_count(&self) -> usize {
        parameter_count(self)
    }

    /// Wraps `[H·W·C_in]` pixel intensities (row-major) as a planar map.
    pub fn image(&self, pixels: &[f32]) -> Result<FeatureMap<T>> {
        let c = &self.config;
        let data = pixels.iter().map(|&p| s((p as f64 - c.pixel_mean) / c.pixel_std)).collect();
        let t = Tensor::new(&[c.image_width * c.image_height, c.in_channels], data)?;
        Ok(FeatureMap::planar(c.image_width, c.image_height, t)?)
    }

    fn check_input(&self, image: &FeatureMap<T>) -> Result<()> {
        let c = &self.config;
        let ok = image.domain
            == Domain::Planar {
                width: c.image_width,
                height: c.image_height,
            }
            && image.channels() == c.in_channels;
        if ok {
            Ok(())
        } else {
            Err(NetworkError::Input {
                got: image.domain,
                width: c.image_width,
                height: c.image_height,
                channels: c.in_channels,
            })
        }
    }

    fn block_forward(
        &self,
        block: &Block<T>,
        x: &FeatureMap<T>,
        mut dropout: Option<&mut Dropout<'_>>,
    ) -> Result<FeatureMap<T>> {
        let settings = self.config.attention_settings();
        let normed = FeatureMap::new(x.domain, block.norm1.forward(&x.values)?)?;
        let a = group_attention(&normed, &block.attn, &settings, &block.pe, &self.group, dropout.as_deref_mut())?;
        let y = x.values.add(&a.values)?;
        let hidden = block.fc1.forward(&block.norm2.forward(&y)?)?.swish();
        let z = y.add(&block.fc2.forward(&hidden)?)?;
        Ok(FeatureMap::new(x.domain, z)?)
    }

    /// Forward pass keeping every intermediate map.
    pub fn trace(&self, image: &FeatureMap<T>, mut dropout: Option<&mut Dropout<'_>>) -> Result<Trace<T>> {
        self.check_input(image)?;
        let settings = self.config.attention_settings();
        let pooled = spatial_mean_pool(image, self.config.spatial_pool)?;
        let emb = FeatureMap::new(pooled.domain, self.embed.forward(&pooled.values)?)?;
        let lifting = lifting_attention(
            &emb,
            &self.lift,
            &settings,
            &self.lift_pe,
            &self.group,
            dropout.as_deref_mut(),
        )?;
        let act = self.lift_norm.forward(&lifting.values)?.swish();
        let mut x = FeatureMap::new(lifting.domain, act)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = self.block_forward(b, &x, dropout.as_deref_mut())?;
            blocks.push(x.clone());
        }
        let normed = FeatureMap::new(x.domain, self.final_norm.forward(&x.values)?)?;
        let pooled = global_pool(&normed)?;
        let logits = self
            .head
            .forward(&pooled.reshape(&[1, self.config.embed_dim])?)?
            .reshape(&[self.config.classes])?;
        Ok(Trace {
            lifting,
            blocks,
            logits,
        })
    }

    /// Class logits, shape `[classes]`.
    pub fn forward(&self, image: &FeatureMap<T>, dropout: Option<&mut Dropout<'_>>) -> Result<Tensor<T>> {
        Ok(self.trace(image, dropout)?.logits)
    }

    /// Copy with every parameter cut from previous graphs and converted to
    /// another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |t: &Tensor<T>| -> Tensor<U> {
            Tensor::param(t.shape(), t.data().iter().map(|v| s::<U>(v.to_f64_lossy())).collect()).unwrap()
        };
        let lin = |l: &Linear<T>| Linear {
            weight: conv(&l.weight),
            bias: l.bias.as_ref().map(conv),
        };
        let ln = |n: &LayerNorm<T>| LayerNorm {
            gain: conv(&n.gain),
            bias: conv(&n.bias),
            eps: n.eps,
        };
        let attn = |p: &AttentionParams<T>| AttentionParams {
            w_qry: p.w_qry.iter().map(conv).collect(),
            w_key: p.w_key.iter().map(conv).collect(),
            w_val: p.w_val.iter().map(conv).collect(),
            out: lin(&p.out),
        };
        let enc = |e: &EncoderNet<T>| e.map_layers(lin(&e.hidden), lin(&e.output));
        Model {
            config: self.config.clone(),
            group: self.group.clone(),
            embed: lin(&self.embed),
            lift: attn(&self.lift),
            lift_pe: enc(&self.lift_pe),
            lift_norm: ln(&self.lift_norm),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    norm1: ln(&b.norm1),
                    attn: attn(&b.attn),
                    pe: enc(&b.pe),
                    norm2: ln(&b.norm2),
                    fc1: lin(&b.fc1),
                    fc2: lin(&b.fc2),
                })
                .collect(),
            final_norm: ln(&self.final_norm),
            head: lin(&self.head),
        }
    }
}

/// Averages non-overlapping `k×k` spatial blocks, per fiber and channel.
pub fn spatial_mean_pool<T: Scalar>(f: &FeatureMap<T>, k: usize) -> Result<FeatureMap<T>> {
    if k == 1 {
        return Ok(f.clone());
    }
    let (w, h, fib) = (f.domain.width(), f.domain.height(), f.domain.fibers());
    if k == 0 || w % k != 0 || h % k != 0 {
        return Err(AttentionError::Shape(format!("pool factor {k} does not divide {w}x{h}")).into());
    }
    let (ow, oh, c) = (w / k, h / k, f.channels());
    let inv = s::<T>(1.0 / (k * k) as f64);
    let src_row = move |o: usize, dy: usize, dx: usize| -> usize {
        let (ox, oy) = (o % ow, o / ow);
        (oy * k + dy) * w + ox * k + dx
    };
    let x = f.values.data();
    let mut out = vec![T::zero(); ow * oh * fib * c];
    for o in 0..ow * oh {
        for dy in 0..k {
            for dx in 0..k {
                let p = src_row(o, dy, dx);
                for g in 0..fib {
                    let src = &x[(p * fib + g) * c..][..c];
                    let dst = &mut out[(o * fib + g) * c..][..c];
                    dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v * inv);
                }
            }
        }
    }
    let n_in = f.values.len();
    let values = Tensor::from_op(vec![ow * oh * fib, c], out, vec![f.values.clone()], move |gr| {
        let mut dx = vec![T::zero(); n_in];
        for o in 0..ow * oh {
            for dy in 0..k {
                for ddx in 0..k {
                    let p = src_row(o, dy, ddx);
                    for g in 0..fib {
                        let src = &gr[(o * fib + g) * c..][..c];
                        let dst = &mut dx[(p * fib + g) * c..][..c];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v * inv);
                    }
                }
            }
        }
        vec![Some(dx)]
    });
    let domain = match f.domain {
        Domain::Planar { .. } => Domain::Planar { width: ow, height: oh },
        Domain::Lifted { order, .. } => Domain::Lifted {
            width: ow,
            height: oh,
            order,
        },
    };
    Ok(FeatureMap::new(domain, values)?)
}

/// Max over the group axis, then mean over positions: `[channels]`.
pub fn global_pool<T: Scalar>(f: &FeatureMap<T>) -> Result<Tensor<T>> {
    let (p, fib, c) = (f.domain.positions(), f.domain.fibers(), f.channels());
    let per_pos = f.values.reshape(&[p, fib, c])?.max_axis(1)?;
    Ok(per_pos.mean_axis(0)?.reshape(&[c])?)
}

/// `−log softmax(logits)[label]`.
pub fn loss<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<Tensor<T>> {
    let classes = logits.len();
    if label >= classes {
        return Err(NetworkError::Label { label, classes });
    }
    Ok(logits.reshape(&[1, classes])?.cross_entropy(&[label])?)
}

/// One optimizer step on a batch: mean cross-entropy, dropout drawn from
/// `rng`. Parameters are left untouched when the loss is not finite.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    batch: &[(FeatureMap<T>, usize)],
    opt: &mut Adam,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let inv = s::<T>(1.0 / batch.len().max(1) as f64);
    let (pa, pv) = (model.config.attn_dropout, model.config.value_dropout);
    let mut total = 0.0;
    let clear = |m: &Model<T>| m.visit("", &mut |_, t| t.zero_grad());
    for (image, label) in batch {
        let mut dropout = Dropout {
            attention: pa,
            value: pv,
            rng: &mut *rng,
        };
        let logits = model.forward(image, Some(&mut dropout))?;
        let l = loss(&logits, *label)?.scale(inv);
        let v = l.item().to_f64_lossy();
        if !v.is_finite() {
            clear(model);
            return Err(NetworkError::NonFiniteLoss {
                step: opt.steps() + 1,
                loss: v,
            });
        }
        total += v;
        l.backward()?;
    }
    opt.step(model);
    Ok(total)
}
