//! Learnable relative positional encoder and its group actions.
//!
//! The encoder is a two-layer perceptron over the offset `x(j) − x(i)`
//! (normalised by the neighbourhood radius) and, for group layers, an
//! embedding `(cos θ, sin θ, reflection)` of a group element. For group
//! layers the element argument is the twist `h̃ ĥ⁻¹ h̃` of the query fiber
//! `h̃` and key fiber `ĥ`; acting with `h` maps the pair
//! `(Δ, t)` to `(h⁻¹Δ, h⁻¹t)`, which is what makes group self-attention
//! commute with rotations of the input.

use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::group::{FiniteGroup, GroupElement, GroupError};
use crate::layers::{join, Linear, Parameters};
use crate::scalar::{s, Scalar};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EncodingError {
    #[error("group-layer encoder requires a twist element")]
    MissingTwist,
    #[error("lifting encoder does not take a twist element")]
    UnexpectedTwist,
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Which group argument the group-layer encoding receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeVariant {
    /// `h̃ ĥ⁻¹ h̃`
    #[default]
    Gevit,
    /// `h̃⁻¹ ĥ`; a comparison variant that is not equivariant.
    Baseline,
}

impl PeVariant {
    /// Group argument of the encoding for query fiber `query` and key fiber
    /// `key`, before any action.
    pub fn relative_element(
        self,
        group: &FiniteGroup,
        query: GroupElement,
        key: GroupElement,
    ) -> GroupElement {
        match self {
            PeVariant::Gevit => group.twist_unchecked(query, key),
            PeVariant::Baseline => group.compose_unchecked(group.inverse_unchecked(query), key),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PeVariant::Gevit => "gevit",
            PeVariant::Baseline => "baseline",
        }
    }
}

impl FromStr for PeVariant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "gevit" => Ok(PeVariant::Gevit),
            "baseline" => Ok(PeVariant::Baseline),
            other => Err(format!("unknown pe variant '{other}' (expected gevit|baseline)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderKind {
    /// Offset only: lifting layers and plain relative attention.
    Lifting,
    /// Offset plus a group element: group self-attention layers.
    Group,
}

/// Relative position of a key with respect to a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelPos {
    pub offset: [f64; 2],
    pub twist_elem: Option<GroupElement>,
}

impl RelPos {
    pub fn spatial(offset: [f64; 2]) -> Self {
        Self {
            offset,
            twist_elem: None,
        }
    }

    pub fn with_element(offset: [f64; 2], elem: GroupElement) -> Self {
        Self {
            offset,
            twist_elem: Some(elem),
        }
    }
}

/// The learnable map `ρᴾ`.
#[derive(Debug, Clone)]
pub struct EncoderNet<T: Scalar> {
    kind: EncoderKind,
    radius: f64,
    scale: f64,
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

impl<T: Scalar> EncoderNet<T> {
    /// `radius` normalises offsets to `[-1, 1]`; the output layer starts at
    /// zero so the initial encoding vanishes.
    pub fn new(
        rng: &mut ChaCha8Rng,
        kind: EncoderKind,
        radius: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        let in_dim = match kind {
            EncoderKind::Lifting => 2,
            EncoderKind::Group => 5,
        };
        Self {
            kind,
            radius: radius.max(1) as f64,
            scale: 1.0,
            hidden: Linear::new(rng, in_dim, hidden, true),
            output: Linear::zeroed(hidden, out_dim, true),
        }
    }

    /// Same as [`EncoderNet::new`] with a randomly initialised output layer.
    pub fn new_random(
        rng: &mut ChaCha8Rng,
        kind: EncoderKind,
        radius: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Self {
        let mut net = Self::new(rng, kind, radius, hidden, out_dim);
        net.output = Linear::new(rng, hidden, out_dim, true);
        net
    }

    /// Same kind and radius with replacement layers, possibly of another
    /// precision.
    pub fn map_layers<U: Scalar>(&self, hidden: Linear<U>, output: Linear<U>) -> EncoderNet<U> {
        EncoderNet {
            kind: self.kind,
            radius: self.radius,
            scale: self.scale,
            hidden,
            output,
        }
    }

    /// Multiplies every output by `scale`.
    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn kind(&self) -> EncoderKind {
        self.kind
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    fn features(&self, group: Option<&FiniteGroup>, r: &RelPos) -> Result<Vec<f64>, EncodingError> {
        let mut x = vec![r.offset[0] / self.radius, r.offset[1] / self.radius];
        match (self.kind, r.twist_elem) {
            (EncoderKind::Lifting, None) => {}
            (EncoderKind::Lifting, Some(_)) => return Err(EncodingError::UnexpectedTwist),
            (EncoderKind::Group, None) => return Err(EncodingError::MissingTwist),
            (EncoderKind::Group, Some(e)) => {
                let group = group.ok_or(EncodingError::MissingTwist)?;
                group.element(e.index())?;
                let (theta, refl) = group.angle_and_reflection(e);
                x.extend([theta.cos(), theta.sin(), if refl { 1.0 } else { 0.0 }]);
            }
        }
        Ok(x)
    }

    /// Encodes a batch of relative positions into a `[rows, out_dim]` tensor.
    pub fn encode_batch(
        &self,
        group: Option<&FiniteGroup>,
        inputs: &[RelPos],
    ) -> Result<Tensor<T>, EncodingError> {
        let mut feats = Vec::with_capacity(inputs.len() * 5);
        for r in inputs {
            feats.extend(self.features(group, r)?);
        }
        let width = feats.len() / inputs.len().max(1);
        let x = Tensor::new(&[inputs.len(), width], feats.into_iter().map(s).collect())?;
        let h = self.hidden.forward(&x)?.swish();
        let y = self.output.forward(&h)?;
        Ok(if self.scale == 1.0 { y } else { y.scale(s(self.scale)) })
    }

    /// `ρᴾ(r)` as a `[1, out_dim]` tensor.
    pub fn encode(&self, group: Option<&FiniteGroup>, r: &RelPos) -> Result<Tensor<T>, EncodingError> {
        self.encode_batch(group, std::slice::from_ref(r))
    }

    /// `ρᴾ(h⁻¹ x(j) − h⁻¹ x(i))`: the lifting-layer encoding under action `h`.
    pub fn lifting_action(
        &self,
        group: &FiniteGroup,
        h: GroupElement,
        xi: [f64; 2],
        xj: [f64; 2],
    ) -> Result<Tensor<T>, EncodingError> {
        let offset = group.act_point(group.inverse(h)?, [xj[0] - xi[0], xj[1] - xi[1]])?;
        self.encode(None, &RelPos::spatial(offset))
    }

    /// `ρᴾ(h⁻¹(x(j) − x(i)), h⁻¹(h̃ ĥ⁻¹ h̃))` for query `(i, h̃)` and key
    /// `(j, ĥ)`.
    pub fn group_action(
        &self,
        group: &FiniteGroup,
        h: GroupElement,
        query: ([f64; 2], GroupElement),
        key: ([f64; 2], GroupElement),
    ) -> Result<Tensor<T>, EncodingError> {
        self.acted(group, PeVariant::Gevit, h, query, key)
    }

    /// Comparison variant using `h̃⁻¹ ĥ` in place of the twist.
    pub fn baseline_group_action(
        &self,
        group: &FiniteGroup,
        h: GroupElement,
        query: ([f64; 2], GroupElement),
        key: ([f64; 2], GroupElement),
    ) -> Result<Tensor<T>, EncodingError> {
        self.acted(group, PeVariant::Baseline, h, query, key)
    }

    pub fn acted(
        &self,
        group: &FiniteGroup,
        variant: PeVariant,
        h: GroupElement,
        query: ([f64; 2], GroupElement),
        key: ([f64; 2], GroupElement),
    ) -> Result<Tensor<T>, EncodingError> {
        group.element(query.1.index())?;
        group.element(key.1.index())?;
        let h_inv = group.inverse(h)?;
        let delta = [key.0[0] - query.0[0], key.0[1] - query.0[1]];
        let offset = group.act_point(h_inv, delta)?;
        let rel = variant.relative_element(group, query.1, key.1);
        let elem = group.compose(h_inv, rel)?;
        self.encode(Some(group), &RelPos::with_element(offset, elem))
    }

    /// Encoding table for a lifting layer: row `h * D + d` holds
    /// `ρᴾ(h⁻¹ Δ_d)` for every group element `h` and window offset `Δ_d`.
    pub fn lifting_table(
        &self,
        group: &FiniteGroup,
        offsets: &[[i64; 2]],
    ) -> Result<Tensor<T>, EncodingError> {
        let mut rows = Vec::with_capacity(group.order() * offsets.len());
        for h in group.elements() {
            let h_inv = group.inverse_unchecked(h);
            for d in offsets {
                let off = group.act_point(h_inv, [d[0] as f64, d[1] as f64])?;
                rows.push(RelPos::spatial(off));
            }
        }
        self.encode_batch(None, &rows)
    }

    /// Encoding table for a group layer: row `(h * D + d) * |H| + g` holds
    /// `ρᴾ(h⁻¹ Δ_d, g)`. Attention looks up `g = h⁻¹ · rel(h̃, ĥ)`.
    pub fn group_table(
        &self,
        group: &FiniteGroup,
        offsets: &[[i64; 2]],
    ) -> Result<Tensor<T>, EncodingError> {
        let order = group.order();
        let mut rows = Vec::with_capacity(order * offsets.len() * order);
        for h in group.elements() {
            let h_inv = group.inverse_unchecked(h);
            for d in offsets {
                let off = group.act_point(h_inv, [d[0] as f64, d[1] as f64])?;
                for g in group.elements() {
                    rows.push(RelPos::with_element(off, g));
                }
            }
        }
        self.encode_batch(Some(group), &rows)
    }
}

/// Index table `(h, h̃, ĥ) -> h⁻¹ · rel(h̃, ĥ)` laid out as
/// `(h * |H| + h̃) * |H| + ĥ`.
pub fn acted_element_table(group: &FiniteGroup, variant: PeVariant) -> Vec<usize> {
    let order = group.order();
    let mut out = Vec::with_capacity(order * order * order);
    for h in group.elements() {
        let h_inv = group.inverse_unchecked(h);
        for q in group.elements() {
            for k in group.elements() {
                let rel = variant.relative_element(group, q, k);
                out.push(group.compose_unchecked(h_inv, rel).index());
            }
        }
    }
    out
}

impl<T: Scalar> Parameters<T> for EncoderNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.hidden.visit(&join(prefix, "hidden"), f);
        self.output.visit(&join(prefix, "output"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.hidden.visit_mut(&join(prefix, "hidden"), f);
        self.output.visit_mut(&join(prefix, "output"), f);
    }
}
