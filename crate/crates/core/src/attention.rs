//! Local multi-head self-attention over pixel grids: plain, absolute and
//! relative positional variants, lifting self-attention (plane → group) and
//! group self-attention (group → group).
//!
//! All local variants share one fused kernel, [`attend`]. A query at
//! position `i` and input fiber `h̃` attends over the `n×n` window around `i`
//! times every input fiber `ĥ`; the score against key `(j, ĥ)` under output
//! action `h` is
//!
//! ```text
//! ⟨q(i,h̃), k(j,ĥ) + kpe(h, j−i, g(h, h̃, ĥ))⟩
//! ```
//!
//! softmax-normalised over the window, and the attention-weighted values are
//! summed over `h̃`. Lifting layers have a single input fiber; plain relative
//! attention additionally has a single output action.

use std::rc::Rc;

use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::encoding::{acted_element_table, EncoderKind, EncoderNet, EncodingError, PeVariant};
use crate::group::{AffineElement, FiniteGroup, GroupError};
use crate::layers::{join, uniform_fan_in, Linear, Parameters};
use crate::scalar::{s, Scalar};
use crate::tensor::{axpy, dot, dot_lanes, softmax_in_place, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("feature map shape mismatch: {0}")]
    Shape(String),
    #[error("{0} requires a local window neighbourhood")]
    NeedsWindow(&'static str),
    #[error("neighbourhood size must be odd and positive, got {0}")]
    WindowSize(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Group(#[from] GroupError),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Boundary {
    /// Wrap-around neighbourhoods; translations and rotations act exactly.
    #[default]
    Torus,
    /// Zero padding outside the grid.
    Clamp,
}

impl std::str::FromStr for Boundary {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "torus" => Ok(Boundary::Torus),
            "clamp" => Ok(Boundary::Clamp),
            other => Err(format!("unknown boundary '{other}' (expected torus|clamp)")),
        }
    }
}

impl Boundary {
    pub fn as_str(self) -> &'static str {
        match self {
            Boundary::Torus => "torus",
            Boundary::Clamp => "clamp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighborhood {
    /// Every token attends to every token.
    Global,
    /// `size × size` window centred on the query.
    Window { size: usize, boundary: Boundary },
}

impl Neighborhood {
    pub fn window(size: usize, boundary: Boundary) -> Self {
        Neighborhood::Window { size, boundary }
    }
}

/// Offsets and neighbour indices of a square window on a grid.
#[derive(Debug, Clone)]
pub struct Window {
    pub size: usize,
    pub offsets: Vec<[i64; 2]>,
    /// `nbr[i * D + d]`: grid index of `i + offsets[d]`, or `None` outside
    /// the grid under zero padding.
    pub nbr: Vec<Option<usize>>,
}

impl Window {
    pub fn new(width: usize, height: usize, size: usize, boundary: Boundary) -> Result<Self> {
        if size % 2 == 0 {
            return Err(AttentionError::WindowSize(size));
        }
        let r = (size / 2) as i64;
        let offsets: Vec<[i64; 2]> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| [dx, dy])).collect();
        let mut nbr = Vec::with_capacity(width * height * offsets.len());
        let (w, h) = (width as i64, height as i64);
        for i in 0..width * height {
            let (x, y) = ((i % width) as i64, (i / width) as i64);
            for o in &offsets {
                let (nx, ny) = (x + o[0], y + o[1]);
                nbr.push(match boundary {
                    Boundary::Torus => {
                        Some((ny.rem_euclid(h) * w + nx.rem_euclid(w)) as usize)
                    }
                    Boundary::Clamp if nx < 0 || ny < 0 || nx >= w || ny >= h => None,
                    Boundary::Clamp => Some((ny * w + nx) as usize),
                });
            }
        }
        Ok(Self {
            size,
            offsets,
            nbr,
        })
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Planar { width: usize, height: usize },
    Lifted { width: usize, height: usize, order: usize },
}

impl Domain {
    pub fn width(&self) -> usize {
        match *self {
            Domain::Planar { width, .. } | Domain::Lifted { width, .. } => width,
        }
    }

    pub fn height(&self) -> usize {
        match *self {
            Domain::Planar { height, .. } | Domain::Lifted { height, .. } => height,
        }
    }

    pub fn positions(&self) -> usize {
        self.width() * self.height()
    }

    /// Length of the group axis (1 for planar maps).
    pub fn fibers(&self) -> usize {
        match *self {
            Domain::Planar { .. } => 1,
            Domain::Lifted { order, .. } => order,
        }
    }
}

/// Channel vectors over a pixel grid, optionally lifted to grid × group.
/// Values are `[positions * fibers, channels]`, position-major.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Scalar> {
    pub domain: Domain,
    pub values: Tensor<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(domain: Domain, values: Tensor<T>) -> Result<Self> {
        let rows = domain.positions() * domain.fibers();
        if values.rank() != 2 || values.shape()[0] != rows {
            return Err(AttentionError::Shape(format!(
                "{domain:?} needs [{rows}, C] values, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { domain, values })
    }

    pub fn planar(width: usize, height: usize, values: Tensor<T>) -> Result<Self> {
        Self::new(Domain::Planar { width, height }, values)
    }

    pub fn lifted(width: usize, height: usize, order: usize, values: Tensor<T>) -> Result<Self> {
        Self::new(Domain::Lifted { width, height, order }, values)
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_lifted(&self) -> bool {
        matches!(self.domain, Domain::Lifted { .. })
    }

    /// `L_g[f]`: for planar maps `f'(g·p) = f(p)`; for lifted maps
    /// `F'(g·p, h̄∘k) = F(p, k)` with `g = (y, h̄)` acting on a torus. The
    /// result is detached from the graph.
    pub fn transformed(&self, group: &FiniteGroup, g: AffineElement) -> Result<Self> {
        let (w, h) = (self.domain.width(), self.domain.height());
        let fibers = self.domain.fibers();
        if self.is_lifted() && fibers != group.order() {
            return Err(AttentionError::Shape(format!(
                "group axis {fibers} does not match {group}"
            )));
        }
        let c = self.channels();
        let src = self.values.data();
        let mut out = vec![T::zero(); src.len()];
        for p in 0..w * h {
            let dst = g.act_torus(group, p, w, h)?;
            for k in 0..fibers {
                let dk = if self.is_lifted() {
                    group.compose(g.point_part, crate::group::GroupElement(k))?.index()
                } else {
                    k
                };
                out[(dst * fibers + dk) * c..(dst * fibers + dk + 1) * c]
                    .copy_from_slice(&src[(p * fibers + k) * c..(p * fibers + k + 1) * c]);
            }
        }
        Self::new(self.domain, Tensor::new(self.values.shape(), out)?)
    }
}

/// Per-head query/key/value projections and the shared output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams<T: Scalar> {
    pub w_qry: Vec<Tensor<T>>,
    pub w_key: Vec<Tensor<T>>,
    pub w_val: Vec<Tensor<T>>,
    pub out: Linear<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new(rng: &mut ChaCha8Rng, c_in: usize, heads: usize, head_dim: usize, c_out: usize) -> Self {
        let mut mk = || (0..heads).map(|_| uniform_fan_in(rng, &[c_in, head_dim], c_in)).collect();
        let w_qry = mk();
        let w_key = mk();
        let w_val = mk();
        Self {
            w_qry,
            w_key,
            w_val,
            out: Linear::new(rng, heads * head_dim, c_out, true),
        }
    }

    pub fn heads(&self) -> usize {
        self.w_qry.len()
    }

    pub fn head_dim(&self) -> usize {
        self.w_qry[0].shape()[1]
    }

    pub fn c_in(&self) -> usize {
        self.w_qry[0].shape()[0]
    }

    pub fn c_out(&self) -> usize {
        self.out.out_dim()
    }

    fn stacked(ws: &[Tensor<T>]) -> Result<Tensor<T>> {
        Ok(Tensor::concat(ws, 1)?)
    }

    fn check_input(&self, channels: usize) -> Result<()> {
        if channels != self.c_in() {
            return Err(AttentionError::Shape(format!(
                "input has {channels} channels, projections expect {}",
                self.c_in()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Parameters<T> for AttentionParams<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (name, ws) in [("w_qry", &self.w_qry), ("w_key", &self.w_key), ("w_val", &self.w_val)] {
            for (h, w) in ws.iter().enumerate() {
                f(&join(prefix, &format!("{name}.{h}")), w);
            }
        }
        self.out.visit(&join(prefix, "out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (name, ws) in [
            ("w_qry", &mut self.w_qry),
            ("w_key", &mut self.w_key),
            ("w_val", &mut self.w_val),
        ] {
            for (h, w) in ws.iter_mut().enumerate() {
                f(&join(prefix, &format!("{name}.{h}")), w);
            }
        }
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

/// Where the encoder output enters the key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PeSharing {
    /// One `C_in` vector added to the key input before every head's `W_key`.
    #[default]
    Shared,
    /// `H·C_h` outputs; head `a` adds its slice directly in key space.
    PerHead,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSettings {
    pub neighborhood: Neighborhood,
    /// Multiply scores by `1/√C_h`.
    pub scale_scores: bool,
    pub pe_sharing: PeSharing,
    pub pe_variant: PeVariant,
}

impl AttentionSettings {
    pub fn window(size: usize, boundary: Boundary) -> Self {
        Self {
            neighborhood: Neighborhood::window(size, boundary),
            scale_scores: false,
            pe_sharing: PeSharing::Shared,
            pe_variant: PeVariant::Gevit,
        }
    }

    pub fn global() -> Self {
        Self {
            neighborhood: Neighborhood::Global,
            ..Self::window(1, Boundary::Torus)
        }
    }

    fn scale(&self, head_dim: usize) -> f64 {
        if self.scale_scores {
            1.0 / (head_dim as f64).sqrt()
        } else {
            1.0
        }
    }
}

/// Training-time dropout on attention weights and on values.
#[derive(Debug)]
pub struct Dropout<'a> {
    pub attention: f64,
    pub value: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn mask<T: Scalar>(&mut self, p: f64, len: usize) -> Option<Vec<T>> {
        if p <= 0.0 {
            return None;
        }
        let keep = s::<T>(1.0 / (1.0 - p));
        let threshold = (p * 4_294_967_296.0) as u64;
        Some(
            (0..len)
                .map(|_| if u64::from(self.rng.next_u32()) < threshold { T::zero() } else { keep })
                .collect(),
        )
    }
}

pub(crate) struct KernelShape<'a> {
    pub positions: usize,
    /// input fibers `h̃`, `ĥ`
    pub in_fibers: usize,
    /// output actions `h`
    pub out_actions: usize,
    /// encoding table group axis
    pub pe_elems: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub window: Rc<Window>,
    /// `(h * in + h̃) * in + ĥ -> g`
    pub elem_map: Option<&'a [usize]>,
    pub scale: f64,
}

/// Fused local attention. `q`, `k`, `v` are `[positions * in_fibers, H·C_h]`,
/// `kpe` is `[out_actions * D * pe_elems, H·C_h]`; returns
/// `[positions * out_actions, H·C_h]`.
pub(crate) fn attend<T: Scalar>(
    shape: &KernelShape<'_>,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    kpe: Option<&Tensor<T>>,
    dropout: Option<&mut Dropout<'_>>,
) -> Tensor<T> {
    let p_n = shape.positions;
    let gin = shape.in_fibers;
    let gout = shape.out_actions;
    let gpe = shape.pe_elems;
    let heads = shape.heads;
    let ch = shape.head_dim;
    let hc = heads * ch;
    let win = Rc::clone(&shape.window);
    let dn = win.len();
    let kk = dn * gin;
    let r_n = gout * dn * gpe;
    let scale = s::<T>(shape.scale);
    let elem_map: Vec<usize> = match shape.elem_map {
        Some(m) => m.to_vec(),
        None => vec![0; gout * gin * gin],
    };
    debug_assert_eq!(q.shape(), &[p_n * gin, hc]);
    debug_assert!(kpe.map_or(true, |t| t.shape() == [r_n, hc]));

    let alpha_len = p_n * heads * gin * gout * kk;
    let mask: Option<Vec<T>> = dropout.and_then(|d| {
        let p = d.attention;
        d.mask(p, alpha_len)
    });
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    // per head, channel-major copy of the encoding table: [(a * ch + c) * r_n + r]
    let kpt: Option<Vec<T>> = kpe.map(|t| {
        let kp = t.data();
        let mut out = vec![T::zero(); hc * r_n];
        for r in 0..r_n {
            for (col, &x) in kp[r * hc..(r + 1) * hc].iter().enumerate() {
                out[col * r_n + r] = x;
            }
        }
        out
    });

    let mut out = vec![T::zero(); p_n * gout * hc];
    let mut alpha = vec![T::zero(); alpha_len];
    let mut content = vec![T::zero(); kk];
    let mut pe_dot = vec![T::zero(); r_n];
    let mut wsum = vec![T::zero(); gout * kk];
    for i in 0..p_n {
        let nbr = &win.nbr[i * dn..(i + 1) * dn];
        for a in 0..heads {
            let col = a * ch;
            wsum.iter_mut().for_each(|w| *w = T::zero());
            for qt in 0..gin {
                let qrow = &qd[(i * gin + qt) * hc + col..][..ch];
                for (d, j) in nbr.iter().enumerate() {
                    for kt in 0..gin {
                        content[d * gin + kt] = match j {
                            Some(j) => dot(qrow, &kd[(j * gin + kt) * hc + col..][..ch]),
                            None => T::zero(),
                        };
                    }
                }
                if let Some(kpt) = &kpt {
                    pe_dot.iter_mut().for_each(|x| *x = T::zero());
                    for (c, &qc) in qrow.iter().enumerate() {
                        axpy(qc, &kpt[(col + c) * r_n..][..r_n], &mut pe_dot);
                    }
                }
                for h in 0..gout {
                    let base = (((i * heads + a) * gin + qt) * gout + h) * kk;
                    let row = &mut alpha[base..base + kk];
                    let emap = &elem_map[(h * gin + qt) * gin..][..gin];
                    for d in 0..dn {
                        let pe_row = &pe_dot[(h * dn + d) * gpe..];
                        for kt in 0..gin {
                            let pe = if kpt.is_some() { pe_row[emap[kt]] } else { T::zero() };
                            row[d * gin + kt] = scale * (content[d * gin + kt] + pe);
                        }
                    }
                    softmax_in_place(row);
                    let ws = &mut wsum[h * kk..(h + 1) * kk];
                    match &mask {
                        Some(m) => {
                            for ((w, &al), &mv) in ws.iter_mut().zip(row.iter()).zip(&m[base..base + kk]) {
                                *w += al * mv;
                            }
                        }
                        None => ws.iter_mut().zip(row.iter()).for_each(|(w, &al)| *w += al),
                    }
                }
            }
            for h in 0..gout {
                let orow = &mut out[(i * gout + h) * hc + col..][..ch];
                for (d, j) in nbr.iter().enumerate() {
                    let Some(j) = j else { continue };
                    for kt in 0..gin {
                        let w = wsum[h * kk + d * gin + kt];
                        axpy(w, &vd[(j * gin + kt) * hc + col..][..ch], orow);
                    }
                }
            }
        }
    }

    let (tq, tk, tv) = (q.clone(), k.clone(), v.clone());
    let mut parents = vec![q.clone(), k.clone(), v.clone()];
    if let Some(t) = kpe {
        parents.push(t.clone());
    }
    Tensor::from_op(vec![p_n * gout, hc], out, parents, move |g| {
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dkpt = kpt.as_ref().map(|t| vec![T::zero(); t.len()]);
        let mut wsum = vec![T::zero(); gout * kk];
        let mut dw = vec![T::zero(); gout * kk];
        let mut ds_content = vec![T::zero(); kk];
        let mut ds_pe = vec![T::zero(); r_n];
        let mut dqv = vec![T::zero(); ch];
        for i in 0..p_n {
            let nbr = &win.nbr[i * dn..(i + 1) * dn];
            for a in 0..heads {
                let col = a * ch;
                wsum.iter_mut().for_each(|w| *w = T::zero());
                for qt in 0..gin {
                    for h in 0..gout {
                        let base = (((i * heads + a) * gin + qt) * gout + h) * kk;
                        let ws = &mut wsum[h * kk..(h + 1) * kk];
                        let row = &alpha[base..base + kk];
                        match &mask {
                            Some(m) => {
                                for ((w, &al), &mv) in ws.iter_mut().zip(row).zip(&m[base..base + kk]) {
                                    *w += al * mv;
                                }
                            }
                            None => ws.iter_mut().zip(row).for_each(|(w, &al)| *w += al),
                        }
                    }
                }
                for h in 0..gout {
                    let go = &g[(i * gout + h) * hc + col..][..ch];
                    for (d, j) in nbr.iter().enumerate() {
                        for kt in 0..gin {
                            let idx = h * kk + d * gin + kt;
                            match j {
                                Some(j) => {
                                    let off = (j * gin + kt) * hc + col;
                                    dw[idx] = dot(go, &vd[off..][..ch]);
                                    axpy(wsum[idx], go, &mut dv[off..][..ch]);
                                }
                                None => dw[idx] = T::zero(),
                            }
                        }
                    }
                }
                for qt in 0..gin {
                    let qoff = (i * gin + qt) * hc + col;
                    let qrow = &qd[qoff..][..ch];
                    ds_content.iter_mut().for_each(|x| *x = T::zero());
                    ds_pe.iter_mut().for_each(|x| *x = T::zero());
                    for h in 0..gout {
                        let base = (((i * heads + a) * gin + qt) * gout + h) * kk;
                        let row = &alpha[base..base + kk];
                        let dwr = &dw[h * kk..(h + 1) * kk];
                        let emap = &elem_map[(h * gin + qt) * gin..][..gin];
                        // gradient w.r.t. the weights actually applied
                        let dal = |idx: usize| match &mask {
                            Some(m) => dwr[idx] * m[base + idx],
                            None => dwr[idx],
                        };
                        let inner: T = (0..kk).map(|idx| row[idx] * dal(idx)).sum();
                        for d in 0..dn {
                            for kt in 0..gin {
                                let idx = d * gin + kt;
                                let ds = scale * row[idx] * (dal(idx) - inner);
                                ds_content[idx] += ds;
                                ds_pe[(h * dn + d) * gpe + emap[kt]] += ds;
                            }
                        }
                    }
                    dqv.iter_mut().for_each(|x| *x = T::zero());
                    for (d, j) in nbr.iter().enumerate() {
                        let Some(j) = j else { continue };
                        for kt in 0..gin {
                            let ds = ds_content[d * gin + kt];
                            let off = (j * gin + kt) * hc + col;
                            axpy(ds, &kd[off..][..ch], &mut dqv);
                            axpy(ds, qrow, &mut dk[off..][..ch]);
                        }
                    }
                    if let (Some(kpt), Some(dkpt)) = (&kpt, dkpt.as_mut()) {
                        for c in 0..ch {
                            let span = (col + c) * r_n..(col + c + 1) * r_n;
                            dqv[c] += dot_lanes(&ds_pe, &kpt[span.clone()]);
                            axpy(qrow[c], &ds_pe, &mut dkpt[span]);
                        }
                    }
                    dq[qoff..qoff + ch].iter_mut().zip(&dqv).for_each(|(x, &y)| *x += y);
                }
            }
        }
        let mut grads = vec![Some(dq), Some(dk), Some(dv)];
        if let Some(dkpt) = dkpt {
            let mut dkpe = vec![T::zero(); r_n * hc];
            for r in 0..r_n {
                for (col, x) in dkpe[r * hc..(r + 1) * hc].iter_mut().enumerate() {
                    *x = dkpt[col * r_n + r];
                }
            }
            grads.push(Some(dkpe));
        }
        grads
    })
}

fn apply_value_dropout<T: Scalar>(v: Tensor<T>, dropout: &mut Option<&mut Dropout<'_>>) -> Result<Tensor<T>> {
    match dropout {
        Some(d) => {
            let p = d.value;
            match d.mask::<T>(p, v.len()) {
                Some(m) => Ok(v.mul(&Tensor::new(v.shape(), m)?)?),
                None => Ok(v),
            }
        }
        None => Ok(v),
    }
}

fn window_of(settings: &AttentionSettings, width: usize, height: usize, what: &'static str) -> Result<Rc<Window>> {
    match settings.neighborhood {
        Neighborhood::Window { size, boundary } => Ok(Rc::new(Window::new(width, height, size, boundary)?)),
        Neighborhood::Global => Err(AttentionError::NeedsWindow(what)),
    }
}

/// Projects the key-space encoding table for every head.
fn key_space_table<T: Scalar>(
    table: Tensor<T>,
    p: &AttentionParams<T>,
    sharing: PeSharing,
) -> Result<Tensor<T>> {
    let want = match sharing {
        PeSharing::Shared => p.c_in(),
        PeSharing::PerHead => p.heads() * p.head_dim(),
    };
    if table.shape()[1] != want {
        return Err(AttentionError::Shape(format!(
            "encoder produces {} channels, {sharing:?} encoding needs {want}",
            table.shape()[1]
        )));
    }
    match sharing {
        PeSharing::Shared => Ok(table.matmul(&AttentionParams::stacked(&p.w_key)?)?),
        PeSharing::PerHead => Ok(table),
    }
}

/// Dense multi-head attention over all tokens, written with generic tensor
/// ops in matrix form: `softmax(X_q W_q (X_k W_k)ᵀ) X W_v`, heads
/// concatenated and projected.
fn dense_mhsa<T: Scalar>(
    x_qk: &Tensor<T>,
    x_v: &Tensor<T>,
    p: &AttentionParams<T>,
    settings: &AttentionSettings,
) -> Result<Tensor<T>> {
    let scale = s::<T>(settings.scale(p.head_dim()));
    let mut heads = Vec::with_capacity(p.heads());
    for a in 0..p.heads() {
        let qa = x_qk.matmul(&p.w_qry[a])?;
        let ka = x_qk.matmul(&p.w_key[a])?;
        let va = x_v.matmul(&p.w_val[a])?;
        let scores = qa.matmul(&ka.transpose()?)?.scale(scale);
        heads.push(scores.softmax_rows().matmul(&va)?);
    }
    Ok(p.out.forward(&Tensor::concat(&heads, 1)?)?)
}

struct Projected<T: Scalar> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
}

fn project<T: Scalar>(
    x_qk: &Tensor<T>,
    x_v: &Tensor<T>,
    p: &AttentionParams<T>,
    dropout: &mut Option<&mut Dropout<'_>>,
) -> Result<Projected<T>> {
    let q = x_qk.matmul(&AttentionParams::stacked(&p.w_qry)?)?;
    let k = x_qk.matmul(&AttentionParams::stacked(&p.w_key)?)?;
    let v = apply_value_dropout(x_v.matmul(&AttentionParams::stacked(&p.w_val)?)?, dropout)?;
    Ok(Projected { q, k, v })
}

fn planar_input<T: Scalar>(f: &FeatureMap<T>, p: &AttentionParams<T>) -> Result<(usize, usize)> {
    match f.domain {
        Domain::Planar { width, height } => {
            p.check_input(f.channels())?;
            Ok((width, height))
        }
        Domain::Lifted { .. } => Err(AttentionError::Shape("expected a planar feature map".into())),
    }
}

fn local_planar<T: Scalar>(
    f: &FeatureMap<T>,
    x_qk: &Tensor<T>,
    p: &AttentionParams<T>,
    settings: &AttentionSettings,
    kpe: Option<Tensor<T>>,
    mut dropout: Option<&mut Dropout<'_>>,
    what: &'static str,
) -> Result<FeatureMap<T>> {
    let (w, h) = (f.domain.width(), f.domain.height());
    let window = window_of(settings, w, h, what)?;
    let proj = project(x_qk, &f.values, p, &mut dropout)?;
    let shape = KernelShape {
        positions: w * h,
        in_fibers: 1,
        out_actions: 1,
        pe_elems: 1,
        heads: p.heads(),
        head_dim: p.head_dim(),
        window,
        elem_map: None,
        scale: settings.scale(p.head_dim()),
    };
    let o = attend(&shape, &proj.q, &proj.k, &proj.v, kpe.as_ref(), dropout);
    FeatureMap::planar(w, h, p.out.forward(&o)?)
}

/// Multi-head self-attention without positional information.
pub fn plain_mhsa<T: Scalar>(
    f: &FeatureMap<T>,
    p: &AttentionParams<T>,
    settings: &AttentionSettings,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<FeatureMap<T>> {
    let (w, h) = planar_input(f, p)?;
    match settings.neighborhood {
        Neighborhood::Global => FeatureMap::planar(w, h, dense_mhsa(&f.values, &f.values, p, settings)?),
        Neighborhood::Window { .. } => local_planar(f, &f.values, p, settings, None, dropout, "plain_mhsa"),
    }
}

/// Absolute positional encoding: `pos` (one `C_in` row per position) is
/// added to query and key inputs; values see the raw features.
pub fn abs_pe_mhsa<T: Scalar>(
    f: &FeatureMap<T>,
    p: &AttentionParams<T>,
    settings: &AttentionSettings,
    pos: &Tensor<T>,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<FeatureMap<T>> {
    let (w, h) = planar_input(f, p)?;
    if pos.shape() != f.values.shape() {
        return Err(AttentionError::Shape(format!(
            "positional encoding {:?} does not match features {:?}",
            pos.shape(),
            f.values.shape()
        )));
    }
    let x_qk = f.values.add(pos)?;
    match settings.neighborhood {
        Neighborhood::Global => FeatureMap::planar(w, h, dense_mhsa(&x_qk, &f.values, p, settings)?),
        Neighborhood::Window { .. } => local_planar(f, &x_qk, p, settings, None, dropout, "abs_pe_mhsa"),
    }
}

/// Relative positional encoding: keys become `φ_key(f(j) + ρᴾ(x(j) − x(i)))`.
pub fn rel_pe_mhsa<T: Scalar>(
    f: &FeatureMap<T>,
    p: &AttentionParams<T>,
    settings: &AttentionSettings,
    net: &EncoderNet<T>,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<FeatureMap<T>> {
    let (w, h) = planar_input(f, p)?;
    if net.kind() != EncoderKind::Lifting {
        return Err(AttentionError::Shape("relative attention needs an offset-only encoder".into()));
    }
    let window = window_of(settings, w, h, "rel_pe_mhsa")?;
    let trivial = FiniteGroup::cyclic(1)?;
    let table = net.lifting_table(&trivial, &window.offsets)?;
    let kpe = key_space_table(table, p, settings.pe_sharing)?;
    local_planar(f, &f.values, p, settings, Some(kpe), dropout, "rel_pe_mhsa")
}

/// Lifting self-attention: slice `h` of the output is relative attention
/// with the encoding acted on by `h`, `ρᴾ(h⁻¹(x(j) − x(i)))`.
pub fn lifting_attention<T: Scalar>(
    f: &FeatureMap<T>,
    p: &AttentionParams<T>,
    settings: &AttentionSettings,
    net: &EncoderNet<T>,
    group: &FiniteGroup,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<FeatureMap<T>> {
    let (w, h) = planar_input(f, p)?;
    if net.kind() != EncoderKind::Lifting {
        return Err(AttentionError::Shape("lifting attention needs an offset-only encoder".into()));
    }
    let window = window_of(settings, w, h, "lifting_attention")?;
    let table = net.lifting_table(group, &window.offsets)?;
    let kpe = key_space_table(table, p, settings.pe_sharing)?;
    let proj = project(&f.values, &f.values, p, &mut dropout)?;
    let shape = KernelShape {
        positions: w * h,
        in_fibers: 1,
        out_actions: group.order(),
        pe_elems: 1,
        heads: p.heads(),
        head_dim: p.head_dim(),
        window,
        elem_map: None,
        scale: settings.scale(p.head_dim()),
    };
    let o = attend(&shape, &proj.q, &proj.k, &proj.v, Some(&kpe), dropout);
    FeatureMap::lifted(w, h, group.order(), p.out.forward(&o)?)
}

/// Group self-attention: output at `(i, h)` sums, over query fibers `h̃`,
/// attention of `f(i, h̃)` over the window × all key fibers `ĥ`, with the
/// encoding `ρᴾ(h⁻¹(x(j) − x(i)), h⁻¹ rel(h̃, ĥ))`.
pub fn group_attention<T: Scalar>(
    f: &FeatureMap<T>,
    p: &AttentionParams<T>,
    settings: &AttentionSettings,
    net: &EncoderNet<T>,
    group: &FiniteGroup,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<FeatureMap<T>> {
    let (w, h, order) = match f.domain {
        Domain::Lifted { width, height, order } => (width, height, order),
        Domain::Planar { .. } => {
            return Err(AttentionError::Shape("group attention expects a lifted feature map".into()))
        }
    };
    if order != group.order() {
        return Err(AttentionError::Shape(format!(
            "feature map group axis {order} does not match {group}"
        )));
    }
    if net.kind() != EncoderKind::Group {
        return Err(AttentionError::Shape("group attention needs a group-element encoder".into()));
    }
    p.check_input(f.channels())?;
    let window = window_of(settings, w, h, "group_attention")?;
    let table = net.group_table(group, &window.offsets)?;
    let kpe = key_space_table(table, p, settings.pe_sharing)?;
    let elem_map = acted_element_table(group, settings.pe_variant);
    let proj = project(&f.values, &f.values, p, &mut dropout)?;
    let shape = KernelShape {
        positions: w * h,
        in_fibers: order,
        out_actions: order,
        pe_elems: order,
        heads: p.heads(),
        head_dim: p.head_dim(),
        window,
        elem_map: Some(&elem_map),
        scale: settings.scale(p.head_dim()),
    };
    let o = attend(&shape, &proj.q, &proj.k, &proj.v, Some(&kpe), dropout);
    FeatureMap::lifted(w, h, order, p.out.forward(&o)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::group::GroupElement;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_values(rng: &mut ChaCha8Rng, rows: usize, c: usize) -> Tensor<f64> {
        Tensor::new(&[rows, c], (0..rows * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn identity_params(c: usize) -> AttentionParams<f64> {
        let eye: Vec<f64> = (0..c * c).map(|i| if i / c == i % c { 1.0 } else { 0.0 }).collect();
        AttentionParams {
            w_qry: vec![Tensor::param(&[c, c], vec![0.0; c * c]).unwrap()],
            w_key: vec![Tensor::param(&[c, c], vec![0.0; c * c]).unwrap()],
            w_val: vec![Tensor::param(&[c, c], eye.clone()).unwrap()],
            out: Linear {
                weight: Tensor::param(&[c, c], eye).unwrap(),
                bias: Some(Tensor::param(&[c], vec![0.0; c]).unwrap()),
            },
        }
    }

    #[test]
    fn window_membership() {
        let w = Window::new(4, 4, 3, Boundary::Torus).unwrap();
        assert_eq!(w.len(), 9);
        for i in 0..16 {
            assert_eq!(w.nbr[i * 9 + 4], Some(i));
        }
        let c = Window::new(4, 4, 3, Boundary::Clamp).unwrap();
        assert_eq!(c.nbr[0], None);
        assert!(Window::new(4, 4, 2, Boundary::Torus).is_err());
    }

    #[test]
    fn zero_query_key_gives_neighbourhood_mean() {
        let mut r = rng(1);
        let f = FeatureMap::planar(4, 4, random_values(&mut r, 16, 3)).unwrap();
        let p = identity_params(3);
        let s = AttentionSettings::window(3, Boundary::Torus);
        let y = plain_mhsa(&f, &p, &s, None).unwrap();
        let win = Window::new(4, 4, 3, Boundary::Torus).unwrap();
        for i in 0..16 {
            for c in 0..3 {
                let mean: f64 = win.nbr[i * 9..(i + 1) * 9]
                    .iter()
                    .map(|j| f.values.data()[j.unwrap() * 3 + c])
                    .sum::<f64>()
                    / 9.0;
                assert!((y.values.data()[i * 3 + c] - mean).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn single_key_window_is_projected_value() {
        let mut r = rng(2);
        let f = FeatureMap::planar(3, 3, random_values(&mut r, 9, 4)).unwrap();
        let p = AttentionParams::<f64>::new(&mut r, 4, 2, 3, 5);
        let y = plain_mhsa(&f, &p, &AttentionSettings::window(1, Boundary::Torus), None).unwrap();
        let heads: Vec<_> = p.w_val.iter().map(|w| f.values.matmul(w).unwrap()).collect();
        let want = p.out.forward(&Tensor::concat(&heads, 1).unwrap()).unwrap();
        assert!(max_diff(&y.values, &want) < 1e-14);
    }

    #[test]
    fn softmax_weights_sum_to_one() {
        let mut r = rng(3);
        let g = FiniteGroup::cyclic(4).unwrap();
        let f = random_values(&mut r, 16 * 4, 4);
        let q = random_values(&mut r, 64, 4);
        let k = random_values(&mut r, 64, 4);
        // value rows all ones: every output entry is Σ_h̃ Σ α = |H|
        let v = Tensor::new(&[64, 4], vec![1.0; 256]).unwrap();
        let kpe = random_values(&mut r, 4 * 9 * 4, 4);
        let emap = acted_element_table(&g, PeVariant::Gevit);
        let shape = KernelShape {
            positions: 16,
            in_fibers: 4,
            out_actions: 4,
            pe_elems: 4,
            heads: 2,
            head_dim: 2,
            window: Rc::new(Window::new(4, 4, 3, Boundary::Torus).unwrap()),
            elem_map: Some(&emap),
            scale: 1.0,
        };
        let o = attend(&shape, &q, &k, &v, Some(&kpe), None);
        assert!(o.data().iter().all(|&x| (x - 4.0).abs() < 1e-6));
        drop(f);
    }

    #[test]
    fn fused_kernel_gradients() {
        let mut r = rng(4);
        let g = FiniteGroup::dihedral(2).unwrap();
        let emap = acted_element_table(&g, PeVariant::Gevit);
        let window = Rc::new(Window::new(3, 3, 3, Boundary::Clamp).unwrap());
        let rows = 9 * 4;
        let q = random_values(&mut r, rows, 4);
        let k = random_values(&mut r, rows, 4);
        let v = random_values(&mut r, rows, 4);
        let kpe = random_values(&mut r, 4 * 9 * 4, 4);
        let wts = random_values(&mut r, rows, 4);
        let shape = KernelShape {
            positions: 9,
            in_fibers: 4,
            out_actions: 4,
            pe_elems: 4,
            heads: 2,
            head_dim: 2,
            window,
            elem_map: Some(&emap),
            scale: 0.7,
        };
        let loss = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, kpe: &Tensor<f64>| {
            attend(&shape, q, k, v, Some(kpe), None).mul(&wts).map(|t| t.sum())
        };
        for which in 0..4 {
            let target = [&q, &k, &v, &kpe][which];
            let gc = finite_diff_check(
                |x| match which {
                    0 => loss(x, &k, &v, &kpe),
                    1 => loss(&q, x, &v, &kpe),
                    2 => loss(&q, &k, x, &kpe),
                    _ => loss(&q, &k, &v, x),
                },
                target,
                1e-5,
            )
            .unwrap();
            assert!(gc.max_rel_error < 1e-5, "input {which}: {gc:?}");
        }
    }

    #[test]
    fn dropout_masks_are_differentiated_consistently() {
        let mut r = rng(5);
        let window = Rc::new(Window::new(3, 3, 3, Boundary::Torus).unwrap());
        let q = random_values(&mut r, 9, 2);
        let k = random_values(&mut r, 9, 2);
        let v = random_values(&mut r, 9, 2);
        let shape = KernelShape {
            positions: 9,
            in_fibers: 1,
            out_actions: 1,
            pe_elems: 1,
            heads: 1,
            head_dim: 2,
            window,
            elem_map: None,
            scale: 1.0,
        };
        let gc = finite_diff_check(
            |x| {
                let mut drng = rng(99);
                let mut d = Dropout {
                    attention: 0.3,
                    value: 0.0,
                    rng: &mut drng,
                };
                Ok(attend(&shape, x, &k, &v, None, Some(&mut d)).square().sum())
            },
            &q,
            1e-5,
        )
        .unwrap();
        assert!(gc.max_rel_error < 1e-5, "{gc:?}");
    }

    #[test]
    fn zero_encoder_reduces_to_plain_and_identical_slices() {
        let mut r = rng(6);
        let g = FiniteGroup::cyclic(4).unwrap();
        let f = FeatureMap::planar(5, 5, random_values(&mut r, 25, 4)).unwrap();
        let p = AttentionParams::<f64>::new(&mut r, 4, 2, 2, 4);
        let net = EncoderNet::new(&mut r, EncoderKind::Lifting, 1, 6, 4);
        let s = AttentionSettings::window(3, Boundary::Torus);
        let plain = plain_mhsa(&f, &p, &s, None).unwrap();
        let rel = rel_pe_mhsa(&f, &p, &s, &net, None).unwrap();
        assert!(max_diff(&plain.values, &rel.values) < 1e-14);
        let lifted = lifting_attention(&f, &p, &s, &net, &g, None).unwrap();
        for pos in 0..25 {
            for h in 0..4 {
                for c in 0..4 {
                    let a = lifted.values.data()[(pos * 4 + h) * 4 + c];
                    assert!((a - plain.values.data()[pos * 4 + c]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn trivial_group_lifting_equals_relative() {
        let mut r = rng(7);
        let g = FiniteGroup::cyclic(1).unwrap();
        let f = FeatureMap::planar(4, 4, random_values(&mut r, 16, 3)).unwrap();
        let p = AttentionParams::<f64>::new(&mut r, 3, 1, 3, 3);
        let net = EncoderNet::new_random(&mut r, EncoderKind::Lifting, 1, 6, 3);
        let s = AttentionSettings::window(3, Boundary::Torus);
        let rel = rel_pe_mhsa(&f, &p, &s, &net, None).unwrap();
        let lift = lifting_attention(&f, &p, &s, &net, &g, None).unwrap();
        assert!(max_diff(&rel.values, &lift.values) < 1e-14);
    }

    #[test]
    fn zero_encoder_group_layer_slices_agree() {
        let mut r = rng(8);
        let g = FiniteGroup::cyclic(4).unwrap();
        let f = FeatureMap::lifted(4, 4, 4, random_values(&mut r, 64, 4)).unwrap();
        let p = AttentionParams::<f64>::new(&mut r, 4, 2, 2, 4);
        let net = EncoderNet::new(&mut r, EncoderKind::Group, 1, 6, 4);
        let y = group_attention(&f, &p, &AttentionSettings::window(3, Boundary::Torus), &net, &g, None).unwrap();
        for pos in 0..16 {
            for h in 1..4 {
                for c in 0..4 {
                    let a = y.values.data()[(pos * 4 + h) * 4 + c];
                    let b = y.values.data()[(pos * 4) * 4 + c];
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn relative_encoding_distinguishes_offsets() {
        let mut r = rng(9);
        let f = FeatureMap::planar(3, 3, Tensor::new(&[9, 2], vec![0.5; 18]).unwrap()).unwrap();
        let p = AttentionParams::<f64>::new(&mut r, 2, 1, 2, 2);
        let net = EncoderNet::new_random(&mut r, EncoderKind::Lifting, 1, 6, 2);
        let s = AttentionSettings::window(3, Boundary::Torus);
        let window = window_of(&s, 3, 3, "test").unwrap();
        let kpe = key_space_table(net.lifting_table(&FiniteGroup::cyclic(1).unwrap(), &window.offsets).unwrap(), &p, PeSharing::Shared).unwrap();
        let q = f.values.matmul(&p.w_qry[0]).unwrap();
        let k = f.values.matmul(&p.w_key[0]).unwrap();
        // equal features, so scores differ only through the encoding
        let score = |d: usize| dot(&q.data()[0..2], &k.data()[0..2]) + dot(&q.data()[0..2], &kpe.data()[d * 2..d * 2 + 2]);
        assert!((score(0) - score(1)).abs() > 1e-6);
    }

    #[test]
    fn shape_errors() {
        let mut r = rng(10);
        let g = FiniteGroup::cyclic(4).unwrap();
        let f = FeatureMap::planar(3, 3, random_values(&mut r, 9, 3)).unwrap();
        let p = AttentionParams::<f64>::new(&mut r, 4, 1, 2, 4);
        let s = AttentionSettings::window(3, Boundary::Torus);
        assert!(plain_mhsa(&f, &p, &s, None).is_err());
        let p3 = AttentionParams::<f64>::new(&mut r, 3, 1, 2, 3);
        let bad_net = EncoderNet::new(&mut r, EncoderKind::Lifting, 1, 4, 5);
        assert!(rel_pe_mhsa(&f, &p3, &s, &bad_net, None).is_err());
        let gnet = EncoderNet::new(&mut r, EncoderKind::Group, 1, 4, 3);
        assert!(group_attention(&f, &p3, &s, &gnet, &g, None).is_err());
        let pos = Tensor::zeros(&[8, 3]);
        assert!(abs_pe_mhsa(&f, &p3, &s, &pos, None).is_err());
        assert!(FeatureMap::lifted(3, 3, 4, random_values(&mut r, 9, 3)).is_err());
    }

    #[test]
    fn lifted_transform_round_trip() {
        let mut r = rng(11);
        let g = FiniteGroup::dihedral(4).unwrap();
        let f = FeatureMap::lifted(4, 4, 8, random_values(&mut r, 128, 2)).unwrap();
        for e in g.elements() {
            let t = AffineElement { translation: [1, -2], point_part: e };
            let moved = f.transformed(&g, t).unwrap();
            // undo: translate back, then rotate by the inverse
            let back = moved
                .transformed(&g, AffineElement::translation(-1, 2))
                .unwrap()
                .transformed(&g, AffineElement::rotation(g.inverse(e).unwrap()))
                .unwrap();
            assert_eq!(back.values.data(), f.values.data());
        }
        let _ = GroupElement(0);
    }

    fn equivariance_gap(group: &FiniteGroup, variant: PeVariant, lifting: bool) -> f64 {
        let mut r = rng(12);
        let (w, order) = (5, group.order());
        let p = AttentionParams::<f64>::new(&mut r, 3, 2, 2, 3);
        let mut s = AttentionSettings::window(3, Boundary::Torus);
        s.pe_variant = variant;
        let mut worst: f64 = 0.0;
        let run = |f: &FeatureMap<f64>, net: &EncoderNet<f64>| {
            if lifting {
                lifting_attention(f, &p, &s, net, group, None).unwrap()
            } else {
                group_attention(f, &p, &s, net, group, None).unwrap()
            }
        };
        let (f, net) = if lifting {
            let net = EncoderNet::new_random(&mut r, EncoderKind::Lifting, 1, 6, 3);
            (FeatureMap::planar(w, w, random_values(&mut r, 25, 3)).unwrap(), net)
        } else {
            let net = EncoderNet::new_random(&mut r, EncoderKind::Group, 1, 6, 3);
            (FeatureMap::lifted(w, w, order, random_values(&mut r, 25 * order, 3)).unwrap(), net)
        };
        let y = run(&f, &net);
        for e in group.exact_elements(w, w) {
            let g = AffineElement { translation: [2, -1], point_part: e };
            let lhs = run(&f.transformed(group, g).unwrap(), &net);
            let rhs = y.transformed(group, g).unwrap();
            worst = worst.max(max_diff(&lhs.values, &rhs.values));
        }
        worst
    }

    #[test]
    fn lifting_layer_is_equivariant() {
        for g in [FiniteGroup::cyclic(4).unwrap(), FiniteGroup::dihedral(4).unwrap()] {
            assert!(equivariance_gap(&g, PeVariant::Gevit, true) < 1e-12, "{g}");
        }
    }

    #[test]
    fn group_layer_is_equivariant() {
        for g in [FiniteGroup::cyclic(4).unwrap(), FiniteGroup::dihedral(4).unwrap()] {
            assert!(equivariance_gap(&g, PeVariant::Gevit, false) < 1e-12, "{g}");
        }
    }

    #[test]
    fn baseline_group_layer_is_not_equivariant() {
        let g = FiniteGroup::cyclic(4).unwrap();
        assert!(equivariance_gap(&g, PeVariant::Baseline, false) > 1e-3);
    }

    #[test]
    fn relative_layer_commutes_with_translations() {
        let mut r = rng(13);
        let f = FeatureMap::planar(5, 4, random_values(&mut r, 20, 3)).unwrap();
        let p = AttentionParams::<f64>::new(&mut r, 3, 2, 2, 3);
        let net = EncoderNet::new_random(&mut r, EncoderKind::Lifting, 1, 6, 3);
        let s = AttentionSettings::window(3, Boundary::Torus);
        let c1 = FiniteGroup::cyclic(1).unwrap();
        let y = rel_pe_mhsa(&f, &p, &s, &net, None).unwrap();
        let t = AffineElement::translation(3, 1);
        let lhs = rel_pe_mhsa(&f.transformed(&c1, t).unwrap(), &p, &s, &net, None).unwrap();
        assert!(max_diff(&lhs.values, &y.transformed(&c1, t).unwrap().values) < 1e-12);
    }
}
