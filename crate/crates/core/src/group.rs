//! Discrete planar point groups (cyclic `Cn` and dihedral `Dn`) stored as
//! Cayley tables, together with their actions on the plane and on pixel grids.
//!
//! Element `0` is always the identity. For `Cn`, element `k` is the rotation
//! by `2πk/n`. For `Dn`, elements `0..n` are the rotations and element `n + k`
//! is `m ∘ r_k`, where `m` is the reflection about the x-axis.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupError {
    #[error("invalid group construction: {0}")]
    Construction(String),
    #[error("element index {index} out of range for group of order {order}")]
    OutOfRange { index: usize, order: usize },
    #[error("element {element} of {group} has no exact action on a {width}x{height} grid")]
    ExactActionUnavailable {
        group: String,
        element: usize,
        width: usize,
        height: usize,
    },
    #[error("grid index {index} out of range for a {width}x{height} grid")]
    GridIndex {
        index: usize,
        width: usize,
        height: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GroupKind {
    Cyclic,
    Dihedral,
}

/// Index of an element within its group's element list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupElement(pub usize);

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "g{}", self.0)
    }
}

pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteGroup {
    kind: GroupKind,
    n: usize,
    compose: Vec<usize>,
    inverse: Vec<usize>,
    matrices: Vec<Mat2>,
}

fn rotation(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

pub fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
        }
    }
    out
}

impl FiniteGroup {
    pub fn new(kind: GroupKind, n: usize) -> Result<Self, GroupError> {
        if n == 0 {
            return Err(GroupError::Construction(
                "discretization n must be at least 1".into(),
            ));
        }
        let order = match kind {
            GroupKind::Cyclic => n,
            GroupKind::Dihedral => 2 * n,
        };
        // (reflected, rotation steps) decomposition of every element
        let decompose = |g: usize| (g >= n, g % n);
        let encode = |refl: bool, k: usize| if refl { n + k % n } else { k % n };

        let mut compose = vec![0; order * order];
        for a in 0..order {
            for b in 0..order {
                let (ra, ka) = decompose(a);
                let (rb, kb) = decompose(b);
                // r_a m = m r_{-a}
                let c = match (ra, rb) {
                    (false, false) => encode(false, ka + kb),
                    (false, true) => encode(true, kb + n - ka),
                    (true, false) => encode(true, ka + kb),
                    (true, true) => encode(false, kb + n - ka),
                };
                compose[a * order + b] = c;
            }
        }
        let inverse = (0..order)
            .map(|g| match decompose(g) {
                (false, k) => encode(false, n - k),
                // reflections are involutions
                (true, _) => g,
            })
            .collect();
        let reflect_x: Mat2 = [[1.0, 0.0], [0.0, -1.0]];
        let matrices = (0..order)
            .map(|g| {
                let (refl, k) = decompose(g);
                let rot = rotation(2.0 * PI * k as f64 / n as f64);
                if refl {
                    mat_mul(&reflect_x, &rot)
                } else {
                    rot
                }
            })
            .collect();
        Ok(Self {
            kind,
            n,
            compose,
            inverse,
            matrices,
        })
    }

    pub fn cyclic(n: usize) -> Result<Self, GroupError> {
        Self::new(GroupKind::Cyclic, n)
    }

    pub fn dihedral(n: usize) -> Result<Self, GroupError> {
        Self::new(GroupKind::Dihedral, n)
    }

    pub fn kind(&self) -> GroupKind {
        self.kind
    }

    /// Rotation discretization `n`.
    pub fn rotations(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> usize {
        self.inverse.len()
    }

    pub fn name(&self) -> String {
        match self.kind {
            GroupKind::Cyclic => format!("c{}", self.n),
            GroupKind::Dihedral => format!("d{}", self.n),
        }
    }

    pub fn identity(&self) -> GroupElement {
        GroupElement::IDENTITY
    }

    pub fn elements(&self) -> impl Iterator<Item = GroupElement> {
        (0..self.order()).map(GroupElement)
    }

    pub fn element(&self, index: usize) -> Result<GroupElement, GroupError> {
        self.check(GroupElement(index))
    }

    fn check(&self, g: GroupElement) -> Result<GroupElement, GroupError> {
        if g.0 < self.order() {
            Ok(g)
        } else {
            Err(GroupError::OutOfRange {
                index: g.0,
                order: self.order(),
            })
        }
    }

    /// `a ∘ b`: apply `b` first, then `a`.
    pub fn compose(&self, a: GroupElement, b: GroupElement) -> Result<GroupElement, GroupError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.compose_unchecked(a, b))
    }

    pub(crate) fn compose_unchecked(&self, a: GroupElement, b: GroupElement) -> GroupElement {
        GroupElement(self.compose[a.0 * self.order() + b.0])
    }

    pub fn inverse(&self, g: GroupElement) -> Result<GroupElement, GroupError> {
        self.check(g)?;
        Ok(GroupElement(self.inverse[g.0]))
    }

    pub(crate) fn inverse_unchecked(&self, g: GroupElement) -> GroupElement {
        GroupElement(self.inverse[g.0])
    }

    /// The product `query ∘ key⁻¹ ∘ query` used as the group argument of the
    /// equivariant relative positional encoding.
    pub fn twist(&self, query: GroupElement, key: GroupElement) -> Result<GroupElement, GroupError> {
        self.check(query)?;
        self.check(key)?;
        Ok(self.twist_unchecked(query, key))
    }

    pub(crate) fn twist_unchecked(&self, query: GroupElement, key: GroupElement) -> GroupElement {
        let t = self.compose_unchecked(query, self.inverse_unchecked(key));
        self.compose_unchecked(t, query)
    }

    pub fn matrix(&self, g: GroupElement) -> Result<Mat2, GroupError> {
        self.check(g)?;
        Ok(self.matrices[g.0])
    }

    pub fn is_reflection(&self, g: GroupElement) -> bool {
        g.0 >= self.n
    }

    /// Rotation angle of the rotational part and the reflection bit, the
    /// encoding fed to positional encoders.
    pub fn angle_and_reflection(&self, g: GroupElement) -> (f64, bool) {
        let k = g.0 % self.n;
        (2.0 * PI * k as f64 / self.n as f64, self.is_reflection(g))
    }

    pub fn determinant(&self, g: GroupElement) -> Result<f64, GroupError> {
        let m = self.matrix(g)?;
        Ok(m[0][0] * m[1][1] - m[0][1] * m[1][0])
    }

    pub fn act_point(&self, g: GroupElement, p: [f64; 2]) -> Result<[f64; 2], GroupError> {
        let m = self.matrix(g)?;
        Ok([
            m[0][0] * p[0] + m[0][1] * p[1],
            m[1][0] * p[0] + m[1][1] * p[1],
        ])
    }

    /// Integer matrix of `g` when every entry is -1, 0 or 1.
    pub fn integer_matrix(&self, g: GroupElement) -> Option<[[i64; 2]; 2]> {
        let m = self.matrices.get(g.0)?;
        let mut out = [[0i64; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                let v = m[r][c].round();
                if (m[r][c] - v).abs() > 1e-9 {
                    return None;
                }
                out[r][c] = v as i64;
            }
        }
        Some(out)
    }

    /// Whether `g` permutes the lattice of a `width`x`height` grid when
    /// applied about the grid center.
    pub fn is_exact_on_grid(&self, g: GroupElement, width: usize, height: usize) -> bool {
        match self.integer_matrix(g) {
            None => false,
            Some(m) => width == height || m[0][1] == 0,
        }
    }

    /// Elements acting exactly on a `width`x`height` grid.
    pub fn exact_elements(&self, width: usize, height: usize) -> Vec<GroupElement> {
        self.elements()
            .filter(|&g| self.is_exact_on_grid(g, width, height))
            .collect()
    }

    /// Image of a row-major grid index under `g`, rotating about the grid
    /// center `((W-1)/2, (H-1)/2)` in `(col, row)` coordinates.
    pub fn act_grid(
        &self,
        g: GroupElement,
        idx: usize,
        width: usize,
        height: usize,
    ) -> Result<usize, GroupError> {
        self.check(g)?;
        if idx >= width * height {
            return Err(GroupError::GridIndex { index: idx, width, height });
        }
        let m = self.exact_matrix(g, width, height)?;
        Ok(apply_about_center(&m, idx, width, height))
    }

    /// Full permutation table `idx -> act_grid(g, idx)`.
    pub fn grid_permutation(
        &self,
        g: GroupElement,
        width: usize,
        height: usize,
    ) -> Result<Vec<usize>, GroupError> {
        self.check(g)?;
        let m = self.exact_matrix(g, width, height)?;
        Ok((0..width * height)
            .map(|idx| apply_about_center(&m, idx, width, height))
            .collect())
    }

    fn exact_matrix(
        &self,
        g: GroupElement,
        width: usize,
        height: usize,
    ) -> Result<[[i64; 2]; 2], GroupError> {
        match self.integer_matrix(g) {
            Some(m) if self.is_exact_on_grid(g, width, height) => Ok(m),
            _ => Err(GroupError::ExactActionUnavailable {
                group: self.name(),
                element: g.0,
                width,
                height,
            }),
        }
    }

    /// Permutation `π` of the group axis with `π(k) = index(ḡ⁻¹ ∘ e_k)`.
    pub fn regular_permutation(&self, g: GroupElement) -> Result<Vec<usize>, GroupError> {
        let inv = self.inverse(g)?;
        Ok(self
            .elements()
            .map(|e| self.compose_unchecked(inv, e).0)
            .collect())
    }
}

fn apply_about_center(m: &[[i64; 2]; 2], idx: usize, width: usize, height: usize) -> usize {
    // doubled coordinates keep the half-integer center exact
    let col = idx % width;
    let row = idx / width;
    let x = 2 * col as i64 - (width as i64 - 1);
    let y = 2 * row as i64 - (height as i64 - 1);
    let nx = m[0][0] * x + m[0][1] * y;
    let ny = m[1][0] * x + m[1][1] * y;
    let ncol = (nx + width as i64 - 1) / 2;
    let nrow = (ny + height as i64 - 1) / 2;
    (nrow as usize) * width + ncol as usize
}

impl FromStr for FiniteGroup {
    type Err = GroupError;

    /// Parses specs such as `c4`, `d8`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        let bad = || GroupError::Construction(format!("unrecognised group spec '{s}'"));
        let mut chars = s.chars();
        let kind = match chars.next() {
            Some('c') => GroupKind::Cyclic,
            Some('d') => GroupKind::Dihedral,
            _ => return Err(bad()),
        };
        let n: usize = chars.as_str().parse().map_err(|_| bad())?;
        Self::new(kind, n)
    }
}

impl fmt::Display for FiniteGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// An element `(y, h̄)` of the affine group `Z² ⋊ H` acting on pixel grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AffineElement {
    pub translation: [i64; 2],
    pub point_part: GroupElement,
}

impl AffineElement {
    pub fn rotation(point_part: GroupElement) -> Self {
        Self {
            translation: [0, 0],
            point_part,
        }
    }

    pub fn translation(dx: i64, dy: i64) -> Self {
        Self {
            translation: [dx, dy],
            point_part: GroupElement::IDENTITY,
        }
    }

    /// Toroidal action on a grid index: rotate about the center, then
    /// translate with wrap-around.
    pub fn act_torus(
        &self,
        group: &FiniteGroup,
        idx: usize,
        width: usize,
        height: usize,
    ) -> Result<usize, GroupError> {
        let r = group.act_grid(self.point_part, idx, width, height)?;
        let col = (r % width) as i64 + self.translation[0];
        let row = (r / width) as i64 + self.translation[1];
        let col = col.rem_euclid(width as i64) as usize;
        let row = row.rem_euclid(height as i64) as usize;
        Ok(row * width + col)
    }
}
