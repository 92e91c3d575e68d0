//! Structured matrix groups for square-root precision factors.
//!
//! A [`StructuredFactor`] is an element `B` of one of the groups
//!
//! * block upper triangular `[[B_A, B_B], [0, B_D]]` with `B_D` diagonal,
//! * block lower triangular `[[B_A, 0], [B_C, B_D]]`,
//! * the Heisenberg-style refinements in which `B_D` itself is block
//!   triangular with a diagonal leading part and a dense `k₂ × k₂` trailing
//!   block,
//! * Kronecker products of two such groups.
//!
//! Every triangular kind is stored in a single "upper layout"
//!
//! ```text
//!       ┌ a   b₁        b₂ ┐   k₁ rows
//!   U = │ 0   diag(d₁)  d₂ │   d₀ rows
//!       └ 0   0         d₄ ┘   k₂ rows
//! ```
//!
//! Upper kinds use `B = U`; lower kinds use `B = Uᵀ`, which is exactly the
//! transposed pattern. All group operations are then written once for `U`,
//! and the lower kinds are obtained by transposition identities
//! (`(U₂U₁)ᵀ = U₁ᵀU₂ᵀ`, `B⁻¹ = U⁻ᵀ`, …). Storage is `O((k+1)p)` and no
//! operation densifies the factor.
//!
//! [`LocalDirection`]s (elements `M` of the matching Lie sub-algebra) use the
//! same layout, with the symmetric blocks stored once as packed triangles.

use nalgebra::LU;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Result, SngdError};
use crate::linalg::{from_rows, to_rows, Matrix, Vector};

/// Tag describing which group a factor belongs to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GroupKind {
    /// The full general linear group `GL(p)`; canonicalized to `BlockUpper(p, p)`.
    Full { p: usize },
    /// Positive diagonal matrices; canonicalized to `BlockUpper(p, 0)`.
    Diagonal { p: usize },
    /// `[[B_A, B_B], [0, B_D]]` with a dense `k × k` corner and diagonal `B_D`.
    BlockUpper { p: usize, k: usize },
    /// `[[B_A, 0], [B_C, B_D]]`.
    BlockLower { p: usize, k: usize },
    /// Upper Heisenberg-style group with blocks of sizes `k1`, `d0`, `k2`.
    HeisUpper { p: usize, k1: usize, k2: usize },
    /// Lower Heisenberg-style group (transposed pattern of `HeisUpper`).
    HeisLower { p: usize, k1: usize, k2: usize },
    /// Kronecker product `B_left ⊗ B_right`.
    Kron { left: Box<GroupKind>, right: Box<GroupKind> },
}

/// Block sizes of a triangular kind in the shared upper layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub p: usize,
    pub k1: usize,
    pub d0: usize,
    pub k2: usize,
    /// Whether the actual factor is the transpose of the stored layout.
    pub lower: bool,
}

impl Layout {
    fn rest(&self) -> usize {
        self.d0 + self.k2
    }
}

impl GroupKind {
    /// Validates the block sizes and returns the canonical representative
    /// (`Full` and `Diagonal` become `BlockUpper(p, p)` and `BlockUpper(p, 0)`).
    pub fn canonical(&self) -> Result<GroupKind> {
        let bad = |msg: String| Err(SngdError::Config(msg));
        match self {
            GroupKind::Full { p } => GroupKind::BlockUpper { p: *p, k: *p }.canonical(),
            GroupKind::Diagonal { p } => GroupKind::BlockUpper { p: *p, k: 0 }.canonical(),
            GroupKind::BlockUpper { p, k } | GroupKind::BlockLower { p, k } => {
                if *p == 0 || k > p {
                    return bad(format!("need 0 <= k <= p and p >= 1, got p={p}, k={k}"));
                }
                Ok(self.clone())
            }
            GroupKind::HeisUpper { p, k1, k2 } | GroupKind::HeisLower { p, k1, k2 } => {
                if *k1 < 1 || *k2 < 1 || k1 + k2 > *p {
                    return bad(format!(
                        "Heisenberg kinds need k1 >= 1, k2 >= 1, k1 + k2 <= p; got p={p}, k1={k1}, k2={k2}"
                    ));
                }
                Ok(self.clone())
            }
            GroupKind::Kron { left, right } => Ok(GroupKind::Kron {
                left: Box::new(left.canonical()?),
                right: Box::new(right.canonical()?),
            }),
        }
    }

    /// Dimension `p` of the matrices in the group.
    pub fn dim(&self) -> usize {
        match self {
            GroupKind::Full { p }
            | GroupKind::Diagonal { p }
            | GroupKind::BlockUpper { p, .. }
            | GroupKind::BlockLower { p, .. }
            | GroupKind::HeisUpper { p, .. }
            | GroupKind::HeisLower { p, .. } => *p,
            GroupKind::Kron { left, right } => left.dim() * right.dim(),
        }
    }

    /// Block layout of a triangular kind; `None` for Kronecker kinds.
    pub fn layout(&self) -> Option<Layout> {
        let lay = |p: usize, k1: usize, k2: usize, lower: bool| {
            Some(Layout { p, k1, d0: p - k1 - k2, k2, lower })
        };
        match self {
            GroupKind::Full { p } => lay(*p, *p, 0, false),
            GroupKind::Diagonal { p } => lay(*p, 0, 0, false),
            GroupKind::BlockUpper { p, k } => lay(*p, *k, 0, false),
            GroupKind::BlockLower { p, k } => lay(*p, *k, 0, true),
            GroupKind::HeisUpper { p, k1, k2 } => lay(*p, *k1, *k2, false),
            GroupKind::HeisLower { p, k1, k2 } => lay(*p, *k1, *k2, true),
            GroupKind::Kron { .. } => None,
        }
    }

    /// Indices whose full rows/columns of `B⁻¹HB⁻ᵀ` enter `κ` (the first `k₁`
    /// and the last `k₂` coordinates); every other coordinate only needs its
    /// diagonal entry.
    pub fn dense_indices(&self) -> Vec<usize> {
        match self.layout() {
            Some(l) => (0..l.k1).chain((l.k1 + l.d0)..l.p).collect(),
            None => (0..self.dim()).collect(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            GroupKind::Full { .. } => "full",
            GroupKind::Diagonal { .. } => "diagonal",
            GroupKind::BlockUpper { .. } => "block-upper",
            GroupKind::BlockLower { .. } => "block-lower",
            GroupKind::HeisUpper { .. } => "heis-upper",
            GroupKind::HeisLower { .. } => "heis-lower",
            GroupKind::Kron { .. } => "kron",
        }
    }
}

fn mismatch(a: &GroupKind, b: &GroupKind) -> SngdError {
    SngdError::KindMismatch(format!("{a:?} vs {b:?}"))
}

fn lu_solve(a: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if a.nrows() == 0 {
        return Ok(rhs.clone());
    }
    LU::new(a.clone())
        .solve(rhs)
        .ok_or_else(|| SngdError::Singular("dense block is singular".into()))
}

fn lu_solve_t(a: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    lu_solve(&a.transpose(), rhs)
}

// ---------------------------------------------------------------------------
// Triangular blocks in the upper layout.
// ---------------------------------------------------------------------------

/// Nonzero blocks of `U` in the shared upper layout.
#[derive(Clone, Debug, PartialEq)]
struct TriBlocks {
    a: Matrix,  // k1 × k1
    b: Matrix,  // k1 × (d0 + k2)
    d1: Vector, // d0
    d2: Matrix, // d0 × k2
    d4: Matrix, // k2 × k2
}

impl TriBlocks {
    fn identity(l: &Layout) -> Self {
        TriBlocks {
            a: Matrix::identity(l.k1, l.k1),
            b: Matrix::zeros(l.k1, l.rest()),
            d1: Vector::from_element(l.d0, 1.0),
            d2: Matrix::zeros(l.d0, l.k2),
            d4: Matrix::identity(l.k2, l.k2),
        }
    }

    fn layout_sizes(&self) -> (usize, usize, usize) {
        (self.a.nrows(), self.d1.len(), self.d4.nrows())
    }

    fn dense(&self) -> Matrix {
        let (k1, d0, k2) = self.layout_sizes();
        let p = k1 + d0 + k2;
        let mut u = Matrix::zeros(p, p);
        u.view_mut((0, 0), (k1, k1)).copy_from(&self.a);
        u.view_mut((0, k1), (k1, d0 + k2)).copy_from(&self.b);
        for i in 0..d0 {
            u[(k1 + i, k1 + i)] = self.d1[i];
        }
        u.view_mut((k1, k1 + d0), (d0, k2)).copy_from(&self.d2);
        u.view_mut((k1 + d0, k1 + d0), (k2, k2)).copy_from(&self.d4);
        u
    }

    /// `X · Y` for two elements in the upper layout.
    fn mul(x: &TriBlocks, y: &TriBlocks) -> TriBlocks {
        let (k1, d0, _k2) = x.layout_sizes();
        let xb1 = x.b.columns(0, d0);
        let xb2 = x.b.columns(d0, x.b.ncols() - d0);
        let mut b = &x.a * &y.b;
        {
            let mut b1 = b.columns_mut(0, d0);
            for j in 0..d0 {
                for i in 0..k1 {
                    b1[(i, j)] += xb1[(i, j)] * y.d1[j];
                }
            }
        }
        {
            let extra = xb1 * &y.d2 + xb2 * &y.d4;
            let mut b2 = b.columns_mut(d0, extra.ncols());
            b2 += extra;
        }
        let mut d2 = &x.d2 * &y.d4;
        for i in 0..d0 {
            for j in 0..d2.ncols() {
                d2[(i, j)] += x.d1[i] * y.d2[(i, j)];
            }
        }
        TriBlocks {
            a: &x.a * &y.a,
            b,
            d1: x.d1.component_mul(&y.d1),
            d2,
            d4: &x.d4 * &y.d4,
        }
    }

    fn inverse(&self) -> Result<TriBlocks> {
        let (k1, d0, k2) = self.layout_sizes();
        if let Some(i) = self.d1.iter().position(|&d| d == 0.0) {
            return Err(SngdError::Singular(format!("zero diagonal entry {i}")));
        }
        let a_inv = if k1 > 0 {
            self.a.clone().try_inverse().ok_or_else(|| SngdError::Singular("B_A".into()))?
        } else {
            Matrix::zeros(0, 0)
        };
        let d4_inv = if k2 > 0 {
            self.d4.clone().try_inverse().ok_or_else(|| SngdError::Singular("B_D4".into()))?
        } else {
            Matrix::zeros(0, 0)
        };
        let d1_inv = self.d1.map(|d| 1.0 / d);
        // D⁻¹ = [[diag(1/d1), −diag(1/d1)·d2·d4⁻¹], [0, d4⁻¹]]
        let mut d2_inv = -(&self.d2 * &d4_inv);
        for i in 0..d0 {
            d2_inv.row_mut(i).scale_mut(d1_inv[i]);
        }
        let dinv = TriBlocks {
            a: Matrix::zeros(0, 0),
            b: Matrix::zeros(0, d0 + k2),
            d1: d1_inv.clone(),
            d2: d2_inv.clone(),
            d4: d4_inv.clone(),
        };
        // B-block of the inverse: −a⁻¹ · b · D⁻¹.
        let b_dinv = Self::row_times_d(&self.b, &dinv);
        Ok(TriBlocks { a: a_inv.clone(), b: -(&a_inv * b_dinv), d1: d1_inv, d2: d2_inv, d4: d4_inv })
    }

    /// `R · D` where `D = [[diag(d1), d2], [0, d4]]` is the trailing block of `y`.
    fn row_times_d(r: &Matrix, y: &TriBlocks) -> Matrix {
        let d0 = y.d1.len();
        let mut out = Matrix::zeros(r.nrows(), r.ncols());
        let r1 = r.columns(0, d0);
        let r2 = r.columns(d0, r.ncols() - d0);
        for j in 0..d0 {
            for i in 0..r.nrows() {
                out[(i, j)] = r1[(i, j)] * y.d1[j];
            }
        }
        let tail = r1 * &y.d2 + r2 * &y.d4;
        out.columns_mut(d0, tail.ncols()).copy_from(&tail);
        out
    }

    /// `U · X` for a block of columns `X` (p × m).
    fn apply(&self, x: &Matrix) -> Matrix {
        let (k1, d0, k2) = self.layout_sizes();
        let x1 = x.rows(0, k1);
        let x2 = x.rows(k1, d0);
        let x3 = x.rows(k1 + d0, k2);
        let mut out = Matrix::zeros(x.nrows(), x.ncols());
        let top = &self.a * x1 + &self.b * x.rows(k1, d0 + k2);
        out.rows_mut(0, k1).copy_from(&top);
        let mut mid = &self.d2 * x3;
        for i in 0..d0 {
            for j in 0..x.ncols() {
                mid[(i, j)] += self.d1[i] * x2[(i, j)];
            }
        }
        out.rows_mut(k1, d0).copy_from(&mid);
        out.rows_mut(k1 + d0, k2).copy_from(&(&self.d4 * x3));
        out
    }

    /// `Uᵀ · X`.
    fn apply_t(&self, x: &Matrix) -> Matrix {
        let (k1, d0, k2) = self.layout_sizes();
        let x1 = x.rows(0, k1);
        let x2 = x.rows(k1, d0);
        let x3 = x.rows(k1 + d0, k2);
        let mut out = Matrix::zeros(x.nrows(), x.ncols());
        out.rows_mut(0, k1).copy_from(&(self.a.transpose() * x1));
        let bt_x1 = self.b.transpose() * x1;
        let mut mid = bt_x1.rows(0, d0).into_owned();
        for i in 0..d0 {
            for j in 0..x.ncols() {
                mid[(i, j)] += self.d1[i] * x2[(i, j)];
            }
        }
        out.rows_mut(k1, d0).copy_from(&mid);
        let last = bt_x1.rows(d0, k2) + self.d2.transpose() * x2 + self.d4.transpose() * x3;
        out.rows_mut(k1 + d0, k2).copy_from(&last);
        out
    }

    /// `U⁻¹ · X` by block back-substitution.
    fn solve(&self, x: &Matrix) -> Result<Matrix> {
        let (k1, d0, k2) = self.layout_sizes();
        let y3 = lu_solve(&self.d4, &x.rows(k1 + d0, k2).into_owned())?;
        let mut y2 = x.rows(k1, d0) - &self.d2 * &y3;
        for i in 0..d0 {
            y2.row_mut(i).scale_mut(1.0 / self.d1[i]);
        }
        let mut tail = Matrix::zeros(d0 + k2, x.ncols());
        tail.rows_mut(0, d0).copy_from(&y2);
        tail.rows_mut(d0, k2).copy_from(&y3);
        let y1 = lu_solve(&self.a, &(x.rows(0, k1) - &self.b * &tail))?;
        let mut out = Matrix::zeros(x.nrows(), x.ncols());
        out.rows_mut(0, k1).copy_from(&y1);
        out.rows_mut(k1, d0 + k2).copy_from(&tail);
        Ok(out)
    }

    /// `U⁻ᵀ · X` by block forward substitution.
    fn solve_t(&self, x: &Matrix) -> Result<Matrix> {
        let (k1, d0, k2) = self.layout_sizes();
        let y1 = lu_solve_t(&self.a, &x.rows(0, k1).into_owned())?;
        let bt_y1 = self.b.transpose() * &y1;
        let mut y2 = x.rows(k1, d0) - bt_y1.rows(0, d0);
        for i in 0..d0 {
            y2.row_mut(i).scale_mut(1.0 / self.d1[i]);
        }
        let rhs3 = x.rows(k1 + d0, k2) - bt_y1.rows(d0, k2) - self.d2.transpose() * &y2;
        let y3 = lu_solve_t(&self.d4, &rhs3)?;
        let mut out = Matrix::zeros(x.nrows(), x.ncols());
        out.rows_mut(0, k1).copy_from(&y1);
        out.rows_mut(k1, d0).copy_from(&y2);
        out.rows_mut(k1 + d0, k2).copy_from(&y3);
        Ok(out)
    }

    fn log_abs_det(&self) -> f64 {
        let la = if self.a.nrows() > 0 { self.a.determinant().abs().ln() } else { 0.0 };
        let l4 = if self.d4.nrows() > 0 { self.d4.determinant().abs().ln() } else { 0.0 };
        la + self.d1.iter().map(|d| d.abs().ln()).sum::<f64>() + l4
    }

    fn check(&self) -> std::result::Result<(), String> {
        let all = self
            .a
            .iter()
            .chain(self.b.iter())
            .chain(self.d1.iter())
            .chain(self.d2.iter())
            .chain(self.d4.iter());
        if all.into_iter().any(|x| !x.is_finite()) {
            return Err("non-finite entry".into());
        }
        if let Some(i) = self.d1.iter().position(|&d| !(d > 1e-300)) {
            if self.d1[i] == 0.0 {
                return Err("singular diagonal".into());
            }
            return Err(format!("non-positive diagonal entry at {i}"));
        }
        if self.a.nrows() > 0 && self.a.determinant() == 0.0 {
            return Err("singular B_A block".into());
        }
        if self.d4.nrows() > 0 && self.d4.determinant() == 0.0 {
            return Err("singular B_D4 block".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Structured factors.
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum FactorRepr {
    Tri(TriBlocks),
    Kron(Box<StructuredFactor>, Box<StructuredFactor>),
}

/// A group element `B`, stored by its nonzero blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredFactor {
    kind: GroupKind,
    repr: FactorRepr,
}

/// Outcome of [`StructuredFactor::membership_check`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Membership {
    Pass,
    Fail(String),
}

impl Membership {
    pub fn passed(&self) -> bool {
        matches!(self, Membership::Pass)
    }
}

impl StructuredFactor {
    /// The group identity.
    pub fn identity(kind: &GroupKind) -> Result<Self> {
        let kind = kind.canonical()?;
        let repr = match &kind {
            GroupKind::Kron { left, right } => FactorRepr::Kron(
                Box::new(Self::identity(left)?),
                Box::new(Self::identity(right)?),
            ),
            k => FactorRepr::Tri(TriBlocks::identity(&k.layout().expect("triangular kind"))),
        };
        Ok(StructuredFactor { kind, repr })
    }

    /// `c · I` for a positive scalar `c` (on a Kronecker kind, `c` is applied
    /// to the left operand only).
    pub fn scaled_identity(kind: &GroupKind, c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(SngdError::Config(format!("scale must be positive, got {c}")));
        }
        let mut f = Self::identity(kind)?;
        match &mut f.repr {
            FactorRepr::Tri(t) => {
                t.a *= c;
                t.d1 *= c;
                t.d4 *= c;
            }
            FactorRepr::Kron(l, _) => **l = Self::scaled_identity(&l.kind, c)?,
        }
        Ok(f)
    }

    /// Extracts the blocks of a dense matrix that must already have the
    /// nonzero pattern of `kind`.
    pub fn from_dense(kind: &GroupKind, m: &Matrix) -> Result<Self> {
        let kind = kind.canonical()?;
        let l = kind
            .layout()
            .ok_or_else(|| SngdError::Config("from_dense does not support Kronecker kinds".into()))?;
        if m.nrows() != l.p || m.ncols() != l.p {
            return Err(SngdError::Dimension(format!("expected {p}x{p}", p = l.p)));
        }
        let u = if l.lower { m.transpose() } else { m.clone() };
        let k1 = l.k1;
        let d0 = l.d0;
        let t = TriBlocks {
            a: u.view((0, 0), (k1, k1)).into_owned(),
            b: u.view((0, k1), (k1, l.rest())).into_owned(),
            d1: Vector::from_fn(d0, |i, _| u[(k1 + i, k1 + i)]),
            d2: u.view((k1, k1 + d0), (d0, l.k2)).into_owned(),
            d4: u.view((k1 + d0, k1 + d0), (l.k2, l.k2)).into_owned(),
        };
        if (t.dense() - &u).amax() != 0.0 {
            return Err(SngdError::Config(format!("matrix does not have the {kind:?} pattern")));
        }
        Ok(StructuredFactor { kind, repr: FactorRepr::Tri(t) })
    }

    /// The diagonal factor `diag(d)` of kind `Diagonal(p)`; entries must be positive.
    pub fn from_diagonal(d: &Vector) -> Result<Self> {
        let p = d.len();
        let kind = GroupKind::Diagonal { p }.canonical()?;
        let t = TriBlocks {
            a: Matrix::zeros(0, 0),
            b: Matrix::zeros(0, p),
            d1: d.clone(),
            d2: Matrix::zeros(p, 0),
            d4: Matrix::zeros(0, 0),
        };
        let f = StructuredFactor { kind, repr: FactorRepr::Tri(t) };
        match f.membership_check() {
            Membership::Pass => Ok(f),
            Membership::Fail(msg) => Err(SngdError::Numerical(format!("diagonal factor: {msg}"))),
        }
    }

    /// Diagonal entries `B[i, i]`.
    pub fn diagonal(&self) -> Vector {
        Vector::from_fn(self.dim(), |i, _| self.entry(i, i))
    }

    /// Kronecker product of two factors.
    pub fn kron(left: StructuredFactor, right: StructuredFactor) -> Self {
        StructuredFactor {
            kind: GroupKind::Kron { left: Box::new(left.kind.clone()), right: Box::new(right.kind.clone()) },
            repr: FactorRepr::Kron(Box::new(left), Box::new(right)),
        }
    }

    /// Operands of a Kronecker factor.
    pub fn kron_parts(&self) -> Option<(&StructuredFactor, &StructuredFactor)> {
        match &self.repr {
            FactorRepr::Kron(l, r) => Some((l, r)),
            FactorRepr::Tri(_) => None,
        }
    }

    /// Group kind (canonical).
    pub fn kind(&self) -> &GroupKind {
        &self.kind
    }

    /// Matrix dimension `p`.
    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    fn tri(&self) -> Option<&TriBlocks> {
        match &self.repr {
            FactorRepr::Tri(t) => Some(t),
            FactorRepr::Kron(..) => None,
        }
    }

    fn is_lower(&self) -> bool {
        self.kind.layout().is_some_and(|l| l.lower)
    }

    /// Number of stored reals (`O((k+1)p)` for the triangular kinds).
    pub fn storage_len(&self) -> usize {
        match &self.repr {
            FactorRepr::Tri(t) => t.a.len() + t.b.len() + t.d1.len() + t.d2.len() + t.d4.len(),
            FactorRepr::Kron(l, r) => l.storage_len() + r.storage_len(),
        }
    }

    /// Dense `p × p` matrix of the factor.
    pub fn densify(&self) -> Matrix {
        match &self.repr {
            FactorRepr::Tri(t) => {
                let u = t.dense();
                if self.is_lower() {
                    u.transpose()
                } else {
                    u
                }
            }
            FactorRepr::Kron(l, r) => l.densify().kronecker(&r.densify()),
        }
    }

    /// Group product `self · other`.
    pub fn multiply(&self, other: &StructuredFactor) -> Result<Self> {
        if self.kind != other.kind {
            return Err(mismatch(&self.kind, &other.kind));
        }
        let repr = match (&self.repr, &other.repr) {
            (FactorRepr::Tri(x), FactorRepr::Tri(y)) => {
                // (U₁ᵀ)(U₂ᵀ) = (U₂U₁)ᵀ for the lower kinds.
                if self.is_lower() {
                    FactorRepr::Tri(TriBlocks::mul(y, x))
                } else {
                    FactorRepr::Tri(TriBlocks::mul(x, y))
                }
            }
            (FactorRepr::Kron(a, b), FactorRepr::Kron(c, d)) => {
                FactorRepr::Kron(Box::new(a.multiply(c)?), Box::new(b.multiply(d)?))
            }
            _ => return Err(mismatch(&self.kind, &other.kind)),
        };
        Ok(StructuredFactor { kind: self.kind.clone(), repr })
    }

    /// Group inverse `B⁻¹` (same kind).
    pub fn inverse(&self) -> Result<Self> {
        let repr = match &self.repr {
            // (Uᵀ)⁻¹ = (U⁻¹)ᵀ, so the stored layout is inverted in both cases.
            FactorRepr::Tri(t) => FactorRepr::Tri(t.inverse()?),
            FactorRepr::Kron(l, r) => FactorRepr::Kron(Box::new(l.inverse()?), Box::new(r.inverse()?)),
        };
        Ok(StructuredFactor { kind: self.kind.clone(), repr })
    }

    fn check_rows(&self, x: &Matrix) -> Result<()> {
        if x.nrows() != self.dim() {
            return Err(SngdError::Dimension(format!(
                "factor is {p}x{p} but operand has {} rows",
                x.nrows(),
                p = self.dim()
            )));
        }
        Ok(())
    }

    /// `B · X` for a block of columns.
    pub fn apply_mat(&self, x: &Matrix) -> Result<Matrix> {
        self.check_rows(x)?;
        match &self.repr {
            FactorRepr::Tri(t) => Ok(if self.is_lower() { t.apply_t(x) } else { t.apply(x) }),
            FactorRepr::Kron(l, r) => kron_cols(l, r, x, |f, m| f.apply_mat(m)),
        }
    }

    /// `Bᵀ · X`.
    pub fn apply_t_mat(&self, x: &Matrix) -> Result<Matrix> {
        self.check_rows(x)?;
        match &self.repr {
            FactorRepr::Tri(t) => Ok(if self.is_lower() { t.apply(x) } else { t.apply_t(x) }),
            FactorRepr::Kron(l, r) => kron_cols(l, r, x, |f, m| f.apply_t_mat(m)),
        }
    }

    /// `B⁻¹ · X` by block solves.
    pub fn inv_apply_mat(&self, x: &Matrix) -> Result<Matrix> {
        self.check_rows(x)?;
        match &self.repr {
            FactorRepr::Tri(t) => {
                if self.is_lower() {
                    t.solve_t(x)
                } else {
                    t.solve(x)
                }
            }
            FactorRepr::Kron(l, r) => kron_cols(l, r, x, |f, m| f.inv_apply_mat(m))
        }
    }

    /// `B⁻ᵀ · X` by block solves.
    pub fn inv_transpose_apply_mat(&self, x: &Matrix) -> Result<Matrix> {
        self.check_rows(x)?;
        match &self.repr {
            FactorRepr::Tri(t) => {
                if self.is_lower() {
                    t.solve(x)
                } else {
                    t.solve_t(x)
                }
            }
            FactorRepr::Kron(l, r) => kron_cols(l, r, x, |f, m| f.inv_transpose_apply_mat(m))
        }
    }

    /// `B⁻¹ x`.
    pub fn inv_apply(&self, x: &Vector) -> Result<Vector> {
        Ok(self.inv_apply_mat(&Matrix::from_column_slice(x.len(), 1, x.as_slice()))?.column(0).into_owned())
    }

    /// `B⁻ᵀ x`.
    pub fn inv_transpose_apply(&self, x: &Vector) -> Result<Vector> {
        Ok(self
            .inv_transpose_apply_mat(&Matrix::from_column_slice(x.len(), 1, x.as_slice()))?
            .column(0)
            .into_owned())
    }

    /// `B x`.
    pub fn apply(&self, x: &Vector) -> Result<Vector> {
        Ok(self.apply_mat(&Matrix::from_column_slice(x.len(), 1, x.as_slice()))?.column(0).into_owned())
    }

    /// `Bᵀ x`.
    pub fn apply_t(&self, x: &Vector) -> Result<Vector> {
        Ok(self.apply_t_mat(&Matrix::from_column_slice(x.len(), 1, x.as_slice()))?.column(0).into_owned())
    }

    /// `S⁻¹ x = B⁻ᵀ B⁻¹ x`.
    pub fn precision_solve(&self, x: &Vector) -> Result<Vector> {
        self.inv_transpose_apply(&self.inv_apply(x)?)
    }

    /// `S x = B Bᵀ x`.
    pub fn precision_apply(&self, x: &Vector) -> Result<Vector> {
        self.apply(&self.apply_t(x)?)
    }

    /// Dense precision `S = B Bᵀ`.
    pub fn precision_dense(&self) -> Matrix {
        let b = self.densify();
        &b * b.transpose()
    }

    /// Dense covariance `Σ = (B Bᵀ)⁻¹ = B⁻ᵀ B⁻¹`.
    pub fn covariance_dense(&self) -> Result<Matrix> {
        let p = self.dim();
        let binv = self.inv_apply_mat(&Matrix::identity(p, p))?;
        Ok(binv.transpose() * binv)
    }

    /// Low-rank form of the covariance of a block-upper factor:
    /// `Σ = U_k U_kᵀ + diag(0, …, 0, d)` with `U_k = [−B_A⁻ᵀ; B_D⁻¹ B_Bᵀ B_A⁻ᵀ]`
    /// and `d = B_D⁻²`.
    pub fn covariance_lowrank(&self) -> Result<(Matrix, Vector)> {
        let GroupKind::BlockUpper { p, k } = self.kind else {
            return Err(SngdError::KindMismatch(format!(
                "covariance_lowrank needs a block-upper factor, got {:?}",
                self.kind
            )));
        };
        let t = self.tri().expect("triangular");
        let a_inv_t = lu_solve_t(&t.a, &Matrix::identity(k, k))?;
        let mut lower = t.b.transpose() * &a_inv_t;
        for i in 0..(p - k) {
            lower.row_mut(i).scale_mut(1.0 / t.d1[i]);
        }
        let mut uk = Matrix::zeros(p, k);
        uk.rows_mut(0, k).copy_from(&(-a_inv_t));
        uk.rows_mut(k, p - k).copy_from(&lower);
        Ok((uk, t.d1.map(|d| 1.0 / (d * d))))
    }

    /// `log |det B|`, computed from the diagonal blocks only.
    pub fn log_abs_det(&self) -> f64 {
        match &self.repr {
            FactorRepr::Tri(t) => t.log_abs_det(),
            FactorRepr::Kron(l, r) => {
                r.dim() as f64 * l.log_abs_det() + l.dim() as f64 * r.log_abs_det()
            }
        }
    }

    /// Right multiplication by the retraction: `B · h(M)`.
    pub fn apply_h(&self, m: &LocalDirection) -> Result<Self> {
        if self.kind != m.kind {
            return Err(mismatch(&self.kind, &m.kind));
        }
        let repr = match (&self.repr, &m.repr) {
            (FactorRepr::Tri(u), DirRepr::Tri(n)) => {
                let hn = n.h_blocks();
                // Lower kinds: B h(M) = Uᵀ h(N)ᵀ = (h(N) U)ᵀ with N = Mᵀ stored.
                if self.is_lower() {
                    FactorRepr::Tri(TriBlocks::mul(&hn, u))
                } else {
                    FactorRepr::Tri(TriBlocks::mul(u, &hn))
                }
            }
            (FactorRepr::Kron(l, r), DirRepr::Kron(ml, mr)) => {
                FactorRepr::Kron(Box::new(l.apply_h(ml)?), Box::new(r.apply_h(mr)?))
            }
            _ => return Err(mismatch(&self.kind, &m.kind)),
        };
        Ok(StructuredFactor { kind: self.kind.clone(), repr })
    }

    /// Right multiplication by an arbitrary dense group element, used by the
    /// exponential-map updates: returns `B · G` after checking that `G` has the
    /// pattern of the kind.
    pub fn right_mul_dense(&self, g: &Matrix) -> Result<Self> {
        let gf = Self::from_dense(&self.kind, g)?;
        self.multiply(&gf)
    }

    /// Entry `B[i, j]` of the actual (not stored) factor.
    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match &self.repr {
            FactorRepr::Tri(t) => {
                let (i, j) = if self.is_lower() { (j, i) } else { (i, j) };
                tri_entry(t, i, j)
            }
            FactorRepr::Kron(l, r) => {
                let pr = r.dim();
                l.entry(i / pr, j / pr) * r.entry(i % pr, j % pr)
            }
        }
    }

    /// Verifies block shapes, finiteness, invertibility and positive diagonals.
    pub fn membership_check(&self) -> Membership {
        match &self.repr {
            FactorRepr::Tri(t) => {
                let Some(l) = self.kind.layout() else {
                    return Membership::Fail("kind/representation mismatch".into());
                };
                let shapes_ok = t.a.shape() == (l.k1, l.k1)
                    && t.b.shape() == (l.k1, l.rest())
                    && t.d1.len() == l.d0
                    && t.d2.shape() == (l.d0, l.k2)
                    && t.d4.shape() == (l.k2, l.k2);
                if !shapes_ok {
                    return Membership::Fail("block shapes do not match the kind".into());
                }
                match t.check() {
                    Ok(()) => Membership::Pass,
                    Err(msg) => Membership::Fail(msg),
                }
            }
            FactorRepr::Kron(l, r) => match l.membership_check() {
                Membership::Pass => r.membership_check(),
                fail => fail,
            },
        }
    }
}

fn tri_entry(t: &TriBlocks, i: usize, j: usize) -> f64 {
    let (k1, d0, _k2) = t.layout_sizes();
    if i < k1 {
        if j < k1 {
            t.a[(i, j)]
        } else {
            t.b[(i, j - k1)]
        }
    } else if i < k1 + d0 {
        if j == i {
            t.d1[i - k1]
        } else if j >= k1 + d0 {
            t.d2[(i - k1, j - k1 - d0)]
        } else {
            0.0
        }
    } else if j >= k1 + d0 {
        t.d4[(i - k1 - d0, j - k1 - d0)]
    } else {
        0.0
    }
}

/// Applies `op(L ⊗ R) = op(L) ⊗ op(R)` column by column through the identity
/// `(A ⊗ C) vec(X) = vec(C X Aᵀ)`. Valid for products, transposes and
/// inverses, which all distribute over the Kronecker product.
fn kron_cols(
    l: &StructuredFactor,
    r: &StructuredFactor,
    x: &Matrix,
    op: impl Fn(&StructuredFactor, &Matrix) -> Result<Matrix>,
) -> Result<Matrix> {
    let (pl, pr) = (l.dim(), r.dim());
    let mut out = Matrix::zeros(x.nrows(), x.ncols());
    for c in 0..x.ncols() {
        let xm = Matrix::from_column_slice(pr, pl, x.column(c).as_slice());
        // (op(L) ⊗ op(R)) vec(X) = vec(op(R) X op(L)ᵀ) = vec(op(R) (op(L) Xᵀ)ᵀ)
        let right = op(r, &xm)?;
        let both = op(l, &right.transpose())?.transpose();
        out.column_mut(c).copy_from_slice(both.as_slice());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Local directions (Lie sub-algebra elements).
// ---------------------------------------------------------------------------

/// Symmetric `n × n` block stored once as a packed upper triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct SymBlock {
    n: usize,
    packed: Vec<f64>,
}

impl SymBlock {
    pub fn zeros(n: usize) -> Self {
        SymBlock { n, packed: vec![0.0; n * (n + 1) / 2] }
    }

    fn index(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        // Row i of the packed upper triangle starts at i·n − i(i−1)/2.
        i * self.n - i * i.saturating_sub(1) / 2 + (j - i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.packed[self.index(i, j)]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let idx = self.index(i, j);
        self.packed[idx] = v;
    }

    pub fn dense(&self) -> Matrix {
        Matrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut s = SymBlock::zeros(n);
        for i in 0..n {
            for j in i..n {
                s.set(i, j, f(i, j));
            }
        }
        s
    }

    fn map2(&self, other: &SymBlock, f: impl Fn(f64, f64) -> f64) -> SymBlock {
        SymBlock { n: self.n, packed: self.packed.iter().zip(&other.packed).map(|(a, b)| f(*a, *b)).collect() }
    }

    fn frob_sq(&self) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in i..self.n {
                let v = self.get(i, j);
                s += if i == j { v * v } else { 2.0 * v * v };
            }
        }
        s
    }
}

/// Stored blocks of a direction in the upper layout (lower kinds store `Mᵀ`).
#[derive(Clone, Debug, PartialEq)]
struct TriDir {
    a: SymBlock, // k1 × k1 symmetric
    b: Matrix,   // k1 × (d0 + k2)
    d1: Vector,  // d0
    d2: Matrix,  // d0 × k2
    d4: SymBlock, // k2 × k2 symmetric
}

impl TriDir {
    fn zeros(l: &Layout) -> Self {
        TriDir {
            a: SymBlock::zeros(l.k1),
            b: Matrix::zeros(l.k1, l.rest()),
            d1: Vector::zeros(l.d0),
            d2: Matrix::zeros(l.d0, l.k2),
            d4: SymBlock::zeros(l.k2),
        }
    }

    fn dense(&self) -> Matrix {
        TriBlocks {
            a: self.a.dense(),
            b: self.b.clone(),
            d1: self.d1.clone(),
            d2: self.d2.clone(),
            d4: self.d4.dense(),
        }
        .dense()
    }

    /// Closed-form blocks of `h(N) = I + N + ½N²`.
    fn h_blocks(&self) -> TriBlocks {
        let na = self.a.dense();
        let n4 = self.d4.dense();
        let k1 = na.nrows();
        let k2 = n4.nrows();
        let d0 = self.d1.len();
        let a = Matrix::identity(k1, k1) + &na + &na * &na * 0.5;
        let d4 = Matrix::identity(k2, k2) + &n4 + &n4 * &n4 * 0.5;
        let d1 = self.d1.map(|m| 1.0 + m + 0.5 * m * m);
        // d2 = N₂ + ½(diag(n₁) N₂ + N₂ N₄)
        let mut d2 = &self.d2 + &self.d2 * &n4 * 0.5;
        for i in 0..d0 {
            for j in 0..k2 {
                d2[(i, j)] += 0.5 * self.d1[i] * self.d2[(i, j)];
            }
        }
        // b = N_B + ½(N_A N_B + N_B N_D)
        let nd = TriBlocks {
            a: Matrix::zeros(0, 0),
            b: Matrix::zeros(0, d0 + k2),
            d1: self.d1.clone(),
            d2: self.d2.clone(),
            d4: n4,
        };
        let b = &self.b + (&na * &self.b + TriBlocks::row_times_d(&self.b, &nd)) * 0.5;
        TriBlocks { a, b, d1, d2, d4 }
    }

    fn map2(&self, o: &TriDir, f: impl Fn(f64, f64) -> f64 + Copy) -> TriDir {
        TriDir {
            a: self.a.map2(&o.a, f),
            b: self.b.zip_map(&o.b, f),
            d1: self.d1.zip_map(&o.d1, f),
            d2: self.d2.zip_map(&o.d2, f),
            d4: self.d4.map2(&o.d4, f),
        }
    }

    fn frob_sq(&self) -> f64 {
        self.a.frob_sq() + self.b.norm_squared() + self.d1.norm_squared() + self.d2.norm_squared() + self.d4.frob_sq()
    }
}

#[derive(Clone, Debug, PartialEq)]
enum DirRepr {
    Tri(TriDir),
    Kron(Box<LocalDirection>, Box<LocalDirection>),
}

/// An element `M` of the local (Lie sub-algebra) space matching a group kind.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalDirection {
    kind: GroupKind,
    repr: DirRepr,
}

/// Constant Hadamard weights turning extracted gradients into natural gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskC(pub LocalDirection);

impl LocalDirection {
    /// The zero direction.
    pub fn zeros(kind: &GroupKind) -> Result<Self> {
        let kind = kind.canonical()?;
        let repr = match &kind {
            GroupKind::Kron { left, right } => {
                DirRepr::Kron(Box::new(Self::zeros(left)?), Box::new(Self::zeros(right)?))
            }
            k => DirRepr::Tri(TriDir::zeros(&k.layout().expect("triangular"))),
        };
        Ok(LocalDirection { kind, repr })
    }

    /// Kronecker pair of directions (one per operand).
    pub fn kron(left: LocalDirection, right: LocalDirection) -> Self {
        LocalDirection {
            kind: GroupKind::Kron { left: Box::new(left.kind.clone()), right: Box::new(right.kind.clone()) },
            repr: DirRepr::Kron(Box::new(left), Box::new(right)),
        }
    }

    pub fn kind(&self) -> &GroupKind {
        &self.kind
    }

    /// Dense `M` (symmetric blocks mirrored). For Kronecker kinds this is
    /// `M_left ⊗ I + I ⊗ M_right`, the generator of `h`-updates to first order.
    pub fn densify(&self) -> Matrix {
        match &self.repr {
            DirRepr::Tri(t) => {
                let n = t.dense();
                if self.kind.layout().is_some_and(|l| l.lower) {
                    n.transpose()
                } else {
                    n
                }
            }
            DirRepr::Kron(l, r) => {
                let (pl, pr) = (l.kind.dim(), r.kind.dim());
                l.densify().kronecker(&Matrix::identity(pr, pr))
                    + Matrix::identity(pl, pl).kronecker(&r.densify())
            }
        }
    }

    /// Projection `κ(X)` of a symmetric matrix onto the nonzero pattern of
    /// the local space.
    pub fn kappa_extract(kind: &GroupKind, x: &Matrix) -> Result<Self> {
        let kind = kind.canonical()?;
        let p = kind.dim();
        if x.nrows() != p || x.ncols() != p {
            return Err(SngdError::Dimension(format!(
                "kappa_extract: expected {p}x{p}, got {}x{}",
                x.nrows(),
                x.ncols()
            )));
        }
        Self::kappa_with(&kind, |i, j| x[(i, j)])
    }

    /// `κ` driven by an entry accessor. Only entries in the rows/columns of
    /// [`GroupKind::dense_indices`] and the remaining diagonal are requested,
    /// always with `i ≤ j` or `j` a dense index; the accessor may assume
    /// symmetry.
    pub fn kappa_with(kind: &GroupKind, get: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let kind = kind.canonical()?;
        let l = kind.layout().ok_or_else(|| {
            SngdError::KindMismatch("kappa extraction is defined per Kronecker operand".into())
        })?;
        let (k1, d0, k2) = (l.k1, l.d0, l.k2);
        let off = k1 + d0;
        let t = TriDir {
            a: SymBlock::from_fn(k1, &get),
            b: Matrix::from_fn(k1, d0 + k2, |i, j| get(i, k1 + j)),
            d1: Vector::from_fn(d0, |i, _| get(k1 + i, k1 + i)),
            d2: Matrix::from_fn(d0, k2, |i, j| get(k1 + i, off + j)),
            d4: SymBlock::from_fn(k2, |i, j| get(off + i, off + j)),
        };
        Ok(LocalDirection { kind, repr: DirRepr::Tri(t) })
    }

    /// Hadamard product with the mask `C`.
    pub fn mask_scale(&self, c: &MaskC) -> Result<Self> {
        self.zip(&c.0, |a, b| a * b)
    }

    /// Entrywise combination of two directions of the same kind.
    pub fn zip(&self, other: &LocalDirection, f: impl Fn(f64, f64) -> f64 + Copy) -> Result<Self> {
        if self.kind != other.kind {
            return Err(mismatch(&self.kind, &other.kind));
        }
        let repr = match (&self.repr, &other.repr) {
            (DirRepr::Tri(a), DirRepr::Tri(b)) => DirRepr::Tri(a.map2(b, f)),
            (DirRepr::Kron(a, b), DirRepr::Kron(c, d)) => {
                DirRepr::Kron(Box::new(a.zip(c, f)?), Box::new(b.zip(d, f)?))
            }
            _ => return Err(mismatch(&self.kind, &other.kind)),
        };
        Ok(LocalDirection { kind: self.kind.clone(), repr })
    }

    /// `s · M`.
    pub fn scale(&self, s: f64) -> Self {
        self.zip(self, move |a, _| s * a).expect("same kind")
    }

    /// `M + N`.
    pub fn add(&self, other: &LocalDirection) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    /// Frobenius norm of the dense `M` (an upper bound on its spectral norm).
    pub fn frobenius(&self) -> f64 {
        match &self.repr {
            DirRepr::Tri(t) => t.frob_sq().sqrt(),
            DirRepr::Kron(l, r) => l.frobenius().max(r.frobenius()),
        }
    }

    /// Largest absolute stored entry.
    pub fn amax(&self) -> f64 {
        match &self.repr {
            DirRepr::Tri(t) => t
                .a
                .packed
                .iter()
                .chain(t.b.iter())
                .chain(t.d1.iter())
                .chain(t.d2.iter())
                .chain(t.d4.packed.iter())
                .fold(0.0_f64, |m, x| m.max(x.abs())),
            DirRepr::Kron(l, r) => l.amax().max(r.amax()),
        }
    }

    /// Operands of a Kronecker direction.
    pub fn kron_parts(&self) -> Option<(&LocalDirection, &LocalDirection)> {
        match &self.repr {
            DirRepr::Kron(l, r) => Some((l, r)),
            DirRepr::Tri(_) => None,
        }
    }

    /// Stored coordinates as a flat vector: packed `M_A`, `M_B` (column
    /// major), `M_D1`, `M_D2`, packed `M_D4`. Lower kinds list the entries of
    /// `Mᵀ`, i.e. the same coordinates.
    pub fn coords(&self) -> Vec<f64> {
        match &self.repr {
            DirRepr::Tri(t) => t
                .a
                .packed
                .iter()
                .chain(t.b.iter())
                .chain(t.d1.iter())
                .chain(t.d2.iter())
                .chain(t.d4.packed.iter())
                .copied()
                .collect(),
            DirRepr::Kron(l, r) => {
                let mut v = l.coords();
                v.extend(r.coords());
                v
            }
        }
    }

    /// Inverse of [`LocalDirection::coords`].
    pub fn from_coords(kind: &GroupKind, coords: &[f64]) -> Result<Self> {
        let mut d = Self::zeros(kind)?;
        let used = d.fill_coords(coords)?;
        if used != coords.len() {
            return Err(SngdError::Dimension(format!(
                "expected {used} coordinates, got {}",
                coords.len()
            )));
        }
        Ok(d)
    }

    fn fill_coords(&mut self, coords: &[f64]) -> Result<usize> {
        match &mut self.repr {
            DirRepr::Tri(t) => {
                let mut it = coords.iter().copied();
                let mut count = 0usize;
                let mut next = || {
                    count += 1;
                    it.next()
                };
                for v in t
                    .a
                    .packed
                    .iter_mut()
                    .chain(t.b.iter_mut())
                    .chain(t.d1.iter_mut())
                    .chain(t.d2.iter_mut())
                    .chain(t.d4.packed.iter_mut())
                {
                    *v = next().ok_or_else(|| SngdError::Dimension("too few coordinates".into()))?;
                }
                Ok(count)
            }
            DirRepr::Kron(l, r) => {
                let n = l.fill_coords(coords)?;
                Ok(n + r.fill_coords(&coords[n..])?)
            }
        }
    }

    /// Multiplicity of each coordinate in the dense `M` (2 for the mirrored
    /// off-diagonal entries of symmetric blocks, 1 otherwise), in the order
    /// of [`LocalDirection::coords`].
    pub fn coord_multiplicity(kind: &GroupKind) -> Result<Vec<f64>> {
        let kind = kind.canonical()?;
        let mut mask = Self::zeros(&kind)?;
        mask.map_blocks(&|sym_offdiag| if sym_offdiag { 2.0 } else { 1.0 });
        Ok(mask.coords())
    }

    /// Role of each coordinate (same order as [`LocalDirection::coords`]).
    pub fn coord_classes(kind: &GroupKind) -> Result<Vec<CoordClass>> {
        let kind = kind.canonical()?;
        let zero = Self::zeros(&kind)?;
        let mut out = Vec::new();
        zero.push_classes(&mut out);
        Ok(out)
    }

    fn push_classes(&self, out: &mut Vec<CoordClass>) {
        match &self.repr {
            DirRepr::Tri(t) => {
                let sym = |n: usize, out: &mut Vec<CoordClass>| {
                    for i in 0..n {
                        for j in i..n {
                            out.push(if i == j { CoordClass::Diagonal } else { CoordClass::SymmetricOffDiagonal });
                        }
                    }
                };
                sym(t.a.n, out);
                out.extend(std::iter::repeat_n(CoordClass::Asymmetric, t.b.len()));
                out.extend(std::iter::repeat_n(CoordClass::Diagonal, t.d1.len()));
                out.extend(std::iter::repeat_n(CoordClass::Asymmetric, t.d2.len()));
                sym(t.d4.n, out);
            }
            DirRepr::Kron(l, r) => {
                l.push_classes(out);
                r.push_classes(out);
            }
        }
    }

    fn map_blocks(&mut self, f: &dyn Fn(bool) -> f64) {
        match &mut self.repr {
            DirRepr::Tri(t) => {
                for s in [&mut t.a, &mut t.d4] {
                    let n = s.n;
                    for i in 0..n {
                        for j in i..n {
                            s.set(i, j, f(i != j));
                        }
                    }
                }
                t.b.fill(f(false));
                t.d1.fill(f(false));
                t.d2.fill(f(false));
            }
            DirRepr::Kron(l, r) => {
                l.map_blocks(f);
                r.map_blocks(f);
            }
        }
    }
}

/// Role of a local coordinate in the structured parameterization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CoordClass {
    /// An entry of a diagonal block or the diagonal of a symmetric block.
    Diagonal,
    /// An off-diagonal pair `M_ij = M_ji` of a symmetric block (one coordinate).
    SymmetricOffDiagonal,
    /// An entry of an asymmetric (off-diagonal) block.
    Asymmetric,
}

/// The mask `C`: ½ on the symmetric blocks and the diagonal, 1 on the
/// asymmetric blocks.
pub fn c_mask(kind: &GroupKind) -> Result<MaskC> {
    let mut m = LocalDirection::zeros(kind)?;
    set_mask(&mut m);
    Ok(MaskC(m))
}

fn set_mask(m: &mut LocalDirection) {
    match &mut m.repr {
        DirRepr::Tri(t) => {
            t.a.packed.fill(0.5);
            t.b.fill(1.0);
            t.d1.fill(0.5);
            t.d2.fill(1.0);
            t.d4.packed.fill(0.5);
        }
        DirRepr::Kron(l, r) => {
            set_mask(l);
            set_mask(r);
        }
    }
}

/// `C ⊙ M`.
pub fn mask_scale(c: &MaskC, m: &LocalDirection) -> Result<LocalDirection> {
    m.mask_scale(c)
}

// ---------------------------------------------------------------------------
// Random elements for property tests and check suites.
// ---------------------------------------------------------------------------

fn randn<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// A random, well-conditioned member of `kind`: dense blocks are
/// `I + 0.3·N(0,1)` (re-drawn until their determinant is positive and not
/// tiny), diagonals are `exp(0.3·N(0,1))` and off-diagonal blocks `0.5·N(0,1)`.
pub fn random_factor<R: Rng + ?Sized>(kind: &GroupKind, rng: &mut R) -> Result<StructuredFactor> {
    let kind = kind.canonical()?;
    if let GroupKind::Kron { left, right } = &kind {
        return Ok(StructuredFactor::kron(random_factor(left, rng)?, random_factor(right, rng)?));
    }
    let l = kind.layout().expect("triangular");
    let dense_block = |n: usize, rng: &mut R| loop {
        let scale = 0.3 / (n.max(1) as f64).sqrt();
        let m = Matrix::identity(n, n) + Matrix::from_fn(n, n, |_, _| scale * randn(rng));
        if n == 0 || m.determinant() > 0.2 {
            return m;
        }
    };
    let a = dense_block(l.k1, rng);
    let d4 = dense_block(l.k2, rng);
    let t = TriBlocks {
        a,
        b: Matrix::from_fn(l.k1, l.rest(), |_, _| 0.5 * randn(rng)),
        d1: Vector::from_fn(l.d0, |_, _| (0.3 * randn(rng)).exp()),
        d2: Matrix::from_fn(l.d0, l.k2, |_, _| 0.5 * randn(rng)),
        d4,
    };
    Ok(StructuredFactor { kind, repr: FactorRepr::Tri(t) })
}

/// A random direction whose stored entries are `scale · N(0,1)`.
pub fn random_direction<R: Rng + ?Sized>(kind: &GroupKind, rng: &mut R, scale: f64) -> Result<LocalDirection> {
    let kind = kind.canonical()?;
    let n = LocalDirection::zeros(&kind)?.coords().len();
    let coords: Vec<f64> = (0..n).map(|_| scale * randn(rng)).collect();
    LocalDirection::from_coords(&kind, &coords)
}

// ---------------------------------------------------------------------------
// JSON (de)serialization: {kind, p, k, k1, k2, blocks: {...}}.
// ---------------------------------------------------------------------------

/// JSON shape of a factor.
#[derive(Serialize, Deserialize, Clone, Debug)]
pub struct FactorJson {
    pub kind: String,
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k1: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k2: Option<usize>,
    pub blocks: Value,
}

fn mat_json(m: &Matrix) -> Value {
    json!(to_rows(m))
}

fn mat_from_json(v: &Value, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let missing = || SngdError::Config(format!("missing or malformed block {name}"));
    let rows_v: Vec<Vec<f64>> = serde_json::from_value(v.get(name).cloned().ok_or_else(missing)?)?;
    let m = if rows_v.is_empty() { Matrix::zeros(0, cols) } else { from_rows(&rows_v)? };
    if m.nrows() != rows || (rows > 0 && m.ncols() != cols) {
        return Err(SngdError::Dimension(format!("block {name} must be {rows}x{cols}")));
    }
    Ok(if rows == 0 { Matrix::zeros(0, cols) } else { m })
}

fn vec_from_json(v: &Value, name: &str, len: usize) -> Result<Vector> {
    let missing = || SngdError::Config(format!("missing or malformed block {name}"));
    let xs: Vec<f64> = serde_json::from_value(v.get(name).cloned().ok_or_else(missing)?)?;
    if xs.len() != len {
        return Err(SngdError::Dimension(format!("block {name} must have length {len}")));
    }
    Ok(Vector::from_vec(xs))
}

impl StructuredFactor {
    /// Serializable representation.
    pub fn to_json(&self) -> FactorJson {
        match (&self.kind, &self.repr) {
            (GroupKind::Kron { .. }, FactorRepr::Kron(l, r)) => FactorJson {
                kind: "kron".into(),
                p: self.dim(),
                k: None,
                k1: None,
                k2: None,
                blocks: json!({ "left": l.to_json(), "right": r.to_json() }),
            },
            (kind, FactorRepr::Tri(t)) => {
                let (k, k1, k2) = match kind {
                    GroupKind::BlockUpper { k, .. } | GroupKind::BlockLower { k, .. } => (Some(*k), None, None),
                    GroupKind::HeisUpper { k1, k2, .. } | GroupKind::HeisLower { k1, k2, .. } => {
                        (None, Some(*k1), Some(*k2))
                    }
                    _ => (None, None, None),
                };
                let d0 = t.d1.len();
                let b1 = t.b.columns(0, d0).into_owned();
                let b2 = t.b.columns(d0, t.b.ncols() - d0).into_owned();
                let blocks = match kind {
                    GroupKind::BlockUpper { .. } => json!({
                        "A": mat_json(&t.a), "B": mat_json(&t.b), "D": t.d1.as_slice(),
                    }),
                    GroupKind::BlockLower { .. } => json!({
                        "A": mat_json(&t.a.transpose()), "C": mat_json(&t.b.transpose()), "D": t.d1.as_slice(),
                    }),
                    GroupKind::HeisUpper { .. } => json!({
                        "A": mat_json(&t.a), "B1": mat_json(&b1), "B2": mat_json(&b2),
                        "D1": t.d1.as_slice(), "D2": mat_json(&t.d2), "D4": mat_json(&t.d4),
                    }),
                    _ => json!({
                        "A": mat_json(&t.a.transpose()), "C1": mat_json(&b1.transpose()),
                        "C2": mat_json(&b2.transpose()), "D1": t.d1.as_slice(),
                        "D3": mat_json(&t.d2.transpose()), "D4": mat_json(&t.d4.transpose()),
                    }),
                };
                FactorJson { kind: kind.name().into(), p: self.dim(), k, k1, k2, blocks }
            }
            _ => unreachable!("kind and representation always agree"),
        }
    }

    /// Parses and validates a serialized factor.
    pub fn from_json(j: &FactorJson) -> Result<Self> {
        let need = |o: Option<usize>, n: &str| o.ok_or_else(|| SngdError::Config(format!("missing field {n}")));
        let kind = match j.kind.as_str() {
            "kron" => {
                let side = |n: &str| -> Result<StructuredFactor> {
                    let v = j.blocks.get(n).cloned().ok_or_else(|| SngdError::Config(format!("missing {n}")))?;
                    StructuredFactor::from_json(&serde_json::from_value(v)?)
                };
                return Ok(StructuredFactor::kron(side("left")?, side("right")?));
            }
            "full" => GroupKind::Full { p: j.p },
            "diagonal" => GroupKind::Diagonal { p: j.p },
            "block-upper" => GroupKind::BlockUpper { p: j.p, k: need(j.k, "k")? },
            "block-lower" => GroupKind::BlockLower { p: j.p, k: need(j.k, "k")? },
            "heis-upper" => GroupKind::HeisUpper { p: j.p, k1: need(j.k1, "k1")?, k2: need(j.k2, "k2")? },
            "heis-lower" => GroupKind::HeisLower { p: j.p, k1: need(j.k1, "k1")?, k2: need(j.k2, "k2")? },
            other => return Err(SngdError::Config(format!("unknown group kind {other:?}"))),
        }
        .canonical()?;
        let l = kind.layout().expect("triangular");
        let (k1, d0, k2) = (l.k1, l.d0, l.k2);
        let bl = &j.blocks;
        let t = match &kind {
            GroupKind::BlockUpper { .. } => TriBlocks {
                a: mat_from_json(bl, "A", k1, k1)?,
                b: mat_from_json(bl, "B", k1, d0)?,
                d1: vec_from_json(bl, "D", d0)?,
                d2: Matrix::zeros(d0, 0),
                d4: Matrix::zeros(0, 0),
            },
            GroupKind::BlockLower { .. } => TriBlocks {
                a: mat_from_json(bl, "A", k1, k1)?.transpose(),
                b: mat_from_json(bl, "C", d0, k1)?.transpose(),
                d1: vec_from_json(bl, "D", d0)?,
                d2: Matrix::zeros(d0, 0),
                d4: Matrix::zeros(0, 0),
            },
            GroupKind::HeisUpper { .. } => {
                let mut b = Matrix::zeros(k1, d0 + k2);
                b.columns_mut(0, d0).copy_from(&mat_from_json(bl, "B1", k1, d0)?);
                b.columns_mut(d0, k2).copy_from(&mat_from_json(bl, "B2", k1, k2)?);
                TriBlocks {
                    a: mat_from_json(bl, "A", k1, k1)?,
                    b,
                    d1: vec_from_json(bl, "D1", d0)?,
                    d2: mat_from_json(bl, "D2", d0, k2)?,
                    d4: mat_from_json(bl, "D4", k2, k2)?,
                }
            }
            _ => {
                let mut b = Matrix::zeros(k1, d0 + k2);
                b.columns_mut(0, d0).copy_from(&mat_from_json(bl, "C1", d0, k1)?.transpose());
                b.columns_mut(d0, k2).copy_from(&mat_from_json(bl, "C2", k2, k1)?.transpose());
                TriBlocks {
                    a: mat_from_json(bl, "A", k1, k1)?.transpose(),
                    b,
                    d1: vec_from_json(bl, "D1", d0)?,
                    d2: mat_from_json(bl, "D3", k2, d0)?.transpose(),
                    d4: mat_from_json(bl, "D4", k2, k2)?.transpose(),
                }
            }
        };
        let f = StructuredFactor { kind, repr: FactorRepr::Tri(t) };
        match f.membership_check() {
            Membership::Pass => Ok(f),
            Membership::Fail(msg) => Err(SngdError::Config(format!("factor is not a group member: {msg}"))),
        }
    }
}

impl Serialize for StructuredFactor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for StructuredFactor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = FactorJson::deserialize(d)?;
        StructuredFactor::from_json(&j).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::h_map;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn all_kinds(p: usize) -> Vec<GroupKind> {
        let mut v = vec![
            GroupKind::Full { p },
            GroupKind::Diagonal { p },
            GroupKind::BlockUpper { p, k: p / 3 + 1 },
            GroupKind::BlockLower { p, k: p / 3 + 1 },
        ];
        if p >= 3 {
            v.push(GroupKind::HeisUpper { p, k1: 1, k2: p / 3 + 1 });
            v.push(GroupKind::HeisLower { p, k1: p / 3 + 1, k2: 1 });
        }
        v
    }

    fn rng() -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(7)
    }

    #[test]
    fn identity_examples() {
        let b = StructuredFactor::identity(&GroupKind::BlockUpper { p: 3, k: 1 }).unwrap();
        assert_eq!(b.densify(), Matrix::identity(3, 3));
        let j = b.to_json();
        assert_eq!(j.blocks["A"], json!([[1.0]]));
        assert_eq!(j.blocks["B"], json!([[0.0, 0.0]]));
        assert_eq!(j.blocks["D"], json!([1.0, 1.0]));
        let d = StructuredFactor::identity(&GroupKind::Diagonal { p: 4 }).unwrap();
        assert_eq!(d.to_json().blocks["D"], json!([1.0, 1.0, 1.0, 1.0]));
        let k = StructuredFactor::identity(&GroupKind::Kron {
            left: Box::new(GroupKind::Full { p: 2 }),
            right: Box::new(GroupKind::Full { p: 2 }),
        })
        .unwrap();
        let (l, r) = k.kron_parts().unwrap();
        assert_eq!(l.densify(), Matrix::identity(2, 2));
        assert_eq!(r.densify(), Matrix::identity(2, 2));
        assert_eq!(k.densify(), Matrix::identity(4, 4));
    }

    #[test]
    fn invalid_kinds_rejected() {
        assert!(GroupKind::BlockUpper { p: 3, k: 4 }.canonical().is_err());
        assert!(GroupKind::HeisUpper { p: 3, k1: 0, k2: 1 }.canonical().is_err());
        assert!(GroupKind::HeisUpper { p: 3, k1: 2, k2: 2 }.canonical().is_err());
        assert!(GroupKind::HeisLower { p: 3, k1: 1, k2: 2 }.canonical().is_ok());
    }

    #[test]
    fn multiply_examples() {
        let kind = GroupKind::BlockUpper { p: 2, k: 1 };
        let b = StructuredFactor::from_dense(&kind, &m(&[&[2., 1.], &[0., 3.]])).unwrap();
        let c = StructuredFactor::from_dense(&kind, &m(&[&[1., 2.], &[0., 0.5]])).unwrap();
        assert_eq!(b.multiply(&c).unwrap().densify(), m(&[&[2., 4.5], &[0., 1.5]]));
        let id = StructuredFactor::identity(&kind).unwrap();
        assert_eq!(b.multiply(&id).unwrap(), b);
        let other = StructuredFactor::identity(&GroupKind::BlockLower { p: 2, k: 1 }).unwrap();
        assert!(matches!(b.multiply(&other), Err(SngdError::KindMismatch(_))));
    }

    #[test]
    fn multiply_matches_dense_for_every_kind() {
        let mut r = rng();
        let mut kinds = all_kinds(8);
        kinds.push(GroupKind::HeisUpper { p: 6, k1: 2, k2: 2 });
        for kind in kinds {
            let b = random_factor(&kind, &mut r).unwrap();
            let c = random_factor(&kind, &mut r).unwrap();
            let bc = b.multiply(&c).unwrap();
            assert!(bc.membership_check().passed());
            let dense = b.densify() * c.densify();
            assert_abs_diff_eq!(bc.densify(), dense.clone(), epsilon = 1e-12);
            // The product keeps the sparsity pattern of the kind.
            assert!(StructuredFactor::from_dense(&kind, &bc.densify()).is_ok());
        }
    }

    #[test]
    fn inverse_examples() {
        let kind = GroupKind::BlockUpper { p: 2, k: 1 };
        let id = StructuredFactor::identity(&kind).unwrap();
        assert_eq!(id.inverse().unwrap(), id);
        let b = StructuredFactor::from_dense(&kind, &m(&[&[2., 1.], &[0., 3.]])).unwrap();
        assert_abs_diff_eq!(
            b.inverse().unwrap().densify(),
            m(&[&[0.5, -1.0 / 6.0], &[0., 1.0 / 3.0]]),
            epsilon = 1e-15
        );
        let mut r = rng();
        for kind in all_kinds(8).into_iter().chain([GroupKind::BlockLower { p: 8, k: 3 }]) {
            let b = random_factor(&kind, &mut r).unwrap();
            let inv = b.inverse().unwrap();
            let dense_inv = b.densify().try_inverse().unwrap();
            assert_abs_diff_eq!(inv.densify(), dense_inv, epsilon = 1e-10);
            let prod = b.multiply(&inv).unwrap();
            assert_abs_diff_eq!(prod.densify(), Matrix::identity(8, 8), epsilon = 1e-12);
        }
    }

    #[test]
    fn solves_examples() {
        let kind = GroupKind::BlockUpper { p: 2, k: 1 };
        let id = StructuredFactor::identity(&kind).unwrap();
        let x = Vector::from_vec(vec![5.0, 3.0]);
        assert_eq!(id.inv_apply(&x).unwrap(), x);
        let b = StructuredFactor::from_dense(&kind, &m(&[&[2., 1.], &[0., 3.]])).unwrap();
        assert_abs_diff_eq!(b.inv_apply(&x).unwrap(), Vector::from_vec(vec![2.0, 1.0]), epsilon = 1e-15);
        assert!(matches!(b.inv_apply(&Vector::zeros(3)), Err(SngdError::Dimension(_))));
    }

    #[test]
    fn solves_match_dense_for_every_kind() {
        let mut r = rng();
        let mut kinds = all_kinds(50);
        kinds.push(GroupKind::BlockUpper { p: 50, k: 5 });
        for kind in kinds {
            let b = random_factor(&kind, &mut r).unwrap();
            let bd = b.densify();
            let x = Vector::from_fn(50, |i, _| (i as f64 * 0.37).sin());
            let lu = bd.clone().lu();
            let tlu = bd.transpose().lu();
            assert_abs_diff_eq!(b.inv_apply(&x).unwrap(), lu.solve(&x).unwrap(), epsilon = 1e-10);
            assert_abs_diff_eq!(b.inv_transpose_apply(&x).unwrap(), tlu.solve(&x).unwrap(), epsilon = 1e-10);
            assert_abs_diff_eq!(b.apply(&x).unwrap(), &bd * &x, epsilon = 1e-12);
            assert_abs_diff_eq!(b.apply_t(&x).unwrap(), bd.transpose() * &x, epsilon = 1e-12);
            assert_abs_diff_eq!(b.log_abs_det(), bd.determinant().abs().ln(), epsilon = 1e-9);
        }
    }

    #[test]
    fn storage_is_linear_in_p() {
        for p in [10, 100, 1000] {
            let b = StructuredFactor::identity(&GroupKind::BlockUpper { p, k: 5 }).unwrap();
            assert_eq!(b.storage_len(), 25 + 5 * (p - 5) + (p - 5));
            assert!(b.storage_len() <= 6 * p);
        }
    }

    #[test]
    fn arrowhead_and_lowrank_examples() {
        let kind = GroupKind::BlockUpper { p: 2, k: 1 };
        let b = StructuredFactor::from_dense(&kind, &m(&[&[2., 1.], &[0., 3.]])).unwrap();
        assert_eq!(b.precision_dense(), m(&[&[5., 3.], &[3., 9.]]));
        let (uk, d) = b.covariance_lowrank().unwrap();
        assert_abs_diff_eq!(uk, m(&[&[-0.5], &[1.0 / 6.0]]), epsilon = 1e-15);
        assert_abs_diff_eq!(d, Vector::from_vec(vec![1.0 / 9.0]), epsilon = 1e-15);
        let mut sigma = &uk * uk.transpose();
        sigma[(1, 1)] += d[0];
        assert_abs_diff_eq!(sigma, m(&[&[0.25, -1.0 / 12.0], &[-1.0 / 12.0, 5.0 / 36.0]]), epsilon = 1e-15);

        let id = StructuredFactor::identity(&GroupKind::BlockUpper { p: 4, k: 2 }).unwrap();
        assert_eq!(id.precision_dense(), Matrix::identity(4, 4));
        let (uk, d) = id.covariance_lowrank().unwrap();
        assert_eq!(uk.rows(0, 2).into_owned(), -Matrix::identity(2, 2));
        assert_eq!(uk.rows(2, 2).into_owned(), Matrix::zeros(2, 2));
        assert_eq!(d, Vector::from_element(2, 1.0));

        let low = StructuredFactor::identity(&GroupKind::BlockLower { p: 4, k: 2 }).unwrap();
        assert!(matches!(low.covariance_lowrank(), Err(SngdError::KindMismatch(_))));
    }

    #[test]
    fn lowrank_inverts_precision() {
        let mut r = rng();
        for (p, k) in [(4, 1), (8, 3), (16, 5)] {
            let b = random_factor(&GroupKind::BlockUpper { p, k }, &mut r).unwrap();
            let s = b.precision_dense();
            let bd = b.densify();
            assert_eq!(s, &bd * bd.transpose());
            let (uk, d) = b.covariance_lowrank().unwrap();
            let mut sigma = &uk * uk.transpose();
            for i in 0..(p - k) {
                sigma[(k + i, k + i)] += d[i];
            }
            assert_abs_diff_eq!(sigma * s, Matrix::identity(p, p), epsilon = 1e-10);
        }
    }

    #[test]
    fn kappa_examples() {
        let kind = GroupKind::BlockUpper { p: 3, k: 1 };
        let x = m(&[&[4., 2., 3.], &[2., 5., 0.], &[3., 0., 6.]]);
        let k = LocalDirection::kappa_extract(&kind, &x).unwrap();
        assert_eq!(k.densify(), m(&[&[4., 2., 3.], &[0., 5., 0.], &[0., 0., 6.]]));
        assert_eq!(k.coords(), vec![4., 2., 3., 5., 6.]);
        let z = LocalDirection::kappa_extract(&kind, &Matrix::zeros(3, 3)).unwrap();
        assert_eq!(z, LocalDirection::zeros(&kind).unwrap());
        let dk = LocalDirection::kappa_extract(&GroupKind::Diagonal { p: 3 }, &x).unwrap();
        assert_eq!(dk.densify(), Matrix::from_diagonal(&Vector::from_vec(vec![4., 5., 6.])));
        assert!(matches!(
            LocalDirection::kappa_extract(&kind, &Matrix::zeros(2, 2)),
            Err(SngdError::Dimension(_))
        ));

        let c = c_mask(&kind).unwrap();
        assert_eq!(c.0.coords(), vec![0.5, 1.0, 1.0, 0.5, 0.5]);
        let masked = mask_scale(&c, &k).unwrap();
        assert_eq!(masked.coords(), vec![2., 2., 3., 2.5, 3.]);
    }

    #[test]
    fn kappa_copies_pattern_for_every_kind() {
        let mut r = rng();
        for kind in all_kinds(9) {
            let g = Matrix::from_fn(9, 9, |_, _| randn(&mut r));
            let x = &g + g.transpose();
            let pattern = random_factor(&kind, &mut r).unwrap().densify();
            let d = LocalDirection::kappa_extract(&kind, &x).unwrap().densify();
            for i in 0..9 {
                for j in 0..9 {
                    let expect = if pattern[(i, j)] != 0.0 { x[(i, j)] } else { 0.0 };
                    assert_eq!(d[(i, j)], expect, "{kind:?} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn heisenberg_mask_layout() {
        let kind = GroupKind::HeisUpper { p: 5, k1: 1, k2: 2 };
        let c = c_mask(&kind).unwrap().0.densify();
        let expect = m(&[
            &[0.5, 1., 1., 1., 1.],
            &[0., 0.5, 0., 1., 1.],
            &[0., 0., 0.5, 1., 1.],
            &[0., 0., 0., 0.5, 0.5],
            &[0., 0., 0., 0.5, 0.5],
        ]);
        assert_eq!(c, expect);
        let lower = c_mask(&GroupKind::HeisLower { p: 5, k1: 1, k2: 2 }).unwrap().0.densify();
        assert_eq!(lower, expect.transpose());
        let full = c_mask(&GroupKind::Full { p: 3 }).unwrap().0.densify();
        assert_eq!(full, Matrix::from_element(3, 3, 0.5));
    }

    #[test]
    fn apply_h_examples() {
        let mut r = rng();
        let kind = GroupKind::BlockUpper { p: 2, k: 1 };
        let b = random_factor(&kind, &mut r).unwrap();
        assert_eq!(b.apply_h(&LocalDirection::zeros(&kind).unwrap()).unwrap(), b);
        let id = StructuredFactor::identity(&kind).unwrap();
        let mdir = LocalDirection::from_coords(&kind, &[-1.0, 0.0, 0.0]).unwrap();
        let out = id.apply_h(&mdir).unwrap();
        assert_eq!(out.densify(), m(&[&[0.5, 0.0], &[0.0, 1.0]]));
    }

    #[test]
    fn apply_h_matches_dense_for_every_kind() {
        let mut r = rng();
        let mut kinds = all_kinds(12);
        kinds.push(GroupKind::BlockUpper { p: 12, k: 3 });
        for kind in kinds {
            let b = random_factor(&kind, &mut r).unwrap();
            let dir = random_direction(&kind, &mut r, 0.7).unwrap();
            let out = b.apply_h(&dir).unwrap();
            let dense = b.densify() * h_map(&dir.densify()).unwrap();
            assert_abs_diff_eq!(out.densify(), dense, epsilon = 1e-12);
            assert!(out.membership_check().passed());
        }
    }

    #[test]
    fn diagonal_positivity_is_preserved() {
        let kind = GroupKind::Diagonal { p: 5 };
        let id = StructuredFactor::identity(&kind).unwrap();
        let dir = LocalDirection::from_coords(&kind, &[-10., -1., 0., 1., 10.]).unwrap();
        let out = id.apply_h(&dir).unwrap();
        assert!(out.membership_check().passed());
        assert!(out.densify().diagonal().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn membership_examples() {
        let kind = GroupKind::BlockUpper { p: 3, k: 1 };
        assert_eq!(StructuredFactor::identity(&kind).unwrap().membership_check(), Membership::Pass);
        let bad = StructuredFactor::from_dense(&kind, &Matrix::from_diagonal(&Vector::from_vec(vec![1., 0., 1.])))
            .unwrap();
        assert_eq!(bad.membership_check(), Membership::Fail("singular diagonal".into()));
        let neg = StructuredFactor::from_dense(&kind, &Matrix::from_diagonal(&Vector::from_vec(vec![1., -2., 1.])))
            .unwrap();
        assert!(!neg.membership_check().passed());
    }

    #[test]
    fn kron_operations_match_dense() {
        let mut r = rng();
        let kind = GroupKind::Kron {
            left: Box::new(GroupKind::BlockUpper { p: 3, k: 1 }),
            right: Box::new(GroupKind::BlockLower { p: 4, k: 2 }),
        };
        let b = random_factor(&kind, &mut r).unwrap();
        let c = random_factor(&kind, &mut r).unwrap();
        let bd = b.densify();
        assert_abs_diff_eq!(b.multiply(&c).unwrap().densify(), &bd * c.densify(), epsilon = 1e-12);
        assert_abs_diff_eq!(b.inverse().unwrap().densify(), bd.clone().try_inverse().unwrap(), epsilon = 1e-10);
        let x = Vector::from_fn(12, |i, _| (i as f64).cos());
        assert_abs_diff_eq!(b.apply(&x).unwrap(), &bd * &x, epsilon = 1e-12);
        assert_abs_diff_eq!(b.apply_t(&x).unwrap(), bd.transpose() * &x, epsilon = 1e-12);
        assert_abs_diff_eq!(b.inv_apply(&x).unwrap(), bd.clone().lu().solve(&x).unwrap(), epsilon = 1e-10);
        assert_abs_diff_eq!(
            b.inv_transpose_apply(&x).unwrap(),
            bd.transpose().lu().solve(&x).unwrap(),
            epsilon = 1e-10
        );
        assert_abs_diff_eq!(b.log_abs_det(), bd.determinant().abs().ln(), epsilon = 1e-10);
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(b.entry(i, j), bd[(i, j)]);
            }
        }
        assert!(LocalDirection::kappa_extract(&kind, &Matrix::zeros(12, 12)).is_err());
        let (l, rr) = b.kron_parts().unwrap();
        let dir = LocalDirection::kron(
            random_direction(l.kind(), &mut r, 0.5).unwrap(),
            random_direction(rr.kind(), &mut r, 0.5).unwrap(),
        );
        let (dl, dr) = dir.kron_parts().unwrap();
        let expect = (l.densify() * h_map(&dl.densify()).unwrap()).kronecker(&(rr.densify() * h_map(&dr.densify()).unwrap()));
        assert_abs_diff_eq!(b.apply_h(&dir).unwrap().densify(), expect, epsilon = 1e-12);
    }

    #[test]
    fn entries_match_dense() {
        let mut r = rng();
        for kind in all_kinds(7) {
            let b = random_factor(&kind, &mut r).unwrap();
            let d = b.densify();
            for i in 0..7 {
                for j in 0..7 {
                    assert_eq!(b.entry(i, j), d[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn json_round_trip_for_every_kind() {
        let mut r = rng();
        let mut kinds = all_kinds(7);
        kinds.push(GroupKind::Kron {
            left: Box::new(GroupKind::Full { p: 2 }),
            right: Box::new(GroupKind::HeisUpper { p: 4, k1: 1, k2: 1 }),
        });
        for kind in kinds {
            let b = random_factor(&kind, &mut r).unwrap();
            let s = serde_json::to_string(&b).unwrap();
            let back: StructuredFactor = serde_json::from_str(&s).unwrap();
            assert_eq!(back, b, "{s}");
        }
        let bad = r#"{"kind":"block-upper","p":2,"k":1,"blocks":{"A":[[1.0]],"B":[[0.0]],"D":[-1.0]}}"#;
        assert!(serde_json::from_str::<StructuredFactor>(bad).is_err());
        let lower = r#"{"kind":"block-lower","p":2,"k":1,"blocks":{"A":[[2.0]],"C":[[1.0]],"D":[3.0]}}"#;
        let f: StructuredFactor = serde_json::from_str(lower).unwrap();
        assert_eq!(f.densify(), m(&[&[2., 0.], &[1., 3.]]));
    }

    #[test]
    fn coords_round_trip_and_multiplicity() {
        let kind = GroupKind::HeisLower { p: 6, k1: 2, k2: 2 };
        let mut r = rng();
        let d = random_direction(&kind, &mut r, 1.0).unwrap();
        assert_eq!(LocalDirection::from_coords(&kind, &d.coords()).unwrap(), d);
        let mult = LocalDirection::coord_multiplicity(&kind).unwrap();
        assert_eq!(mult.len(), d.coords().len());
        // ‖M‖_F² = Σ multiplicity · coord².
        let f2: f64 = d.coords().iter().zip(&mult).map(|(c, w)| w * c * c).sum();
        assert_abs_diff_eq!(f2, d.densify().norm_squared(), epsilon = 1e-12);
        assert_abs_diff_eq!(d.frobenius(), d.densify().norm(), epsilon = 1e-12);
        assert!(LocalDirection::from_coords(&kind, &[1.0]).is_err());
    }
}
