//! Structural constraints on the stacked combination matrix.
//!
//! A CV structure (lower-block-triangular, varying block-diagonal, or
//! constant block-diagonal) pins entries of `H` to constants or ties entries
//! to each other. Both constraint classes are linear on the column-major
//! vectorization: `Q^T vec(H) = b`, with every column of `Q` either a
//! standard basis vector `e_m` or a difference `e_m1 - e_m2`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SparseCol;
pub use crate::linalg::{unvec, vec_mat};
use crate::process::ProcessDims;

/// The three supported CV structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructureTag {
    /// Lower block triangular: CVs at stage k may use all measurements up to k.
    Lbt,
    /// Block diagonal with stage-varying blocks: CVs use only stage-k data.
    VaryingDiag,
    /// Block diagonal with one repeated block and shared setpoint.
    ConstDiag,
}

impl StructureTag {
    pub fn as_str(self) -> &'static str {
        match self {
            StructureTag::Lbt => "lbt",
            StructureTag::VaryingDiag => "varying_diag",
            StructureTag::ConstDiag => "const_diag",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lbt" => Ok(StructureTag::Lbt),
            "varying_diag" => Ok(StructureTag::VaryingDiag),
            "const_diag" => Ok(StructureTag::ConstDiag),
            other => Err(Error::Config(format!(
                "unknown structure {other:?}; expected lbt | varying_diag | const_diag"
            ))),
        }
    }

    pub fn all() -> [StructureTag; 3] {
        [StructureTag::Lbt, StructureTag::VaryingDiag, StructureTag::ConstDiag]
    }
}

/// Shape bookkeeping for the stacked combination matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CvDims {
    pub n_u: usize,
    pub n_y: usize,
    pub n_stages: usize,
}

impl CvDims {
    pub fn from_process(dims: &ProcessDims) -> Self {
        CvDims {
            n_u: dims.n_u,
            n_y: dims.n_y,
            n_stages: dims.n_stages,
        }
    }

    /// Rows of `H`: one CV block per stage.
    pub fn rows(&self) -> usize {
        self.n_u * self.n_stages
    }

    /// Columns of `H`: setpoint column plus one extended-measurement block per stage.
    pub fn cols(&self) -> usize {
        (self.n_y + self.n_u) * self.n_stages + 1
    }

    pub fn block_width(&self) -> usize {
        self.n_y + self.n_u
    }

    /// First column of measurement block `j`.
    pub fn block_col(&self, j: usize) -> usize {
        1 + j * self.block_width()
    }

    pub fn vec_len(&self) -> usize {
        self.rows() * self.cols()
    }

    /// Column-major index of entry `(alpha, beta)` (0-based).
    pub fn vec_index(&self, alpha: usize, beta: usize) -> usize {
        beta * self.rows() + alpha
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintKind {
    Specified,
    Repetitive,
}

/// A consistent, non-redundant set of specified-element and
/// repetitive-element constraints on an `mat_rows x mat_cols` matrix.
///
/// Columns are unit-sparse by construction and kept linearly independent: a
/// union-find over entries rejects duplicate pins, contradictory pins, and
/// ties that would close a cycle, so `rank(Q)` always equals the number of
/// stored constraints.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    mat_rows: usize,
    mat_cols: usize,
    cols: Vec<SparseCol>,
    b_vals: Vec<f64>,
    kinds: Vec<ConstraintKind>,
    parent: Vec<usize>,
    pinned: Vec<Option<f64>>,
}

impl ConstraintSet {
    pub fn new(mat_rows: usize, mat_cols: usize) -> Self {
        let n = mat_rows * mat_cols;
        ConstraintSet {
            mat_rows,
            mat_cols,
            cols: Vec::new(),
            b_vals: Vec::new(),
            kinds: Vec::new(),
            parent: (0..n).collect(),
            pinned: vec![None; n],
        }
    }

    pub fn matrix_shape(&self) -> (usize, usize) {
        (self.mat_rows, self.mat_cols)
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn vec_len(&self) -> usize {
        self.mat_rows * self.mat_cols
    }

    /// Number of degrees of freedom left by the constraints.
    pub fn nullity(&self) -> usize {
        self.vec_len() - self.len()
    }

    fn find(&self, mut m: usize) -> usize {
        while self.parent[m] != m {
            m = self.parent[m];
        }
        m
    }

    fn index_of(&self, alpha: usize, beta: usize) -> Result<usize> {
        if alpha >= self.mat_rows || beta >= self.mat_cols {
            return Err(Error::Dimension(format!(
                "entry ({alpha}, {beta}) out of range for {}x{} matrix",
                self.mat_rows, self.mat_cols
            )));
        }
        Ok(beta * self.mat_rows + alpha)
    }

    /// Pins entry `(alpha, beta)` (0-based) to `value`.
    pub fn specify(&mut self, alpha: usize, beta: usize, value: f64) -> Result<()> {
        let m = self.index_of(alpha, beta)?;
        let root = self.find(m);
        if let Some(existing) = self.pinned[root] {
            return Err(Error::Infeasible(format!(
                "entry ({alpha}, {beta}) already constrained to {existing} (new value {value})"
            )));
        }
        self.pinned[root] = Some(value);
        self.cols.push(vec![(m, 1.0)]);
        self.b_vals.push(value);
        self.kinds.push(ConstraintKind::Specified);
        Ok(())
    }

    /// Ties entry `a` to entry `b` (both 0-based `(alpha, beta)` pairs).
    pub fn tie(&mut self, a: (usize, usize), b: (usize, usize)) -> Result<()> {
        let m1 = self.index_of(a.0, a.1)?;
        let m2 = self.index_of(b.0, b.1)?;
        if m1 == m2 {
            return Err(Error::Infeasible(format!("cannot tie entry {a:?} to itself")));
        }
        let r1 = self.find(m1);
        let r2 = self.find(m2);
        if r1 == r2 {
            return Err(Error::Infeasible(format!(
                "tie {a:?} = {b:?} is redundant (already connected)"
            )));
        }
        if self.pinned[r1].is_some() && self.pinned[r2].is_some() {
            return Err(Error::Infeasible(format!(
                "tie {a:?} = {b:?} links two pinned entries"
            )));
        }
        // Keep the pinned root (if any) as the class root.
        if self.pinned[r2].is_some() {
            self.parent[r1] = r2;
        } else {
            self.parent[r2] = r1;
        }
        self.cols.push(vec![(m1, 1.0), (m2, -1.0)]);
        self.b_vals.push(0.0);
        self.kinds.push(ConstraintKind::Repetitive);
        Ok(())
    }

    pub fn q_columns(&self) -> &[SparseCol] {
        &self.cols
    }

    pub fn b(&self) -> DVector<f64> {
        DVector::from_vec(self.b_vals.clone())
    }

    pub fn kinds(&self) -> &[ConstraintKind] {
        &self.kinds
    }

    /// `||Q^T vec(H) - b||_inf`.
    pub fn residual(&self, h: &DMatrix<f64>) -> Result<f64> {
        if h.nrows() != self.mat_rows || h.ncols() != self.mat_cols {
            return Err(Error::Dimension("residual: matrix shape mismatch".into()));
        }
        let v = vec_mat(h);
        let mut worst = 0.0f64;
        for (col, &b) in self.cols.iter().zip(&self.b_vals) {
            let dot: f64 = col.iter().map(|&(m, val)| val * v[m]).sum();
            worst = worst.max((dot - b).abs());
        }
        Ok(worst)
    }

    pub fn is_satisfied(&self, h: &DMatrix<f64>, tol: f64) -> Result<bool> {
        Ok(self.residual(h)? <= tol)
    }

    /// A particular solution and a basis of the constraint null space.
    ///
    /// Classes of tied entries are disjoint, so the particular solution sets
    /// pinned classes to their value and the basis holds one indicator column
    /// per free class.
    pub fn particular_and_nullspace(&self) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.vec_len();
        let mut particular = DVector::zeros(n);
        let mut class_members: Vec<Vec<usize>> = vec![Vec::new(); n];
        for m in 0..n {
            class_members[self.find(m)].push(m);
        }
        let mut free_classes = Vec::new();
        for root in 0..n {
            if class_members[root].is_empty() {
                continue;
            }
            match self.pinned[root] {
                Some(v) => {
                    for &m in &class_members[root] {
                        particular[m] = v;
                    }
                }
                None => free_classes.push(root),
            }
        }
        let mut z = DMatrix::zeros(n, free_classes.len());
        for (j, &root) in free_classes.iter().enumerate() {
            for &m in &class_members[root] {
                z[(m, j)] = 1.0;
            }
        }
        (particular, z)
    }

    /// Orthogonal projection of `v` onto the affine set `Q^T v = b`:
    /// pinned classes take their value, free classes their mean.
    pub fn project_feasible(&self, v: &DVector<f64>) -> DVector<f64> {
        let n = self.vec_len();
        let mut sums = vec![0.0f64; n];
        let mut counts = vec![0usize; n];
        for m in 0..n {
            let r = self.find(m);
            sums[r] += v[m];
            counts[r] += 1;
        }
        let mut out = DVector::zeros(n);
        for m in 0..n {
            let r = self.find(m);
            out[m] = match self.pinned[r] {
                Some(val) => val,
                None => sums[r] / counts[r] as f64,
            };
        }
        out
    }

    /// Constraint triplets `(vec_index, constraint, value)`, for CSV dumps.
    pub fn to_triplets(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (j, col) in self.cols.iter().enumerate() {
            for &(m, val) in col {
                out.push((m, j, val));
            }
        }
        out
    }
}

/// Compiles a structure tag into its constraint set.
///
/// `fix_huk` additionally pins every `H_{u,k}(k)` block to `-I`, which keeps
/// the stage feedback solvable for `u(k)`; under [`StructureTag::ConstDiag`]
/// only the representative block 0 is pinned since repetition ties propagate
/// the values.
pub fn compile_structure(tag: StructureTag, dims: &CvDims, fix_huk: bool) -> ConstraintSet {
    let mut set = ConstraintSet::new(dims.rows(), dims.cols());
    let bw = dims.block_width();
    let l = dims.n_stages;

    let zero_block = |set: &mut ConstraintSet, k: usize, j: usize| {
        for r in 0..dims.n_u {
            for c in 0..bw {
                set.specify(k * dims.n_u + r, dims.block_col(j) + c, 0.0)
                    .expect("structure compilation pins each entry once");
            }
        }
    };

    match tag {
        StructureTag::Lbt => {
            for k in 0..l {
                for j in (k + 1)..l {
                    zero_block(&mut set, k, j);
                }
            }
        }
        StructureTag::VaryingDiag | StructureTag::ConstDiag => {
            for k in 0..l {
                for j in 0..l {
                    if j != k {
                        zero_block(&mut set, k, j);
                    }
                }
            }
        }
    }

    if tag == StructureTag::ConstDiag {
        // Star ties anchored at stage 0: every later diagonal block and
        // setpoint block repeats block 0.
        for k in 1..l {
            for r in 0..dims.n_u {
                set.tie((k * dims.n_u + r, 0), (r, 0))
                    .expect("setpoint tie is fresh");
                for c in 0..bw {
                    set.tie(
                        (k * dims.n_u + r, dims.block_col(k) + c),
                        (r, dims.block_col(0) + c),
                    )
                    .expect("diagonal-block tie is fresh");
                }
            }
        }
    }

    if fix_huk {
        let last_fixed_stage = if tag == StructureTag::ConstDiag { 1 } else { l };
        for k in 0..last_fixed_stage {
            for r in 0..dims.n_u {
                for c in 0..dims.n_u {
                    let value = if r == c { -1.0 } else { 0.0 };
                    set.specify(k * dims.n_u + r, dims.block_col(k) + dims.n_y + c, value)
                        .expect("input-gain pin is fresh");
                }
            }
        }
    }

    set
}

/// Direct declarative check that `h` has the zero pattern, repetition ties,
/// and (optionally) the `-I` input gains of a structure.
pub fn matches_structure(
    h: &DMatrix<f64>,
    dims: &CvDims,
    tag: StructureTag,
    fix_huk: bool,
    tol: f64,
) -> bool {
    let bw = dims.block_width();
    let l = dims.n_stages;
    let block_is_zero = |k: usize, j: usize| -> bool {
        for r in 0..dims.n_u {
            for c in 0..bw {
                if h[(k * dims.n_u + r, dims.block_col(j) + c)].abs() > tol {
                    return false;
                }
            }
        }
        true
    };
    for k in 0..l {
        for j in 0..l {
            let must_be_zero = match tag {
                StructureTag::Lbt => j > k,
                StructureTag::VaryingDiag | StructureTag::ConstDiag => j != k,
            };
            if must_be_zero && !block_is_zero(k, j) {
                return false;
            }
        }
    }
    if tag == StructureTag::ConstDiag {
        for k in 1..l {
            for r in 0..dims.n_u {
                let d = h[(k * dims.n_u + r, 0)] - h[(r, 0)];
                if d.abs() > tol {
                    return false;
                }
                for c in 0..bw {
                    let d = h[(k * dims.n_u + r, dims.block_col(k) + c)]
                        - h[(r, dims.block_col(0) + c)];
                    if d.abs() > tol {
                        return false;
                    }
                }
            }
        }
    }
    if fix_huk {
        for k in 0..l {
            for r in 0..dims.n_u {
                for c in 0..dims.n_u {
                    let want = if r == c { -1.0 } else { 0.0 };
                    if (h[(k * dims.n_u + r, dims.block_col(k) + dims.n_y + c)] - want).abs() > tol
                    {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// A stacked combination matrix together with its dimensions and structure tag.
#[derive(Debug, Clone)]
pub struct CombinationMatrix {
    pub matrix: DMatrix<f64>,
    pub dims: CvDims,
    pub tag: Option<StructureTag>,
}

/// The block partition of one stage row used by the input-recovery law.
#[derive(Debug, Clone)]
pub struct FeedbackBlocks {
    /// Stored setpoint block (column 0 holds `-c_s(k)`).
    pub setpoint_stored: DVector<f64>,
    /// `H_{[0:k-1]}(k)`: gains on the measurement history before stage k.
    pub history: DMatrix<f64>,
    /// `H_{y,k}(k)`: gains on the current measurement.
    pub h_y: DMatrix<f64>,
    /// `H_{u,k}(k)`: gains on the current input; must be invertible.
    pub h_u: DMatrix<f64>,
    /// Condition number estimate of `h_u`.
    pub h_u_condition: f64,
}

impl CombinationMatrix {
    pub fn new(matrix: DMatrix<f64>, dims: CvDims, tag: Option<StructureTag>) -> Result<Self> {
        if matrix.nrows() != dims.rows() || matrix.ncols() != dims.cols() {
            return Err(Error::Dimension(format!(
                "combination matrix is {}x{}, expected {}x{}",
                matrix.nrows(),
                matrix.ncols(),
                dims.rows(),
                dims.cols()
            )));
        }
        Ok(CombinationMatrix { matrix, dims, tag })
    }

    pub fn from_vec(v: &DVector<f64>, dims: CvDims, tag: Option<StructureTag>) -> Result<Self> {
        let m = unvec(v, dims.rows(), dims.cols())?;
        CombinationMatrix::new(m, dims, tag)
    }

    pub fn to_vec(&self) -> DVector<f64> {
        vec_mat(&self.matrix)
    }

    /// Block `H_j(k)` (gains of stage-k CVs on stage-j measurements).
    pub fn block(&self, k: usize, j: usize) -> DMatrix<f64> {
        self.matrix
            .view(
                (k * self.dims.n_u, self.dims.block_col(j)),
                (self.dims.n_u, self.dims.block_width()),
            )
            .into_owned()
    }

    /// Partition of stage row `k` for the input-recovery law.
    pub fn feedback_blocks(&self, k: usize) -> Result<FeedbackBlocks> {
        let d = &self.dims;
        if k >= d.n_stages {
            return Err(Error::Dimension(format!(
                "stage {k} out of range for L = {}",
                d.n_stages
            )));
        }
        let row0 = k * d.n_u;
        let setpoint_stored = self.matrix.view((row0, 0), (d.n_u, 1)).column(0).into_owned();
        let history = self
            .matrix
            .view((row0, 1), (d.n_u, k * d.block_width()))
            .into_owned();
        let h_y = self
            .matrix
            .view((row0, d.block_col(k)), (d.n_u, d.n_y))
            .into_owned();
        let h_u = self
            .matrix
            .view((row0, d.block_col(k) + d.n_y), (d.n_u, d.n_u))
            .into_owned();
        let svd = h_u.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if smin <= 1e-12 * smax.max(1.0) {
            return Err(Error::Singular {
                context: format!("H_u,k at stage {k}"),
                cond: if smin > 0.0 { smax / smin } else { f64::INFINITY },
            });
        }
        Ok(FeedbackBlocks {
            setpoint_stored,
            history,
            h_y,
            h_u_condition: smax / smin,
            h_u,
        })
    }
}
