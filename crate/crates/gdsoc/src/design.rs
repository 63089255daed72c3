//! CV design: the scenario-averaged quadratic loss in vectorized form and the
//! three solvers over a structural constraint set — the exact nonconvex
//! problem (gdSOC), its analytical shortcut (gdSOCsc), and the linearized
//! local baseline (ldSOC).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{add_trace_ridge, solve_kkt, sym_sqrt_floored};
use crate::process::BatchProcess;
use crate::scenario::Scenario;
use crate::structure::{CombinationMatrix, ConstraintSet, CvDims, StructureTag};
use crate::trajopt::{
    complete_trajectory, optimize_trajectory, OptimalTrajectory, OptimizeOptions,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignMethod {
    Ldsoc,
    Gdsoc,
    Gdsocsc,
}

impl DesignMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            DesignMethod::Ldsoc => "ldsoc",
            DesignMethod::Gdsoc => "gdsoc",
            DesignMethod::Gdsocsc => "gdsocsc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ldsoc" => Ok(DesignMethod::Ldsoc),
            "gdsoc" => Ok(DesignMethod::Gdsoc),
            "gdsocsc" => Ok(DesignMethod::Gdsocsc),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected ldsoc | gdsoc | gdsocsc"
            ))),
        }
    }
}

/// How the CV-space Hessian is treated when evaluating a quadratic loss.
#[derive(Debug, Clone, Copy)]
pub enum JccApprox<'a> {
    /// Recompute `(H G)^{-T} J_uu (H G)^{-1}` from the given `H`.
    Exact,
    /// Keep the scenario input-space Hessian but freeze the gain inverse at
    /// the nominal normalization: `Jcc ~ V^T J_uu V`.
    Gentler(&'a DMatrix<f64>),
    /// Freeze the whole CV-space Hessian at identity.
    FrozenIdentity,
}

fn lu_with_condition_check(
    m: &DMatrix<f64>,
    context: &str,
) -> Result<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>> {
    let lu = m.clone().lu();
    let n = m.nrows();
    let mut min_piv = f64::INFINITY;
    let mut max_piv = 0.0f64;
    for i in 0..n {
        let p = lu.u()[(i, i)].abs();
        min_piv = min_piv.min(p);
        max_piv = max_piv.max(p);
    }
    if !(min_piv > 1e-12 * max_piv.max(1e-300)) {
        let svd = m.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        return Err(Error::Singular {
            context: context.to_string(),
            cond: if smin > 0.0 { smax / smin } else { f64::INFINITY },
        });
    }
    Ok(lu)
}

/// Disturbance and noise loss contributions of one scenario under `h`.
///
/// The disturbance part is the quadratic form of the CV deviation `H xi*` in
/// the CV-space Hessian; the noise part is the trace term over the stacked
/// noise covariance diagonal.
pub fn loss_terms(
    h: &CombinationMatrix,
    traj: &OptimalTrajectory,
    w2_diag: &DVector<f64>,
) -> Result<(f64, f64)> {
    let m = &h.matrix * &traj.g_xi;
    let lu = lu_with_condition_check(&m, "loss_terms: H * G_xi")?;
    let c_dev = &h.matrix * &traj.xi_opt;
    let w = lu
        .solve(&c_dev)
        .ok_or_else(|| Error::Numerical("loss_terms: singular solve".into()))?;
    let l_d = 0.5 * (w.transpose() * &traj.j_uu * &w)[(0, 0)];

    // tr(W^2 H^T Jcc H) via T = (HG)^{-1} H.
    let t = lu
        .solve(&h.matrix)
        .ok_or_else(|| Error::Numerical("loss_terms: singular solve".into()))?;
    let jt = &traj.j_uu * &t;
    let mut l_n = 0.0;
    for j in 0..t.ncols() {
        if w2_diag[j] == 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for r in 0..t.nrows() {
            acc += t[(r, j)] * jt[(r, j)];
        }
        l_n += w2_diag[j] * acc;
    }
    Ok((l_d, 0.5 * l_n))
}

/// Mean of `L^d + L^n` over a trajectory set.
pub fn average_loss(
    h: &CombinationMatrix,
    trajectories: &[OptimalTrajectory],
    w2_diag: &DVector<f64>,
) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::Config("average_loss: empty trajectory set".into()));
    }
    let mut total = 0.0;
    for traj in trajectories {
        let (l_d, l_n) = loss_terms(h, traj, w2_diag)?;
        total += l_d + l_n;
    }
    Ok(total / trajectories.len() as f64)
}

/// Quadratic loss of one jointly sampled `(d, n)` realization:
/// `1/2 (H(xi* + n))^T Jcc (H(xi* + n))` under the chosen `Jcc` treatment.
pub fn quadratic_loss(
    h: &CombinationMatrix,
    traj: &OptimalTrajectory,
    noise_stacked: &DVector<f64>,
    approx: JccApprox,
) -> Result<f64> {
    let c = &h.matrix * (&traj.xi_opt + noise_stacked);
    match approx {
        JccApprox::Exact => {
            let m = &h.matrix * &traj.g_xi;
            let lu = lu_with_condition_check(&m, "quadratic_loss: H * G_xi")?;
            let w = lu
                .solve(&c)
                .ok_or_else(|| Error::Numerical("quadratic_loss: singular solve".into()))?;
            Ok(0.5 * (w.transpose() * &traj.j_uu * &w)[(0, 0)])
        }
        JccApprox::Gentler(v_bar) => {
            let vc = v_bar * &c;
            Ok(0.5 * (vc.transpose() * &traj.j_uu * &vc)[(0, 0)])
        }
        JccApprox::FrozenIdentity => Ok(0.5 * c.norm_squared()),
    }
}

/// Per-scenario data and the assembled matrices of the vectorized shortcut
/// objective.
#[derive(Debug, Clone)]
pub struct LossModel {
    pub dims: CvDims,
    pub scenario_ids: Vec<usize>,
    pub xi: Vec<DVector<f64>>,
    pub j_uu: Vec<DMatrix<f64>>,
    /// `V = J_uu(nominal)^{-1/2}`.
    pub v_bar: DMatrix<f64>,
    pub w2_diag: DVector<f64>,
    /// Stacked data matrix; row block i is `xi_i^T (x) (J_uu_i^{1/2} V)`.
    pub xi_tilde: DMatrix<f64>,
    /// `V^T (sum_i J_uu_i) V`, the input-space factor of the noise term.
    pub s_noise: DMatrix<f64>,
}

impl LossModel {
    /// Builds the model from the nominal reference and the design trajectories.
    pub fn from_trajectories(
        nominal: &OptimalTrajectory,
        design: &[OptimalTrajectory],
        w2_diag: DVector<f64>,
        dims: CvDims,
    ) -> Result<Self> {
        if design.is_empty() {
            return Err(Error::Config("loss model needs at least one scenario".into()));
        }
        let n_rows = dims.rows();
        let xi_len = dims.cols();
        if w2_diag.len() != xi_len {
            return Err(Error::Dimension(format!(
                "noise diagonal length {} != xi length {}",
                w2_diag.len(),
                xi_len
            )));
        }
        let nominal_sqrt = sym_sqrt_floored(&nominal.j_uu, 1e-10)?;
        let v_bar = nominal_sqrt.inv_sqrt;

        let n = design.len();
        let mut xi_tilde = DMatrix::zeros(n * n_rows, n_rows * xi_len);
        let mut xi = Vec::with_capacity(n);
        let mut j_uu = Vec::with_capacity(n);
        let mut j_sum = DMatrix::zeros(n_rows, n_rows);
        let mut ids = Vec::with_capacity(n);
        for (i, traj) in design.iter().enumerate() {
            let sqrt_i = sym_sqrt_floored(&traj.j_uu, 1e-10)?;
            let block = &sqrt_i.sqrt * &v_bar; // J_i^{1/2} V
            for col in 0..xi_len {
                let scale = traj.xi_opt[col];
                if scale == 0.0 {
                    continue;
                }
                xi_tilde
                    .view_mut((i * n_rows, col * n_rows), (n_rows, n_rows))
                    .copy_from(&(&block * scale));
            }
            j_sum += &traj.j_uu;
            xi.push(traj.xi_opt.clone());
            j_uu.push(traj.j_uu.clone());
            ids.push(traj.scenario_id);
        }
        let s_noise = &v_bar.transpose() * &j_sum * &v_bar;
        Ok(LossModel {
            dims,
            scenario_ids: ids,
            xi,
            j_uu,
            v_bar,
            w2_diag,
            xi_tilde,
            s_noise,
        })
    }

    pub fn n_scenarios(&self) -> usize {
        self.xi.len()
    }

    /// Shortcut objective `1/(2N) (||XiTilde v||^2 + v^T (W2 (x) S) v)`.
    pub fn shortcut_objective(&self, v: &DVector<f64>) -> f64 {
        let data = (&self.xi_tilde * v).norm_squared();
        let n_rows = self.dims.rows();
        let mut noise = 0.0;
        for j in 0..self.dims.cols() {
            if self.w2_diag[j] == 0.0 {
                continue;
            }
            let vj = v.rows(j * n_rows, n_rows);
            noise += self.w2_diag[j] * (vj.transpose() * &self.s_noise * vj)[(0, 0)];
        }
        (data + noise) / (2.0 * self.n_scenarios() as f64)
    }

    /// Normal matrix `A = XiTilde^T XiTilde + W2 (x) S`, assembled per
    /// scenario through the Kronecker identity rather than a large product.
    pub fn normal_matrix(&self) -> Result<DMatrix<f64>> {
        let n_rows = self.dims.rows();
        let xi_len = self.dims.cols();
        let dim = n_rows * xi_len;
        let mut a = DMatrix::zeros(dim, dim);
        for i in 0..self.n_scenarios() {
            let p = &self.v_bar.transpose() * &self.j_uu[i] * &self.v_bar;
            let xi_i = &self.xi[i];
            for bc in 0..xi_len {
                let xc = xi_i[bc];
                if xc == 0.0 {
                    continue;
                }
                for br in 0..xi_len {
                    let w = xi_i[br] * xc;
                    if w == 0.0 {
                        continue;
                    }
                    let mut view = a.view_mut((br * n_rows, bc * n_rows), (n_rows, n_rows));
                    for c in 0..n_rows {
                        for r in 0..n_rows {
                            view[(r, c)] += w * p[(r, c)];
                        }
                    }
                }
            }
        }
        for j in 0..xi_len {
            if self.w2_diag[j] == 0.0 {
                continue;
            }
            let mut view = a.view_mut((j * n_rows, j * n_rows), (n_rows, n_rows));
            for c in 0..n_rows {
                for r in 0..n_rows {
                    view[(r, c)] += self.w2_diag[j] * self.s_noise[(r, c)];
                }
            }
        }
        Ok(a)
    }

    /// Materialized noise weighting factor `(W2 (x) S)^{1/2}`, block diagonal
    /// with blocks `sqrt(W2_jj) S^{1/2}`.
    pub fn w_breve(&self) -> Result<DMatrix<f64>> {
        let s_sqrt = sym_sqrt_floored(&self.s_noise, 1e-14)?.sqrt;
        let n_rows = self.dims.rows();
        let dim = n_rows * self.dims.cols();
        let mut w = DMatrix::zeros(dim, dim);
        for j in 0..self.dims.cols() {
            if self.w2_diag[j] == 0.0 {
                continue;
            }
            let scale = self.w2_diag[j].sqrt();
            w.view_mut((j * n_rows, j * n_rows), (n_rows, n_rows))
                .copy_from(&(&s_sqrt * scale));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub ridge: f64,
    /// First-order stationarity residual of the KKT or null-space solve.
    pub stationarity: f64,
    pub notes: Vec<String>,
}

/// A designed combination matrix with its solver provenance.
#[derive(Debug, Clone)]
pub struct DesignResult {
    pub h: CombinationMatrix,
    pub method: DesignMethod,
    pub objective: f64,
    pub constraint_residual: f64,
    pub diagnostics: SolverDiagnostics,
}

const CONSTRAINT_RESIDUAL_LIMIT: f64 = 1e-8;

fn check_constraint_residual(residual: f64) -> Result<()> {
    if residual > CONSTRAINT_RESIDUAL_LIMIT {
        return Err(Error::Numerical(format!(
            "design constraint residual {residual:.3e} exceeds {CONSTRAINT_RESIDUAL_LIMIT:.0e}"
        )));
    }
    Ok(())
}

/// Analytical shortcut solve: one KKT factorization of the ridged normal
/// matrix against the structural constraints.
pub fn solve_gdsoc_shortcut(
    model: &LossModel,
    constraints: &ConstraintSet,
    tag: Option<StructureTag>,
) -> Result<DesignResult> {
    solve_quadratic_design(model, constraints, tag, DesignMethod::Gdsocsc)
}

fn solve_quadratic_design(
    model: &LossModel,
    constraints: &ConstraintSet,
    tag: Option<StructureTag>,
    method: DesignMethod,
) -> Result<DesignResult> {
    let normal = model.normal_matrix()?;
    solve_quadratic_with_normal(model, &normal, constraints, tag, method)
}

/// Shortcut solve reusing a precomputed (un-ridged) normal matrix; the grid
/// runner shares one normal matrix across all structures.
pub fn solve_shortcut_with_normal(
    model: &LossModel,
    normal: &DMatrix<f64>,
    constraints: &ConstraintSet,
    tag: Option<StructureTag>,
) -> Result<DesignResult> {
    solve_quadratic_with_normal(model, normal, constraints, tag, DesignMethod::Gdsocsc)
}

fn solve_quadratic_with_normal(
    model: &LossModel,
    normal: &DMatrix<f64>,
    constraints: &ConstraintSet,
    tag: Option<StructureTag>,
    method: DesignMethod,
) -> Result<DesignResult> {
    if constraints.is_empty() {
        return Err(Error::Config(
            "shortcut design needs at least one constraint (the problem is homogeneous)".into(),
        ));
    }
    if constraints.vec_len() != model.dims.vec_len() {
        return Err(Error::Dimension(
            "constraint set does not match the combination-matrix shape".into(),
        ));
    }
    let mut a = normal.clone();
    let ridge = add_trace_ridge(&mut a, 1e-10);
    let sol = solve_kkt(&a, constraints.q_columns(), &constraints.b())?;
    check_constraint_residual(sol.constraint_residual)?;
    let h = CombinationMatrix::from_vec(&sol.primal, model.dims, tag)?;
    let objective = model.shortcut_objective(&sol.primal);
    Ok(DesignResult {
        h,
        method,
        objective,
        constraint_residual: sol.constraint_residual,
        diagnostics: SolverDiagnostics {
            iterations: 1,
            ridge,
            stationarity: sol.stationarity_residual,
            notes: Vec::new(),
        },
    })
}

/// Numerical minimization of the exact scenario-averaged loss (the CV-space
/// Hessian is recomputed from the current iterate) over the affine constraint
/// set, using BFGS in the null-space parameterization `v = v0 + Z z`.
pub fn solve_gdsoc_numerical(
    trajectories: &[OptimalTrajectory],
    w2_diag: &DVector<f64>,
    constraints: &ConstraintSet,
    dims: CvDims,
    tag: Option<StructureTag>,
    init: &DVector<f64>,
) -> Result<DesignResult> {
    if trajectories.is_empty() {
        return Err(Error::Config("gdsoc: empty trajectory set".into()));
    }
    let (particular, z) = constraints.particular_and_nullspace();
    let nz = z.ncols();
    if nz == 0 {
        return Err(Error::Config(
            "gdsoc: constraints leave no degrees of freedom".into(),
        ));
    }
    // First member of each null-space class, for reading z off a feasible point.
    let class_rep: Vec<usize> = (0..nz)
        .map(|j| (0..z.nrows()).find(|&m| z[(m, j)] != 0.0).expect("nonempty class"))
        .collect();

    let feasible_init = constraints.project_feasible(init);
    let mut zv =
        DVector::from_fn(nz, |j, _| feasible_init[class_rep[j]] - particular[class_rep[j]]);

    let eval = |zv: &DVector<f64>| -> Option<f64> {
        let v = &particular + &z * zv;
        let h = CombinationMatrix::from_vec(&v, dims, tag).ok()?;
        average_loss(&h, trajectories, w2_diag).ok()
    };
    let grad = |zv: &DVector<f64>, fallback: f64| -> Option<DVector<f64>> {
        let mut g = DVector::zeros(nz);
        for j in 0..nz {
            let h = 1e-7 * (1.0 + zv[j].abs());
            let mut up = zv.clone();
            up[j] += h;
            let mut dn = zv.clone();
            dn[j] -= h;
            match (eval(&up), eval(&dn)) {
                (Some(fu), Some(fd)) => g[j] = (fu - fd) / (2.0 * h),
                (Some(fu), None) => g[j] = (fu - fallback) / h,
                (None, Some(fd)) => g[j] = (fallback - fd) / h,
                (None, None) => return None,
            }
        }
        Some(g)
    };

    let mut f = eval(&zv).ok_or_else(|| {
        Error::Numerical("gdsoc: objective undefined at the feasible initial point".into())
    })?;
    let mut g = grad(&zv, f)
        .ok_or_else(|| Error::Numerical("gdsoc: gradient undefined at the initial point".into()))?;
    let mut h_inv = DMatrix::<f64>::identity(nz, nz);
    let mut best = (zv.clone(), f);
    let tol = 1e-8;
    let max_iter = 300;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..max_iter {
        iterations += 1;
        if g.amax() <= tol {
            converged = true;
            break;
        }
        let mut dir = -(&h_inv * &g);
        if dir.dot(&g) >= 0.0 {
            dir = -g.clone();
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand = &zv + &dir * alpha;
            // An undefined objective (singular H G_xi) backtracks like a
            // failed step.
            if let Some(fc) = eval(&cand) {
                if fc <= f + 1e-4 * alpha * g.dot(&dir) {
                    accepted = Some((cand, fc));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((z_new, f_new)) = accepted else {
            converged = g.amax() <= 1e-6;
            break;
        };
        let Some(g_new) = grad(&z_new, f_new) else {
            break;
        };
        let s = &z_new - &zv;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            let term = (&s * s.transpose()) * (rho * rho * yhy + rho);
            let cross = (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h_inv = h_inv + term - cross;
        }
        zv = z_new;
        f = f_new;
        g = g_new;
        if f < best.1 {
            best = (zv.clone(), f);
        }
    }
    if f < best.1 {
        best = (zv, f);
    }

    let v = &particular + &z * &best.0;
    let h = CombinationMatrix::from_vec(&v, dims, tag)?;
    let residual = constraints.residual(&h.matrix)?;
    check_constraint_residual(residual)?;
    let g_final = grad(&best.0, best.1).map(|g| g.amax()).unwrap_or(f64::NAN);
    Ok(DesignResult {
        h,
        method: DesignMethod::Gdsoc,
        objective: best.1,
        constraint_residual: residual,
        diagnostics: SolverDiagnostics {
            iterations,
            ridge: 0.0,
            stationarity: g_final,
            notes: if converged {
                Vec::new()
            } else {
                vec!["descent stopped before reaching the gradient tolerance".into()]
            },
        },
    })
}

/// Sensitivity of the optimal extended measurements to each disturbance
/// entry, by re-optimizing at centrally perturbed disturbances.
pub fn optimal_xi_disturbance_sensitivity(
    process: &dyn BatchProcess,
    nominal: &OptimalTrajectory,
    perturbed_indices: &[usize],
    step: f64,
    opts: &OptimizeOptions,
) -> Result<DMatrix<f64>> {
    let dims = process.dims();
    let mut f = DMatrix::zeros(dims.xi_len(), dims.n_d);
    for &p in perturbed_indices {
        let mut xi_pm = Vec::with_capacity(2);
        for sign in [1.0, -1.0] {
            let mut scen = Scenario::nominal(&dims);
            scen.offsets[p] = sign * step;
            let sol = optimize_trajectory(process, &scen, &nominal.u_opt, opts)?;
            if !sol.converged {
                return Err(Error::Optimization(format!(
                    "disturbance-sensitivity solve at offset {p} did not converge"
                )));
            }
            let roll = crate::process::rollout(process, &sol.u_opt, &scen.offsets)?;
            xi_pm.push(crate::process::extended_measurements(&dims, &roll, &sol.u_opt));
        }
        let col = (&xi_pm[0] - &xi_pm[1]) / (2.0 * step);
        f.set_column(p, &col);
    }
    Ok(f)
}

/// Linearized local baseline: the same quadratic machinery as the shortcut,
/// but the data matrix is built from first-order predictions
/// `xi_i = xi_0 + F d_i` around the nominal optimum and the scenario Hessians
/// are frozen at the nominal one.
pub fn solve_ldsoc_baseline(
    process: &dyn BatchProcess,
    nominal: &OptimalTrajectory,
    design_scenarios: &[Scenario],
    perturbed_indices: &[usize],
    w2_diag: &DVector<f64>,
    constraints: &ConstraintSet,
    tag: Option<StructureTag>,
    opts: &OptimizeOptions,
) -> Result<DesignResult> {
    const DISTURBANCE_STEP: f64 = 1e-3;
    let f = optimal_xi_disturbance_sensitivity(
        process,
        nominal,
        perturbed_indices,
        DISTURBANCE_STEP,
        opts,
    )?;
    let dims = CvDims::from_process(&process.dims());
    solve_ldsoc_with_sensitivity(nominal, &f, design_scenarios, w2_diag, constraints, tag, dims)
}

/// Baseline solve with a precomputed disturbance sensitivity `F`.
pub fn solve_ldsoc_with_sensitivity(
    nominal: &OptimalTrajectory,
    f: &DMatrix<f64>,
    design_scenarios: &[Scenario],
    w2_diag: &DVector<f64>,
    constraints: &ConstraintSet,
    tag: Option<StructureTag>,
    dims: CvDims,
) -> Result<DesignResult> {
    let linearized: Vec<OptimalTrajectory> = design_scenarios
        .iter()
        .map(|s| {
            let mut t = nominal.clone();
            t.scenario_id = s.id;
            t.xi_opt = &nominal.xi_opt + f * &s.offsets;
            t.xi_opt[0] = 1.0;
            t
        })
        .collect();
    let model = LossModel::from_trajectories(nominal, &linearized, w2_diag.clone(), dims)?;
    solve_quadratic_design(&model, constraints, tag, DesignMethod::Ldsoc)
}

/// Independent reference solve of `min ||R v||^2 s.t. Q^T v = b` by dense
/// null-space elimination (SVD basis + pseudo-inverse least squares). Used to
/// cross-check the KKT path on small instances.
pub fn null_space_lstsq_reference(
    r: &DMatrix<f64>,
    q_cols: &[crate::linalg::SparseCol],
    b: &DVector<f64>,
    dim: usize,
) -> Result<DVector<f64>> {
    let q = q_cols.len();
    // Zero-padded to square so the thin SVD carries the full right basis,
    // including the null-space directions.
    let mut qt = DMatrix::zeros(dim.max(q), dim);
    for (j, col) in q_cols.iter().enumerate() {
        for &(row, val) in col {
            qt[(j, row)] = val;
        }
    }
    let mut b_pad = DVector::zeros(qt.nrows());
    b_pad.rows_mut(0, q).copy_from(b);
    // Particular solution via pseudo-inverse, null basis via the SVD.
    let svd = qt.clone().svd(true, true);
    let v_p = svd
        .solve(&b_pad, 1e-12)
        .map_err(|e| Error::Numerical(format!("reference solve: {e}")))?;
    let v_t = svd.v_t.as_ref().expect("svd computed");
    let tol = 1e-12 * svd.singular_values.max();
    let null_rows: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] <= tol)
        .collect();
    let nullity = null_rows.len();
    if nullity != dim - q_cols.len() {
        return Err(Error::Numerical(format!(
            "reference solve: nullity {} does not match {} constraints on {} unknowns",
            nullity,
            q_cols.len(),
            dim
        )));
    }
    if nullity == 0 {
        return Ok(v_p);
    }
    let mut z = DMatrix::zeros(dim, nullity);
    for (j, &row) in null_rows.iter().enumerate() {
        z.set_column(j, &v_t.row(row).transpose());
    }
    let rz = r * &z;
    let rhs = -(r * &v_p);
    let sol = rz
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| Error::Numerical(format!("reference lstsq: {e}")))?;
    Ok(v_p + z * sol)
}

/// Stacks the data and noise factors into the single least-squares matrix
/// whose normal equations the shortcut solves.
pub fn stacked_design_matrix(model: &LossModel) -> Result<DMatrix<f64>> {
    let w_breve = model.w_breve()?;
    let rows = model.xi_tilde.nrows() + w_breve.nrows();
    let cols = model.xi_tilde.ncols();
    let mut out = DMatrix::zeros(rows, cols);
    out.view_mut((0, 0), (model.xi_tilde.nrows(), cols))
        .copy_from(&model.xi_tilde);
    out.view_mut((model.xi_tilde.nrows(), 0), (w_breve.nrows(), cols))
        .copy_from(&w_breve);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::vec_mat;
    use crate::structure::compile_structure;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn synthetic_dims() -> CvDims {
        CvDims {
            n_u: 2,
            n_y: 2,
            n_stages: 2,
        }
    }

    /// Synthetic trajectory with a structurally valid lower-triangular G_xi.
    fn synthetic_trajectory(dims: &CvDims, id: usize, rng: &mut impl Rng) -> OptimalTrajectory {
        let bw = dims.block_width();
        let xi_len = dims.cols();
        let n = dims.rows();
        let mut xi = DVector::from_fn(xi_len, |_, _| rng.random_range(-1.0..1.0));
        xi[0] = 1.0;
        let mut g = DMatrix::zeros(xi_len, n);
        for k1 in 0..dims.n_stages {
            let base = 1 + k1 * bw;
            for k2 in 0..dims.n_stages {
                for cu in 0..dims.n_u {
                    let col = k2 * dims.n_u + cu;
                    if k2 == k1 {
                        for r in 0..dims.n_u {
                            g[(base + dims.n_y + r, col)] = if r == cu { 1.0 } else { 0.0 };
                        }
                    } else if k2 < k1 {
                        for r in 0..dims.n_y {
                            g[(base + r, col)] = rng.random_range(-1.0..1.0);
                        }
                    }
                }
            }
        }
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        let j_uu = &a * a.transpose() + DMatrix::identity(n, n);
        OptimalTrajectory {
            scenario_id: id,
            u_opt: DVector::zeros(n),
            xi_opt: xi,
            j_opt: 0.0,
            j_uu,
            g_xi: g,
            converged: true,
            kkt_residual: 0.0,
            one_sided_coords: Vec::new(),
        }
    }

    fn synthetic_w2(dims: &CvDims, rng: &mut impl Rng) -> DVector<f64> {
        let mut w2 = DVector::from_fn(dims.cols(), |_, _| rng.random_range(0.0..0.05));
        w2[0] = 0.0;
        w2
    }

    /// Loss oracle with explicit scalar loops; no matrix algebra.
    fn loss_terms_bruteforce(
        h: &DMatrix<f64>,
        xi: &DVector<f64>,
        g: &DMatrix<f64>,
        j_uu: &DMatrix<f64>,
        w2: &DVector<f64>,
    ) -> (f64, f64) {
        let n = h.nrows();
        let w = h.ncols();
        assert_eq!(n, 2, "oracle hand-codes the 2x2 inverse");
        let mut m = [[0.0f64; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                let mut acc = 0.0;
                for t in 0..w {
                    acc += h[(r, t)] * g[(t, c)];
                }
                m[r][c] = acc;
            }
        }
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let minv = [
            [m[1][1] / det, -m[0][1] / det],
            [-m[1][0] / det, m[0][0] / det],
        ];
        let mut jcc = [[0.0f64; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                let mut acc = 0.0;
                for a in 0..2 {
                    for b in 0..2 {
                        acc += minv[a][r] * j_uu[(a, b)] * minv[b][c];
                    }
                }
                jcc[r][c] = acc;
            }
        }
        let mut dev = [0.0f64; 2];
        for r in 0..2 {
            for t in 0..w {
                dev[r] += h[(r, t)] * xi[t];
            }
        }
        let mut l_d = 0.0;
        for r in 0..2 {
            for c in 0..2 {
                l_d += 0.5 * dev[r] * jcc[r][c] * dev[c];
            }
        }
        let mut l_n = 0.0;
        for j in 0..w {
            let mut acc = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    acc += h[(a, j)] * jcc[a][b] * h[(b, j)];
                }
            }
            l_n += 0.5 * w2[j] * acc;
        }
        (l_d, l_n)
    }

    #[test]
    fn loss_terms_match_bruteforce_oracle() {
        let dims = CvDims {
            n_u: 1,
            n_y: 2,
            n_stages: 2,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..20 {
            let traj = synthetic_trajectory(&dims, 1, &mut rng);
            let h = DMatrix::from_fn(dims.rows(), dims.cols(), |_, _| rng.random_range(-1.0..1.0));
            let w2 = synthetic_w2(&dims, &mut rng);
            let cm = CombinationMatrix::new(h.clone(), dims, None).unwrap();
            let (l_d, l_n) = loss_terms(&cm, &traj, &w2).unwrap();
            let (od, on) = loss_terms_bruteforce(&h, &traj.xi_opt, &traj.g_xi, &traj.j_uu, &w2);
            assert_relative_eq!(l_d, od, max_relative = 1e-10);
            assert_relative_eq!(l_n, on, max_relative = 1e-10);
        }
    }

    #[test]
    fn null_deviation_and_zero_noise_give_zero_loss() {
        let dims = synthetic_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(59);
        let mut traj = synthetic_trajectory(&dims, 1, &mut rng);
        let cons = compile_structure(StructureTag::VaryingDiag, &dims, true);
        let (p, z) = cons.particular_and_nullspace();
        let zv = DVector::from_fn(z.ncols(), |_, _| rng.random_range(-1.0..1.0));
        let cm = CombinationMatrix::from_vec(&(p + z * zv), dims, None).unwrap();
        // Choose xi in the null space of H: solve the stage equations for u.
        let mut xi = traj.xi_opt.clone();
        for k in 0..dims.n_stages {
            let blocks = cm.feedback_blocks(k).unwrap();
            let base = 1 + k * dims.block_width();
            let mut rhs = blocks.setpoint_stored.clone();
            for c in 0..dims.n_y {
                for r in 0..dims.n_u {
                    rhs[r] += blocks.h_y[(r, c)] * xi[base + c];
                }
            }
            // H_u = -I, so u = rhs zeroes the row.
            for r in 0..dims.n_u {
                xi[base + dims.n_y + r] = rhs[r];
            }
        }
        traj.xi_opt = xi;
        let w2 = DVector::zeros(dims.cols());
        let (l_d, l_n) = loss_terms(&cm, &traj, &w2).unwrap();
        assert!(l_d.abs() < 1e-18, "l_d = {l_d}");
        assert_eq!(l_n, 0.0);
    }

    #[test]
    fn disturbance_loss_matches_vectorized_form() {
        // 1/2 || (xi^T (x) Jcc^{1/2}) vec(H) ||^2 must equal the matrix form.
        let dims = synthetic_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let traj = synthetic_trajectory(&dims, 1, &mut rng);
        let h = DMatrix::from_fn(dims.rows(), dims.cols(), |_, _| rng.random_range(-1.0..1.0));
        let cm = CombinationMatrix::new(h.clone(), dims, None).unwrap();
        let w2 = DVector::zeros(dims.cols());
        let (l_d, _) = loss_terms(&cm, &traj, &w2).unwrap();

        let m = &h * &traj.g_xi;
        let minv = m.try_inverse().unwrap();
        let jcc = minv.transpose() * &traj.j_uu * &minv;
        let jcc_sqrt = sym_sqrt_floored(&jcc, 1e-14).unwrap().sqrt;
        let row = traj.xi_opt.transpose().kronecker(&jcc_sqrt);
        let l_vec = 0.5 * (row * vec_mat(&h)).norm_squared();
        assert_relative_eq!(l_d, l_vec, max_relative = 1e-10);
    }

    #[test]
    fn quadratic_loss_invariant_under_left_multiplication() {
        let dims = synthetic_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let traj = synthetic_trajectory(&dims, 1, &mut rng);
        let h = DMatrix::from_fn(dims.rows(), dims.cols(), |_, _| rng.random_range(-1.0..1.0));
        let mut noise = DVector::from_fn(dims.cols(), |_, _| rng.random_range(-0.1..0.1));
        noise[0] = 0.0;
        let cm = CombinationMatrix::new(h.clone(), dims, None).unwrap();
        let base = quadratic_loss(&cm, &traj, &noise, JccApprox::Exact).unwrap();
        for _ in 0..100 {
            // Random well-conditioned invertible Q: orthogonal factor with
            // columns rescaled into [0.5, 2].
            let raw = DMatrix::from_fn(dims.rows(), dims.rows(), |_, _| rng.random_range(-1.0..1.0));
            let qr = raw.qr();
            let mut q = qr.q();
            for i in 0..dims.rows() {
                let s = rng.random_range(0.5..2.0);
                let col = q.column(i) * s;
                q.set_column(i, &col);
            }
            let qh = CombinationMatrix::new(&q * &h, dims, None).unwrap();
            let val = quadratic_loss(&qh, &traj, &noise, JccApprox::Exact).unwrap();
            assert_relative_eq!(val, base, max_relative = 1e-9);
        }
    }

    #[test]
    fn average_loss_invariant_under_scaling() {
        let dims = synthetic_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let trajs: Vec<_> = (1..=4)
            .map(|i| synthetic_trajectory(&dims, i, &mut rng))
            .collect();
        let w2 = synthetic_w2(&dims, &mut rng);
        let h = DMatrix::from_fn(dims.rows(), dims.cols(), |_, _| rng.random_range(-1.0..1.0));
        let cm = CombinationMatrix::new(h.clone(), dims, None).unwrap();
        let base = average_loss(&cm, &trajs, &w2).unwrap();
        let raw = DMatrix::from_fn(dims.rows(), dims.rows(), |_, _| rng.random_range(-1.0..1.0));
        let q = raw.qr().q() * 1.7;
        let qh = CombinationMatrix::new(&q * &h, dims, None).unwrap();
        let scaled = average_loss(&qh, &trajs, &w2).unwrap();
        assert_relative_eq!(scaled, base, max_relative = 1e-9);
    }

    #[test]
    fn singular_h_g_reports_condition() {
        let dims = synthetic_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(61);
        let traj = synthetic_trajectory(&dims, 1, &mut rng);
        let h = DMatrix::zeros(dims.rows(), dims.cols());
        let cm = CombinationMatrix::new(h, dims, None).unwrap();
        let w2 = synthetic_w2(&dims, &mut rng);
        match loss_terms(&cm, &traj, &w2) {
            Err(Error::Singular { cond, .. }) => assert!(cond.is_infinite() || cond > 1e12),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn normal_matrix_matches_stacked_product() {
        let dims = synthetic_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let nominal = synthetic_trajectory(&dims, 0, &mut rng);
        let trajs: Vec<_> = (1..=3)
            .map(|i| synthetic_trajectory(&dims, i, &mut rng))
            .collect();
        let w2 = synthetic_w2(&dims, &mut rng);
        let model = LossModel::from_trajectories(&nominal, &trajs, w2, dims).unwrap();
        let stacked = stacked_design_matrix(&model).unwrap();
        let direct = stacked.transpose() * &stacked;
        let assembled = model.normal_matrix().unwrap();
        assert_relative_eq!(assembled, direct, epsilon = 1e-10, max_relative = 1e-8);
    }

    #[test]
    fn nominal_block_normalizes_to_identity() {
        let dims = synthetic_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let nominal = synthetic_trajectory(&dims, 0, &mut rng);
        let model = LossModel::from_trajectories(
            &nominal,
            &[nominal.clone()],
            DVector::zeros(dims.cols()),
            dims,
        )
        .unwrap();
        let sqrt0 = sym_sqrt_floored(&nominal.j_uu, 1e-10).unwrap().sqrt;
        let prod = &sqrt0 * &model.v_bar;
        assert_relative_eq!(
            prod,
            DMatrix::identity(dims.rows(), dims.rows()),
            epsilon = 1e-8
        );
    }

    #[test]
    fn shortcut_satisfies_kkt_conditions() {
        let dims = synthetic_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let nominal = synthetic_trajectory(&dims, 0, &mut rng);
        let trajs: Vec<_> = (1..=5)
            .map(|i| synthetic_trajectory(&dims, i, &mut rng))
            .collect();
        let w2 = synthetic_w2(&dims, &mut rng);
        let model = LossModel::from_trajectories(&nominal, &trajs, w2, dims).unwrap();
        let cons = compile_structure(StructureTag::Lbt, &dims, true);
        let result = solve_gdsoc_shortcut(&model, &cons, Some(StructureTag::Lbt)).unwrap();
        assert!(result.constraint_residual <= 1e-10);
        assert!(result.diagnostics.stationarity <= 1e-8);
        assert!(cons.is_satisfied(&result.h.matrix, 1e-10).unwrap());
    }

    #[test]
    fn shortcut_matches_null_space_reference_on_tiny_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for n_y in [1usize, 2] {
            let dims = CvDims {
                n_u: 1,
                n_y,
                n_stages: 2,
            };
            let nominal = synthetic_trajectory(&dims, 0, &mut rng);
            let trajs: Vec<_> = (1..=3)
                .map(|i| synthetic_trajectory(&dims, i, &mut rng))
                .collect();
            let w2 = synthetic_w2(&dims, &mut rng);
            let model = LossModel::from_trajectories(&nominal, &trajs, w2, dims).unwrap();
            for tag in StructureTag::all() {
                let cons = compile_structure(tag, &dims, true);
                let result = solve_gdsoc_shortcut(&model, &cons, Some(tag)).unwrap();
                let stacked = stacked_design_matrix(&model).unwrap();
                let reference = null_space_lstsq_reference(
                    &stacked,
                    cons.q_columns(),
                    &cons.b(),
                    dims.vec_len(),
                )
                .unwrap();
                let got = result.h.to_vec();
                assert!(
                    (&got - &reference).amax() <= 1e-8,
                    "tag {tag:?} n_y {n_y}: max deviation {:.3e}",
                    (&got - &reference).amax()
                );
            }
        }
    }

    #[test]
    fn numerical_descent_does_not_worsen_shortcut_init() {
        let dims = synthetic_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        let nominal = synthetic_trajectory(&dims, 0, &mut rng);
        let trajs: Vec<_> = (1..=6)
            .map(|i| synthetic_trajectory(&dims, i, &mut rng))
            .collect();
        let w2 = synthetic_w2(&dims, &mut rng);
        let model = LossModel::from_trajectories(&nominal, &trajs, w2.clone(), dims).unwrap();
        let cons = compile_structure(StructureTag::ConstDiag, &dims, true);
        let sc = solve_gdsoc_shortcut(&model, &cons, Some(StructureTag::ConstDiag)).unwrap();
        let init_loss = average_loss(&sc.h, &trajs, &w2).unwrap();
        let num = solve_gdsoc_numerical(
            &trajs,
            &w2,
            &cons,
            dims,
            Some(StructureTag::ConstDiag),
            &sc.h.to_vec(),
        )
        .unwrap();
        assert!(
            num.objective <= init_loss + 1e-12,
            "descent worsened: {} -> {}",
            init_loss,
            num.objective
        );
        assert!(num.constraint_residual <= 1e-10);
    }

    #[test]
    fn numerical_matches_kkt_on_frozen_quadratic() {
        // With every scenario Hessian equal to the nominal one and the
        // measurement responses zeroed, H G_xi = -I over the whole feasible
        // set, so Jcc is frozen and the exact objective is the same quadratic
        // the KKT shortcut solves; both solvers must agree.
        let dims = synthetic_dims();
        let mut rng = ChaCha12Rng::seed_from_u64(47);
        let mut nominal = synthetic_trajectory(&dims, 0, &mut rng);
        nominal.j_uu = DMatrix::identity(dims.rows(), dims.rows());
        let mut trajs: Vec<_> = (1..=4)
            .map(|i| synthetic_trajectory(&dims, i, &mut rng))
            .collect();
        for t in &mut trajs {
            // Identity Hessians and zeroed measurement responses make
            // H G_xi = -I and Jcc = I exactly over the feasible set.
            t.j_uu = nominal.j_uu.clone();
            let mut g = DMatrix::zeros(dims.cols(), dims.rows());
            for k in 0..dims.n_stages {
                let base = 1 + k * dims.block_width();
                for r in 0..dims.n_u {
                    g[(base + dims.n_y + r, k * dims.n_u + r)] = 1.0;
                }
            }
            t.g_xi = g;
        }
        let w2 = synthetic_w2(&dims, &mut rng);
        let cons = compile_structure(StructureTag::VaryingDiag, &dims, true);

        let model = LossModel::from_trajectories(&nominal, &trajs, w2.clone(), dims).unwrap();
        let sc = solve_gdsoc_shortcut(&model, &cons, Some(StructureTag::VaryingDiag)).unwrap();

        let init = cons.particular_and_nullspace().0;
        let num = solve_gdsoc_numerical(
            &trajs,
            &w2,
            &cons,
            dims,
            Some(StructureTag::VaryingDiag),
            &init,
        )
        .unwrap();
        assert!(
            (num.h.to_vec() - sc.h.to_vec()).amax() <= 1e-6,
            "deviation {:.3e}",
            (num.h.to_vec() - sc.h.to_vec()).amax()
        );
    }

    #[test]
    fn single_scenario_one_stage_matches_static_shortcut() {
        // A one-stage batch is a static problem: the solver must reproduce
        // the classical regression-form solution up to the free scaling.
        let dims = CvDims {
            n_u: 1,
            n_y: 3,
            n_stages: 1,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(53);
        let nominal = synthetic_trajectory(&dims, 0, &mut rng);
        let w2 = synthetic_w2(&dims, &mut rng);
        let model =
            LossModel::from_trajectories(&nominal, &[nominal.clone()], w2.clone(), dims).unwrap();
        let cons = compile_structure(StructureTag::Lbt, &dims, true);
        let sc = solve_gdsoc_shortcut(&model, &cons, None).unwrap();

        // Static regression form: h = A^{-1} g (g^T A^{-1} g)^{-1} J^{1/2},
        // with A the data Gram matrix and g the sensitivity vector.
        let stacked = stacked_design_matrix(&model).unwrap();
        let a = stacked.transpose() * &stacked;
        let g = nominal.g_xi.column(0).into_owned();
        let a_inv_g = a.clone().lu().solve(&g).unwrap();
        let scale = nominal.j_uu[(0, 0)].sqrt() / g.dot(&a_inv_g);
        let h_static = a_inv_g * scale;

        // Both lie on the same ray; normalize each by its input gain.
        let ours = sc.h.to_vec();
        let u_index = dims.vec_index(0, dims.block_col(0) + dims.n_y);
        let ours_n = &ours / ours[u_index];
        let static_n = &h_static / h_static[u_index];
        assert_relative_eq!(ours_n, static_n, epsilon = 1e-8);
    }

    #[test]
    fn ldsoc_collapses_to_shortcut_without_disturbances() {
        let p = crate::reactor::FedBatchReactor::reference();
        let pdims = p.dims();
        let dims = CvDims::from_process(&pdims);
        let opts = OptimizeOptions::default();
        let nominal_scen = Scenario::nominal(&pdims);
        let sol = optimize_trajectory(&p, &nominal_scen, &DVector::from_element(20, 0.002), &opts)
            .unwrap();
        let nominal = complete_trajectory(&p, &nominal_scen, &sol, &opts).unwrap();

        // Zero-disturbance design set: every scenario equals the nominal.
        let design: Vec<Scenario> = (1..=3)
            .map(|id| {
                let mut s = Scenario::nominal(&pdims);
                s.id = id;
                s
            })
            .collect();
        let design_trajs: Vec<OptimalTrajectory> = design
            .iter()
            .map(|s| {
                let mut t = nominal.clone();
                t.scenario_id = s.id;
                t
            })
            .collect();
        let spec = crate::scenario::UncertaintySpec {
            perturbed_params: vec!["k1".into()],
            fraction: 0.0,
            noise_std_conc: 0.03,
            noise_std_vol: 0.1,
            noise_std_u: 2.5e-5,
            seed: 1,
        };
        let w2 = crate::scenario::noise_covariance_diagonal(&spec, &pdims);
        let cons = compile_structure(StructureTag::ConstDiag, &dims, true);
        let model =
            LossModel::from_trajectories(&nominal, &design_trajs, w2.clone(), dims).unwrap();
        let sc = solve_gdsoc_shortcut(&model, &cons, Some(StructureTag::ConstDiag)).unwrap();
        let ld = solve_ldsoc_baseline(
            &p,
            &nominal,
            &design,
            &spec.perturbed_indices(),
            &w2,
            &cons,
            Some(StructureTag::ConstDiag),
            &opts,
        )
        .unwrap();
        let dev = (sc.h.to_vec() - ld.h.to_vec()).amax();
        assert!(dev <= 1e-8, "deviation {dev:.3e}");
    }
}
