//! Per-scenario dynamic optimization and the second-order data (cost Hessian
//! and extended-measurement sensitivity) consumed by the CV design step.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::sym_sqrt_floored;
use crate::process::{extended_measurements, rollout, rollout_cost, BatchProcess};
use crate::scenario::Scenario;

/// Finite-difference and convergence settings for the trajectory optimizer.
#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    /// Gradient step as a fraction of the input range.
    pub grad_step_rel: f64,
    /// Hessian step as a fraction of the input range.
    pub hess_step_rel: f64,
    /// Projected-gradient convergence threshold.
    pub tol_grad: f64,
    /// Residual below which a stalled line search still counts as converged;
    /// finite-difference gradients bottom out near this level.
    pub stall_tol: f64,
    pub max_iter: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        // The stall tolerance sits just above the measured line-search floor
        // sqrt(2 * lambda_max(J_uu) * eps_J) of the reactor cost; below it no
        // descent step produces an improvement distinguishable from rollout
        // rounding noise.
        OptimizeOptions {
            grad_step_rel: 1e-5,
            hess_step_rel: 1e-4,
            tol_grad: 1e-9,
            stall_tol: 5e-6,
            max_iter: 500,
        }
    }
}

/// Optimizer output before second-order data is attached.
#[derive(Debug, Clone)]
pub struct TrajectorySolution {
    pub u_opt: DVector<f64>,
    pub j_opt: f64,
    pub converged: bool,
    /// Projected-gradient infinity norm at the returned point.
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// Everything the loss model needs from one scenario.
#[derive(Debug, Clone)]
pub struct OptimalTrajectory {
    pub scenario_id: usize,
    pub u_opt: DVector<f64>,
    /// Augmented extended measurements at the optimum, leading entry 1.
    pub xi_opt: DVector<f64>,
    pub j_opt: f64,
    pub j_uu: DMatrix<f64>,
    pub g_xi: DMatrix<f64>,
    pub converged: bool,
    pub kkt_residual: f64,
    /// Input coordinates whose Hessian stencil had to be one-sided at a bound.
    pub one_sided_coords: Vec<usize>,
}

fn per_coord_ranges(process: &dyn BatchProcess) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let dims = process.dims();
    let (lo1, hi1) = process.input_bounds();
    let n = dims.stacked_input_len();
    let mut lo = DVector::zeros(n);
    let mut hi = DVector::zeros(n);
    for i in 0..n {
        lo[i] = lo1[i % dims.n_u];
        hi[i] = hi1[i % dims.n_u];
    }
    let range = &hi - &lo;
    (lo, hi, range)
}

/// Central-difference gradient of the rollout cost; falls back to one-sided
/// stencils where a coordinate sits within a step of its bound.
pub fn cost_gradient_fd(
    process: &dyn BatchProcess,
    scenario: &Scenario,
    u: &DVector<f64>,
    step_rel: f64,
) -> Result<DVector<f64>> {
    let (lo, hi, range) = per_coord_ranges(process);
    let d = &scenario.offsets;
    let n = u.len();
    let mut g = DVector::zeros(n);
    let mut f0: Option<f64> = None;
    let base = |f0: &mut Option<f64>| -> Result<f64> {
        if let Some(v) = *f0 {
            return Ok(v);
        }
        let v = rollout_cost(process, u, d)?;
        *f0 = Some(v);
        Ok(v)
    };
    for i in 0..n {
        let h = step_rel * range[i];
        if h == 0.0 {
            continue;
        }
        let can_up = u[i] + h <= hi[i];
        let can_down = u[i] - h >= lo[i];
        g[i] = match (can_up, can_down) {
            (true, true) => {
                let mut up = u.clone();
                up[i] += h;
                let mut dn = u.clone();
                dn[i] -= h;
                (rollout_cost(process, &up, d)? - rollout_cost(process, &dn, d)?) / (2.0 * h)
            }
            (true, false) => {
                let mut up = u.clone();
                up[i] += h;
                (rollout_cost(process, &up, d)? - base(&mut f0)?) / h
            }
            (false, true) => {
                let mut dn = u.clone();
                dn[i] -= h;
                (base(&mut f0)? - rollout_cost(process, &dn, d)?) / h
            }
            (false, false) => {
                return Err(Error::Numerical(format!(
                    "gradient step {h:.3e} does not fit inside the bounds of coordinate {i}"
                )))
            }
        };
    }
    Ok(g)
}

fn projected_gradient(
    u: &DVector<f64>,
    g: &DVector<f64>,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_fn(u.len(), |i, _| {
        if u[i] <= lo[i] && g[i] > 0.0 {
            0.0
        } else if u[i] >= hi[i] && g[i] < 0.0 {
            0.0
        } else {
            g[i]
        }
    })
}

/// Projected quasi-Newton descent on the rollout cost over the input box.
///
/// Inverse-BFGS directions are masked on the active set and globalized with a
/// backtracking Armijo search on the projected path. Convergence is declared
/// at `tol_grad` on the projected gradient, or at `stall_tol` once the line
/// search cannot make further progress against finite-difference noise.
pub fn optimize_trajectory(
    process: &dyn BatchProcess,
    scenario: &Scenario,
    init: &DVector<f64>,
    opts: &OptimizeOptions,
) -> Result<TrajectorySolution> {
    let (lo, hi, _) = per_coord_ranges(process);
    let d = &scenario.offsets;
    let n = init.len();

    let mut u = init.clone();
    for i in 0..n {
        u[i] = u[i].clamp(lo[i], hi[i]);
    }
    let mut j = rollout_cost(process, &u, d)?;
    let mut g = cost_gradient_fd(process, scenario, &u, opts.grad_step_rel)?;
    let mut h_inv = DMatrix::<f64>::identity(n, n);

    let mut best_u = u.clone();
    let mut best_j = j;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..opts.max_iter {
        iterations = iter + 1;
        let pg = projected_gradient(&u, &g, &lo, &hi);
        if pg.amax() <= opts.tol_grad {
            converged = true;
            break;
        }

        // Mask the quasi-Newton model on the active set.
        let active: Vec<bool> = (0..n)
            .map(|i| (u[i] <= lo[i] && g[i] > 0.0) || (u[i] >= hi[i] && g[i] < 0.0))
            .collect();
        let mut g_free = g.clone();
        for i in 0..n {
            if active[i] {
                g_free[i] = 0.0;
            }
        }
        let mut dir = -(&h_inv * &g_free);
        for i in 0..n {
            if active[i] {
                dir[i] = 0.0;
            }
        }
        if dir.dot(&g_free) >= 0.0 {
            dir = -pg.clone();
        }

        // Backtracking Armijo search along the projected path.
        let mut alpha = 1.0f64;
        let mut accepted: Option<(DVector<f64>, f64)> = None;
        for _ in 0..60 {
            let mut cand = &u + &dir * alpha;
            for i in 0..n {
                cand[i] = cand[i].clamp(lo[i], hi[i]);
            }
            let step = &cand - &u;
            if step.amax() == 0.0 {
                break;
            }
            let j_cand = rollout_cost(process, &cand, d)?;
            if j_cand <= j + 1e-4 * g.dot(&step) {
                accepted = Some((cand, j_cand));
                break;
            }
            alpha *= 0.5;
        }

        let (u_new, j_new) = match accepted {
            Some(pair) => pair,
            None => {
                // Stalled against finite-difference noise.
                converged = pg.amax() <= opts.stall_tol;
                break;
            }
        };

        let g_new = cost_gradient_fd(process, scenario, &u_new, opts.grad_step_rel)?;
        let s = &u_new - &u;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            // Inverse BFGS update.
            let rho = 1.0 / sy;
            let hy = &h_inv * &y;
            let yhy = y.dot(&hy);
            let term = (&s * s.transpose()) * (rho * rho * yhy + rho);
            let cross = (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h_inv = h_inv + term - cross;
        }

        u = u_new;
        j = j_new;
        g = g_new;
        if j < best_j {
            best_j = j;
            best_u = u.clone();
        }
    }

    if j < best_j {
        best_j = j;
        best_u = u.clone();
    }
    let g_best = cost_gradient_fd(process, scenario, &best_u, opts.grad_step_rel)?;
    let kkt_residual = projected_gradient(&best_u, &g_best, &lo, &hi).amax();
    if kkt_residual <= opts.stall_tol {
        converged = true;
    }

    Ok(TrajectorySolution {
        u_opt: best_u,
        j_opt: best_j,
        converged,
        kkt_residual,
        iterations,
    })
}

/// Stencil offsets for one coordinate: central where possible, shifted inward
/// near a bound (one shrink by 10x is tried first).
///
/// Returns `(h, upper_offset, lower_offset, one_sided)`.
fn stencil_offsets(u_i: f64, lo: f64, hi: f64, h0: f64) -> Result<(f64, f64, f64, bool)> {
    for (h, last_try) in [(h0, false), (h0 / 10.0, true)] {
        if u_i + h <= hi && u_i - h >= lo {
            return Ok((h, h, -h, false)); // central
        }
        if !last_try {
            continue;
        }
        if u_i + 2.0 * h <= hi {
            return Ok((h, 2.0 * h, 0.0, true)); // forward
        }
        if u_i - 2.0 * h >= lo {
            return Ok((h, 0.0, -2.0 * h, true)); // backward
        }
    }
    Err(Error::Numerical(format!(
        "no difference stencil fits inside [{lo:.3e}, {hi:.3e}] around {u_i:.3e}"
    )))
}

/// Finite-difference Hessian of the rollout cost at `u_opt`, symmetrized.
///
/// Returns the matrix plus the coordinates that required one-sided stencils
/// (active or nearly active bounds).
pub fn hessian_j(
    process: &dyn BatchProcess,
    scenario: &Scenario,
    u_opt: &DVector<f64>,
    opts: &OptimizeOptions,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    let (lo, hi, range) = per_coord_ranges(process);
    let d = &scenario.offsets;
    let n = u_opt.len();

    let mut upper = vec![0.0f64; n];
    let mut lower = vec![0.0f64; n];
    let mut hs = vec![0.0f64; n];
    let mut one_sided = Vec::new();
    for i in 0..n {
        let (h, a, b, sided) =
            stencil_offsets(u_opt[i], lo[i], hi[i], opts.hess_step_rel * range[i])?;
        hs[i] = h;
        upper[i] = a;
        lower[i] = b;
        if sided {
            one_sided.push(i);
        }
    }

    let eval = |offsets: &[(usize, f64)]| -> Result<f64> {
        let mut u = u_opt.clone();
        for &(i, o) in offsets {
            u[i] += o;
        }
        rollout_cost(process, &u, d)
    };

    let f0 = eval(&[])?;
    let mut h_mat = DMatrix::zeros(n, n);
    for i in 0..n {
        let fa = eval(&[(i, upper[i])])?;
        let fb = eval(&[(i, lower[i])])?;
        let diag = if lower[i] == -upper[i] {
            (fa - 2.0 * f0 + fb) / (upper[i] * upper[i])
        } else {
            // One-sided nodes {0, h, 2h} (or mirrored): midpoint completes
            // the three-point second difference.
            let mid = eval(&[(i, 0.5 * (upper[i] + lower[i]))])?;
            (fa - 2.0 * mid + fb) / (hs[i] * hs[i])
        };
        h_mat[(i, i)] = diag;
        for j in (i + 1)..n {
            let faa = eval(&[(i, upper[i]), (j, upper[j])])?;
            let fab = eval(&[(i, upper[i]), (j, lower[j])])?;
            let fba = eval(&[(i, lower[i]), (j, upper[j])])?;
            let fbb = eval(&[(i, lower[i]), (j, lower[j])])?;
            let denom = (upper[i] - lower[i]) * (upper[j] - lower[j]);
            let v = (faa - fab - fba + fbb) / denom;
            h_mat[(i, j)] = v;
            h_mat[(j, i)] = v;
        }
    }
    let h_mat = (&h_mat + h_mat.transpose()) * 0.5;
    Ok((h_mat, one_sided))
}

/// Finite-difference sensitivity of the stacked extended measurements to the
/// stacked inputs, with the structural blocks forced exactly: zero above the
/// block diagonal, `[0; I]` on it, zero input rows elsewhere, zero top row.
pub fn sensitivity_g_xi(
    process: &dyn BatchProcess,
    scenario: &Scenario,
    u_opt: &DVector<f64>,
    opts: &OptimizeOptions,
) -> Result<DMatrix<f64>> {
    let dims = process.dims();
    let (lo, hi, range) = per_coord_ranges(process);
    let d = &scenario.offsets;
    let n = u_opt.len();
    let xi_len = dims.xi_len();

    let xi_at = |u: &DVector<f64>| -> Result<DVector<f64>> {
        let roll = rollout(process, u, d)?;
        Ok(extended_measurements(&dims, &roll, u))
    };

    let mut g = DMatrix::zeros(xi_len, n);
    for col in 0..n {
        let h0 = opts.grad_step_rel * range[col];
        let (_, a, b, _) = stencil_offsets(u_opt[col], lo[col], hi[col], h0)?;
        let mut up = u_opt.clone();
        up[col] += a;
        let mut dn = u_opt.clone();
        dn[col] += b;
        let diff = (xi_at(&up)? - xi_at(&dn)?) / (a - b);
        g.set_column(col, &diff);
    }

    // Structural exactness.
    let bw = dims.n_y + dims.n_u;
    for i in 0..n {
        g[(0, i)] = 0.0;
    }
    for k1 in 0..dims.n_stages {
        let base = 1 + k1 * bw;
        for k2 in 0..dims.n_stages {
            for cu in 0..dims.n_u {
                let col = k2 * dims.n_u + cu;
                if k2 > k1 {
                    for r in 0..bw {
                        g[(base + r, col)] = 0.0;
                    }
                } else if k2 == k1 {
                    for r in 0..dims.n_y {
                        g[(base + r, col)] = 0.0;
                    }
                    for r in 0..dims.n_u {
                        g[(base + dims.n_y + r, col)] = if r == cu { 1.0 } else { 0.0 };
                    }
                } else {
                    // Later inputs are independent variables of the rollout.
                    for r in 0..dims.n_u {
                        g[(base + dims.n_y + r, col)] = 0.0;
                    }
                }
            }
        }
    }
    Ok(g)
}

/// One projected Newton correction using the finite-difference Hessian.
///
/// Line searches stall once objective improvements drop below evaluation
/// noise, while the gradient itself is still measurable; a Newton step on the
/// free coordinates removes that residual. The step is kept only if it
/// reduces the measured projected gradient.
fn newton_polish(
    process: &dyn BatchProcess,
    scenario: &Scenario,
    u: &DVector<f64>,
    j_uu: &DMatrix<f64>,
    residual: f64,
    opts: &OptimizeOptions,
) -> Result<Option<(DVector<f64>, f64, f64)>> {
    let (lo, hi, range) = per_coord_ranges(process);
    let n = u.len();
    let g = cost_gradient_fd(process, scenario, u, opts.grad_step_rel)?;
    let free: Vec<usize> = (0..n)
        .filter(|&i| {
            let margin = opts.hess_step_rel * range[i];
            u[i] - lo[i] > margin && hi[i] - u[i] > margin
        })
        .collect();
    if free.is_empty() {
        return Ok(None);
    }
    let g_f = DVector::from_fn(free.len(), |r, _| g[free[r]]);
    let h_f = DMatrix::from_fn(free.len(), free.len(), |r, c| j_uu[(free[r], free[c])]);
    let Some(step) = h_f.cholesky().map(|c| c.solve(&g_f)) else {
        return Ok(None);
    };
    let mut u_new = u.clone();
    for (r, &i) in free.iter().enumerate() {
        u_new[i] = (u[i] - step[r]).clamp(lo[i], hi[i]);
    }
    let g_new = cost_gradient_fd(process, scenario, &u_new, opts.grad_step_rel)?;
    let res_new = projected_gradient(&u_new, &g_new, &lo, &hi).amax();
    if res_new < residual {
        let j_new = rollout_cost(process, &u_new, &scenario.offsets)?;
        Ok(Some((u_new, j_new, res_new)))
    } else {
        Ok(None)
    }
}

/// Attaches extended measurements and the second-order data to an optimizer
/// solution, polishing the optimum with the Hessian once it is available.
pub fn complete_trajectory(
    process: &dyn BatchProcess,
    scenario: &Scenario,
    sol: &TrajectorySolution,
    opts: &OptimizeOptions,
) -> Result<OptimalTrajectory> {
    let dims = process.dims();
    let (j_uu, one_sided) = hessian_j(process, scenario, &sol.u_opt, opts)?;

    let mut u_opt = sol.u_opt.clone();
    let mut j_opt = sol.j_opt;
    let mut residual = sol.kkt_residual;
    let mut converged = sol.converged;
    if residual > opts.tol_grad {
        for _ in 0..2 {
            match newton_polish(process, scenario, &u_opt, &j_uu, residual, opts)? {
                Some((u, j, r)) => {
                    u_opt = u;
                    j_opt = j;
                    residual = r;
                }
                None => break,
            }
        }
        if residual <= opts.stall_tol {
            converged = true;
        }
    }

    let roll = rollout(process, &u_opt, &scenario.offsets)?;
    let xi_opt = extended_measurements(&dims, &roll, &u_opt);
    let g_xi = sensitivity_g_xi(process, scenario, &u_opt, opts)?;
    Ok(OptimalTrajectory {
        scenario_id: scenario.id,
        u_opt,
        xi_opt,
        j_opt,
        j_uu,
        g_xi,
        converged,
        kkt_residual: residual,
        one_sided_coords: one_sided,
    })
}

/// Square root of a scenario Hessian with the relative eigenvalue floor used
/// throughout the design stage.
pub fn hessian_sqrt(j_uu: &DMatrix<f64>) -> Result<crate::linalg::SymSqrt> {
    sym_sqrt_floored(j_uu, 1e-10)
}

#[derive(Debug)]
pub struct ScenarioBatchSolve {
    /// Solved trajectories in input order (nominal first).
    pub trajectories: Vec<OptimalTrajectory>,
    /// Scenario ids that failed, with reasons; absent from `trajectories`.
    pub failures: Vec<(usize, String)>,
}

/// Optimizes every scenario, warm-starting from the nominal optimum.
///
/// `scenarios[0]` must be the nominal reference (id 0); its failure aborts the
/// batch, any other failure is recorded and skipped.
pub fn solve_scenario_batch(
    process: &dyn BatchProcess,
    scenarios: &[Scenario],
    nominal_init: &DVector<f64>,
    opts: &OptimizeOptions,
) -> Result<ScenarioBatchSolve> {
    let first = scenarios
        .first()
        .ok_or_else(|| Error::Config("scenario batch is empty".into()))?;
    if first.id != 0 || first.offsets.amax() != 0.0 {
        return Err(Error::Config(
            "scenario batch must start with the nominal reference (id 0, zero offsets)".into(),
        ));
    }

    let nominal_sol = optimize_trajectory(process, first, nominal_init, opts)?;
    if !nominal_sol.converged {
        return Err(Error::Optimization(format!(
            "nominal trajectory optimization did not converge (residual {:.3e})",
            nominal_sol.kkt_residual
        )));
    }
    let nominal = complete_trajectory(process, first, &nominal_sol, opts)?;
    let warm = nominal.u_opt.clone();

    let mut trajectories = vec![nominal];
    let mut failures = Vec::new();
    for scenario in &scenarios[1..] {
        let result = optimize_trajectory(process, scenario, &warm, opts)
            .and_then(|sol| complete_trajectory(process, scenario, &sol, opts));
        match result {
            Ok(traj) => trajectories.push(traj),
            Err(e) => failures.push((scenario.id, e.to_string())),
        }
    }
    Ok(ScenarioBatchSolve {
        trajectories,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::ProcessDims;
    use crate::reactor::FedBatchReactor;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    /// Test process whose cost is an explicit quadratic in the stacked inputs:
    /// the state records each stage input and the terminal cost evaluates
    /// 1/2 x^T M x + d0 * g^T x.
    struct QuadraticProcess {
        m: DMatrix<f64>,
        g: DVector<f64>,
        l: usize,
        lo: f64,
        hi: f64,
    }

    impl BatchProcess for QuadraticProcess {
        fn dims(&self) -> ProcessDims {
            ProcessDims {
                n_x: self.l,
                n_u: 1,
                n_y: 1,
                n_d: 1,
                n_stages: self.l,
            }
        }
        fn stage_duration(&self) -> f64 {
            1.0
        }
        fn initial_state(&self, _d: &DVector<f64>) -> DVector<f64> {
            DVector::zeros(self.l)
        }
        fn step(
            &self,
            x: &DVector<f64>,
            u: &DVector<f64>,
            _d: &DVector<f64>,
            k: usize,
        ) -> crate::error::Result<DVector<f64>> {
            let mut next = x.clone();
            next[k] = u[0];
            Ok(next)
        }
        fn measure(&self, x: &DVector<f64>, _k: usize) -> DVector<f64> {
            DVector::from_element(1, x.sum())
        }
        fn stage_cost(&self, _x: &DVector<f64>, _u: &DVector<f64>, _k: usize) -> f64 {
            0.0
        }
        fn terminal_cost(&self, x: &DVector<f64>, d: &DVector<f64>) -> f64 {
            0.5 * (x.transpose() * &self.m * x)[(0, 0)] + self.g.dot(x) * d[0]
        }
        fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
            (
                DVector::from_element(1, self.lo),
                DVector::from_element(1, self.hi),
            )
        }
    }

    fn quadratic_process(l: usize, seed: u64) -> QuadraticProcess {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(l, l, |_, _| rng.random_range(-1.0..1.0));
        let m = &a * a.transpose() + DMatrix::identity(l, l) * (l as f64);
        let g = DVector::from_fn(l, |_, _| rng.random_range(-1.0..1.0));
        QuadraticProcess {
            m,
            g,
            l,
            lo: -10.0,
            hi: 10.0,
        }
    }

    fn scenario_for(process: &dyn BatchProcess, d0: f64) -> Scenario {
        let dims = process.dims();
        let mut s = Scenario::nominal(&dims);
        s.offsets[0] = d0;
        s
    }

    #[test]
    fn hessian_recovers_quadratic() {
        let p = quadratic_process(6, 21);
        let s = scenario_for(&p, 1.0);
        let u = DVector::from_fn(6, |i, _| 0.1 * i as f64 - 0.2);
        let (h, flags) = hessian_j(&p, &s, &u, &OptimizeOptions::default()).unwrap();
        assert!(flags.is_empty());
        assert_relative_eq!(h, p.m, max_relative = 1e-6);
    }

    #[test]
    fn hessian_is_symmetric_by_construction() {
        let p = quadratic_process(5, 33);
        let s = scenario_for(&p, 1.0);
        let u = DVector::zeros(5);
        let (h, _) = hessian_j(&p, &s, &u, &OptimizeOptions::default()).unwrap();
        assert_eq!((&h - h.transpose()).amax(), 0.0);
    }

    #[test]
    fn hessian_of_flat_cost_is_zero() {
        let p = QuadraticProcess {
            m: DMatrix::zeros(4, 4),
            g: DVector::zeros(4),
            l: 4,
            lo: -1.0,
            hi: 1.0,
        };
        let s = scenario_for(&p, 0.0);
        let (h, _) = hessian_j(&p, &s, &DVector::zeros(4), &OptimizeOptions::default()).unwrap();
        assert_eq!(h.amax(), 0.0);
    }

    #[test]
    fn optimizer_matches_closed_form_on_quadratic() {
        let p = quadratic_process(6, 5);
        let s = scenario_for(&p, 1.0);
        // Unconstrained minimum of 1/2 u^T M u + g^T u is -M^{-1} g,
        // well inside the wide box.
        let expected = -(p.m.clone().lu().solve(&p.g).unwrap());
        let sol =
            optimize_trajectory(&p, &s, &DVector::zeros(6), &OptimizeOptions::default()).unwrap();
        assert!(sol.converged, "residual {:.3e}", sol.kkt_residual);
        assert_relative_eq!(sol.u_opt, expected, epsilon = 1e-6);
    }

    #[test]
    fn optimizer_respects_active_bounds() {
        let mut p = quadratic_process(4, 9);
        p.lo = 0.0;
        p.hi = 0.05;
        let s = scenario_for(&p, 1.0);
        let sol = optimize_trajectory(
            &p,
            &s,
            &DVector::from_element(4, 0.02),
            &OptimizeOptions::default(),
        )
        .unwrap();
        assert!(sol.converged);
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        for _ in 0..500 {
            let u = DVector::from_fn(4, |_, _| rng.random_range(0.0..0.05));
            let j = rollout_cost(&p, &u, &s.offsets).unwrap();
            assert!(sol.j_opt <= j + 1e-9);
        }
    }

    #[test]
    fn flat_cost_converges_immediately() {
        let p = QuadraticProcess {
            m: DMatrix::zeros(4, 4),
            g: DVector::zeros(4),
            l: 4,
            lo: -1.0,
            hi: 1.0,
        };
        let s = scenario_for(&p, 0.0);
        let init = DVector::from_element(4, 0.3);
        let sol = optimize_trajectory(&p, &s, &init, &OptimizeOptions::default()).unwrap();
        assert!(sol.converged);
        assert_eq!(sol.u_opt, init);
        assert_eq!(sol.iterations, 1);
    }

    #[test]
    fn reactor_nominal_optimum_beats_random_probes() {
        let p = FedBatchReactor::reference();
        let s = Scenario::nominal(&p.dims());
        let init = DVector::from_element(20, 0.002);
        let sol = optimize_trajectory(&p, &s, &init, &OptimizeOptions::default()).unwrap();
        assert!(sol.converged, "residual {:.3e}", sol.kkt_residual);
        assert!(sol.j_opt < 0.0, "J* = {}", sol.j_opt);
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        for _ in 0..1000 {
            let u = DVector::from_fn(20, |_, _| rng.random_range(0.0..0.005));
            let j = rollout_cost(&p, &u, &s.offsets).unwrap();
            assert!(sol.j_opt <= j + 1e-9, "probe beat optimum: {} < {}", j, sol.j_opt);
        }
    }

    #[test]
    fn reactor_warm_start_matches_cold_start() {
        let p = FedBatchReactor::reference();
        let s = Scenario::nominal(&p.dims());
        let opts = OptimizeOptions::default();
        let cold = optimize_trajectory(&p, &s, &DVector::from_element(20, 0.0005), &opts).unwrap();
        let warm = optimize_trajectory(&p, &s, &cold.u_opt, &opts).unwrap();
        assert!((cold.j_opt - warm.j_opt).abs() <= 1e-8);
    }

    #[test]
    fn final_gradient_agrees_with_step_halved_probe() {
        // Probe coordinates displaced from the optimum, where the gradient is
        // well above finite-difference noise.
        let p = FedBatchReactor::reference();
        let s = Scenario::nominal(&p.dims());
        let opts = OptimizeOptions::default();
        let sol = optimize_trajectory(&p, &s, &DVector::from_element(20, 0.002), &opts).unwrap();
        let mut probe = sol.u_opt.clone();
        for i in [1usize, 5, 9, 13, 17] {
            probe[i] = (probe[i] + 0.001).clamp(0.0, 0.005);
        }
        let g1 = cost_gradient_fd(&p, &s, &probe, opts.grad_step_rel).unwrap();
        let g2 = cost_gradient_fd(&p, &s, &probe, opts.grad_step_rel / 2.0).unwrap();
        let scale = g1.amax();
        for i in [1usize, 5, 9, 13, 17] {
            assert!(
                (g1[i] - g2[i]).abs() / scale <= 1e-5,
                "coordinate {i}: {:.3e} vs {:.3e}",
                g1[i],
                g2[i]
            );
        }
    }

    #[test]
    fn sensitivity_structure_is_exact() {
        let p = FedBatchReactor::reference();
        let s = Scenario::nominal(&p.dims());
        let u = DVector::from_element(20, 0.003);
        let g = sensitivity_g_xi(&p, &s, &u, &OptimizeOptions::default()).unwrap();
        assert_eq!(g.nrows(), 81);
        assert_eq!(g.ncols(), 20);
        for c in 0..20 {
            assert_eq!(g[(0, c)], 0.0);
        }
        for k1 in 0..20usize {
            for k2 in 0..20usize {
                let base = 1 + 4 * k1;
                if k2 > k1 {
                    for r in 0..4 {
                        assert_eq!(g[(base + r, k2)], 0.0);
                    }
                } else if k2 == k1 {
                    for r in 0..3 {
                        assert_eq!(g[(base + r, k2)], 0.0);
                    }
                    assert_eq!(g[(base + 3, k2)], 1.0);
                } else {
                    assert_eq!(g[(base + 3, k2)], 0.0);
                    // Volume responds to every past feed move with slope t_s.
                    assert_relative_eq!(g[(base + 2, k2)], 12.5, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn sensitivity_matches_step_halved_oracle() {
        let p = FedBatchReactor::reference();
        let dims = p.dims();
        let mut s = Scenario::nominal(&dims);
        s.offsets[0] = 0.05;
        s.offsets[3] = -0.05;
        let u = DVector::from_element(20, 0.003);
        let opts = OptimizeOptions::default();
        let mut halved = opts;
        halved.grad_step_rel = opts.grad_step_rel / 2.0;
        let g1 = sensitivity_g_xi(&p, &s, &u, &opts).unwrap();
        let g2 = sensitivity_g_xi(&p, &s, &u, &halved).unwrap();
        let scale = g1.amax();
        for k1 in 1..20 {
            for k2 in 0..k1 {
                let base = 1 + 4 * k1;
                for r in 0..3 {
                    let d = (g1[(base + r, k2)] - g2[(base + r, k2)]).abs();
                    assert!(d / scale <= 1e-5, "block ({k1},{k2}) row {r}: {d:.3e}");
                }
            }
        }
    }

    #[test]
    fn batch_solve_requires_nominal_head_and_reports_convergence() {
        let p = FedBatchReactor::reference();
        let dims = p.dims();
        let spec = crate::scenario::UncertaintySpec {
            perturbed_params: vec!["k1".into(), "k2".into()],
            fraction: 0.05,
            noise_std_conc: 0.0,
            noise_std_vol: 0.0,
            noise_std_u: 0.0,
            seed: 3,
        };
        let mut scens = vec![Scenario::nominal(&dims)];
        scens.extend(crate::scenario::sample_scenarios(&spec, 3, &dims).unwrap());
        let init = DVector::from_element(20, 0.002);
        let batch = solve_scenario_batch(&p, &scens, &init, &OptimizeOptions::default()).unwrap();
        assert_eq!(batch.trajectories.len(), 4);
        assert!(batch.failures.is_empty());
        assert_eq!(batch.trajectories[0].scenario_id, 0);
        for t in &batch.trajectories {
            assert!(
                t.converged,
                "scenario {} residual {:.3e}",
                t.scenario_id, t.kkt_residual
            );
            assert_eq!(t.xi_opt[0], 1.0);
            let asym = (&t.j_uu - t.j_uu.transpose()).amax();
            assert!(asym <= 1e-6 * t.j_uu.amax());
        }

        // Starting with a non-nominal scenario is rejected.
        let bad = vec![scens[1].clone()];
        assert!(solve_scenario_batch(&p, &bad, &init, &OptimizeOptions::default()).is_err());
    }

    #[test]
    fn scenario_order_does_not_change_results() {
        let p = FedBatchReactor::reference();
        let dims = p.dims();
        let spec = crate::scenario::UncertaintySpec {
            perturbed_params: vec!["c_A0".into(), "k1".into()],
            fraction: 0.10,
            noise_std_conc: 0.0,
            noise_std_vol: 0.0,
            noise_std_u: 0.0,
            seed: 8,
        };
        let sampled = crate::scenario::sample_scenarios(&spec, 3, &dims).unwrap();
        let init = DVector::from_element(20, 0.002);
        let opts = OptimizeOptions::default();

        let mut fwd = vec![Scenario::nominal(&dims)];
        fwd.extend(sampled.clone());
        let mut rev = vec![Scenario::nominal(&dims)];
        rev.extend(sampled.iter().rev().cloned());

        let a = solve_scenario_batch(&p, &fwd, &init, &opts).unwrap();
        let b = solve_scenario_batch(&p, &rev, &init, &opts).unwrap();
        for ta in &a.trajectories {
            let tb = b
                .trajectories
                .iter()
                .find(|t| t.scenario_id == ta.scenario_id)
                .unwrap();
            assert_eq!(ta.j_opt, tb.j_opt);
            assert_eq!(ta.u_opt, tb.u_opt);
        }
    }
}
