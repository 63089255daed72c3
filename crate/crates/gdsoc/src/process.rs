//! Batch-process abstraction: stage dynamics, measurements, costs, and
//! stacked rollouts over a fixed horizon.

use nalgebra::DVector;

use crate::error::Result;

/// Problem dimensions shared by every stacked quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProcessDims {
    pub n_x: usize,
    pub n_u: usize,
    pub n_y: usize,
    pub n_d: usize,
    /// Number of control intervals L.
    pub n_stages: usize,
}

impl ProcessDims {
    pub fn stacked_input_len(&self) -> usize {
        self.n_u * self.n_stages
    }

    /// Length of the augmented extended-measurement vector `[1, y(0), u(0), ...]`.
    pub fn xi_len(&self) -> usize {
        (self.n_y + self.n_u) * self.n_stages + 1
    }
}

/// A deterministic batch process over `n_stages` control intervals.
///
/// The disturbance vector `d` carries one realization of the model
/// uncertainty; callers hold it fixed along a rollout.
pub trait BatchProcess {
    fn dims(&self) -> ProcessDims;

    /// Duration of one control interval.
    fn stage_duration(&self) -> f64;

    /// Initial state implied by the disturbance realization.
    fn initial_state(&self, d: &DVector<f64>) -> DVector<f64>;

    /// Advances the state over stage `k` under constant input `u`.
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>, d: &DVector<f64>, k: usize)
        -> Result<DVector<f64>>;

    /// Measurement taken at the start of stage `k`.
    fn measure(&self, x: &DVector<f64>, k: usize) -> DVector<f64>;

    fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>, k: usize) -> f64;

    fn terminal_cost(&self, x_final: &DVector<f64>, d: &DVector<f64>) -> f64;

    /// Per-input `[lo, hi]` bounds.
    fn input_bounds(&self) -> (DVector<f64>, DVector<f64>);
}

/// One noise-free rollout: states after each stage, measurements at stage
/// starts, and the total cost.
#[derive(Debug, Clone)]
pub struct Rollout {
    /// `x(1), ..., x(L)`.
    pub states: Vec<DVector<f64>>,
    /// `y(0), ..., y(L-1)`, taken before the stage input is applied.
    pub measurements: Vec<DVector<f64>>,
    pub cost: f64,
}

/// Simulates the process under stacked inputs `u_stacked` (length `n_u * L`).
pub fn rollout(
    process: &dyn BatchProcess,
    u_stacked: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<Rollout> {
    let dims = process.dims();
    if u_stacked.len() != dims.stacked_input_len() {
        return Err(crate::error::Error::Dimension(format!(
            "rollout: stacked input length {} != n_u*L = {}",
            u_stacked.len(),
            dims.stacked_input_len()
        )));
    }
    let mut x = process.initial_state(d);
    let mut states = Vec::with_capacity(dims.n_stages);
    let mut measurements = Vec::with_capacity(dims.n_stages);
    let mut cost = 0.0;
    for k in 0..dims.n_stages {
        let u = stage_input(u_stacked, dims.n_u, k);
        measurements.push(process.measure(&x, k));
        cost += process.stage_cost(&x, &u, k);
        x = process.step(&x, &u, d, k)?;
        states.push(x.clone());
    }
    cost += process.terminal_cost(&x, d);
    Ok(Rollout {
        states,
        measurements,
        cost,
    })
}

/// Extracts `u(k)` from a stacked input vector.
pub fn stage_input(u_stacked: &DVector<f64>, n_u: usize, k: usize) -> DVector<f64> {
    u_stacked.rows(k * n_u, n_u).into_owned()
}

/// Builds the augmented extended-measurement vector
/// `xi = [1, y(0), u(0), y(1), u(1), ...]` from a rollout.
pub fn extended_measurements(
    dims: &ProcessDims,
    roll: &Rollout,
    u_stacked: &DVector<f64>,
) -> DVector<f64> {
    let mut xi = DVector::zeros(dims.xi_len());
    xi[0] = 1.0;
    let block = dims.n_y + dims.n_u;
    for k in 0..dims.n_stages {
        let base = 1 + k * block;
        xi.rows_mut(base, dims.n_y).copy_from(&roll.measurements[k]);
        xi.rows_mut(base + dims.n_y, dims.n_u)
            .copy_from(&u_stacked.rows(k * dims.n_u, dims.n_u));
    }
    xi
}

/// Cost of a rollout; convenience wrapper used by the optimizer.
pub fn rollout_cost(
    process: &dyn BatchProcess,
    u_stacked: &DVector<f64>,
    d: &DVector<f64>,
) -> Result<f64> {
    Ok(rollout(process, u_stacked, d)?.cost)
}

/// Clips a stacked input vector to the process bounds, elementwise.
pub fn clip_to_bounds(u: &mut DVector<f64>, lo: &DVector<f64>, hi: &DVector<f64>) {
    let n_u = lo.len();
    for i in 0..u.len() {
        let c = i % n_u;
        u[i] = u[i].clamp(lo[c], hi[c]);
    }
}

/// Classical fixed-step RK4 over `[0, t_span]` with `n_steps` equal steps.
///
/// `rhs` must be autonomous over the integration window (piecewise-constant
/// inputs are folded into the closure by the caller).
pub fn rk4<F>(rhs: F, x0: &DVector<f64>, t_span: f64, n_steps: usize) -> Vec<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let h = t_span / n_steps as f64;
    let mut out = Vec::with_capacity(n_steps);
    let mut x = x0.clone();
    for _ in 0..n_steps {
        let k1 = rhs(&x);
        let k2 = rhs(&(&x + &k1 * (h / 2.0)));
        let k3 = rhs(&(&x + &k2 * (h / 2.0)));
        let k4 = rhs(&(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        out.push(x.clone());
    }
    out
}
