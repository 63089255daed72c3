//! Closed-loop batch simulation under a combination matrix: stage-by-stage
//! input recovery from noisy measurement history, followed by economic-loss
//! accounting against the scenario's re-optimized reference cost.

use nalgebra::DVector;

use crate::design::{quadratic_loss, JccApprox};
use crate::error::{Error, Result};
use crate::process::BatchProcess;
use crate::scenario::Scenario;
use crate::structure::CombinationMatrix;
use crate::trajopt::OptimalTrajectory;

/// One simulated closed-loop batch.
#[derive(Debug, Clone)]
pub struct ClosedLoopRun {
    pub scenario_id: usize,
    /// Commanded inputs after clipping, before implementation noise.
    pub u_commanded: DVector<f64>,
    /// Inputs that entered the plant (command + implementation noise).
    pub u_applied: DVector<f64>,
    /// Noisy extended-measurement history as the controller recorded it.
    pub xi_measured: DVector<f64>,
    /// True states after each stage.
    pub states: Vec<DVector<f64>>,
    pub j_realized: f64,
    /// Re-optimized reference cost for this disturbance.
    pub j_ref: f64,
    /// Economic loss `J_realized - J_ref`.
    pub loss: f64,
    pub clip_events: usize,
}

/// Recovers the stage input from the CV equation: the stage row of `H` is
/// zeroed given the recorded history `xi_m` (blocks before `k`) and the
/// current noisy measurement.
pub fn feedback_input(
    h: &CombinationMatrix,
    k: usize,
    xi_measured: &DVector<f64>,
    y_m: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = &h.dims;
    let blocks = h.feedback_blocks(k)?;
    let mut acc = blocks.setpoint_stored.clone();
    let hist_len = k * d.block_width();
    for c in 0..hist_len {
        let x = xi_measured[1 + c];
        if x == 0.0 {
            continue;
        }
        for r in 0..d.n_u {
            acc[r] += blocks.history[(r, c)] * x;
        }
    }
    for c in 0..d.n_y {
        for r in 0..d.n_u {
            acc[r] += blocks.h_y[(r, c)] * y_m[c];
        }
    }
    // Solve H_u u = -acc; H_u invertibility was checked by feedback_blocks.
    let u = blocks
        .h_u
        .lu()
        .solve(&(-acc))
        .ok_or_else(|| Error::Singular {
            context: format!("feedback solve at stage {k}"),
            cond: blocks.h_u_condition,
        })?;
    Ok(u)
}

/// Simulates one batch under feedback: measure (noisy), recover the input,
/// clip to bounds, inject implementation noise, and step the true plant.
///
/// The controller records what it can see: noisy measurements and the noisy
/// applied input. Clipping happens on the command; the implementation noise
/// is added afterwards and enters the plant unclipped.
pub fn simulate_closed_loop(
    process: &dyn BatchProcess,
    h: &CombinationMatrix,
    scenario: &Scenario,
    j_ref: f64,
) -> Result<ClosedLoopRun> {
    let dims = process.dims();
    let (lo, hi) = process.input_bounds();
    let bw = dims.n_y + dims.n_u;
    let d = &scenario.offsets;

    let mut xi_m = DVector::zeros(dims.xi_len());
    xi_m[0] = 1.0;
    let mut u_commanded = DVector::zeros(dims.n_u * dims.n_stages);
    let mut u_applied = DVector::zeros(dims.n_u * dims.n_stages);
    let mut states = Vec::with_capacity(dims.n_stages);
    let mut x = process.initial_state(d);
    let mut clip_events = 0usize;
    let mut j_realized = 0.0;

    for k in 0..dims.n_stages {
        let y = process.measure(&x, k);
        let y_m = &y + &scenario.noise_y.rows(k * dims.n_y, dims.n_y);
        let base = 1 + k * bw;
        xi_m.rows_mut(base, dims.n_y).copy_from(&y_m);

        let u_raw = feedback_input(h, k, &xi_m, &y_m)?;
        let mut u_cmd = u_raw.clone();
        for i in 0..dims.n_u {
            u_cmd[i] = u_cmd[i].clamp(lo[i], hi[i]);
            if u_cmd[i] != u_raw[i] {
                clip_events += 1;
            }
        }
        let u_m = &u_cmd + &scenario.noise_u.rows(k * dims.n_u, dims.n_u);
        xi_m.rows_mut(base + dims.n_y, dims.n_u).copy_from(&u_m);
        u_commanded.rows_mut(k * dims.n_u, dims.n_u).copy_from(&u_cmd);
        u_applied.rows_mut(k * dims.n_u, dims.n_u).copy_from(&u_m);

        j_realized += process.stage_cost(&x, &u_m, k);
        x = process.step(&x, &u_m, d, k)?;
        states.push(x.clone());
    }
    j_realized += process.terminal_cost(&x, d);

    Ok(ClosedLoopRun {
        scenario_id: scenario.id,
        u_commanded,
        u_applied,
        xi_measured: xi_m,
        states,
        j_realized,
        j_ref,
        loss: j_realized - j_ref,
        clip_events,
    })
}

/// Losses of one method on one scenario.
#[derive(Debug, Clone, Copy)]
pub struct ScenarioLoss {
    pub scenario_id: usize,
    /// Realized closed-loop loss `J_cl - J*`.
    pub simulated: f64,
    /// Quadratic loss of the same `(d, n)` realization.
    pub quadratic: f64,
    pub clip_events: usize,
}

/// Losses of one labeled combination matrix over the test set.
#[derive(Debug, Clone)]
pub struct MethodLosses {
    pub label: String,
    pub per_scenario: Vec<ScenarioLoss>,
    pub failures: Vec<(usize, String)>,
    pub avg_simulated: f64,
    pub std_simulated: f64,
    pub avg_quadratic: f64,
    pub std_quadratic: f64,
}

#[derive(Debug, Clone)]
pub struct LossReport {
    pub methods: Vec<MethodLosses>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Evaluates labeled combination matrices over a test set: closed-loop
/// simulated losses plus the quadratic-loss counterpart for each scenario's
/// jointly sampled disturbance and noise.
///
/// Per-cell failures are recorded in the report instead of aborting the
/// sweep; averages cover the successful cells.
pub fn evaluate(
    process: &dyn BatchProcess,
    matrices: &[(String, &CombinationMatrix)],
    test_scenarios: &[Scenario],
    test_trajectories: &[OptimalTrajectory],
) -> Result<LossReport> {
    let dims = process.dims();
    let mut methods = Vec::with_capacity(matrices.len());
    for (label, h) in matrices {
        let mut per_scenario = Vec::with_capacity(test_scenarios.len());
        let mut failures = Vec::new();
        for scenario in test_scenarios {
            let Some(traj) = test_trajectories
                .iter()
                .find(|t| t.scenario_id == scenario.id)
            else {
                failures.push((scenario.id, "no reference trajectory".to_string()));
                continue;
            };
            let cell = simulate_closed_loop(process, h, scenario, traj.j_opt).and_then(|run| {
                let noise = scenario.noise_stacked(&dims);
                let quad = quadratic_loss(h, traj, &noise, JccApprox::Exact)?;
                Ok(ScenarioLoss {
                    scenario_id: scenario.id,
                    simulated: run.loss,
                    quadratic: quad,
                    clip_events: run.clip_events,
                })
            });
            match cell {
                Ok(loss) => per_scenario.push(loss),
                Err(e) => failures.push((scenario.id, e.to_string())),
            }
        }
        let sims: Vec<f64> = per_scenario.iter().map(|s| s.simulated).collect();
        let quads: Vec<f64> = per_scenario.iter().map(|s| s.quadratic).collect();
        let (avg_simulated, std_simulated) = mean_std(&sims);
        let (avg_quadratic, std_quadratic) = mean_std(&quads);
        methods.push(MethodLosses {
            label: label.clone(),
            per_scenario,
            failures,
            avg_simulated,
            std_simulated,
            avg_quadratic,
            std_quadratic,
        });
    }
    Ok(LossReport { methods })
}
