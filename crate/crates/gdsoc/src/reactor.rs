//! Fed-batch reactor with two reactions, A + B -> C and 2B -> D. The feed
//! rate of B is the single manipulated input; the economics reward product C
//! and penalize byproduct D at batch end.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{BatchProcess, ProcessDims};

/// Ordered names of the disturbance entries; scenario offset vectors follow
/// this layout.
pub const PARAM_NAMES: [&str; 6] = ["c_A0", "c_B0", "V0", "k1", "k2", "c_B_in"];

/// Kinetic and initial-condition parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReactorParams {
    /// Initial concentration of A [mol/l].
    pub c_a0: f64,
    /// Initial concentration of B [mol/l].
    pub c_b0: f64,
    /// Initial volume [l].
    pub v0: f64,
    /// Main reaction kinetic coefficient [l/(mol min)].
    pub k1: f64,
    /// Side reaction kinetic coefficient [l/(mol min)].
    pub k2: f64,
    /// Inlet concentration of B [mol/l].
    pub c_b_in: f64,
    /// Batch duration [min].
    pub t_f: f64,
}

impl ReactorParams {
    pub fn nominal() -> Self {
        ReactorParams {
            c_a0: 0.72,
            c_b0: 0.0614,
            v0: 1.0,
            k1: 0.053,
            k2: 0.128,
            c_b_in: 5.0,
            t_f: 250.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("c_A0", self.c_a0),
            ("c_B0", self.c_b0),
            ("V0", self.v0),
            ("k1", self.k1),
            ("k2", self.k2),
            ("c_B_in", self.c_b_in),
            ("t_f", self.t_f),
        ];
        for (name, v) in fields {
            if !(v > 0.0) {
                return Err(Error::Config(format!(
                    "reactor parameter {name} must be strictly positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Applies multiplicative offsets (fractions) in [`PARAM_NAMES`] order.
    pub fn perturbed(&self, offsets: &DVector<f64>) -> ReactorParams {
        ReactorParams {
            c_a0: self.c_a0 * (1.0 + offsets[0]),
            c_b0: self.c_b0 * (1.0 + offsets[1]),
            v0: self.v0 * (1.0 + offsets[2]),
            k1: self.k1 * (1.0 + offsets[3]),
            k2: self.k2 * (1.0 + offsets[4]),
            c_b_in: self.c_b_in * (1.0 + offsets[5]),
            t_f: self.t_f,
        }
    }
}

/// Concentrations of A and B plus the liquid volume.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReactorState {
    pub c_a: f64,
    pub c_b: f64,
    pub v: f64,
}

impl ReactorState {
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.c_a, self.c_b, self.v])
    }

    pub fn from_vector(x: &DVector<f64>) -> Self {
        ReactorState {
            c_a: x[0],
            c_b: x[1],
            v: x[2],
        }
    }

    /// `self + scale * dot`, used by the RK4 stages.
    #[inline]
    fn axpy(self, scale: f64, dot: ReactorState) -> ReactorState {
        ReactorState {
            c_a: self.c_a + scale * dot.c_a,
            c_b: self.c_b + scale * dot.c_b,
            v: self.v + scale * dot.v,
        }
    }
}

/// Time derivatives of the reactor state under feed rate `u` [l/min].
pub fn reactor_rhs(state: ReactorState, u: f64, p: &ReactorParams) -> ReactorState {
    let ReactorState { c_a, c_b, v } = state;
    let r1 = p.k1 * c_a * c_b;
    ReactorState {
        c_a: -r1 - c_a * u / v,
        c_b: -r1 - 2.0 * p.k2 * c_b * c_b - (c_b - p.c_b_in) * u / v,
        v: u,
    }
}

/// Concentrations of product C and byproduct D inferred by mass balance.
///
/// `c_C = (c_A0 V0 - c_A V) / V`; `c_D` follows from the B balance. Both use
/// the realized initial charge, so the inferred amounts stay non-negative
/// along any physical trajectory.
pub fn derived_concentrations(state: ReactorState, p: &ReactorParams) -> Result<(f64, f64)> {
    if !(state.v > 0.0) {
        return Err(Error::Numerical(format!(
            "derived_concentrations: nonpositive volume {}",
            state.v
        )));
    }
    let c_c = (p.c_a0 * p.v0 - state.c_a * state.v) / state.v;
    let c_d = ((state.c_a + p.c_b_in - state.c_b) * state.v
        - (p.c_a0 + p.c_b_in - p.c_b0) * p.v0)
        / (2.0 * state.v);
    Ok((c_c, c_d))
}

/// The fed-batch reactor as a [`BatchProcess`] with a fixed-step RK4
/// integrator (`n_sub` substeps per control interval).
#[derive(Debug, Clone)]
pub struct FedBatchReactor {
    pub params: ReactorParams,
    pub n_stages: usize,
    pub n_sub: usize,
    pub u_min: f64,
    pub u_max: f64,
}

impl FedBatchReactor {
    pub fn new(params: ReactorParams, n_stages: usize, n_sub: usize, u_min: f64, u_max: f64) -> Result<Self> {
        params.validate()?;
        if n_stages == 0 || n_sub == 0 {
            return Err(Error::Config("L and n_sub must be >= 1".into()));
        }
        if !(u_min <= u_max) {
            return Err(Error::Config(format!(
                "input bounds must satisfy u_min <= u_max, got [{u_min}, {u_max}]"
            )));
        }
        Ok(FedBatchReactor {
            params,
            n_stages,
            n_sub,
            u_min,
            u_max,
        })
    }

    /// Reference instance: nominal parameters, L = 20, 10 substeps,
    /// feed bounds [0, 0.005] l/min.
    pub fn reference() -> Self {
        FedBatchReactor::new(ReactorParams::nominal(), 20, 10, 0.0, 0.005).unwrap()
    }

    pub fn stage_duration_value(&self) -> f64 {
        self.params.t_f / self.n_stages as f64
    }

    /// Parameters under one disturbance realization.
    pub fn scenario_params(&self, d: &DVector<f64>) -> ReactorParams {
        self.params.perturbed(d)
    }

    fn check_state(x: &DVector<f64>, stage: usize, substep: usize) -> Result<DVector<f64>> {
        let s = Self::check_state_scalar(ReactorState::from_vector(x), stage, substep)?;
        Ok(s.to_vector())
    }

    #[inline]
    fn check_state_scalar(mut s: ReactorState, stage: usize, substep: usize) -> Result<ReactorState> {
        for (name, c) in [("c_A", &mut s.c_a), ("c_B", &mut s.c_b)] {
            if *c < 0.0 {
                if *c >= -1e-9 {
                    *c = 0.0;
                } else {
                    return Err(Error::StateInvariant {
                        stage,
                        substep,
                        detail: format!("concentration {name} = {:.6e}", *c),
                    });
                }
            }
        }
        if !(s.v > 0.0) {
            return Err(Error::StateInvariant {
                stage,
                substep,
                detail: format!("volume {} <= 0", s.v),
            });
        }
        Ok(s)
    }
}

impl BatchProcess for FedBatchReactor {
    fn dims(&self) -> ProcessDims {
        ProcessDims {
            n_x: 3,
            n_u: 1,
            n_y: 3,
            n_d: 6,
            n_stages: self.n_stages,
        }
    }

    fn stage_duration(&self) -> f64 {
        self.stage_duration_value()
    }

    fn initial_state(&self, d: &DVector<f64>) -> DVector<f64> {
        let p = self.scenario_params(d);
        DVector::from_vec(vec![p.c_a0, p.c_b0, p.v0])
    }

    fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        d: &DVector<f64>,
        k: usize,
    ) -> Result<DVector<f64>> {
        let p = self.scenario_params(d);
        let feed = u[0];
        let t_s = self.stage_duration_value();
        let checked = Self::check_state(x, k, 0)?;
        let mut s = ReactorState::from_vector(&checked);
        let h = t_s / self.n_sub as f64;
        // RK4 on the scalar state; this is the innermost loop of every
        // rollout and finite-difference evaluation.
        for sub in 0..self.n_sub {
            let k1 = reactor_rhs(s, feed, &p);
            let k2 = reactor_rhs(s.axpy(0.5 * h, k1), feed, &p);
            let k3 = reactor_rhs(s.axpy(0.5 * h, k2), feed, &p);
            let k4 = reactor_rhs(s.axpy(h, k3), feed, &p);
            s = ReactorState {
                c_a: s.c_a + h / 6.0 * (k1.c_a + 2.0 * k2.c_a + 2.0 * k3.c_a + k4.c_a),
                c_b: s.c_b + h / 6.0 * (k1.c_b + 2.0 * k2.c_b + 2.0 * k3.c_b + k4.c_b),
                v: s.v + h / 6.0 * (k1.v + 2.0 * k2.v + 2.0 * k3.v + k4.v),
            };
            s = Self::check_state_scalar(s, k, sub + 1)?;
        }
        Ok(s.to_vector())
    }

    fn measure(&self, x: &DVector<f64>, _k: usize) -> DVector<f64> {
        x.clone()
    }

    fn stage_cost(&self, _x: &DVector<f64>, _u: &DVector<f64>, _k: usize) -> f64 {
        0.0
    }

    fn terminal_cost(&self, x_final: &DVector<f64>, d: &DVector<f64>) -> f64 {
        let p = self.scenario_params(d);
        let s = ReactorState::from_vector(x_final);
        // Invalid terminal volumes are caught by step(); this unwrap is for
        // direct callers with a valid state.
        let (c_c, c_d) = derived_concentrations(s, &p).expect("terminal state has positive volume");
        (c_d - c_c) * s.v
    }

    fn input_bounds(&self) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(1, self.u_min),
            DVector::from_element(1, self.u_max),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::{extended_measurements, rollout};
    use approx::assert_relative_eq;

    fn nominal_d() -> DVector<f64> {
        DVector::zeros(6)
    }

    #[test]
    fn rhs_matches_hand_evaluation() {
        let p = ReactorParams::nominal();
        let s = ReactorState {
            c_a: 0.72,
            c_b: 0.0614,
            v: 1.0,
        };
        let dot = reactor_rhs(s, 0.0, &p);
        // -k1 * c_A * c_B with Table values.
        assert_relative_eq!(dot.c_a, -0.053 * 0.72 * 0.0614, max_relative = 1e-12);
        assert_eq!(dot.v, 0.0);
    }

    #[test]
    fn rhs_zero_kinetics_zero_feed_is_static() {
        let mut p = ReactorParams::nominal();
        p.k1 = 1e-300; // validate() requires > 0; effectively zero
        p.k2 = 1e-300;
        let s = ReactorState {
            c_a: 0.3,
            c_b: 0.2,
            v: 1.5,
        };
        let dot = reactor_rhs(s, 0.0, &p);
        assert!(dot.c_a.abs() < 1e-12);
        assert!(dot.c_b.abs() < 1e-12);
        assert_eq!(dot.v, 0.0);
    }

    #[test]
    fn rhs_volume_derivative_is_feed() {
        let p = ReactorParams::nominal();
        let s = ReactorState {
            c_a: 0.72,
            c_b: 0.0614,
            v: 1.0,
        };
        let dot = reactor_rhs(s, 0.005, &p);
        assert_eq!(dot.v, 0.005);
    }

    #[test]
    fn derived_concentrations_zero_at_initial_state() {
        let p = ReactorParams::nominal();
        let s = ReactorState {
            c_a: p.c_a0,
            c_b: p.c_b0,
            v: p.v0,
        };
        let (c_c, c_d) = derived_concentrations(s, &p).unwrap();
        assert_relative_eq!(c_c, 0.0, epsilon = 1e-15);
        assert_relative_eq!(c_d, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn derived_concentrations_zero_at_perturbed_initial_state() {
        let nominal = ReactorParams::nominal();
        let offsets = DVector::from_vec(vec![0.1, -0.1, -0.08, 0.0, 0.0, 0.0]);
        let p = nominal.perturbed(&offsets);
        let s = ReactorState {
            c_a: p.c_a0,
            c_b: p.c_b0,
            v: p.v0,
        };
        let (c_c, c_d) = derived_concentrations(s, &p).unwrap();
        assert_relative_eq!(c_c, 0.0, epsilon = 1e-14);
        assert_relative_eq!(c_d, 0.0, epsilon = 1e-14);
    }

    #[test]
    fn step_volume_growth_is_exact_for_constant_feed() {
        let reactor = FedBatchReactor::reference();
        let x = reactor.initial_state(&nominal_d());
        let u = DVector::from_element(1, 0.005);
        let next = reactor.step(&x, &u, &nominal_d(), 0).unwrap();
        // dV/dt = u is linear, so RK4 integrates it exactly: 0.005 * 12.5.
        assert_relative_eq!(next[2], 1.0 + 0.0625, epsilon = 1e-14);
    }

    #[test]
    fn rollout_cost_matches_fine_reference() {
        let coarse = FedBatchReactor::reference();
        let mut fine = FedBatchReactor::reference();
        fine.n_sub = 100;
        let u = DVector::from_element(20, 0.005);
        let j_coarse = rollout(&coarse, &u, &nominal_d()).unwrap().cost;
        let j_fine = rollout(&fine, &u, &nominal_d()).unwrap().cost;
        assert!(
            (j_coarse - j_fine).abs() <= 1e-8,
            "|dJ| = {:.3e}",
            (j_coarse - j_fine).abs()
        );
    }

    #[test]
    fn rollout_derived_concentrations_stay_nonnegative() {
        let reactor = FedBatchReactor::reference();
        let u = DVector::from_element(20, 0.005);
        let roll = rollout(&reactor, &u, &nominal_d()).unwrap();
        for x in &roll.states {
            let s = ReactorState::from_vector(x);
            let (c_c, c_d) = derived_concentrations(s, &reactor.params).unwrap();
            assert!(c_c >= -1e-9, "c_C = {c_c}");
            assert!(c_d >= -1e-9, "c_D = {c_d}");
        }
    }

    #[test]
    fn integrator_is_fourth_order() {
        // Halving the substep size must shrink terminal error by >= 8x,
        // each measured against its own 10x-refined reference.
        let d = nominal_d();
        let u = DVector::from_element(20, 0.005);
        let terminal = |n_sub: usize| {
            let mut r = FedBatchReactor::reference();
            r.n_sub = n_sub;
            rollout(&r, &u, &d).unwrap().states.last().unwrap().clone()
        };
        let err_coarse = (terminal(10) - terminal(100)).norm();
        let err_half = (terminal(20) - terminal(200)).norm();
        assert!(
            err_coarse / err_half >= 8.0,
            "order ratio {:.2}",
            err_coarse / err_half
        );
    }

    #[test]
    fn rollout_is_deterministic() {
        let reactor = FedBatchReactor::reference();
        let u = DVector::from_fn(20, |i, _| 0.001 + 0.0001 * i as f64);
        let a = rollout(&reactor, &u, &nominal_d()).unwrap();
        let b = rollout(&reactor, &u, &nominal_d()).unwrap();
        assert_eq!(a.cost.to_bits(), b.cost.to_bits());
        for (xa, xb) in a.states.iter().zip(&b.states) {
            assert_eq!(xa, xb);
        }
    }

    #[test]
    fn extended_measurements_layout() {
        let reactor = FedBatchReactor::reference();
        let u = DVector::from_fn(20, |i, _| 1e-4 * (i + 1) as f64);
        let roll = rollout(&reactor, &u, &nominal_d()).unwrap();
        let xi = extended_measurements(&reactor.dims(), &roll, &u);
        assert_eq!(xi.len(), 81);
        assert_eq!(xi[0], 1.0);
        // y(0) is the initial measurement, u(0) right after it.
        assert_eq!(xi[1], 0.72);
        assert_eq!(xi[4], 1e-4);
        // Last block holds y(19), u(19).
        assert_eq!(xi[80], 20e-4);
    }

    #[test]
    fn step_rejects_negative_concentration_beyond_tolerance() {
        let reactor = FedBatchReactor::reference();
        let x = DVector::from_vec(vec![0.72, -1e-6, 1.0]);
        let err = reactor
            .step(&x, &DVector::zeros(1), &nominal_d(), 3)
            .unwrap_err();
        match err {
            Error::StateInvariant { stage, .. } => assert_eq!(stage, 3),
            other => panic!("unexpected error {other:?}"),
        }
    }
}
