//! Seeded Monte Carlo scenario generation: parameter disturbances plus
//! stacked measurement and implementation noise.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::ProcessDims;
use crate::reactor::PARAM_NAMES;

/// Uncertainty description: which parameters move, by how much, and the
/// per-channel noise levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintySpec {
    /// Names from [`PARAM_NAMES`] that receive disturbances.
    pub perturbed_params: Vec<String>,
    /// Relative half-range of the uniform parameter disturbance (e.g. 0.10).
    pub fraction: f64,
    /// Measurement noise std for concentration channels [mol/l].
    pub noise_std_conc: f64,
    /// Measurement noise std for the volume channel [l].
    pub noise_std_vol: f64,
    /// Implementation noise std on the input [l/min].
    pub noise_std_u: f64,
    pub seed: u64,
}

impl UncertaintySpec {
    pub fn validate(&self) -> Result<()> {
        if self.fraction < 0.0 {
            return Err(Error::Config("fraction must be >= 0".into()));
        }
        for s in [self.noise_std_conc, self.noise_std_vol, self.noise_std_u] {
            if s < 0.0 {
                return Err(Error::Config("noise stds must be >= 0".into()));
            }
        }
        for name in &self.perturbed_params {
            if !PARAM_NAMES.contains(&name.as_str()) {
                return Err(Error::Config(format!(
                    "unknown parameter {name:?}; expected one of {PARAM_NAMES:?}"
                )));
            }
        }
        Ok(())
    }

    /// Boolean mask over [`PARAM_NAMES`].
    pub fn perturbed_mask(&self) -> [bool; 6] {
        let mut mask = [false; 6];
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            mask[i] = self.perturbed_params.iter().any(|p| p == name);
        }
        mask
    }

    /// Indices into [`PARAM_NAMES`] of the perturbed parameters.
    pub fn perturbed_indices(&self) -> Vec<usize> {
        self.perturbed_mask()
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| if m { Some(i) } else { None })
            .collect()
    }

    /// Per-channel measurement noise stds for the reactor layout
    /// `y = [c_A, c_B, V]`: concentrations first, volume last.
    pub fn y_channel_stds(&self, n_y: usize) -> Vec<f64> {
        (0..n_y)
            .map(|i| {
                if n_y >= 2 && i == n_y - 1 {
                    self.noise_std_vol
                } else {
                    self.noise_std_conc
                }
            })
            .collect()
    }
}

/// One uncertainty realization: parameter offsets plus stacked noise arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub id: usize,
    /// Multiplicative parameter deviations in [`PARAM_NAMES`] order.
    pub offsets: DVector<f64>,
    /// Stacked measurement noise, length `n_y * L`.
    pub noise_y: DVector<f64>,
    /// Stacked implementation noise, length `n_u * L`.
    pub noise_u: DVector<f64>,
}

impl Scenario {
    /// The unperturbed, noise-free reference scenario (id 0).
    pub fn nominal(dims: &ProcessDims) -> Self {
        Scenario {
            id: 0,
            offsets: DVector::zeros(dims.n_d),
            noise_y: DVector::zeros(dims.n_y * dims.n_stages),
            noise_u: DVector::zeros(dims.n_u * dims.n_stages),
        }
    }

    /// Copy with all noise arrays zeroed (disturbance kept).
    pub fn without_noise(&self) -> Self {
        Scenario {
            id: self.id,
            offsets: self.offsets.clone(),
            noise_y: DVector::zeros(self.noise_y.len()),
            noise_u: DVector::zeros(self.noise_u.len()),
        }
    }

    /// Stacked noise vector `[0, n_y(0), n_u(0), n_y(1), n_u(1), ...]`
    /// aligned with the augmented extended measurements.
    pub fn noise_stacked(&self, dims: &ProcessDims) -> DVector<f64> {
        let mut n = DVector::zeros(dims.xi_len());
        let block = dims.n_y + dims.n_u;
        for k in 0..dims.n_stages {
            let base = 1 + k * block;
            n.rows_mut(base, dims.n_y)
                .copy_from(&self.noise_y.rows(k * dims.n_y, dims.n_y));
            n.rows_mut(base + dims.n_y, dims.n_u)
                .copy_from(&self.noise_u.rows(k * dims.n_u, dims.n_u));
        }
        n
    }
}

/// Draws `count` scenarios with ids `1..=count` from one sequential stream.
///
/// Unit draws are taken for every parameter and noise entry regardless of the
/// mask, then scaled; scenario contents at a given id therefore stay aligned
/// across specs that differ only in `fraction` or in the perturbed set.
pub fn sample_scenarios(
    spec: &UncertaintySpec,
    count: usize,
    dims: &ProcessDims,
) -> Result<Vec<Scenario>> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::Config("scenario count must be >= 1".into()));
    }
    let mask = spec.perturbed_mask();
    let y_stds = spec.y_channel_stds(dims.n_y);
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let uniform = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");

    let mut out = Vec::with_capacity(count);
    for id in 1..=count {
        let mut offsets = DVector::zeros(dims.n_d);
        for i in 0..dims.n_d {
            let unit: f64 = uniform.sample(&mut rng);
            if mask.get(i).copied().unwrap_or(false) {
                offsets[i] = unit * spec.fraction;
            }
        }
        let mut noise_y = DVector::zeros(dims.n_y * dims.n_stages);
        for k in 0..dims.n_stages {
            for c in 0..dims.n_y {
                let z: f64 = StandardNormal.sample(&mut rng);
                noise_y[k * dims.n_y + c] = z * y_stds[c];
            }
        }
        let mut noise_u = DVector::zeros(dims.n_u * dims.n_stages);
        for i in 0..noise_u.len() {
            let z: f64 = StandardNormal.sample(&mut rng);
            noise_u[i] = z * spec.noise_std_u;
        }
        out.push(Scenario {
            id,
            offsets,
            noise_y,
            noise_u,
        });
    }
    Ok(out)
}

/// Splits a sampled set into design (first `n_design`) and test (rest).
pub fn split_design_test(scenarios: &[Scenario], n_design: usize) -> Result<(&[Scenario], &[Scenario])> {
    if n_design == 0 || n_design >= scenarios.len() {
        return Err(Error::Config(format!(
            "design split {} out of range for {} scenarios",
            n_design,
            scenarios.len()
        )));
    }
    Ok(scenarios.split_at(n_design))
}

/// Diagonal of the stacked noise covariance: a leading zero for the augmented
/// constant, then per-stage blocks of (y-channel variances, u variances).
pub fn noise_covariance_diagonal(spec: &UncertaintySpec, dims: &ProcessDims) -> DVector<f64> {
    let y_stds = spec.y_channel_stds(dims.n_y);
    let mut w2 = DVector::zeros(dims.xi_len());
    let block = dims.n_y + dims.n_u;
    for k in 0..dims.n_stages {
        let base = 1 + k * block;
        for c in 0..dims.n_y {
            w2[base + c] = y_stds[c] * y_stds[c];
        }
        for c in 0..dims.n_u {
            w2[base + dims.n_y + c] = spec.noise_std_u * spec.noise_std_u;
        }
    }
    w2
}
