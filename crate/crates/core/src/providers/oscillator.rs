//! Analytic damped rotation about an anchor axis; ground truth for training.

use serde::{Deserialize, Serialize};

use super::{GradientProvider, ProviderInput};
use crate::deformation::PolarSvdGradient;
use crate::propagation::LevelDeformationField;
use crate::{Error, Result, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OscillatorParams {
    pub axis: Vec3,
    /// Peak angle in radians.
    pub amplitude: f64,
    /// Angular frequency in rad/s.
    pub omega: f64,
    /// Exponential decay rate in 1/s.
    pub damping: f64,
    /// Level `h` rotates by `θ·falloff^(L−h)`.
    pub falloff: f64,
}

impl Default for OscillatorParams {
    fn default() -> Self {
        Self {
            axis: Vec3::new(0.0, 1.0, 0.0),
            amplitude: 0.2,
            omega: 2.0 * std::f64::consts::PI,
            damping: 0.1,
            falloff: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OscillatorProvider {
    params: OscillatorParams,
}

impl OscillatorProvider {
    pub fn new(params: OscillatorParams) -> Result<Self> {
        if !(params.amplitude >= 0.0) || !params.amplitude.is_finite() {
            return Err(Error::config(format!("amplitude must be >= 0, got {}", params.amplitude)));
        }
        if !(params.omega > 0.0) || !params.omega.is_finite() {
            return Err(Error::config(format!("frequency must be > 0, got {}", params.omega)));
        }
        if !(params.damping >= 0.0) || !(params.falloff >= 0.0) {
            return Err(Error::config("damping and falloff must be >= 0"));
        }
        if !(params.axis.norm() > 0.0) || !params.axis.iter().all(|v| v.is_finite()) {
            return Err(Error::config("oscillator axis must be a nonzero vector"));
        }
        Ok(Self { params })
    }

    pub fn params(&self) -> &OscillatorParams {
        &self.params
    }

    /// Deflection angle at time `tau` seconds.
    pub fn angle(&self, tau: f64) -> f64 {
        let p = &self.params;
        p.amplitude * (-p.damping * tau).exp() * (p.omega * tau).sin()
    }
}

impl GradientProvider for OscillatorProvider {
    fn name(&self) -> &str {
        "oscillator"
    }

    fn predict(&self, input: &ProviderInput) -> Result<Vec<LevelDeformationField>> {
        let h = input.hierarchy;
        let levels = h.num_levels();
        let theta = self.angle((input.step + 1) as f64 * input.dt);
        Ok((1..=levels)
            .map(|l| {
                let angle = theta * self.params.falloff.powi((levels - l) as i32);
                let g = PolarSvdGradient::rotation(&self.params.axis, angle);
                LevelDeformationField {
                    level: l,
                    gradients: vec![g; h.level(l).len()],
                }
            })
            .collect())
    }
}
