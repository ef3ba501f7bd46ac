//! Command-line front end, run configuration, output sinks and the
//! discretized-action oracle.

pub mod cli;
pub mod config;
pub mod oracle;
pub mod output;

use crate::dynamics::StepOptions;
use crate::minkowski::FourVector;
use crate::worldline::{kinematics_from_jet, PastExtension, WorldlineError, WorldlineHistory, WorldlineSample};

/// History ending at `t0` in the state `(position, beta)` with constant
/// coordinate acceleration `accel` before it: `x(t) = x0 + v0 τ + ½ accel τ²`,
/// `τ = t − t0 ∈ [−span, 0]`, sampled at spacing `dt`.
pub fn curved_prehistory(c: f64, t0: f64, position: [f64; 3], beta: [f64; 3], accel: [f64; 3], span: f64, dt: f64, options: &StepOptions) -> Result<WorldlineHistory, WorldlineError> {
    let steps = (span / dt).ceil() as usize;
    let point = |tau: f64| {
        let x: [f64; 3] = std::array::from_fn(|k| position[k] + beta[k] * c * tau + 0.5 * accel[k] * tau * tau);
        let v: [f64; 3] = std::array::from_fn(|k| beta[k] * c + accel[k] * tau);
        let (u, a, _, _) = kinematics_from_jet(v, accel, [0.0; 3], c);
        (FourVector::from_parts(c * (t0 + tau), x), u, a)
    };
    let tau0 = -(steps as f64) * dt;
    let (r, u, a) = point(tau0);
    let mut h = WorldlineHistory::new(c, WorldlineSample { t: t0 + tau0, s: 0.0, r, u, a }, options.interpolation, PastExtension::Inertial, options.tolerances)?;
    for k in (0..steps).rev() {
        let tau = -(k as f64) * dt;
        let (r, u, a) = point(tau);
        let t = if k == 0 { t0 } else { t0 + tau };
        h.append_advancing(t, r, u, a)?;
    }
    Ok(h)
}
