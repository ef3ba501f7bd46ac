//! Faraday tensors acting on a particle: external, retarded self, retarded
//! binary (two roots per pair) and the asymptotic self-force.
//!
//! Every retarded contribution is built from one kernel. For a source event
//! with 4-velocity `u`, acceleration `a = du/ds` and separation
//! `X = x_observer − r_source` on the hyperboloid `X·X = σ²`,
//!
//! ```text
//! H(q) = −(q/|X·u|) [ (a∧X)/(X·u) − (u∧X)(a·X − u·u)/(X·u)² ]
//! ```
//!
//! which is `−(q/|w|) d/ds′[(u∧X)/w]` expanded with `dX/ds′ = −u`. The self
//! tensor is `H(2q)` at the σ_i root; the pair tensor is `H(q_j)` at the σ_i
//! root plus `H(q_j)` at the σ_j root.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minkowski::{contract_force, dot, FaradayTensor, FourVector, METRIC};
use crate::retardation::{causal_root, check_grazing, DelayRoot, RetardationError, RootOptions};
use crate::worldline::{ParticleSpec, Worldline, WorldlineError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FieldError {
    #[error(transparent)]
    Retardation(#[from] RetardationError),
    #[error("particle index {index} out of range for {len} particles")]
    BadIndex { index: usize, len: usize },
}

impl From<WorldlineError> for FieldError {
    fn from(e: WorldlineError) -> Self {
        FieldError::Retardation(e.into())
    }
}

/// User-supplied smooth external field.
pub trait AnalyticField: fmt::Debug + Send + Sync {
    /// Covariant `F_{μν}` at event `r`.
    fn faraday(&self, r: &FourVector) -> FaradayTensor;
    /// Contravariant potential `A^μ` at event `r`.
    fn potential(&self, r: &FourVector) -> FourVector;
}

/// External field acting on every particle.
#[derive(Clone, Debug, Default)]
pub enum ExternalFieldModel {
    #[default]
    None,
    /// Constant uniform field, potential in the linear gauge `A_μ = −½ F_{μν} r^ν`.
    Uniform { e: [f64; 3], b: [f64; 3] },
    Analytic(Arc<dyn AnalyticField>),
    /// `inner` for `r^0 < c·t_off`, zero afterwards.
    Switched { inner: Box<ExternalFieldModel>, t_off: f64, c: f64 },
}

impl ExternalFieldModel {
    pub fn faraday(&self, r: &FourVector) -> FaradayTensor {
        match self {
            ExternalFieldModel::None => FaradayTensor::ZERO,
            ExternalFieldModel::Uniform { e, b } => FaradayTensor::from_fields(*e, *b),
            ExternalFieldModel::Analytic(f) => FaradayTensor::antisymmetrize(*f.faraday(r).components()),
            ExternalFieldModel::Switched { inner, t_off, c } => {
                if r[0] < c * t_off {
                    inner.faraday(r)
                } else {
                    FaradayTensor::ZERO
                }
            }
        }
    }

    /// Contravariant potential `A^μ(r)`.
    pub fn potential(&self, r: &FourVector) -> FourVector {
        match self {
            ExternalFieldModel::None => FourVector::ZERO,
            ExternalFieldModel::Uniform { e, b } => {
                let f = FaradayTensor::from_fields(*e, *b);
                let m = f.components();
                let lower: [f64; 4] = std::array::from_fn(|mu| -0.5 * (0..4).map(|nu| m[mu][nu] * r[nu]).sum::<f64>());
                FourVector(std::array::from_fn(|mu| METRIC[mu] * lower[mu]))
            }
            ExternalFieldModel::Analytic(f) => f.potential(r),
            ExternalFieldModel::Switched { inner, t_off, c } => {
                if r[0] < c * t_off {
                    inner.potential(r)
                } else {
                    FourVector::ZERO
                }
            }
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, ExternalFieldModel::None)
    }
}

/// How the self-interaction enters the equations of motion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfForceMode {
    #[default]
    Exact,
    Asymptotic,
}

/// A charged source: its parameters and its worldline.
#[derive(Clone, Copy)]
pub struct Source<'a> {
    pub spec: &'a ParticleSpec,
    pub line: &'a dyn Worldline,
}

impl<'a> Source<'a> {
    pub fn new(spec: &'a ParticleSpec, line: &'a dyn Worldline) -> Self {
        Source { spec, line }
    }
}

/// Kernel `H(q)` for one solved root (see module docs).
pub fn lienard_wiechert(charge: f64, root: &DelayRoot, observer: &FourVector) -> Result<FaradayTensor, FieldError> {
    if charge == 0.0 {
        return Ok(FaradayTensor::ZERO);
    }
    let ev = &root.source_event;
    let x = root.separation(observer);
    let w = check_grazing(&x, &ev.u, &RootOptions::default())?;
    let dw = dot(&ev.a, &x) - dot(&ev.u, &ev.u);
    let t1 = FaradayTensor::wedge(&ev.a, &x).scale(1.0 / w);
    let t2 = FaradayTensor::wedge(&ev.u, &x).scale(dw / (w * w));
    Ok((t1 - t2).scale(-charge / w.abs()))
}

/// Retarded self tensor of a particle of charge `q`, radius `sigma`, at `observer`.
pub fn self_faraday<W: Worldline + ?Sized>(line: &W, observer: &FourVector, charge: f64, sigma: f64) -> Result<FaradayTensor, FieldError> {
    if charge == 0.0 {
        return Ok(FaradayTensor::ZERO);
    }
    let root = causal_root(line, observer, sigma, &RootOptions::default())?;
    lienard_wiechert(2.0 * charge, &root, observer)
}

/// Pair tensor on observer `i` from source `j`: one term per radius.
pub fn binary_faraday<W: Worldline + ?Sized>(src: &W, observer: &FourVector, q_j: f64, sigma_i: f64, sigma_j: f64) -> Result<FaradayTensor, FieldError> {
    if q_j == 0.0 {
        return Ok(FaradayTensor::ZERO);
    }
    let opts = RootOptions::default();
    let ra = causal_root(src, observer, sigma_i, &opts)?;
    let ha = lienard_wiechert(q_j, &ra, observer)?;
    if sigma_i == sigma_j {
        return Ok(ha.scale(2.0));
    }
    let rb = causal_root(src, observer, sigma_j, &opts)?;
    Ok(ha + lienard_wiechert(q_j, &rb, observer)?)
}

/// Point-particle pair tensor: twice the light-cone kernel.
pub fn binary_faraday_pointlimit<W: Worldline + ?Sized>(src: &W, observer: &FourVector, q_j: f64) -> Result<FaradayTensor, FieldError> {
    if q_j == 0.0 {
        return Ok(FaradayTensor::ZERO);
    }
    let root = causal_root(src, observer, 0.0, &RootOptions::default())?;
    Ok(lienard_wiechert(q_j, &root, observer)?.scale(2.0))
}

/// Asymptotic self 4-force `g = −m_EM c a(s′) + g′(s′)` with
/// `g′ = −(q²/3c)[ü − u(u·ü)]`, evaluated at the retarded event (contravariant).
pub fn asymptotic_self_force<W: Worldline + ?Sized>(line: &W, observer: &FourVector, charge: f64, sigma: f64) -> Result<FourVector, FieldError> {
    let c = line.c();
    let root = causal_root(line, observer, sigma, &RootOptions::default())?;
    let ev = root.source_event;
    let jerk = line.jerk_at(ev.t)?;
    let m_em = charge * charge / (c * c * sigma);
    let g_prime = (jerk - ev.u * dot(&ev.u, &jerk)) * (-charge * charge / (3.0 * c));
    Ok(ev.a * (-m_em * c) + g_prime)
}

/// Exact self 4-force `(q/c) η F_self u` at the observer state.
pub fn exact_self_force<W: Worldline + ?Sized>(line: &W, observer: &FourVector, u: &FourVector, charge: f64, sigma: f64) -> Result<FourVector, FieldError> {
    let f = self_faraday(line, observer, charge, sigma)?;
    Ok(contract_force(&f, u) * (charge / line.c()))
}

/// Total field on one particle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TotalField {
    /// External plus retarded tensors (self included only in exact mode).
    pub tensor: FaradayTensor,
    /// Asymptotic self 4-force, present only in asymptotic mode.
    pub self_force: Option<FourVector>,
}

impl TotalField {
    /// 4-force `(q/c) η F u + g` on a particle of charge `q` moving with `u`.
    pub fn force(&self, charge: f64, c: f64, u: &FourVector) -> FourVector {
        let mut f = contract_force(&self.tensor, u) * (charge / c);
        if let Some(g) = self.self_force {
            f += g;
        }
        f
    }
}

/// Total field on particle `i` at event `observer`.
///
/// Exact mode: external + self + Σ_j pair tensors. Asymptotic mode: external +
/// Σ_j point-limit pair tensors, with the self part returned as a 4-force.
pub fn total_faraday(sources: &[Source<'_>], i: usize, observer: &FourVector, external: &ExternalFieldModel, mode: SelfForceMode) -> Result<TotalField, FieldError> {
    let me = sources.get(i).ok_or(FieldError::BadIndex { index: i, len: sources.len() })?;
    let mut tensor = external.faraday(observer);
    let mut self_force = None;
    match mode {
        SelfForceMode::Exact => {
            tensor += self_faraday(me.line, observer, me.spec.charge, me.spec.radius)?;
        }
        SelfForceMode::Asymptotic => {
            self_force = Some(asymptotic_self_force(me.line, observer, me.spec.charge, me.spec.radius)?);
        }
    }
    for (j, src) in sources.iter().enumerate() {
        if j == i {
            continue;
        }
        tensor += match mode {
            SelfForceMode::Exact => binary_faraday(src.line, observer, src.spec.charge, me.spec.radius, src.spec.radius)?,
            SelfForceMode::Asymptotic => binary_faraday_pointlimit(src.line, observer, src.spec.charge)?,
        };
    }
    Ok(TotalField { tensor, self_force })
}

/// Retarded potential `q u/|X·u|` of one root (contravariant).
fn root_potential<W: Worldline + ?Sized>(line: &W, observer: &FourVector, sigma: f64, charge: f64) -> Result<FourVector, FieldError> {
    if charge == 0.0 {
        return Ok(FourVector::ZERO);
    }
    let opts = RootOptions::default();
    let root = causal_root(line, observer, sigma, &opts)?;
    let w = check_grazing(&root.separation(observer), &root.source_event.u, &opts)?;
    Ok(root.source_event.u * (charge / w.abs()))
}

/// Effective potential acting on particle `i` at `observer` (contravariant):
/// `A_ext + 2 Ā_self + Σ_j [Ā_j(σ_i) + Ā_j(σ_j)]`.
///
/// The factor 2 on the self term matches `F_self = 2(∂Ā − ∂Ā)`; the pair sum
/// matches the two-root pair tensor.
pub fn effective_potential(sources: &[Source<'_>], i: usize, observer: &FourVector, external: &ExternalFieldModel) -> Result<FourVector, FieldError> {
    let me = sources.get(i).ok_or(FieldError::BadIndex { index: i, len: sources.len() })?;
    let mut a = root_potential(me.line, observer, me.spec.radius, me.spec.charge)? * 2.0;
    for (j, src) in sources.iter().enumerate() {
        if j == i {
            continue;
        }
        a += root_potential(src.line, observer, me.spec.radius, src.spec.charge)?;
        a += root_potential(src.line, observer, src.spec.radius, src.spec.charge)?;
    }
    Ok(a + external.potential(observer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldline::WorldlineHistory;

    fn static_at(x: f64) -> WorldlineHistory {
        WorldlineHistory::inertial(1.0, FourVector::new(0.0, x, 0.0, 0.0), FourVector::new(1.0, 0.0, 0.0, 0.0), 0.0).unwrap()
    }

    #[test]
    fn static_pair_closed_form() {
        let h = static_at(0.0);
        let obs = FourVector::new(0.0, 2.0, 0.0, 0.0);
        let f = binary_faraday(&h, &obs, 0.5, 1.0, 3.0).unwrap();
        let want = 0.5 * 2.0 * (5.0f64.powf(-1.5) + 13.0f64.powf(-1.5));
        assert!((f.get(0, 1) - want).abs() < 1e-14);
        assert!(f.get(0, 2).abs() < 1e-16 && f.magnetic().iter().all(|b| b.abs() < 1e-16));
    }

    #[test]
    fn uniform_potential_generates_field() {
        let ext = ExternalFieldModel::Uniform { e: [0.3, -0.1, 0.2], b: [0.05, 0.4, -0.7] };
        let f = ext.faraday(&FourVector::ZERO);
        let h = 1e-3;
        for mu in 0..4 {
            for nu in 0..4 {
                let d = |k: usize, comp: usize| {
                    let mut p = FourVector::ZERO;
                    let mut m = FourVector::ZERO;
                    p[k] = h;
                    m[k] = -h;
                    (ext.potential(&p).lower()[comp] - ext.potential(&m).lower()[comp]) / (2.0 * h)
                };
                let curl = d(mu, nu) - d(nu, mu);
                assert!((curl - f.get(mu, nu)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn switched_field_turns_off() {
        let ext = ExternalFieldModel::Switched { inner: Box::new(ExternalFieldModel::Uniform { e: [1.0, 0.0, 0.0], b: [0.0; 3] }), t_off: 2.0, c: 1.0 };
        assert_eq!(ext.faraday(&FourVector::new(1.0, 0.0, 0.0, 0.0)).get(0, 1), 1.0);
        assert_eq!(ext.faraday(&FourVector::new(2.0, 0.0, 0.0, 0.0)), FaradayTensor::ZERO);
    }
}
