//! Discretized-action gradient oracle.
//!
//! Each worldline is replaced by nodes uniform in its own proper time. The
//! Hamilton functional is evaluated with every `δ(R̃² − σ²)` replaced by a unit
//! Gaussian `G_w` in the squared interval:
//!
//! * mass term `S_M = (m c/2) Σ Δr·Δr / h`,
//! * coupling term `S_C = (q/c) Σ Δr·A(r̄)` with `A` built from frozen source
//!   nodes: `Ā(σ) = 2q Σ Δy G_w((z − ȳ)² − σ²)` restricted to `ȳ⁰ < z⁰`, and
//!   `A_i = A_ext + 2 Ā_i(σ_i) + Σ_j [Ā_j(σ_i) + Ā_j(σ_j)]`.
//!
//! Varying one node with the sources frozen gives `h (−m c a + (q/c) F u)`, the
//! Euler-Lagrange residual the production force path must reproduce.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{total_faraday, ExternalFieldModel, FieldError, SelfForceMode, Source};
use crate::minkowski::{contract_force, dot, FourVector, METRIC};
use crate::retardation::{causal_root, RetardationError, RootOptions};
use crate::worldline::{
    kinematics_from_jet, ConstraintTolerances, Interpolation, ParticleSpec, PastExtension, Worldline, WorldlineError, WorldlineHistory, WorldlineSample,
};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid oracle configuration: {0}")]
    InvalidConfig(String),
    #[error("regularization width {width:e} under-resolves node spacing (needs at least {needed:e})")]
    WidthTooSmall { width: f64, needed: f64 },
    #[error("regularization width {width:e} reaches the light-cone cut (limit {limit:e})")]
    WidthTooLarge { width: f64, limit: f64 },
    #[error(transparent)]
    Worldline(#[from] WorldlineError),
    #[error(transparent)]
    Retardation(#[from] RetardationError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Discretization and regularization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    /// Nodes per worldline across the varied window.
    pub nodes: usize,
    /// Fixed Gaussian width in the squared interval; calibrated per term when absent.
    pub width: Option<f64>,
    /// Calibrated width is `width_factor · h · max|df/ds|`.
    pub width_factor: f64,
    /// Relative step of the central differences.
    pub fd_step: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { nodes: 128, width: None, width_factor: 4.0, fd_step: 1e-6 }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<(), OracleError> {
        if self.nodes < 32 {
            return Err(OracleError::InvalidConfig(format!("nodes = {} (minimum 32)", self.nodes)));
        }
        if let Some(w) = self.width {
            if !(w.is_finite() && w > 0.0) {
                return Err(OracleError::InvalidConfig(format!("width = {w}")));
            }
        }
        if !(self.width_factor.is_finite() && self.width_factor > 0.0) {
            return Err(OracleError::InvalidConfig(format!("width_factor = {}", self.width_factor)));
        }
        if !(self.fd_step.is_finite() && self.fd_step > 0.0 && self.fd_step < 1e-2) {
            return Err(OracleError::InvalidConfig(format!("fd_step = {}", self.fd_step)));
        }
        Ok(())
    }
}

/// Unit-integral Gaussian.
pub fn gaussian(f: f64, w: f64) -> f64 {
    (-0.5 * (f / w).powi(2)).exp() / (w * (2.0 * std::f64::consts::PI).sqrt())
}

fn raise(v: [f64; 4]) -> FourVector {
    FourVector(std::array::from_fn(|mu| METRIC[mu] * v[mu]))
}

/// A worldline sampled at uniform proper-time spacing `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteCurve {
    pub h: f64,
    pub nodes: Vec<FourVector>,
    /// Interior nodes that are varied; the rest are held fixed.
    pub varied: Range<usize>,
}

impl DiscreteCurve {
    /// Nodes at proper times `s_start + k h`, `k = 0..=count`.
    pub fn sample(line: &dyn Worldline, s_start: f64, h: f64, count: usize, varied: Range<usize>) -> Result<Self, OracleError> {
        let nodes = (0..=count)
            .map(|k| {
                let t = line.time_at_proper_time(s_start + k as f64 * h)?;
                line.position_at(t)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(DiscreteCurve { h, nodes, varied })
    }

    fn segment(&self, l: usize) -> (FourVector, FourVector) {
        let (a, b) = (self.nodes[l], self.nodes[l + 1]);
        (b - a, (a + b) * 0.5)
    }
}

/// Regularized root potential `2q Σ Δy G_w((z − ȳ)² − σ²)`.
pub fn regularized_potential(src: &DiscreteCurve, z: &FourVector, sigma: f64, charge: f64, w: f64, causal: bool) -> FourVector {
    let mut acc = FourVector::ZERO;
    if charge == 0.0 {
        return acc;
    }
    let cut = 8.0 * w;
    for l in 0..src.nodes.len() - 1 {
        let (dy, mid) = src.segment(l);
        if causal && mid[0] >= z[0] {
            continue;
        }
        let x = *z - mid;
        let f = x.norm_sqr() - sigma * sigma;
        if f.abs() > cut {
            continue;
        }
        acc += dy * gaussian(f, w);
    }
    acc * (2.0 * charge)
}

/// Per-node gradient of the discretized action (covariant components).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeGradient {
    pub particle: usize,
    pub node: usize,
    pub mass: [f64; 4],
    pub coupling: [f64; 4],
}

impl NodeGradient {
    pub fn total(&self) -> [f64; 4] {
        std::array::from_fn(|mu| self.mass[mu] + self.coupling[mu])
    }
}

/// Comparison of the action gradient with the production force at one node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeComparison {
    pub particle: usize,
    pub node: usize,
    pub t: f64,
    /// `(q/c) F u` from the production path.
    pub force: FourVector,
    /// Raised coupling gradient divided by `h`.
    pub gradient: FourVector,
    /// `m c a − (q/c) F u` from the production path.
    pub residual: FourVector,
    /// Raised total gradient divided by `−h`.
    pub total_gradient: FourVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForceComparison {
    pub nodes: Vec<NodeComparison>,
    /// `max |gradient − force| / max |force|` over nodes (Euclidean norms).
    pub coupling_rel_error: f64,
    /// Same for the full Euler-Lagrange residual, normalized by `max |m c a|`.
    pub total_rel_error: f64,
}

/// Discretized N-body action with frozen-slot sources.
#[derive(Clone, Debug)]
pub struct ActionOracle {
    pub c: f64,
    pub specs: Vec<ParticleSpec>,
    pub external: ExternalFieldModel,
    pub curves: Vec<DiscreteCurve>,
    /// `widths[i][j]`: Gaussian width for field particle `i` and source `j`.
    pub widths: Vec<Vec<f64>>,
    /// `slopes[i][j]`: max `|df/ds| = 2|X·u|` over the window roots.
    pub slopes: Vec<Vec<f64>>,
    fd_step: f64,
}

impl ActionOracle {
    /// Discretizes `lines` over the coordinate-time window `[t_a, t_b]` and
    /// extends each curve far enough into the past to cover every kernel.
    pub fn from_lines(
        specs: &[ParticleSpec],
        lines: &[&dyn Worldline],
        external: &ExternalFieldModel,
        c: f64,
        window: (f64, f64),
        cfg: &OracleConfig,
    ) -> Result<Self, OracleError> {
        cfg.validate()?;
        let n = specs.len();
        if lines.len() != n || n == 0 {
            return Err(OracleError::InvalidConfig(format!("{} specs for {} worldlines", n, lines.len())));
        }
        let (t_a, t_b) = window;
        if !(t_b > t_a) {
            return Err(OracleError::InvalidConfig(format!("empty window [{t_a}, {t_b}]")));
        }
        let mut s_range = Vec::with_capacity(n);
        for line in lines {
            s_range.push((line.sample_at(t_a)?.s, line.sample_at(t_b)?.s));
        }
        let hs: Vec<f64> = s_range.iter().map(|(a, b)| (b - a) / cfg.nodes as f64).collect();
        let window_curves = (0..n)
            .map(|i| DiscreteCurve::sample(lines[i], s_range[i].0, hs[i], cfg.nodes, 1..cfg.nodes))
            .collect::<Result<Vec<_>, _>>()?;

        let opts = RootOptions::default();
        let mut slopes = vec![vec![0.0_f64; n]; n];
        let mut slope_min = vec![vec![f64::INFINITY; n]; n];
        let mut cut_gap = vec![vec![f64::INFINITY; n]; n];
        let mut max_delay = 0.0_f64;
        let mut u0_max = 1.0_f64;
        for i in 0..n {
            for z in &window_curves[i].nodes {
                for j in 0..n {
                    if specs[j].charge == 0.0 {
                        continue;
                    }
                    let radii = if i == j { vec![specs[i].radius] } else { vec![specs[i].radius, specs[j].radius] };
                    let sigma_min = radii.iter().cloned().fold(f64::INFINITY, f64::min);
                    let gap = if i == j { 0.0 } else { (*z - lines[j].position_at(z[0] / c)?).spatial().iter().map(|d| d * d).sum() };
                    cut_gap[i][j] = cut_gap[i][j].min(gap + sigma_min * sigma_min);
                    for sigma in radii {
                        let root = causal_root(lines[j], z, sigma, &opts)?;
                        let slope = 2.0 * dot(&root.separation(z), &root.source_event.u).abs();
                        slopes[i][j] = slopes[i][j].max(slope);
                        slope_min[i][j] = slope_min[i][j].min(slope);
                        max_delay = max_delay.max(root.t_ret);
                        u0_max = u0_max.max(root.source_event.u[0]);
                    }
                }
            }
        }
        let mut widths = vec![vec![0.0_f64; n]; n];
        let mut tail = 0.0_f64;
        for i in 0..n {
            for j in 0..n {
                if slopes[i][j] == 0.0 {
                    continue;
                }
                let needed = hs[j] * slopes[i][j];
                let w = cfg.width.unwrap_or(cfg.width_factor * needed);
                if w < needed {
                    return Err(OracleError::WidthTooSmall { width: w, needed });
                }
                // The truncated kernel must vanish at the cut ȳ⁰ = z⁰, where f = −|Δx|² − σ².
                let limit = cut_gap[i][j] / 9.0;
                if w > limit {
                    return Err(OracleError::WidthTooLarge { width: w, limit });
                }
                widths[i][j] = w;
                tail = tail.max(8.0 * w / slope_min[i][j]);
            }
        }

        let margin = 1.5 * max_delay + tail * u0_max + 1e-9;
        let mut curves = Vec::with_capacity(n);
        for i in 0..n {
            let s_past = lines[i].sample_at(t_a - margin)?.s;
            let past = ((s_range[i].0 - s_past) / hs[i]).ceil() as usize;
            let start = s_range[i].0 - past as f64 * hs[i];
            curves.push(DiscreteCurve::sample(lines[i], start, hs[i], past + cfg.nodes, past + 1..past + cfg.nodes)?);
        }
        Ok(ActionOracle { c, specs: specs.to_vec(), external: external.clone(), curves, widths, slopes, fd_step: cfg.fd_step })
    }

    /// Effective potential on particle `i` at `z` from the frozen `sources`.
    pub fn potential(&self, sources: &[DiscreteCurve], i: usize, z: &FourVector) -> FourVector {
        let me = &self.specs[i];
        let mut a = self.external.potential(z);
        for (j, src) in sources.iter().enumerate() {
            let spec = &self.specs[j];
            let w = self.widths[i][j];
            if spec.charge == 0.0 || w == 0.0 {
                continue;
            }
            if j == i {
                a += regularized_potential(src, z, me.radius, me.charge, w, true) * 2.0;
            } else {
                a += regularized_potential(src, z, me.radius, spec.charge, w, true);
                a += regularized_potential(src, z, spec.radius, spec.charge, w, true);
            }
        }
        a
    }

    fn local_terms(&self, curves: &[DiscreteCurve], i: usize, k: usize, x: &FourVector) -> (f64, f64) {
        let curve = &curves[i];
        let (prev, next) = (curve.nodes[k - 1], curve.nodes[k + 1]);
        let m = self.specs[i].rest_mass;
        let q = self.specs[i].charge;
        let (d1, d2) = (*x - prev, next - *x);
        let mass = 0.5 * m * self.c * (d1.norm_sqr() + d2.norm_sqr()) / curve.h;
        let coupling = if q == 0.0 && self.external.is_none() {
            0.0
        } else {
            let a1 = self.potential(curves, i, &((*x + prev) * 0.5));
            let a2 = self.potential(curves, i, &((*x + next) * 0.5));
            (q / self.c) * (dot(&d1, &a1) + dot(&d2, &a2))
        };
        (mass, coupling)
    }

    /// Central-difference gradient at node `k` of particle `i`, sources frozen at `curves`.
    pub fn node_gradient(&self, curves: &[DiscreteCurve], i: usize, k: usize) -> NodeGradient {
        let x0 = curves[i].nodes[k];
        let mut mass = [0.0; 4];
        let mut coupling = [0.0; 4];
        for mu in 0..4 {
            let step = self.fd_step * (1.0 + x0[mu].abs());
            let mut xp = x0;
            let mut xm = x0;
            xp[mu] += step;
            xm[mu] -= step;
            let (mp, cp) = self.local_terms(curves, i, k, &xp);
            let (mm, cm) = self.local_terms(curves, i, k, &xm);
            let d = xp[mu] - xm[mu];
            mass[mu] = (mp - mm) / d;
            coupling[mu] = (cp - cm) / d;
        }
        NodeGradient { particle: i, node: k, mass, coupling }
    }

    /// Gradients at every varied node.
    pub fn gradient_field(&self, curves: &[DiscreteCurve]) -> Vec<NodeGradient> {
        let mut out = Vec::new();
        for (i, curve) in curves.iter().enumerate() {
            for k in curve.varied.clone() {
                out.push(self.node_gradient(curves, i, k));
            }
        }
        out
    }

    /// Euclidean norm of the total gradient over all varied nodes.
    pub fn gradient_norm(&self, curves: &[DiscreteCurve]) -> f64 {
        self.gradient_field(curves).iter().flat_map(|g| g.total()).map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Copies of the curves with a smooth spatial bump added to the varied nodes.
    pub fn perturbed<R: Rng>(&self, amplitude: f64, rng: &mut R) -> Vec<DiscreteCurve> {
        self.curves
            .iter()
            .map(|curve| {
                let mut dir: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
                let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt().max(1e-12);
                dir.iter_mut().for_each(|d| *d /= norm);
                let mut out = curve.clone();
                let (a, b) = (curve.varied.start - 1, curve.varied.end);
                for k in curve.varied.clone() {
                    let bump = (std::f64::consts::PI * (k - a) as f64 / (b - a) as f64).sin();
                    for d in 0..3 {
                        out.nodes[k][d + 1] += amplitude * bump * dir[d];
                    }
                }
                out
            })
            .collect()
    }

    /// Compares the action gradient on the oracle's own curves with the
    /// production force evaluated on `lines` at the same events.
    pub fn compare_with_forces(&self, lines: &[&dyn Worldline]) -> Result<ForceComparison, OracleError> {
        let sources: Vec<Source<'_>> = self.specs.iter().zip(lines).map(|(s, l)| Source::new(s, *l)).collect();
        let mut nodes = Vec::new();
        let (mut err_c, mut err_t, mut scale_c, mut scale_t) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
        for g in self.gradient_field(&self.curves) {
            let i = g.particle;
            let curve = &self.curves[i];
            let z = curve.nodes[g.node];
            let t = z[0] / self.c;
            let smp = lines[i].sample_at(t)?;
            let field = total_faraday(&sources, i, &smp.r, &self.external, SelfForceMode::Exact)?;
            let spec = &self.specs[i];
            let force = contract_force(&field.tensor, &smp.u) * (spec.charge / self.c);
            let inertia = smp.a * (spec.rest_mass * self.c);
            let residual = inertia - force;
            let gradient = raise(g.coupling) * (1.0 / curve.h);
            let total_gradient = raise(g.total()) * (-1.0 / curve.h);
            err_c = err_c.max((gradient - force).euclid());
            err_t = err_t.max((total_gradient - residual).euclid());
            scale_c = scale_c.max(force.euclid());
            scale_t = scale_t.max(inertia.euclid());
            nodes.push(NodeComparison { particle: i, node: g.node, t, force, gradient, residual, total_gradient });
        }
        Ok(ForceComparison {
            nodes,
            coupling_rel_error: err_c / scale_c.max(f64::MIN_POSITIVE),
            total_rel_error: err_t / scale_t.max(f64::MIN_POSITIVE),
        })
    }
}

/// Binary action `(2 q_a q_b / c) Σ Σ Δa·Δb G_w((ā − b̄)² − σ²)` over whole curves.
pub fn binary_action(a: &DiscreteCurve, b: &DiscreteCurve, q_a: f64, q_b: f64, sigma: f64, w: f64, c: f64) -> f64 {
    let mut acc = 0.0;
    for k in 0..a.nodes.len() - 1 {
        let (da, ma) = a.segment(k);
        for l in 0..b.nodes.len() - 1 {
            let (db, mb) = b.segment(l);
            let f = (ma - mb).norm_sqr() - sigma * sigma;
            if f.abs() > 8.0 * w {
                continue;
            }
            acc += dot(&da, &db) * gaussian(f, w);
        }
    }
    2.0 * q_a * q_b / c * acc
}

/// `(Σ S^(ij)(A,[B]) − Σ S^(ji)(B,[A]), Σ |S^(ij)(A,[B])|)` over ordered pairs `i ≠ j`.
/// The kernel of `S^(ij)` carries the radius of the non-local particle `j`.
pub fn swap_asymmetry(specs: &[ParticleSpec], a: &[DiscreteCurve], b: &[DiscreteCurve], w: f64, c: f64) -> (f64, f64) {
    let (mut forward, mut backward, mut scale) = (0.0, 0.0, 0.0);
    for i in 0..specs.len() {
        for j in 0..specs.len() {
            if i == j {
                continue;
            }
            let sij = binary_action(&a[i], &b[j], specs[i].charge, specs[j].charge, specs[j].radius, w, c);
            forward += sij;
            scale += sij.abs();
            backward += binary_action(&b[j], &a[i], specs[j].charge, specs[i].charge, specs[i].radius, w, c);
        }
    }
    (forward - backward, scale)
}

/// Parameters of a smooth test worldline
/// `x(t) = x0 + β0 c t + Σ_m amp_m sin(ω_m t + φ_m)` (componentwise).
#[derive(Clone, Debug, PartialEq)]
pub struct SmoothPath {
    pub x0: [f64; 3],
    pub beta0: [f64; 3],
    pub modes: Vec<([f64; 3], f64, f64)>,
}

impl SmoothPath {
    /// Random path with `|v| ≤ 0.35 c`: speed `≤ 0.2c` plus oscillations bounded by `0.15c`.
    pub fn random<R: Rng>(rng: &mut R, x0: [f64; 3], c: f64) -> Self {
        let beta0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.1..0.1));
        let modes = (0..2)
            .map(|_| {
                let omega = rng.gen_range(0.8..2.5);
                let amp: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0) * 0.04 * c / omega);
                (amp, omega, rng.gen_range(0.0..std::f64::consts::TAU))
            })
            .collect();
        SmoothPath { x0, beta0, modes }
    }

    /// Coordinate position, velocity, acceleration and jerk at `t`.
    pub fn jet(&self, t: f64, c: f64) -> [[f64; 3]; 4] {
        let mut out = [[0.0; 3]; 4];
        for d in 0..3 {
            out[0][d] = self.x0[d] + self.beta0[d] * c * t;
            out[1][d] = self.beta0[d] * c;
            for (amp, om, ph) in &self.modes {
                let (s, co) = (om * t + ph).sin_cos();
                out[0][d] += amp[d] * s;
                out[1][d] += amp[d] * om * co;
                out[2][d] -= amp[d] * om * om * s;
                out[3][d] -= amp[d] * om * om * om * co;
            }
        }
        out
    }

    /// Sampled history on `[t_start, t_end]` at spacing `dt`; queries before `t_start` fail.
    pub fn history(&self, c: f64, t_start: f64, t_end: f64, dt: f64) -> Result<WorldlineHistory, WorldlineError> {
        let point = |t: f64| {
            let j = self.jet(t, c);
            let (u, a, _, _) = kinematics_from_jet(j[1], j[2], j[3], c);
            (FourVector::from_parts(c * t, j[0]), u, a)
        };
        let (r, u, a) = point(t_start);
        let first = WorldlineSample { t: t_start, s: 0.0, r, u, a };
        let mut h = WorldlineHistory::new(c, first, Interpolation::QuinticHermite, PastExtension::Bounded, ConstraintTolerances::default())?;
        let steps = ((t_end - t_start) / dt).ceil() as usize;
        for k in 1..=steps {
            let t = t_start + k as f64 * dt;
            let (r, u, a) = point(t);
            h.append_advancing(t, r, u, a)?;
        }
        Ok(h)
    }
}
