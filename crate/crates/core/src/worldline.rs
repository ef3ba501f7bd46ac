//! Particle identity, kinematic samples and dense history interpolation.
//!
//! A [`WorldlineHistory`] is parametrized by coordinate time `t` with
//! `r^0 = c t`. Between stored samples the spatial position is a Hermite
//! polynomial in `t`; 4-velocity and proper acceleration are derived from the
//! polynomial's derivatives, so `u·u = 1` and `u·a = 0` hold exactly on
//! interpolated samples. Before the first sample the history is either
//! continued inertially or left undefined.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::minkowski::{apply, dot, FourVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldlineError {
    #[error("query at t = {t} is beyond the latest stored time {latest}")]
    QueryBeyondPresent { t: f64, latest: f64 },
    #[error("query at t = {t} precedes the first stored time {first} and the history has no past extension")]
    BeforeHistoryStart { t: f64, first: f64 },
    #[error("sample time {t} does not exceed the latest stored time {latest}")]
    NonMonotonicTime { t: f64, latest: f64 },
    #[error("proper time {s} does not exceed the latest stored proper time {latest}")]
    NonMonotonicProperTime { s: f64, latest: f64 },
    #[error("kinematic constraint violated: |u·u − 1| = {defect:e} exceeds {tol:e}")]
    ConstraintViolation { defect: f64, tol: f64 },
    #[error("sample has r^0 = {r0} but c·t = {ct}")]
    TimeComponentMismatch { r0: f64, ct: f64 },
    #[error("invalid particle spec: {0}")]
    InvalidSpec(String),
    #[error("non-finite value in sample at t = {0}")]
    NonFinite(f64),
    #[error("history table: {0}")]
    Table(String),
}

/// Physical identity of one finite-size charged particle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleSpec {
    pub label: String,
    /// Rest mass m0 (> 0).
    pub rest_mass: f64,
    /// Charge q; zero is accepted for control runs.
    pub charge: f64,
    /// Shell radius σ (> 0).
    pub radius: f64,
}

impl ParticleSpec {
    pub fn new(label: impl Into<String>, rest_mass: f64, charge: f64, radius: f64) -> Result<Self, WorldlineError> {
        let spec = ParticleSpec { label: label.into(), rest_mass, charge, radius };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), WorldlineError> {
        if !(self.rest_mass.is_finite() && self.rest_mass > 0.0) {
            return Err(WorldlineError::InvalidSpec(format!("{}: rest mass must be positive, got {}", self.label, self.rest_mass)));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(WorldlineError::InvalidSpec(format!("{}: radius must be positive, got {}", self.label, self.radius)));
        }
        if !self.charge.is_finite() {
            return Err(WorldlineError::InvalidSpec(format!("{}: charge must be finite", self.label)));
        }
        Ok(())
    }

    /// Leading-order electromagnetic mass q²/(c²σ).
    pub fn em_mass(&self, c: f64) -> f64 {
        self.charge * self.charge / (c * c * self.radius)
    }
}

/// One kinematic state on a worldline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldlineSample {
    pub t: f64,
    pub s: f64,
    pub r: FourVector,
    pub u: FourVector,
    /// Proper acceleration du/ds.
    pub a: FourVector,
}

impl WorldlineSample {
    /// Coordinate velocity and acceleration (dx/dt, d²x/dt²) implied by (u, a).
    pub fn coordinate_derivatives(&self, c: f64) -> ([f64; 3], [f64; 3]) {
        coordinate_derivatives(&self.u, &self.a, c)
    }

    pub fn constraint_defect(&self) -> f64 {
        (dot(&self.u, &self.u) - 1.0).abs()
    }
}

fn coordinate_derivatives(u: &FourVector, a: &FourVector, c: f64) -> ([f64; 3], [f64; 3]) {
    let g = u[0];
    // du/dt = (c/γ) du/ds
    let ud: [f64; 4] = std::array::from_fn(|i| c * a[i] / g);
    let v = [c * u[1] / g, c * u[2] / g, c * u[3] / g];
    let vd = std::array::from_fn(|k| c * (ud[k + 1] * g - u[k + 1] * ud[0]) / (g * g));
    (v, vd)
}

/// Interpolation scheme between stored samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    /// Position and velocity at both nodes.
    CubicHermite,
    /// Position, velocity and coordinate acceleration at both nodes.
    #[default]
    QuinticHermite,
}

/// Behaviour of a history before its first sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PastExtension {
    /// Constant-velocity continuation of the first sample.
    #[default]
    Inertial,
    /// Queries before the first sample fail.
    Bounded,
}

/// Kinematic-constraint tolerances.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintTolerances {
    /// Soft monitoring threshold for |u·u − 1|.
    pub constraint_tol: f64,
    /// Hard failure threshold for |u·u − 1|.
    pub hard_tol: f64,
}

impl Default for ConstraintTolerances {
    fn default() -> Self {
        ConstraintTolerances { constraint_tol: 1e-9, hard_tol: 1e-6 }
    }
}

/// Read access to a worldline parametrized by coordinate time.
pub trait Worldline: Send + Sync {
    fn c(&self) -> f64;
    fn latest_time(&self) -> f64;
    /// Earliest queryable time; `None` means unbounded.
    fn earliest_time(&self) -> Option<f64>;
    fn sample_at(&self, t: f64) -> Result<WorldlineSample, WorldlineError>;
    /// Proper jerk d²u/ds² at `t`.
    fn jerk_at(&self, t: f64) -> Result<FourVector, WorldlineError>;
    fn position_at(&self, t: f64) -> Result<FourVector, WorldlineError> {
        self.sample_at(t).map(|s| s.r)
    }
    /// Coordinate time at which the proper time equals `s`.
    fn time_at_proper_time(&self, s: f64) -> Result<f64, WorldlineError> {
        let hi0 = self.latest_time();
        let s_hi = self.sample_at(hi0)?.s;
        if s > s_hi {
            return Err(WorldlineError::QueryBeyondPresent { t: f64::NAN, latest: hi0 });
        }
        let mut hi = hi0;
        let mut width = 1.0;
        let mut lo = hi - width;
        while self.sample_at(lo)?.s > s {
            hi = lo;
            width *= 2.0;
            lo = hi0 - width;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.sample_at(mid)?.s < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

/// Image of a worldline under the Poincaré map `r ↦ Λ r + b`, re-parametrized
/// by the image coordinate time.
pub struct AffineImage<'a> {
    base: &'a dyn Worldline,
    lambda: [[f64; 4]; 4],
    shift: FourVector,
}

impl<'a> AffineImage<'a> {
    pub fn new(base: &'a dyn Worldline, lambda: [[f64; 4]; 4], shift: FourVector) -> Self {
        AffineImage { base, lambda, shift }
    }

    fn image_time(&self, t: f64) -> Result<f64, WorldlineError> {
        let r = self.base.position_at(t)?;
        Ok((apply(&self.lambda, &r)[0] + self.shift[0]) / self.base.c())
    }

    /// Base coordinate time whose image lies at image time `t_img`.
    pub fn base_time(&self, t_img: f64) -> Result<f64, WorldlineError> {
        let c = self.base.c();
        let latest = self.base.latest_time();
        if t_img > self.image_time(latest)? {
            return Err(WorldlineError::QueryBeyondPresent { t: t_img, latest: self.latest_time() });
        }
        let mut t = (t_img - self.shift[0] / c).min(latest);
        for _ in 0..100 {
            let smp = self.base.sample_at(t)?;
            let f = (apply(&self.lambda, &smp.r)[0] + self.shift[0]) / c - t_img;
            let df = apply(&self.lambda, &smp.u)[0] / smp.u[0];
            let next = (t - f / df).min(latest);
            if (next - t).abs() <= 4.0 * f64::EPSILON * (1.0 + t.abs()) {
                return Ok(next);
            }
            t = next;
        }
        Err(WorldlineError::Table(format!("image time {t_img} could not be inverted")))
    }

    fn map(&self, smp: WorldlineSample, t_img: f64) -> WorldlineSample {
        let mut r = apply(&self.lambda, &smp.r) + self.shift;
        r[0] = self.base.c() * t_img;
        WorldlineSample { t: t_img, s: smp.s, r, u: apply(&self.lambda, &smp.u), a: apply(&self.lambda, &smp.a) }
    }
}

impl Worldline for AffineImage<'_> {
    fn c(&self) -> f64 {
        self.base.c()
    }
    fn latest_time(&self) -> f64 {
        self.image_time(self.base.latest_time()).unwrap_or(f64::NAN)
    }
    fn earliest_time(&self) -> Option<f64> {
        self.base.earliest_time().and_then(|t| self.image_time(t).ok())
    }
    fn sample_at(&self, t: f64) -> Result<WorldlineSample, WorldlineError> {
        let tb = self.base_time(t)?;
        Ok(self.map(self.base.sample_at(tb)?, t))
    }
    fn jerk_at(&self, t: f64) -> Result<FourVector, WorldlineError> {
        let tb = self.base_time(t)?;
        Ok(apply(&self.lambda, &self.base.jerk_at(tb)?))
    }
    fn time_at_proper_time(&self, s: f64) -> Result<f64, WorldlineError> {
        let tb = self.base.time_at_proper_time(s)?;
        self.image_time(tb)
    }
}

const BASIS_CUBIC: [[f64; 6]; 6] = [
    [1.0, 0.0, -3.0, 2.0, 0.0, 0.0],
    [0.0, 1.0, -2.0, 1.0, 0.0, 0.0],
    [0.0; 6],
    [0.0, 0.0, 3.0, -2.0, 0.0, 0.0],
    [0.0, 0.0, -1.0, 1.0, 0.0, 0.0],
    [0.0; 6],
];

const BASIS_QUINTIC: [[f64; 6]; 6] = [
    [1.0, 0.0, 0.0, -10.0, 15.0, -6.0],
    [0.0, 1.0, 0.0, -6.0, 8.0, -3.0],
    [0.0, 0.0, 0.5, -1.5, 1.5, -0.5],
    [0.0, 0.0, 0.0, 10.0, -15.0, 6.0],
    [0.0, 0.0, 0.0, -4.0, 7.0, -3.0],
    [0.0, 0.0, 0.0, 0.5, -1.0, 0.5],
];

/// Value and first three derivatives (in θ) of a degree-5 polynomial.
fn poly_derivs(c: &[f64; 6], th: f64) -> [f64; 4] {
    let mut out = [0.0; 4];
    for d in 0..4 {
        let mut acc = 0.0;
        for k in (d..6).rev() {
            let mut f = 1.0;
            for j in 0..d {
                f *= (k - j) as f64;
            }
            acc = acc * th + f * c[k];
        }
        out[d] = acc;
    }
    out
}

/// Node data for one Hermite interval in one spatial component.
#[derive(Clone, Copy)]
struct NodeData {
    x: [f64; 3],
    v: [f64; 3],
    acc: [f64; 3],
}

/// Spatial position and its first three coordinate-time derivatives.
struct Jet {
    x: [f64; 3],
    v: [f64; 3],
    vd: [f64; 3],
    vdd: [f64; 3],
}

fn hermite(n0: &NodeData, n1: &NodeData, h: f64, th: f64, scheme: Interpolation) -> Jet {
    let basis = match scheme {
        Interpolation::CubicHermite => &BASIS_CUBIC,
        Interpolation::QuinticHermite => &BASIS_QUINTIC,
    };
    let b: [[f64; 4]; 6] = std::array::from_fn(|i| poly_derivs(&basis[i], th));
    let mut jet = Jet { x: [0.0; 3], v: [0.0; 3], vd: [0.0; 3], vdd: [0.0; 3] };
    for k in 0..3 {
        // Interpolate the residual about the chord x0 + h v̄ θ; the basis reproduces
        // linear data exactly, so inertial segments give zero acceleration.
        let vbar = 0.5 * (n0.v[k] + n1.v[k]);
        let mut defect = (n1.x[k] - n0.x[k]) - h * vbar;
        if defect.abs() <= 8.0 * f64::EPSILON * (n0.x[k].abs() + n1.x[k].abs() + (h * vbar).abs()) {
            defect = 0.0;
        }
        let dv = 0.5 * h * (n0.v[k] - n1.v[k]);
        let coef = [0.0, dv, h * h * n0.acc[k], defect, -dv, h * h * n1.acc[k]];
        let mut d = [0.0; 4];
        for (i, cf) in coef.iter().enumerate().skip(1) {
            for j in 0..4 {
                d[j] += cf * b[i][j];
            }
        }
        jet.x[k] = n0.x[k] + h * vbar * th + d[0];
        jet.v[k] = vbar + d[1] / h;
        jet.vd[k] = d[2] / (h * h);
        jet.vdd[k] = d[3] / (h * h * h);
    }
    jet
}

/// 4-velocity, proper acceleration and proper jerk from a coordinate jet.
pub fn kinematics_from_jet(v: [f64; 3], vd: [f64; 3], vdd: [f64; 3], c: f64) -> (FourVector, FourVector, FourVector, f64) {
    let c2 = c * c;
    let vv: f64 = (0..3).map(|k| v[k] * v[k]).sum();
    let vvd: f64 = (0..3).map(|k| v[k] * vd[k]).sum();
    let vdvd: f64 = (0..3).map(|k| vd[k] * vd[k]).sum();
    let vvdd: f64 = (0..3).map(|k| v[k] * vdd[k]).sum();
    let g = 1.0 / (1.0 - vv / c2).sqrt();
    let g3 = g * g * g;
    let gd = g3 * vvd / c2;
    let gdd = 3.0 * g * g * gd * vvd / c2 + g3 * (vdvd + vvdd) / c2;
    let u = FourVector::new(g, g * v[0] / c, g * v[1] / c, g * v[2] / c);
    let ud = FourVector::from_parts(gd, std::array::from_fn(|k| (gd * v[k] + g * vd[k]) / c));
    let udd = FourVector::from_parts(gdd, std::array::from_fn(|k| (gdd * v[k] + 2.0 * gd * vd[k] + g * vdd[k]) / c));
    let a = ud * (g / c);
    let j = (ud * gd + udd * g) * (g / c2);
    (u, a, j, g)
}

/// Time-ordered kinematic record of one particle.
#[derive(Clone, Debug)]
pub struct WorldlineHistory {
    c: f64,
    samples: Vec<WorldlineSample>,
    /// Right-limit coordinate data per node (differs from the sample when the
    /// acceleration jumps at that node).
    departure: Vec<NodeDataStore>,
    arrival: Vec<NodeDataStore>,
    interpolation: Interpolation,
    past: PastExtension,
    tol: ConstraintTolerances,
    soft_violations: usize,
}

#[derive(Clone, Copy, Debug)]
struct NodeDataStore {
    x: [f64; 3],
    v: [f64; 3],
    acc: [f64; 3],
}

impl From<NodeDataStore> for NodeData {
    fn from(n: NodeDataStore) -> NodeData {
        NodeData { x: n.x, v: n.v, acc: n.acc }
    }
}

impl WorldlineHistory {
    /// History with a single sample.
    pub fn new(c: f64, first: WorldlineSample, interpolation: Interpolation, past: PastExtension, tol: ConstraintTolerances) -> Result<Self, WorldlineError> {
        let mut h = WorldlineHistory {
            c,
            samples: Vec::new(),
            departure: Vec::new(),
            arrival: Vec::new(),
            interpolation,
            past,
            tol,
            soft_violations: 0,
        };
        h.push_checked(first)?;
        Ok(h)
    }

    /// History built from a time-ordered list of samples.
    pub fn from_samples(c: f64, samples: Vec<WorldlineSample>, interpolation: Interpolation, past: PastExtension, tol: ConstraintTolerances) -> Result<Self, WorldlineError> {
        let mut it = samples.into_iter();
        let first = it.next().ok_or_else(|| WorldlineError::Table("empty sample list".into()))?;
        let mut h = Self::new(c, first, interpolation, past, tol)?;
        for s in it {
            h.append(s)?;
        }
        Ok(h)
    }

    /// Inertial worldline passing through `r0` with 4-velocity `u0`.
    pub fn inertial(c: f64, r0: FourVector, u0: FourVector, s0: f64) -> Result<Self, WorldlineError> {
        let sample = WorldlineSample { t: r0[0] / c, s: s0, r: r0, u: u0, a: FourVector::ZERO };
        Self::new(c, sample, Interpolation::default(), PastExtension::Inertial, ConstraintTolerances::default())
    }

    fn node_data(&self, s: &WorldlineSample) -> NodeDataStore {
        let (v, acc) = s.coordinate_derivatives(self.c);
        NodeDataStore { x: s.r.spatial(), v, acc }
    }

    fn push_checked(&mut self, mut sample: WorldlineSample) -> Result<(), WorldlineError> {
        let finite = sample.t.is_finite() && sample.s.is_finite() && sample.r.is_finite() && sample.u.is_finite() && sample.a.is_finite();
        if !finite {
            return Err(WorldlineError::NonFinite(sample.t));
        }
        let ct = self.c * sample.t;
        if (sample.r[0] - ct).abs() > 1e-12 * (1.0 + ct.abs()) {
            return Err(WorldlineError::TimeComponentMismatch { r0: sample.r[0], ct });
        }
        sample.r[0] = ct;
        let defect = sample.constraint_defect();
        if defect > self.tol.hard_tol {
            return Err(WorldlineError::ConstraintViolation { defect, tol: self.tol.hard_tol });
        }
        if defect > self.tol.constraint_tol || dot(&sample.u, &sample.a).abs() > self.tol.constraint_tol * (1.0 + sample.a.euclid()) {
            self.soft_violations += 1;
        }
        let nd = self.node_data(&sample);
        self.samples.push(sample);
        self.departure.push(nd);
        self.arrival.push(nd);
        Ok(())
    }

    /// Appends a sample strictly after the latest one.
    pub fn append(&mut self, sample: WorldlineSample) -> Result<(), WorldlineError> {
        let last = self.latest();
        if !(sample.t > last.t) {
            return Err(WorldlineError::NonMonotonicTime { t: sample.t, latest: last.t });
        }
        if !(sample.s > last.s) {
            return Err(WorldlineError::NonMonotonicProperTime { s: sample.s, latest: last.s });
        }
        self.push_checked(sample)
    }

    /// Appends a sample at time `t`, computing its proper time by Simpson
    /// quadrature of c dt/γ over the new interval.
    pub fn append_advancing(&mut self, t: f64, r: FourVector, u: FourVector, a: FourVector) -> Result<(), WorldlineError> {
        let last = *self.latest();
        if !(t > last.t) {
            return Err(WorldlineError::NonMonotonicTime { t, latest: last.t });
        }
        let probe = WorldlineSample { t, s: last.s, r, u, a };
        let n0: NodeData = (*self.departure.last().unwrap()).into();
        let n1: NodeData = self.node_data(&probe).into();
        let h = t - last.t;
        let inv_gamma = |jet: &Jet| {
            let vv: f64 = jet.v.iter().map(|x| x * x).sum();
            (1.0 - vv / (self.c * self.c)).sqrt()
        };
        let g0 = inv_gamma(&hermite(&n0, &n1, h, 0.0, self.interpolation));
        let gm = inv_gamma(&hermite(&n0, &n1, h, 0.5, self.interpolation));
        let g1 = inv_gamma(&hermite(&n0, &n1, h, 1.0, self.interpolation));
        let ds = self.c * h / 6.0 * (g0 + 4.0 * gm + g1);
        self.append(WorldlineSample { t, s: last.s + ds, r, u, a })
    }

    /// Overrides the acceleration used when interpolating forward from the
    /// latest node (the right limit at a junction where a jumps).
    pub fn set_departure_acceleration(&mut self, a: FourVector) {
        let last = *self.latest();
        let probe = WorldlineSample { a, ..last };
        let nd = self.node_data(&probe);
        *self.departure.last_mut().unwrap() = nd;
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn samples(&self) -> &[WorldlineSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn latest(&self) -> &WorldlineSample {
        self.samples.last().expect("history is never empty")
    }

    pub fn first(&self) -> &WorldlineSample {
        &self.samples[0]
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn past_extension(&self) -> PastExtension {
        self.past
    }

    pub fn tolerances(&self) -> ConstraintTolerances {
        self.tol
    }

    /// Number of samples whose constraint defect exceeded the soft tolerance.
    pub fn soft_violations(&self) -> usize {
        self.soft_violations
    }

    /// Length of recorded history before `t_ref` (infinite with an inertial past).
    pub fn coverage_before(&self, t_ref: f64) -> f64 {
        match self.past {
            PastExtension::Inertial => f64::INFINITY,
            PastExtension::Bounded => t_ref - self.first().t,
        }
    }

    /// Sampled-only coverage, ignoring any analytic past extension.
    pub fn sampled_span(&self) -> f64 {
        self.latest().t - self.first().t
    }

    fn locate(&self, t: f64) -> Result<Located, WorldlineError> {
        let latest = self.latest().t;
        if t > latest {
            return Err(WorldlineError::QueryBeyondPresent { t, latest });
        }
        let first = self.first().t;
        if t < first {
            return match self.past {
                PastExtension::Inertial => Ok(Located::Past),
                PastExtension::Bounded => Err(WorldlineError::BeforeHistoryStart { t, first }),
            };
        }
        let idx = self.samples.partition_point(|s| s.t <= t);
        // idx ≥ 1 because t ≥ first
        let k = idx - 1;
        if self.samples[k].t == t {
            return Ok(Located::Node(k));
        }
        Ok(Located::Interval(k))
    }

    fn interval_jet(&self, k: usize, t: f64) -> (Jet, f64) {
        let s0 = &self.samples[k];
        let s1 = &self.samples[k + 1];
        let h = s1.t - s0.t;
        let th = (t - s0.t) / h;
        (hermite(&self.departure[k].into(), &self.arrival[k + 1].into(), h, th, self.interpolation), h)
    }

    fn past_sample(&self, t: f64) -> WorldlineSample {
        let f = self.first();
        let (v, _) = f.coordinate_derivatives(self.c);
        let dt = t - f.t;
        let vv: f64 = v.iter().map(|x| x * x).sum();
        let inv_g = (1.0 - vv / (self.c * self.c)).sqrt();
        let x = std::array::from_fn(|k| f.r[k + 1] + v[k] * dt);
        WorldlineSample { t, s: f.s + self.c * dt * inv_g, r: FourVector::from_parts(self.c * t, x), u: f.u, a: FourVector::ZERO }
    }

    /// Kinematic state at coordinate time `t`.
    pub fn state_at_time(&self, t: f64) -> Result<WorldlineSample, WorldlineError> {
        match self.locate(t)? {
            Located::Past => Ok(self.past_sample(t)),
            Located::Node(k) => Ok(self.samples[k]),
            Located::Interval(k) => {
                let (jet, _) = self.interval_jet(k, t);
                let (u, a, _, _) = kinematics_from_jet(jet.v, jet.vd, jet.vdd, self.c);
                let s = self.interval_proper_time(k, t);
                Ok(WorldlineSample { t, s, r: FourVector::from_parts(self.c * t, jet.x), u, a })
            }
        }
    }

    fn interval_proper_time(&self, k: usize, t: f64) -> f64 {
        let s0 = &self.samples[k];
        if t == s0.t {
            return s0.s;
        }
        let inv_g = |tt: f64| {
            let (jet, _) = self.interval_jet(k, tt);
            let vv: f64 = jet.v.iter().map(|x| x * x).sum();
            (1.0 - vv / (self.c * self.c)).sqrt()
        };
        let dt = t - s0.t;
        s0.s + self.c * dt / 6.0 * (inv_g(s0.t) + 4.0 * inv_g(s0.t + 0.5 * dt) + inv_g(t))
    }

    /// Proper time s(t).
    pub fn proper_time_of(&self, t: f64) -> Result<f64, WorldlineError> {
        match self.locate(t)? {
            Located::Past => Ok(self.past_sample(t).s),
            Located::Node(k) => Ok(self.samples[k].s),
            Located::Interval(k) => Ok(self.interval_proper_time(k, t)),
        }
    }

    /// Inverse of [`proper_time_of`](Self::proper_time_of).
    pub fn time_at_proper_time(&self, s: f64) -> Result<f64, WorldlineError> {
        let last = self.latest();
        if s > last.s {
            return Err(WorldlineError::QueryBeyondPresent { t: f64::NAN, latest: last.t });
        }
        let first = self.first();
        if s < first.s {
            if self.past == PastExtension::Bounded {
                return Err(WorldlineError::BeforeHistoryStart { t: f64::NAN, first: first.t });
            }
            let g = first.u[0] / dot(&first.u, &first.u).sqrt();
            return Ok(first.t + (s - first.s) * g / self.c);
        }
        let idx = self.samples.partition_point(|x| x.s <= s);
        let k = idx - 1;
        if self.samples[k].s == s || k + 1 == self.samples.len() {
            return Ok(self.samples[k].t);
        }
        let (mut lo, mut hi) = (self.samples[k].t, self.samples[k + 1].t);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.interval_proper_time(k, mid) < s {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Proper jerk d²u/ds² at `t`.
    pub fn jerk_at(&self, t: f64) -> Result<FourVector, WorldlineError> {
        let k = match self.locate(t)? {
            Located::Past => return Ok(FourVector::ZERO),
            Located::Node(k) if k + 1 < self.samples.len() => k,
            Located::Node(k) if k > 0 => k - 1,
            Located::Node(_) => return Ok(FourVector::ZERO),
            Located::Interval(k) => k,
        };
        let (jet, _) = self.interval_jet(k, t);
        let (_, _, j, _) = kinematics_from_jet(jet.v, jet.vd, jet.vdd, self.c);
        Ok(j)
    }

    /// Spatial position only (cheap path for root finding).
    pub fn position_at(&self, t: f64) -> Result<FourVector, WorldlineError> {
        match self.locate(t)? {
            Located::Past => Ok(self.past_sample(t).r),
            Located::Node(k) => Ok(self.samples[k].r),
            Located::Interval(k) => {
                let (jet, _) = self.interval_jet(k, t);
                Ok(FourVector::from_parts(self.c * t, jet.x))
            }
        }
    }

    /// Writes the trajectory table.
    pub fn write_csv<W: Write>(&self, out: W, comment: Option<&str>) -> Result<(), WorldlineError> {
        write_trajectory_csv(out, &self.samples, comment)
    }

    /// Reads a trajectory table (lines starting with '#' are ignored).
    pub fn read_csv_samples<R: Read>(input: R) -> Result<Vec<WorldlineSample>, WorldlineError> {
        let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(input);
        let headers = rdr.headers().map_err(|e| WorldlineError::Table(e.to_string()))?.clone();
        let expected: Vec<&str> = TRAJECTORY_HEADER.to_vec();
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(WorldlineError::Table(format!("unexpected header {:?}", headers)));
        }
        let mut out = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| WorldlineError::Table(e.to_string()))?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| WorldlineError::Table(format!("{f}: {e}"))))
                .collect::<Result<_, _>>()?;
            if vals.len() != TRAJECTORY_HEADER.len() {
                return Err(WorldlineError::Table(format!("expected {} columns, got {}", TRAJECTORY_HEADER.len(), vals.len())));
            }
            let v4 = |o: usize| FourVector::new(vals[o], vals[o + 1], vals[o + 2], vals[o + 3]);
            out.push(WorldlineSample { t: vals[0], s: vals[1], r: v4(2), u: v4(6), a: v4(10) });
        }
        Ok(out)
    }
}

/// Fixed header of the trajectory table.
pub const TRAJECTORY_HEADER: [&str; 14] = ["t", "s", "r0", "r1", "r2", "r3", "u0", "u1", "u2", "u3", "a0", "a1", "a2", "a3"];

enum Located {
    Past,
    Node(usize),
    Interval(usize),
}

/// Writes samples as the trajectory table, optionally preceded by a
/// `# ` comment line.
pub fn write_trajectory_csv<W: Write>(mut out: W, samples: &[WorldlineSample], comment: Option<&str>) -> Result<(), WorldlineError> {
    let err = |e: std::io::Error| WorldlineError::Table(e.to_string());
    if let Some(c) = comment {
        writeln!(out, "# {c}").map_err(err)?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(TRAJECTORY_HEADER).map_err(|e| WorldlineError::Table(e.to_string()))?;
    for s in samples {
        let mut row = Vec::with_capacity(14);
        row.push(s.t.to_string());
        row.push(s.s.to_string());
        for v in [&s.r, &s.u, &s.a] {
            row.extend(v.0.iter().map(|x| x.to_string()));
        }
        w.write_record(&row).map_err(|e| WorldlineError::Table(e.to_string()))?;
    }
    w.flush().map_err(err)?;
    Ok(())
}

impl Worldline for WorldlineHistory {
    fn c(&self) -> f64 {
        self.c
    }
    fn latest_time(&self) -> f64 {
        self.latest().t
    }
    fn earliest_time(&self) -> Option<f64> {
        match self.past {
            PastExtension::Inertial => None,
            PastExtension::Bounded => Some(self.first().t),
        }
    }
    fn sample_at(&self, t: f64) -> Result<WorldlineSample, WorldlineError> {
        self.state_at_time(t)
    }
    fn jerk_at(&self, t: f64) -> Result<FourVector, WorldlineError> {
        WorldlineHistory::jerk_at(self, t)
    }
    fn position_at(&self, t: f64) -> Result<FourVector, WorldlineError> {
        WorldlineHistory::position_at(self, t)
    }
    fn time_at_proper_time(&self, s: f64) -> Result<f64, WorldlineError> {
        WorldlineHistory::time_at_proper_time(self, s)
    }
}
