//! Method-of-steps integration of the retarded N-body equations of motion.
//!
//! The state of particle `i` is its spatial position `x` and all four
//! components of `u`; it advances in coordinate time with classic RK4:
//!
//! ```text
//! dx/dt = c u⃗/u⁰,    du/dt = f/(m0 u⁰),    f = (q/c) η F u (+ g in asymptotic mode)
//! ```
//!
//! Field queries at stage times read the frozen histories; when a retarded
//! root falls after the latest accepted sample it is served by a quadratic
//! Taylor extension of that sample ([`StageExtension`]).

use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::fields::{effective_potential, exact_self_force, total_faraday, ExternalFieldModel, FieldError, SelfForceMode, Source};
use crate::minkowski::{dot, FourVector};
use crate::retardation::{causal_root, max_delay, RetardationError, RootOptions};
use crate::worldline::{
    kinematics_from_jet, ConstraintTolerances, Interpolation, ParticleSpec, PastExtension, Worldline, WorldlineError, WorldlineHistory, WorldlineSample,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Worldline(#[from] WorldlineError),
    #[error("particle {particle}: prehistory covers {available} before t0 but {needed} is required")]
    InsufficientPrehistory { particle: usize, needed: f64, available: f64 },
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl From<RetardationError> for DynamicsError {
    fn from(e: RetardationError) -> Self {
        DynamicsError::Field(e.into())
    }
}

/// Initial data for one particle.
#[derive(Clone, Debug)]
pub enum InitialCondition {
    /// Position and 3-velocity β = v/c at t0; an inertial prehistory is synthesized.
    Instant { position: [f64; 3], beta: [f64; 3] },
    /// Explicit prehistory whose latest sample sits at t0.
    History(WorldlineHistory),
}

#[derive(Clone, Debug)]
pub struct ParticleInit {
    pub spec: ParticleSpec,
    pub initial: InitialCondition,
}

/// Integrator settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub dt: f64,
    /// Project `u ← u/sqrt(u·u)` after each step.
    pub renormalize: bool,
    /// Fan the per-particle force evaluation out to worker threads.
    pub parallel: bool,
    /// Record per-step diagnostics (potentials, momenta, delays).
    pub diagnostics: bool,
    pub interpolation: Interpolation,
    pub tolerances: ConstraintTolerances,
}

impl StepOptions {
    pub fn new(dt: f64) -> Self {
        StepOptions {
            dt,
            renormalize: false,
            parallel: false,
            diagnostics: true,
            interpolation: Interpolation::default(),
            tolerances: ConstraintTolerances::default(),
        }
    }
}

/// A history together with a Taylor extension past its latest sample.
pub struct StageExtension<'a> {
    base: &'a WorldlineHistory,
    horizon: f64,
}

impl<'a> StageExtension<'a> {
    pub fn new(base: &'a WorldlineHistory, horizon: f64) -> Self {
        StageExtension { base, horizon }
    }

    fn extrapolate(&self, t: f64) -> WorldlineSample {
        let c = self.base.c();
        let l = *self.base.latest();
        let (v, vd) = l.coordinate_derivatives(c);
        let tau = t - l.t;
        let x = std::array::from_fn(|k| l.r[k + 1] + v[k] * tau + 0.5 * vd[k] * tau * tau);
        let vel = std::array::from_fn(|k| v[k] + vd[k] * tau);
        let (u, a, _, g) = kinematics_from_jet(vel, vd, [0.0; 3], c);
        let g0 = l.u[0];
        WorldlineSample { t, s: l.s + 0.5 * c * tau * (1.0 / g0 + 1.0 / g), r: FourVector::from_parts(c * t, x), u, a }
    }
}

impl Worldline for StageExtension<'_> {
    fn c(&self) -> f64 {
        self.base.c()
    }
    fn latest_time(&self) -> f64 {
        self.base.latest().t + self.horizon
    }
    fn earliest_time(&self) -> Option<f64> {
        self.base.earliest_time()
    }
    fn sample_at(&self, t: f64) -> Result<WorldlineSample, WorldlineError> {
        if t <= self.base.latest().t {
            return self.base.state_at_time(t);
        }
        if t > self.latest_time() {
            return Err(WorldlineError::QueryBeyondPresent { t, latest: self.latest_time() });
        }
        Ok(self.extrapolate(t))
    }
    fn jerk_at(&self, t: f64) -> Result<FourVector, WorldlineError> {
        if t <= self.base.latest().t {
            return self.base.jerk_at(t);
        }
        let c = self.base.c();
        let l = *self.base.latest();
        let (v, vd) = l.coordinate_derivatives(c);
        let tau = t - l.t;
        let vel = std::array::from_fn(|k| v[k] + vd[k] * tau);
        Ok(kinematics_from_jet(vel, vd, [0.0; 3], c).2)
    }
    fn position_at(&self, t: f64) -> Result<FourVector, WorldlineError> {
        self.sample_at(t).map(|s| s.r)
    }
}

/// Time derivative of one particle's state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Derivative {
    pub dx: [f64; 3],
    pub du: FourVector,
}

/// Per-particle integration state.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Phase {
    x: [f64; 3],
    u: FourVector,
}

impl Phase {
    fn advance(&self, d: &Derivative, h: f64) -> Phase {
        Phase { x: std::array::from_fn(|k| self.x[k] + h * d.dx[k]), u: self.u + d.du * h }
    }
}

/// One diagnostics row.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    /// |u·u − 1| per particle.
    pub constraint_defect: Vec<f64>,
    /// Effective Hamiltonian per particle.
    pub h_eff: Vec<f64>,
    /// Self delay per particle.
    pub self_delay: Vec<f64>,
    /// Largest self or pair delay.
    pub max_delay: f64,
    /// Total canonical momentum (covariant components).
    pub p_total: [f64; 4],
    /// Total angular-momentum tensor (covariant components).
    pub m_total: [[f64; 4]; 4],
    /// Wall-clock seconds spent on the step (not written to CSV).
    pub wall_time: f64,
}

/// Append-only per-step record of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub labels: Vec<String>,
    /// State at t0 (not a step).
    pub initial: Option<StepRecord>,
    pub records: Vec<StepRecord>,
}

impl Diagnostics {
    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["step", "t", "h_total", "p0", "p1", "p2", "p3", "m01", "m02", "m03", "m12", "m13", "m23", "max_delay"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for l in &self.labels {
            h.push(format!("defect_{l}"));
            h.push(format!("h_eff_{l}"));
            h.push(format!("self_delay_{l}"));
        }
        h
    }

    /// Writes one row per step (wall time omitted so repeated runs match bit for bit).
    pub fn write_csv<W: std::io::Write>(&self, mut out: W, comment: Option<&str>) -> std::io::Result<()> {
        if let Some(c) = comment {
            writeln!(out, "# {c}")?;
        }
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(self.header())?;
        for r in &self.records {
            let mut row = vec![r.step.to_string(), r.t.to_string(), r.h_eff.iter().sum::<f64>().to_string()];
            row.extend(r.p_total.iter().map(|x| x.to_string()));
            for (a, b) in [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)] {
                row.push(r.m_total[a][b].to_string());
            }
            row.push(r.max_delay.to_string());
            for i in 0..self.labels.len() {
                row.push(r.constraint_defect[i].to_string());
                row.push(r.h_eff[i].to_string());
                row.push(r.self_delay[i].to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()
    }
}

/// The full N-body system at the current time.
#[derive(Clone, Debug)]
pub struct SystemState {
    pub c: f64,
    pub specs: Vec<ParticleSpec>,
    pub histories: Vec<WorldlineHistory>,
    pub t0: f64,
    pub t_now: f64,
    pub steps: usize,
    pub external: ExternalFieldModel,
    pub mode: SelfForceMode,
    pub options: StepOptions,
    /// Derivatives at the latest state (first stage of the next step).
    fsal: Vec<Derivative>,
}

/// Builds the initial history set and the initial accelerations.
pub fn seed(particles: &[ParticleInit], t0: f64, c: f64, external: ExternalFieldModel, mode: SelfForceMode, options: StepOptions) -> Result<SystemState, DynamicsError> {
    if particles.is_empty() {
        return Err(DynamicsError::InvalidInput("no particles".into()));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(DynamicsError::InvalidInput(format!("c must be positive, got {c}")));
    }
    if !(options.dt.is_finite() && options.dt > 0.0) {
        return Err(DynamicsError::InvalidInput(format!("dt must be positive, got {}", options.dt)));
    }
    let mut probes = Vec::with_capacity(particles.len());
    for (i, p) in particles.iter().enumerate() {
        p.spec.validate()?;
        let (r, u) = match &p.initial {
            InitialCondition::Instant { position, beta } => {
                let b2: f64 = beta.iter().map(|b| b * b).sum();
                if !(b2 < 1.0) || !position.iter().all(|x| x.is_finite()) {
                    return Err(DynamicsError::InvalidInput(format!("particle {i}: invalid instant state")));
                }
                (FourVector::from_parts(c * t0, *position), FourVector::velocity_from_beta(*beta))
            }
            InitialCondition::History(h) => {
                let l = h.latest();
                if l.t != t0 || h.c() != c {
                    return Err(DynamicsError::InvalidInput(format!("particle {i}: prehistory must end at t0 = {t0} with c = {c}")));
                }
                (l.r, l.u)
            }
        };
        probes.push(WorldlineHistory::inertial(c, r, u, 0.0)?);
    }
    let pairs: Vec<(&ParticleSpec, &WorldlineHistory)> = particles.iter().map(|p| &p.spec).zip(probes.iter()).collect();
    let estimate = max_delay(&pairs, t0)?;
    let dt = options.dt;
    let span_steps = ((1.25 * estimate) / dt).ceil() as usize + 2;

    let mut histories = Vec::with_capacity(particles.len());
    for (p, probe) in particles.iter().zip(&probes) {
        let h = match &p.initial {
            InitialCondition::History(h) => h.clone(),
            InitialCondition::Instant { .. } => {
                let l = *probe.latest();
                let mut samples = Vec::with_capacity(span_steps + 1);
                for k in (0..=span_steps).rev() {
                    let t = t0 - k as f64 * dt;
                    samples.push(if k == 0 { l } else { probe.state_at_time(t)? });
                }
                WorldlineHistory::from_samples(c, samples, options.interpolation, PastExtension::Inertial, options.tolerances)?
            }
        };
        histories.push(h);
    }
    let needed = {
        let pairs: Vec<(&ParticleSpec, &WorldlineHistory)> = particles.iter().map(|p| &p.spec).zip(histories.iter()).collect();
        match max_delay(&pairs, t0) {
            Ok(d) => d,
            Err(RetardationError::HistoryTooShort { .. }) => estimate,
            Err(e) => return Err(e.into()),
        }
    };
    for (i, h) in histories.iter().enumerate() {
        let available = h.coverage_before(t0);
        if available < needed {
            return Err(DynamicsError::InsufficientPrehistory { particle: i, needed, available });
        }
    }
    let mut state = SystemState {
        c,
        specs: particles.iter().map(|p| p.spec.clone()).collect(),
        histories,
        t0,
        t_now: t0,
        steps: 0,
        external,
        mode,
        options,
        fsal: Vec::new(),
    };
    let phases = state.latest_phases();
    let d = state.derivatives(t0, &phases)?;
    for (h, di) in state.histories.iter_mut().zip(&d) {
        let u = h.latest().u;
        h.set_departure_acceleration(di.du * (u[0] / c));
    }
    state.fsal = d;
    Ok(state)
}

impl SystemState {
    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    fn latest_phases(&self) -> Vec<Phase> {
        self.histories.iter().map(|h| Phase { x: h.latest().r.spatial(), u: h.latest().u }).collect()
    }

    /// du/dt at the latest accepted state, one entry per particle.
    pub fn current_derivatives(&self) -> &[Derivative] {
        &self.fsal
    }

    /// Derivatives of every particle at stage time `t` and stage states `phases`.
    fn derivatives(&self, t: f64, phases: &[Phase]) -> Result<Vec<Derivative>, DynamicsError> {
        let horizon = (t - self.t_now).max(0.0) * (1.0 + 1e-12) + f64::EPSILON * (1.0 + t.abs());
        let lines: Vec<StageExtension<'_>> = self.histories.iter().map(|h| StageExtension::new(h, horizon)).collect();
        let sources: Vec<Source<'_>> = self.specs.iter().zip(&lines).map(|(s, l)| Source::new(s, l as &dyn Worldline)).collect();
        let one = |i: usize| -> Result<Derivative, DynamicsError> {
            let p = &phases[i];
            let spec = &self.specs[i];
            let obs = FourVector::from_parts(self.c * t, p.x);
            let field = total_faraday(&sources, i, &obs, &self.external, self.mode)?;
            let f = field.force(spec.charge, self.c, &p.u);
            let g = p.u[0];
            Ok(Derivative { dx: std::array::from_fn(|k| self.c * p.u[k + 1] / g), du: f * (1.0 / (spec.rest_mass * g)) })
        };
        if self.options.parallel {
            (0..phases.len()).into_par_iter().map(one).collect()
        } else {
            (0..phases.len()).map(one).collect()
        }
    }

    /// Advances every particle by one RK4 step of length `dt`.
    pub fn step(&mut self) -> Result<(), DynamicsError> {
        let dt = self.options.dt;
        let t = self.t_now;
        let t_new = self.t0 + (self.steps + 1) as f64 * dt;
        let y = self.latest_phases();
        let stage = |d: &[Derivative], h: f64| -> Vec<Phase> { y.iter().zip(d).map(|(p, di)| p.advance(di, h)).collect() };
        let k1 = self.fsal.clone();
        let k2 = self.derivatives(t + 0.5 * dt, &stage(&k1, 0.5 * dt))?;
        let k3 = self.derivatives(t + 0.5 * dt, &stage(&k2, 0.5 * dt))?;
        let k4 = self.derivatives(t_new, &stage(&k3, dt))?;
        let mut next: Vec<Phase> = (0..y.len())
            .map(|i| {
                let comb = Derivative {
                    dx: std::array::from_fn(|k| (k1[i].dx[k] + 2.0 * k2[i].dx[k] + 2.0 * k3[i].dx[k] + k4[i].dx[k]) / 6.0),
                    du: (k1[i].du + k2[i].du * 2.0 + k3[i].du * 2.0 + k4[i].du) * (1.0 / 6.0),
                };
                y[i].advance(&comb, dt)
            })
            .collect();
        if self.options.renormalize {
            for p in &mut next {
                p.u = p.u * (1.0 / dot(&p.u, &p.u).sqrt());
            }
        }
        let d_new = self.derivatives(t_new, &next)?;
        for i in 0..next.len() {
            let u = next[i].u;
            let a = d_new[i].du * (u[0] / self.c);
            self.histories[i].append_advancing(t_new, FourVector::from_parts(self.c * t_new, next[i].x), u, a)?;
        }
        self.fsal = d_new;
        self.t_now = t_new;
        self.steps += 1;
        Ok(())
    }

    /// Number of steps needed to reach `t_end` from the current time.
    pub fn steps_to(&self, t_end: f64) -> Result<usize, DynamicsError> {
        let span = t_end - self.t_now;
        if !(span > 0.0) {
            return Err(DynamicsError::InvalidInput(format!("t_end = {t_end} must exceed the current time {}", self.t_now)));
        }
        let n = (span / self.options.dt).round();
        if (n * self.options.dt - span).abs() > 1e-9 * self.options.dt.max(span) {
            return Err(DynamicsError::InvalidInput(format!("t_end − t_now = {span} is not a multiple of dt = {}", self.options.dt)));
        }
        Ok(n as usize)
    }

    /// Steps until `t_end`, recording one diagnostics row per step.
    ///
    /// On error the state and `diag` hold everything accepted so far.
    pub fn run(&mut self, t_end: f64, diag: &mut Diagnostics) -> Result<(), DynamicsError> {
        let n = self.steps_to(t_end)?;
        if diag.labels.is_empty() {
            diag.labels = self.specs.iter().map(|s| s.label.clone()).collect();
        }
        if diag.initial.is_none() && self.options.diagnostics {
            diag.initial = Some(self.record(0.0)?);
        }
        for _ in 0..n {
            let start = Instant::now();
            self.step()?;
            let wall = start.elapsed().as_secs_f64();
            if self.options.diagnostics {
                diag.records.push(self.record(wall)?);
            } else {
                diag.records.push(StepRecord {
                    step: self.steps,
                    t: self.t_now,
                    constraint_defect: self.histories.iter().map(|h| h.latest().constraint_defect()).collect(),
                    h_eff: Vec::new(),
                    self_delay: Vec::new(),
                    max_delay: f64::NAN,
                    p_total: [f64::NAN; 4],
                    m_total: [[f64::NAN; 4]; 4],
                    wall_time: wall,
                });
            }
        }
        Ok(())
    }

    /// Canonical momenta `P_μ = m0 c u_μ + (q/c) A_μ` at the latest state (covariant).
    pub fn canonical_momenta(&self) -> Result<Vec<[f64; 4]>, DynamicsError> {
        let sources: Vec<Source<'_>> = self.specs.iter().zip(&self.histories).map(|(s, h)| Source::new(s, h as &dyn Worldline)).collect();
        let mut out = Vec::with_capacity(self.len());
        for (i, (spec, h)) in self.specs.iter().zip(&self.histories).enumerate() {
            let l = h.latest();
            let a = effective_potential(&sources, i, &l.r, &self.external)?;
            let p = l.u * (spec.rest_mass * self.c) + a * (spec.charge / self.c);
            out.push(p.lower());
        }
        Ok(out)
    }

    fn record(&self, wall_time: f64) -> Result<StepRecord, DynamicsError> {
        let p = self.canonical_momenta()?;
        let opts = RootOptions::default();
        let mut rec = StepRecord {
            step: self.steps,
            t: self.t_now,
            constraint_defect: Vec::new(),
            h_eff: Vec::new(),
            self_delay: Vec::new(),
            max_delay: 0.0,
            p_total: [0.0; 4],
            m_total: [[0.0; 4]; 4],
            wall_time,
        };
        for (i, (spec, h)) in self.specs.iter().zip(&self.histories).enumerate() {
            let l = h.latest();
            rec.constraint_defect.push(l.constraint_defect());
            // P − (q/c)A = m0 c u, so H_eff = (m0 c/2) u·u.
            rec.h_eff.push(0.5 * spec.rest_mass * self.c * dot(&l.u, &l.u));
            let d = causal_root(h, &l.r, spec.radius, &opts)?.t_ret;
            rec.self_delay.push(d);
            rec.max_delay = rec.max_delay.max(d);
            for (j, (sj, hj)) in self.specs.iter().zip(&self.histories).enumerate() {
                if j != i {
                    for sigma in [spec.radius, sj.radius] {
                        rec.max_delay = rec.max_delay.max(causal_root(hj, &l.r, sigma, &opts)?.t_ret);
                    }
                }
            }
            let r = l.r.lower();
            for mu in 0..4 {
                rec.p_total[mu] += p[i][mu];
                for nu in 0..4 {
                    rec.m_total[mu][nu] += r[mu] * p[i][nu] - r[nu] * p[i][mu];
                }
            }
        }
        Ok(rec)
    }
}

/// Report of the locally-isolated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct LocallyIsolatedReport {
    /// Largest Euclidean norm of the exact self 4-force after the switch-off.
    pub max_self_force_after: f64,
    /// Largest jump of H_eff between consecutive steps.
    pub max_h_eff_jump: f64,
    pub steps: usize,
}

/// One particle driven by `external` until `t_switch`, free afterwards.
pub fn demo_locally_isolated(
    spec: ParticleSpec,
    initial: InitialCondition,
    external: ExternalFieldModel,
    t0: f64,
    t_switch: f64,
    t_end: f64,
    c: f64,
    options: StepOptions,
) -> Result<(LocallyIsolatedReport, SystemState, Diagnostics), DynamicsError> {
    if !(t0 <= t_switch && t_switch < t_end) {
        return Err(DynamicsError::InvalidInput("need t0 ≤ t_switch < t_end".into()));
    }
    let ext = ExternalFieldModel::Switched { inner: Box::new(external), t_off: t_switch, c };
    let mut state = seed(&[ParticleInit { spec: spec.clone(), initial }], t0, c, ext, SelfForceMode::Exact, options)?;
    let mut diag = Diagnostics::default();
    let n = state.steps_to(t_end)?;
    let mut max_force = 0.0f64;
    diag.labels = vec![spec.label.clone()];
    for _ in 0..n {
        state.run(state.t_now + options.dt, &mut diag)?;
        if state.t_now > t_switch {
            let h = &state.histories[0];
            let l = h.latest();
            let f = exact_self_force(h, &l.r, &l.u, spec.charge, spec.radius)?;
            max_force = max_force.max(f.euclid());
        }
    }
    let mut jump = 0.0f64;
    let mut prev = diag.initial.as_ref().and_then(|r| r.h_eff.first().copied());
    for r in &diag.records {
        if let (Some(p), Some(h)) = (prev, r.h_eff.first()) {
            jump = jump.max((h - p).abs());
        }
        prev = r.h_eff.first().copied();
    }
    Ok((LocallyIsolatedReport { max_self_force_after: max_force, max_h_eff_jump: jump, steps: n }, state, diag))
}

/// Report of the globally-isolated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct GloballyIsolatedReport {
    /// Largest |p̂_k(t) − p̂_k(t0)| over spatial k and all steps.
    pub momentum_drift: f64,
    /// For two particles: largest |x1 + x2 − (x1 + x2)(t0)| (zero for mirror-symmetric motion).
    pub mirror_residual: Option<f64>,
    pub steps: usize,
}

/// N ≥ 2 particles under pair and self forces only.
pub fn demo_globally_isolated(particles: &[ParticleInit], t0: f64, t_end: f64, c: f64, options: StepOptions) -> Result<(GloballyIsolatedReport, SystemState, Diagnostics), DynamicsError> {
    if particles.len() < 2 {
        return Err(DynamicsError::InvalidInput("globally isolated scenario needs at least two particles".into()));
    }
    let mut opts = options;
    opts.diagnostics = true;
    let mut state = seed(particles, t0, c, ExternalFieldModel::None, SelfForceMode::Exact, opts)?;
    let mut diag = Diagnostics::default();
    state.run(t_end, &mut diag)?;
    let p0 = diag.initial.as_ref().map(|r| r.p_total).unwrap_or([0.0; 4]);
    let drift = diag.records.iter().flat_map(|r| (1..4).map(move |k| (r.p_total[k] - p0[k]).abs())).fold(0.0f64, f64::max);
    let mirror = if particles.len() == 2 {
        let (a, b) = (&state.histories[0], &state.histories[1]);
        let a0 = a.state_at_time(t0)?.r;
        let b0 = b.state_at_time(t0)?.r;
        let mut worst = 0.0f64;
        for (sa, sb) in a.samples().iter().zip(b.samples()).filter(|(s, _)| s.t >= t0) {
            for k in 1..4 {
                worst = worst.max((sa.r[k] + sb.r[k] - a0[k] - b0[k]).abs());
            }
        }
        Some(worst)
    } else {
        None
    };
    let steps = diag.records.len();
    Ok((GloballyIsolatedReport { momentum_drift: drift, mirror_residual: mirror, steps }, state, diag))
}

/// Divergence between two runs that share the instantaneous state at t0.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowReport {
    /// Largest difference of positions and 4-velocities at t0.
    pub initial_mismatch: f64,
    /// (t, max_i |x_i − x′_i|) after each step.
    pub divergence: Vec<(f64, f64)>,
    pub max_divergence: f64,
}

/// Integrates `a` and `b` in lock-step to `t_end` and records their divergence.
pub fn flow_non_bijectivity_check(a: &mut SystemState, b: &mut SystemState, t_end: f64) -> Result<FlowReport, DynamicsError> {
    if a.len() != b.len() || a.t_now != b.t_now || a.options.dt != b.options.dt {
        return Err(DynamicsError::InvalidInput("runs must share particle count, time and step".into()));
    }
    let mut initial = 0.0f64;
    for (ha, hb) in a.histories.iter().zip(&b.histories) {
        let (la, lb) = (ha.latest(), hb.latest());
        initial = initial.max((la.r - lb.r).max_abs()).max((la.u - lb.u).max_abs());
    }
    let n = a.steps_to(t_end)?;
    let mut divergence = Vec::with_capacity(n);
    let mut worst = 0.0f64;
    for _ in 0..n {
        a.step()?;
        b.step()?;
        let mut d = 0.0f64;
        for (ha, hb) in a.histories.iter().zip(&b.histories) {
            let (xa, xb) = (ha.latest().r, hb.latest().r);
            d = d.max((1..4).map(|k| (xa[k] - xb[k]).powi(2)).sum::<f64>().sqrt());
        }
        worst = worst.max(d);
        divergence.push((a.t_now, d));
    }
    Ok(FlowReport { initial_mismatch: initial, divergence, max_divergence: worst })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn free_particle_moves_linearly() {
        let spec = ParticleSpec::new("a", 1.0, 0.0, 0.5).unwrap();
        let init = ParticleInit { spec, initial: InitialCondition::Instant { position: [0.0; 3], beta: [0.5, 0.0, 0.0] } };
        let mut s = seed(&[init], 0.0, 1.0, ExternalFieldModel::None, SelfForceMode::Exact, StepOptions::new(0.1)).unwrap();
        let mut d = Diagnostics::default();
        s.run(1.0, &mut d).unwrap();
        assert_eq!(d.records.len(), 10);
        assert!((s.histories[0].latest().r[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn seeded_prehistory_covers_pair_delay() {
        let a = ParticleInit { spec: ParticleSpec::new("a", 1.0, 0.0, 4.0).unwrap(), initial: InitialCondition::Instant { position: [0.0; 3], beta: [0.0; 3] } };
        let b = ParticleInit { spec: ParticleSpec::new("b", 1.0, 0.0, 4.0).unwrap(), initial: InitialCondition::Instant { position: [3.0, 0.0, 0.0], beta: [0.0; 3] } };
        let s = seed(&[a, b], 0.0, 1.0, ExternalFieldModel::None, SelfForceMode::Exact, StepOptions::new(0.5)).unwrap();
        assert!(s.histories[0].sampled_span() >= 5.0);
    }
}
