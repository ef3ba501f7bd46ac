//! Hamiltonian layer: canonical state, phase functions, Poisson brackets,
//! Poincaré generators, frozen-history Hamiltonians, the instant-form
//! generators and the non-local (Gateaux) bracket.
//!
//! Layout of the super-abundant state: particle `i` owns slots `8i..8i+4`
//! for `r^μ` (contravariant) and `8i+4..8i+8` for `P_μ` (covariant), so that
//! `[r^μ, P_ν] = δ^μ_ν`.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use thiserror::Error;

use crate::dynamics::SystemState;
use crate::fields::{effective_potential, ExternalFieldModel, FieldError, Source};
use crate::minkowski::{dot, FourVector, METRIC};
use crate::worldline::{AffineImage, ParticleSpec, Worldline, WorldlineError, WorldlineHistory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CanonicalError {
    #[error("gradient unavailable: phase function has neither an analytic gradient nor finite differences")]
    GradientUnavailable,
    #[error("context mismatch: expected {expected} particles, got {got}")]
    ContextMismatch { expected: usize, got: usize },
    #[error("kinematic constraint violated: |u·u − 1| = {defect:e} exceeds {tol:e}")]
    ConstraintViolation { defect: f64, tol: f64 },
    #[error("non-local bracket estimate unstable: value {estimate:e}, spread {spread:e}")]
    NumericalNoise { estimate: f64, spread: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl From<WorldlineError> for CanonicalError {
    fn from(e: WorldlineError) -> Self {
        CanonicalError::Field(e.into())
    }
}

/// Slot of `r^μ` of particle `i`.
pub fn r_index(i: usize, mu: usize) -> usize {
    8 * i + mu
}

/// Slot of `P_μ` of particle `i`.
pub fn p_index(i: usize, mu: usize) -> usize {
    8 * i + 4 + mu
}

/// Unconstrained 8N-component canonical state.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalState {
    data: Vec<f64>,
}

impl CanonicalState {
    pub fn zeros(n: usize) -> Self {
        CanonicalState { data: vec![0.0; 8 * n] }
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self, CanonicalError> {
        if data.is_empty() || data.len() % 8 != 0 {
            return Err(CanonicalError::InvalidInput(format!("state length {} is not a positive multiple of 8", data.len())));
        }
        Ok(CanonicalState { data })
    }

    /// Uniform random components in `[−scale, scale]`.
    pub fn random<R: Rng>(n: usize, rng: &mut R, scale: f64) -> Self {
        CanonicalState { data: (0..8 * n).map(|_| rng.gen_range(-scale..=scale)).collect() }
    }

    pub fn n_particles(&self) -> usize {
        self.data.len() / 8
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn r(&self, i: usize) -> FourVector {
        FourVector(std::array::from_fn(|mu| self.data[r_index(i, mu)]))
    }

    /// Covariant momentum `P_μ`.
    pub fn p(&self, i: usize) -> [f64; 4] {
        std::array::from_fn(|mu| self.data[p_index(i, mu)])
    }

    pub fn set_r(&mut self, i: usize, r: FourVector) {
        for mu in 0..4 {
            self.data[r_index(i, mu)] = r[mu];
        }
    }

    pub fn set_p(&mut self, i: usize, p: [f64; 4]) {
        for mu in 0..4 {
            self.data[p_index(i, mu)] = p[mu];
        }
    }
}

/// Sparse polynomial in the state slots with exact arithmetic on its structure.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Polynomial {
    /// Monomial (sorted `(slot, power)` list) → coefficient.
    terms: BTreeMap<Vec<(usize, u32)>, f64>,
}

impl Polynomial {
    pub fn zero() -> Self {
        Polynomial::default()
    }

    pub fn constant(c: f64) -> Self {
        let mut p = Polynomial::zero();
        p.add_term(Vec::new(), c);
        p
    }

    pub fn var(slot: usize) -> Self {
        let mut p = Polynomial::zero();
        p.add_term(vec![(slot, 1)], 1.0);
        p
    }

    fn add_term(&mut self, mono: Vec<(usize, u32)>, coef: f64) {
        if coef == 0.0 {
            return;
        }
        let e = self.terms.entry(mono).or_insert(0.0);
        *e += coef;
        if *e == 0.0 {
            self.terms.retain(|_, c| *c != 0.0);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn n_terms(&self) -> usize {
        self.terms.len()
    }

    /// Highest slot index that appears, if any.
    pub fn max_slot(&self) -> Option<usize> {
        self.terms.keys().flat_map(|m| m.iter().map(|(s, _)| *s)).max()
    }

    pub fn add(&self, o: &Polynomial) -> Polynomial {
        let mut out = self.clone();
        for (m, c) in &o.terms {
            out.add_term(m.clone(), *c);
        }
        out
    }

    pub fn sub(&self, o: &Polynomial) -> Polynomial {
        self.add(&o.scale(-1.0))
    }

    pub fn scale(&self, k: f64) -> Polynomial {
        let mut out = Polynomial::zero();
        for (m, c) in &self.terms {
            out.add_term(m.clone(), c * k);
        }
        out
    }

    pub fn mul(&self, o: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero();
        for (ma, ca) in &self.terms {
            for (mb, cb) in &o.terms {
                out.add_term(merge_monomials(ma, mb), ca * cb);
            }
        }
        out
    }

    pub fn derivative(&self, slot: usize) -> Polynomial {
        let mut out = Polynomial::zero();
        for (m, c) in &self.terms {
            if let Some(pos) = m.iter().position(|(s, _)| *s == slot) {
                let pow = m[pos].1;
                let mut nm = m.clone();
                if pow == 1 {
                    nm.remove(pos);
                } else {
                    nm[pos].1 = pow - 1;
                }
                out.add_term(nm, c * pow as f64);
            }
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(m, c)| c * m.iter().map(|(s, p)| x[*s].powi(*p as i32)).product::<f64>()).sum()
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        for (m, c) in &self.terms {
            for (k, (slot, pow)) in m.iter().enumerate() {
                let mut v = c * *pow as f64 * x[*slot].powi(*pow as i32 - 1);
                for (j, (s2, p2)) in m.iter().enumerate() {
                    if j != k {
                        v *= x[*s2].powi(*p2 as i32);
                    }
                }
                g[*slot] += v;
            }
        }
        g
    }
}

fn merge_monomials(a: &[(usize, u32)], b: &[(usize, u32)]) -> Vec<(usize, u32)> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i].0 < b[j].0) {
            out.push(a[i]);
            i += 1;
        } else if i == a.len() || b[j].0 < a[i].0 {
            out.push(b[j]);
            j += 1;
        } else {
            out.push((a[i].0, a[i].1 + b[j].1));
            i += 1;
            j += 1;
        }
    }
    out
}

/// Exact bracket of two polynomials.
pub fn poly_bracket(a: &Polynomial, b: &Polynomial) -> Polynomial {
    let n = match (a.max_slot(), b.max_slot()) {
        (Some(x), Some(y)) => x.max(y) / 8 + 1,
        _ => return Polynomial::zero(),
    };
    let mut out = Polynomial::zero();
    for i in 0..n {
        for mu in 0..4 {
            let (r, p) = (r_index(i, mu), p_index(i, mu));
            out = out.add(&a.derivative(r).mul(&b.derivative(p))).sub(&a.derivative(p).mul(&b.derivative(r)));
        }
    }
    out
}

pub type ScalarFn = Arc<dyn Fn(&CanonicalState) -> Result<f64, CanonicalError> + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(&CanonicalState) -> Result<Vec<f64>, CanonicalError> + Send + Sync>;

/// Finite-difference scheme for phase functions without analytic gradients.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FiniteDifference {
    /// Two-point central difference with step `rel_step·(1 + |x_k|)`.
    Central { rel_step: f64 },
    /// Five-point central difference, used for functions that are themselves
    /// finite-difference brackets.
    FourthOrder { rel_step: f64 },
    Disabled,
}

impl FiniteDifference {
    pub const DEFAULT: FiniteDifference = FiniteDifference::Central { rel_step: 1e-6 };
    pub const NESTED: FiniteDifference = FiniteDifference::FourthOrder { rel_step: 1e-3 };
}

/// Smooth scalar on the canonical state.
#[derive(Clone)]
pub enum PhaseFunction {
    Poly(Polynomial),
    Smooth { value: ScalarFn, gradient: Option<GradientFn>, fd: FiniteDifference },
}

impl fmt::Debug for PhaseFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseFunction::Poly(p) => write!(f, "Poly({} terms)", p.n_terms()),
            PhaseFunction::Smooth { gradient, fd, .. } => write!(f, "Smooth(analytic gradient: {}, fd: {fd:?})", gradient.is_some()),
        }
    }
}

impl From<Polynomial> for PhaseFunction {
    fn from(p: Polynomial) -> Self {
        PhaseFunction::Poly(p)
    }
}

fn fd_gradient(value: &ScalarFn, x: &CanonicalState, scheme: FiniteDifference) -> Result<Vec<f64>, CanonicalError> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.clone();
    let at = |k: usize, d: f64, probe: &mut CanonicalState| -> Result<f64, CanonicalError> {
        probe.data[k] = x.data[k] + d;
        let v = value(probe);
        probe.data[k] = x.data[k];
        v
    };
    for k in 0..x.len() {
        g[k] = match scheme {
            FiniteDifference::Central { rel_step } => {
                let h = rel_step * (1.0 + x.data[k].abs());
                (at(k, h, &mut probe)? - at(k, -h, &mut probe)?) / (2.0 * h)
            }
            FiniteDifference::FourthOrder { rel_step } => {
                let h = rel_step * (1.0 + x.data[k].abs());
                (-at(k, 2.0 * h, &mut probe)? + 8.0 * at(k, h, &mut probe)? - 8.0 * at(k, -h, &mut probe)? + at(k, -2.0 * h, &mut probe)?) / (12.0 * h)
            }
            FiniteDifference::Disabled => return Err(CanonicalError::GradientUnavailable),
        };
    }
    Ok(g)
}

impl PhaseFunction {
    /// Smooth function differentiated by central finite differences.
    pub fn smooth<F>(f: F) -> Self
    where
        F: Fn(&CanonicalState) -> Result<f64, CanonicalError> + Send + Sync + 'static,
    {
        PhaseFunction::Smooth { value: Arc::new(f), gradient: None, fd: FiniteDifference::DEFAULT }
    }

    pub fn with_gradient<F, G>(f: F, g: G) -> Self
    where
        F: Fn(&CanonicalState) -> Result<f64, CanonicalError> + Send + Sync + 'static,
        G: Fn(&CanonicalState) -> Result<Vec<f64>, CanonicalError> + Send + Sync + 'static,
    {
        PhaseFunction::Smooth { value: Arc::new(f), gradient: Some(Arc::new(g)), fd: FiniteDifference::DEFAULT }
    }

    pub fn with_fd(self, scheme: FiniteDifference) -> Self {
        match self {
            PhaseFunction::Smooth { value, gradient, .. } => PhaseFunction::Smooth { value, gradient, fd: scheme },
            p => p,
        }
    }

    pub fn eval(&self, x: &CanonicalState) -> Result<f64, CanonicalError> {
        match self {
            PhaseFunction::Poly(p) => Ok(p.eval(&x.data)),
            PhaseFunction::Smooth { value, .. } => value(x),
        }
    }

    pub fn gradient(&self, x: &CanonicalState) -> Result<Vec<f64>, CanonicalError> {
        match self {
            PhaseFunction::Poly(p) => Ok(p.gradient(&x.data)),
            PhaseFunction::Smooth { gradient: Some(g), .. } => g(x),
            PhaseFunction::Smooth { value, gradient: None, fd } => fd_gradient(value, x, *fd),
        }
    }

    /// Largest relative gap between the analytic gradient and central differences.
    pub fn gradient_self_test(&self, x: &CanonicalState) -> Result<f64, CanonicalError> {
        let analytic = self.gradient(x)?;
        let f = self.clone();
        let value: ScalarFn = Arc::new(move |y| f.eval(y));
        let numeric = fd_gradient(&value, x, FiniteDifference::DEFAULT)?;
        Ok(analytic.iter().zip(&numeric).map(|(a, n)| (a - n).abs() / a.abs().max(1.0)).fold(0.0, f64::max))
    }

    /// `[self, o]` as a phase function (exact for polynomials).
    pub fn bracket(&self, o: &PhaseFunction) -> PhaseFunction {
        if let (PhaseFunction::Poly(a), PhaseFunction::Poly(b)) = (self, o) {
            return PhaseFunction::Poly(poly_bracket(a, b));
        }
        let (a, b) = (self.clone(), o.clone());
        PhaseFunction::Smooth { value: Arc::new(move |x| poisson_bracket(&a, &b, x)), gradient: None, fd: FiniteDifference::NESTED }
    }

    /// `α·self + β·o`.
    pub fn linear(&self, alpha: f64, o: &PhaseFunction, beta: f64) -> PhaseFunction {
        if let (PhaseFunction::Poly(a), PhaseFunction::Poly(b)) = (self, o) {
            return PhaseFunction::Poly(a.scale(alpha).add(&b.scale(beta)));
        }
        let (a, b) = (self.clone(), o.clone());
        let (a2, b2) = (self.clone(), o.clone());
        PhaseFunction::with_gradient(
            move |x| Ok(alpha * a.eval(x)? + beta * b.eval(x)?),
            move |x| Ok(a2.gradient(x)?.iter().zip(b2.gradient(x)?).map(|(ga, gb)| alpha * ga + beta * gb).collect()),
        )
    }

    /// Pointwise product.
    pub fn product(&self, o: &PhaseFunction) -> PhaseFunction {
        if let (PhaseFunction::Poly(a), PhaseFunction::Poly(b)) = (self, o) {
            return PhaseFunction::Poly(a.mul(b));
        }
        let (a, b) = (self.clone(), o.clone());
        let (a2, b2) = (self.clone(), o.clone());
        PhaseFunction::with_gradient(
            move |x| Ok(a.eval(x)? * b.eval(x)?),
            move |x| {
                let (va, vb) = (a2.eval(x)?, b2.eval(x)?);
                Ok(a2.gradient(x)?.iter().zip(b2.gradient(x)?).map(|(ga, gb)| ga * vb + va * gb).collect())
            },
        )
    }
}

/// `[η, ξ] = Σ_i Σ_μ (∂η/∂r^μ ∂ξ/∂P_μ − ∂η/∂P_μ ∂ξ/∂r^μ)` at `x`.
pub fn poisson_bracket(eta: &PhaseFunction, xi: &PhaseFunction, x: &CanonicalState) -> Result<f64, CanonicalError> {
    let ge = eta.gradient(x)?;
    let gx = xi.gradient(x)?;
    let mut acc = 0.0;
    for i in 0..x.n_particles() {
        for mu in 0..4 {
            let (r, p) = (r_index(i, mu), p_index(i, mu));
            acc += ge[r] * gx[p] - ge[p] * gx[r];
        }
    }
    Ok(acc)
}

/// Largest residuals of the bracket laws over a set of triples.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BracketResiduals {
    pub antisymmetry: f64,
    pub linearity: f64,
    pub leibniz: f64,
    pub jacobi: f64,
}

impl BracketResiduals {
    pub fn max(&self) -> f64 {
        self.antisymmetry.max(self.linearity).max(self.leibniz).max(self.jacobi)
    }
}

pub fn check_bracket_algebra(x: &CanonicalState, triples: &[(PhaseFunction, PhaseFunction, PhaseFunction)]) -> Result<BracketResiduals, CanonicalError> {
    let (alpha, beta) = (0.7, -1.3);
    let mut r = BracketResiduals::default();
    for (f, g, h) in triples {
        let pb = |a: &PhaseFunction, b: &PhaseFunction| poisson_bracket(a, b, x);
        let fg = pb(f, g)?;
        r.antisymmetry = r.antisymmetry.max((fg + pb(g, f)?).abs());
        let fh = pb(f, h)?;
        r.linearity = r.linearity.max((pb(f, &g.linear(alpha, h, beta))? - alpha * fg - beta * fh).abs());
        let (gv, hv) = (g.eval(x)?, h.eval(x)?);
        r.leibniz = r.leibniz.max((pb(f, &g.product(h))? - fg * hv - gv * fh).abs());
        let j = pb(&f.bracket(g), h)? + pb(&g.bracket(h), f)? + pb(&h.bracket(f), g)?;
        r.jacobi = r.jacobi.max(j.abs());
    }
    Ok(r)
}

/// Largest deviation of `[r^μ_i, P_ν^j] = δ δ`, `[r, r] = 0`, `[P, P] = 0` at `x`.
pub fn fundamental_bracket_residual(x: &CanonicalState) -> Result<f64, CanonicalError> {
    let n = x.n_particles();
    let slots: Vec<(usize, bool)> = (0..n).flat_map(|i| (0..4).map(move |m| (r_index(i, m), true)).chain((0..4).map(move |m| (p_index(i, m), false)))).collect();
    let mut worst = 0.0f64;
    for &(a, a_is_r) in &slots {
        for &(b, b_is_r) in &slots {
            let v = poisson_bracket(&Polynomial::var(a).into(), &Polynomial::var(b).into(), x)?;
            let want = if a_is_r && !b_is_r && b == a + 4 {
                1.0
            } else if !a_is_r && b_is_r && a == b + 4 {
                -1.0
            } else {
                0.0
            };
            worst = worst.max((v - want).abs());
        }
    }
    Ok(worst)
}

/// Poincaré generators of the unconstrained realization.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorSet {
    pub n: usize,
    /// `p̂_μ = Σ_i P_μ`.
    pub p: [Polynomial; 4],
    /// `M̂_{μν} = Σ_i (r_μ P_ν − r_ν P_μ)`, with `r_μ = η_{μμ} r^μ`.
    pub m: [[Polynomial; 4]; 4],
}

/// Generators for `n` particles.
pub fn unconstrained_generators(n: usize) -> GeneratorSet {
    let mut p: [Polynomial; 4] = Default::default();
    let mut m: [[Polynomial; 4]; 4] = Default::default();
    for i in 0..n {
        for mu in 0..4 {
            p[mu] = p[mu].add(&Polynomial::var(p_index(i, mu)));
        }
        for mu in 0..4 {
            for nu in 0..4 {
                if mu == nu {
                    continue;
                }
                let term = Polynomial::var(r_index(i, mu)).scale(METRIC[mu]).mul(&Polynomial::var(p_index(i, nu)));
                let swap = Polynomial::var(r_index(i, nu)).scale(METRIC[nu]).mul(&Polynomial::var(p_index(i, mu)));
                m[mu][nu] = m[mu][nu].add(&term.sub(&swap));
            }
        }
    }
    GeneratorSet { n, p, m }
}

/// Residuals of the Poincaré algebra.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LorentzReport {
    /// Against structure constants derived from `[r^μ, P_ν] = δ^μ_ν`.
    pub consistent: f64,
    /// Against the same relations with the opposite overall sign on the
    /// `[M, p]` and `[M, M]` right-hand sides.
    pub opposite_sign: f64,
}

impl GeneratorSet {
    pub fn momentum(&self, mu: usize) -> PhaseFunction {
        self.p[mu].clone().into()
    }

    pub fn angular(&self, mu: usize, nu: usize) -> PhaseFunction {
        self.m[mu][nu].clone().into()
    }

    /// The ten independent generators, `p̂_0..p̂_3` then `M̂_{μν}` for μ < ν.
    pub fn all(&self) -> Vec<Polynomial> {
        let mut out: Vec<Polynomial> = self.p.to_vec();
        for mu in 0..4 {
            for nu in (mu + 1)..4 {
                out.push(self.m[mu][nu].clone());
            }
        }
        out
    }

    /// `F = −a^μ p̂_μ + ½ b^{μν} M̂_{μν}`.
    pub fn compose(&self, a: [f64; 4], b: [[f64; 4]; 4]) -> Polynomial {
        let mut f = Polynomial::zero();
        for mu in 0..4 {
            f = f.add(&self.p[mu].scale(-a[mu]));
            for nu in 0..4 {
                f = f.add(&self.m[mu][nu].scale(0.5 * b[mu][nu]));
            }
        }
        f
    }

    /// Poincaré-algebra residuals at `x`:
    /// `[p_μ, p_ν] = 0`, `[M_{μν}, p_α] = η_{μα} p_ν − η_{να} p_μ`,
    /// `[M_{μν}, M_{ρσ}] = η_{μρ} M_{νσ} + η_{νσ} M_{μρ} − η_{νρ} M_{μσ} − η_{μσ} M_{νρ}`.
    pub fn lorentz_residuals(&self, x: &CanonicalState) -> LorentzReport {
        let v = &x.data;
        let eta = |a: usize, b: usize| if a == b { METRIC[a] } else { 0.0 };
        let pv: [f64; 4] = std::array::from_fn(|m| self.p[m].eval(v));
        let mv: [[f64; 4]; 4] = std::array::from_fn(|a| std::array::from_fn(|b| self.m[a][b].eval(v)));
        let (mut cons, mut opp) = (0.0f64, 0.0f64);
        for mu in 0..4 {
            for nu in 0..4 {
                let pp = poly_bracket(&self.p[mu], &self.p[nu]).eval(v);
                cons = cons.max(pp.abs());
                opp = opp.max(pp.abs());
                for al in 0..4 {
                    let got = poly_bracket(&self.m[mu][nu], &self.p[al]).eval(v);
                    let want = eta(mu, al) * pv[nu] - eta(nu, al) * pv[mu];
                    cons = cons.max((got - want).abs());
                    opp = opp.max((got + want).abs());
                }
                for rho in 0..4 {
                    for sig in 0..4 {
                        let got = poly_bracket(&self.m[mu][nu], &self.m[rho][sig]).eval(v);
                        let want = eta(mu, rho) * mv[nu][sig] + eta(nu, sig) * mv[mu][rho] - eta(nu, rho) * mv[mu][sig] - eta(mu, sig) * mv[nu][rho];
                        cons = cons.max((got - want).abs());
                        opp = opp.max((got + want).abs());
                    }
                }
            }
        }
        LorentzReport { consistent: cons, opposite_sign: opp }
    }

    /// Largest Jacobi residual over all triples of distinct generators.
    pub fn jacobi_residual(&self, x: &CanonicalState) -> f64 {
        let g = self.all();
        let mut worst = 0.0f64;
        for a in 0..g.len() {
            for b in (a + 1)..g.len() {
                for c in (b + 1)..g.len() {
                    let j = poly_bracket(&poly_bracket(&g[a], &g[b]), &g[c])
                        .add(&poly_bracket(&poly_bracket(&g[b], &g[c]), &g[a]))
                        .add(&poly_bracket(&poly_bracket(&g[c], &g[a]), &g[b]));
                    worst = worst.max(j.eval(&x.data).abs());
                }
            }
        }
        worst
    }
}

/// Infinitesimal action `δr^σ = L^σ_μ r^μ + t^σ` of a generator linear in `P`,
/// read off `∂F/∂P_σ` of particle 0.
pub fn affine_action(f: &Polynomial) -> Result<([[f64; 4]; 4], [f64; 4]), CanonicalError> {
    let dim = f.max_slot().map(|s| (s / 8 + 1) * 8).unwrap_or(8);
    let mut l = [[0.0; 4]; 4];
    let mut t = [0.0; 4];
    for sig in 0..4 {
        let d = f.derivative(p_index(0, sig));
        let zero = vec![0.0; dim];
        t[sig] = d.eval(&zero);
        for mu in 0..4 {
            let mut e = zero.clone();
            e[r_index(0, mu)] = 1.0;
            l[sig][mu] = d.eval(&e) - t[sig];
        }
        let mut probe = zero.clone();
        for mu in 0..4 {
            probe[p_index(0, mu)] = 1.0 + mu as f64;
            probe[r_index(0, mu)] = 0.5 - mu as f64;
        }
        let lin: f64 = t[sig] + (0..4).map(|mu| l[sig][mu] * probe[r_index(0, mu)]).sum::<f64>();
        if (d.eval(&probe) - lin).abs() > 1e-12 * (1.0 + lin.abs()) {
            return Err(CanonicalError::InvalidInput("generator is not an affine point transformation".into()));
        }
    }
    Ok((l, t))
}

fn mat_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..4).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Matrix exponential by Taylor series (for the small generator matrices used here).
pub fn mat_exp(m: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    let mut term = [[0.0; 4]; 4];
    for i in 0..4 {
        out[i][i] = 1.0;
        term[i][i] = 1.0;
    }
    for k in 1..40 {
        term = mat_mul(&term, m);
        let inv = 1.0 / k as f64;
        let mut norm = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                term[i][j] *= inv;
                out[i][j] += term[i][j];
                norm = norm.max(term[i][j].abs());
            }
        }
        if norm < 1e-18 {
            break;
        }
    }
    out
}

/// Snapshot of all histories against which local brackets are taken.
#[derive(Clone, Debug)]
pub struct FrozenHistoryContext {
    pub c: f64,
    pub t_ref: f64,
    pub specs: Vec<ParticleSpec>,
    pub histories: Vec<WorldlineHistory>,
    pub external: ExternalFieldModel,
}

/// Effective potential `A^μ` (contravariant) on particle `i` at event `r`, given source lines.
pub fn potential_on(specs: &[ParticleSpec], lines: &[&dyn Worldline], external: &ExternalFieldModel, i: usize, r: &FourVector) -> Result<FourVector, CanonicalError> {
    if specs.len() != lines.len() {
        return Err(CanonicalError::ContextMismatch { expected: specs.len(), got: lines.len() });
    }
    let sources: Vec<Source<'_>> = specs.iter().zip(lines).map(|(s, l)| Source::new(s, *l)).collect();
    Ok(effective_potential(&sources, i, r, external)?)
}

impl FrozenHistoryContext {
    /// Captures the current histories of a running system.
    pub fn capture(state: &SystemState) -> Self {
        FrozenHistoryContext {
            c: state.c,
            t_ref: state.t_now,
            specs: state.specs.clone(),
            histories: state.histories.clone(),
            external: state.external.clone(),
        }
    }

    pub fn new(c: f64, specs: Vec<ParticleSpec>, histories: Vec<WorldlineHistory>, external: ExternalFieldModel) -> Result<Self, CanonicalError> {
        if specs.len() != histories.len() || specs.is_empty() {
            return Err(CanonicalError::ContextMismatch { expected: specs.len(), got: histories.len() });
        }
        let t_ref = histories[0].latest().t;
        if histories.iter().any(|h| h.latest().t != t_ref) {
            return Err(CanonicalError::InvalidInput("histories must share their latest time".into()));
        }
        Ok(FrozenHistoryContext { c, t_ref, specs, histories, external })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn lines(&self) -> Vec<&dyn Worldline> {
        self.histories.iter().map(|h| h as &dyn Worldline).collect()
    }

    pub fn potential(&self, i: usize, r: &FourVector) -> Result<FourVector, CanonicalError> {
        potential_on(&self.specs, &self.lines(), &self.external, i, r)
    }

    /// Canonical state at `t_ref`: positions and `P` from the latest samples.
    pub fn canonical_state(&self) -> Result<CanonicalState, CanonicalError> {
        let mut x = CanonicalState::zeros(self.len());
        for (i, h) in self.histories.iter().enumerate() {
            let l = h.latest();
            let a = self.potential(i, &l.r)?;
            x.set_r(i, l.r);
            x.set_p(i, effective_momentum(&l.u, &self.specs[i], &a, self.c)?);
        }
        Ok(x)
    }

    /// Instant-form state `(r⃗, P⃗)` at `t_ref` with contravariant `P^l = −P_l`.
    pub fn constrained_state(&self) -> Result<ConstrainedState, CanonicalError> {
        let x = self.canonical_state()?;
        Ok(ConstrainedState {
            r: (0..self.len()).map(|i| x.r(i).spatial()).collect(),
            p: (0..self.len()).map(|i| std::array::from_fn(|l| -x.p(i)[l + 1])).collect(),
        })
    }
}

/// `P_μ = m0 c u_μ + (q/c) A_μ` (covariant), given contravariant `u` and `A`.
pub fn effective_momentum(u: &FourVector, spec: &ParticleSpec, a_eff: &FourVector, c: f64) -> Result<[f64; 4], CanonicalError> {
    let tol = 1e-6;
    let defect = (dot(u, u) - 1.0).abs();
    if !(defect <= tol) {
        return Err(CanonicalError::ConstraintViolation { defect, tol });
    }
    Ok((*u * (spec.rest_mass * c) + *a_eff * (spec.charge / c)).lower())
}

/// `H_eff^(i) = (P − qA/c)·(P − qA/c)/(2 m0 c)` with the potential from `lines`.
pub fn effective_hamiltonian_on(x: &CanonicalState, i: usize, specs: &[ParticleSpec], lines: &[&dyn Worldline], external: &ExternalFieldModel, c: f64) -> Result<f64, CanonicalError> {
    let spec = &specs[i];
    let a = potential_on(specs, lines, external, i, &x.r(i))?.lower();
    let p = x.p(i);
    let pi: [f64; 4] = std::array::from_fn(|mu| p[mu] - spec.charge / c * a[mu]);
    let norm: f64 = (0..4).map(|mu| METRIC[mu] * pi[mu] * pi[mu]).sum();
    Ok(norm / (2.0 * spec.rest_mass * c))
}

pub fn effective_hamiltonian(x: &CanonicalState, i: usize, ctx: &FrozenHistoryContext) -> Result<f64, CanonicalError> {
    check_size(x.n_particles(), ctx.len())?;
    effective_hamiltonian_on(x, i, &ctx.specs, &ctx.lines(), &ctx.external, ctx.c)
}

/// `H_N = Σ_i H_eff^(i)`.
pub fn system_hamiltonian(x: &CanonicalState, ctx: &FrozenHistoryContext) -> Result<f64, CanonicalError> {
    check_size(x.n_particles(), ctx.len())?;
    system_hamiltonian_on(x, &ctx.specs, &ctx.lines(), &ctx.external, ctx.c)
}

/// `H_N` with an explicit set of source lines (the history slot of a functional).
pub fn system_hamiltonian_on(x: &CanonicalState, specs: &[ParticleSpec], lines: &[&dyn Worldline], external: &ExternalFieldModel, c: f64) -> Result<f64, CanonicalError> {
    (0..specs.len()).map(|i| effective_hamiltonian_on(x, i, specs, lines, external, c)).sum()
}

/// `H_N` as a phase function over the frozen context.
pub fn system_hamiltonian_function(ctx: Arc<FrozenHistoryContext>) -> PhaseFunction {
    PhaseFunction::smooth(move |x| system_hamiltonian(x, &ctx))
}

fn check_size(got: usize, expected: usize) -> Result<(), CanonicalError> {
    if got != expected {
        return Err(CanonicalError::ContextMismatch { expected, got });
    }
    Ok(())
}

/// One explicit step `dx^(i) = ds_i [x^(i), H_N]` with frozen histories.
///
/// `∂H/∂P` is analytic; `∂H/∂r` is a central difference of the snapshot potential.
pub fn canonical_flow_step(x: &CanonicalState, ctx: &FrozenHistoryContext, ds: &[f64]) -> Result<CanonicalState, CanonicalError> {
    check_size(x.n_particles(), ctx.len())?;
    check_size(ds.len(), ctx.len())?;
    let lines = ctx.lines();
    let mut out = x.clone();
    for i in 0..ctx.len() {
        let spec = &ctx.specs[i];
        let a = potential_on(&ctx.specs, &lines, &ctx.external, i, &x.r(i))?.lower();
        let p = x.p(i);
        let mc = spec.rest_mass * ctx.c;
        for mu in 0..4 {
            let pi_up = METRIC[mu] * (p[mu] - spec.charge / ctx.c * a[mu]);
            out.data[r_index(i, mu)] += ds[i] * pi_up / mc;
        }
        let mut probe = x.clone();
        for mu in 0..4 {
            let k = r_index(i, mu);
            let h = 1e-6 * (1.0 + x.data[k].abs());
            probe.data[k] = x.data[k] + h;
            let hp = effective_hamiltonian_on(&probe, i, &ctx.specs, &lines, &ctx.external, ctx.c)?;
            probe.data[k] = x.data[k] - h;
            let hm = effective_hamiltonian_on(&probe, i, &ctx.specs, &lines, &ctx.external, ctx.c)?;
            probe.data[k] = x.data[k];
            out.data[p_index(i, mu)] -= ds[i] * (hp - hm) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Instant-form state: spatial positions and contravariant spatial momenta.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstrainedState {
    pub r: Vec<[f64; 3]>,
    pub p: Vec<[f64; 3]>,
}

/// Instant-form generator values and bracket probes.
#[derive(Clone, Debug, PartialEq)]
pub struct InstantFormReport {
    pub p0: f64,
    /// Covariant spatial momenta `p̂_l = Σ P_l`.
    pub p_l: [f64; 3],
    pub n_l0: [f64; 3],
    /// `[p̂_0, p̂_l]` for l = 1, 2, 3.
    pub bracket_p0_pl: [f64; 3],
    /// Largest |δr − dt v| over particles and components.
    pub position_increment_residual: f64,
    /// Largest |δP_l − dt (q/c) ∂_l A_ν v^ν| over particles and components.
    pub momentum_increment_residual: f64,
}

impl InstantFormReport {
    pub fn max_bracket(&self) -> f64 {
        self.bracket_p0_pl.iter().fold(0.0f64, |m, b| m.max(b.abs()))
    }
}

struct InstantParticle<'a> {
    ctx: &'a FrozenHistoryContext,
    lines: Vec<&'a dyn Worldline>,
}

impl InstantParticle<'_> {
    fn potential(&self, i: usize, r: [f64; 3]) -> Result<FourVector, CanonicalError> {
        potential_on(&self.ctx.specs, &self.lines, &self.ctx.external, i, &FourVector::from_parts(self.ctx.c * self.ctx.t_ref, r))
    }

    /// `sqrt(m²c² + (P⃗ − qA⃗/c)²) + (q/c) A^0` and the kinetic root.
    fn energy(&self, i: usize, r: [f64; 3], p: [f64; 3]) -> Result<(f64, f64), CanonicalError> {
        let spec = &self.ctx.specs[i];
        let c = self.ctx.c;
        let a = self.potential(i, r)?;
        let pi2: f64 = (0..3).map(|l| (p[l] - spec.charge / c * a[l + 1]).powi(2)).sum();
        let root = ((spec.rest_mass * c).powi(2) + pi2).sqrt();
        Ok((root + spec.charge / c * a[0], root))
    }

    fn energy_grad_r(&self, i: usize, r: [f64; 3], p: [f64; 3]) -> Result<[f64; 3], CanonicalError> {
        let mut g = [0.0; 3];
        for l in 0..3 {
            let h = 1e-6 * (1.0 + r[l].abs());
            let mut rp = r;
            rp[l] += h;
            let mut rm = r;
            rm[l] -= h;
            g[l] = (self.energy(i, rp, p)?.0 - self.energy(i, rm, p)?.0) / (2.0 * h);
        }
        Ok(g)
    }
}

/// Instant-form generators on the constrained state and their bracket probes.
///
/// Increments use the time generator `c·dt·p̂_0`: `δr^l = c dt ∂p̂_0/∂P^l` and
/// `δP^l = −c dt ∂p̂_0/∂r^l`. The reference increments are `dt v` (with `v`
/// from the snapshot 4-velocity) and `δP_l = dt (q/c) ∂_l A_ν v^ν` (difference
/// of the snapshot potential, contracted afterwards).
pub fn instant_form_constrained(xp: &ConstrainedState, ctx: &FrozenHistoryContext, dt: f64) -> Result<InstantFormReport, CanonicalError> {
    check_size(xp.r.len(), ctx.len())?;
    check_size(xp.p.len(), ctx.len())?;
    let ip = InstantParticle { ctx, lines: ctx.lines() };
    let c = ctx.c;
    let mut rep = InstantFormReport {
        p0: 0.0,
        p_l: [0.0; 3],
        n_l0: [0.0; 3],
        bracket_p0_pl: [0.0; 3],
        position_increment_residual: 0.0,
        momentum_increment_residual: 0.0,
    };
    for i in 0..ctx.len() {
        let (r, p) = (xp.r[i], xp.p[i]);
        let spec = &ctx.specs[i];
        let (e, root) = ip.energy(i, r, p)?;
        rep.p0 += e;
        let a = ip.potential(i, r)?;
        let grad_r = ip.energy_grad_r(i, r, p)?;
        let u = ctx.histories[i].latest().u;
        let v: [f64; 4] = [c, c * u[1] / u[0], c * u[2] / u[0], c * u[3] / u[0]];
        for l in 0..3 {
            rep.p_l[l] -= p[l];
            rep.n_l0[l] += -r[l] * e;
            rep.bracket_p0_pl[l] -= grad_r[l];
            let dp_grad = (p[l] - spec.charge / c * a[l + 1]) / root;
            let dr = c * dt * dp_grad;
            rep.position_increment_residual = rep.position_increment_residual.max((dr - dt * v[l + 1]).abs());
            let dp_up = -c * dt * grad_r[l];
            let h = 1e-6 * (1.0 + r[l].abs());
            let mut rp = r;
            rp[l] += h;
            let mut rm = r;
            rm[l] -= h;
            let (ap, am) = (ip.potential(i, rp)?.lower(), ip.potential(i, rm)?.lower());
            let da_v: f64 = (0..4).map(|nu| (ap[nu] - am[nu]) / (2.0 * h) * v[nu]).sum();
            let want_lower = dt * spec.charge / c * da_v;
            rep.momentum_increment_residual = rep.momentum_increment_residual.max((-dp_up - want_lower).abs());
        }
    }
    Ok(rep)
}

/// A functional of the canonical state and of the source worldlines.
pub type HistoryFunctional<'a> = dyn Fn(&CanonicalState, &[&dyn Worldline]) -> Result<f64, CanonicalError> + 'a;

/// Controls for [`nonlocal_bracket`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NonlocalOptions {
    /// Largest group parameter used in the central differences.
    pub alpha: f64,
    /// Relative spread between the α and α/2 estimates above which the result is rejected.
    pub max_spread: f64,
}

impl Default for NonlocalOptions {
    fn default() -> Self {
        NonlocalOptions { alpha: 1e-3, max_spread: 1e-3 }
    }
}

/// Richardson-extrapolated Gateaux derivative.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NonlocalEstimate {
    pub value: f64,
    pub coarse: f64,
    pub fine: f64,
}

/// Applies the finite Poincaré map `r ↦ Λ r + b`, `P ↦ P Λ⁻¹` to every particle.
pub fn transform_state(x: &CanonicalState, lambda: &[[f64; 4]; 4], lambda_inv: &[[f64; 4]; 4], shift: &FourVector) -> CanonicalState {
    let mut out = x.clone();
    for i in 0..x.n_particles() {
        out.set_r(i, crate::minkowski::apply(lambda, &x.r(i)) + *shift);
        let p = x.p(i);
        out.set_p(i, std::array::from_fn(|s| (0..4).map(|m| p[m] * lambda_inv[m][s]).sum()));
    }
    out
}

/// `d/dα ξ(z_α, [z_α])` at α = 0, where `z_α` is the image of the state and of
/// every history under the one-parameter group generated by the affine
/// generator `f` (whose infinitesimal action is `δ₀z = [z, f]`).
pub fn nonlocal_bracket(xi: &HistoryFunctional<'_>, x: &CanonicalState, lines: &[&dyn Worldline], f: &Polynomial, opts: &NonlocalOptions) -> Result<NonlocalEstimate, CanonicalError> {
    let (l, t) = affine_action(f)?;
    let eval = |alpha: f64| -> Result<f64, CanonicalError> {
        let la: [[f64; 4]; 4] = l.map(|row| row.map(|v| v * alpha));
        let lam = mat_exp(&la);
        let lam_inv = mat_exp(&la.map(|row| row.map(|v| -v)));
        let shift = FourVector(t.map(|v| v * alpha));
        let xs = transform_state(x, &lam, &lam_inv, &shift);
        let images: Vec<AffineImage<'_>> = lines.iter().map(|w| AffineImage::new(*w, lam, shift)).collect();
        let refs: Vec<&dyn Worldline> = images.iter().map(|w| w as &dyn Worldline).collect();
        xi(&xs, &refs)
    };
    let d = |alpha: f64| -> Result<f64, CanonicalError> { Ok((eval(alpha)? - eval(-alpha)?) / (2.0 * alpha)) };
    let coarse = d(opts.alpha)?;
    let fine = d(0.5 * opts.alpha)?;
    let value = (4.0 * fine - coarse) / 3.0;
    let spread = (fine - coarse).abs();
    if !value.is_finite() || spread > opts.max_spread * value.abs().max(1.0) {
        return Err(CanonicalError::NumericalNoise { estimate: value, spread });
    }
    Ok(NonlocalEstimate { value, coarse, fine })
}
