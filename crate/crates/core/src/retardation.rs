//! Causal delay roots and resolution of δ(R̃·R̃ − σ²) line integrals.
//!
//! For an observation event `x` and a source worldline `r(t)` the delay
//! `τ > 0` solves `c τ = sqrt(|x − r(t_x − τ)|² + σ²)`, i.e. the source event
//! sits on the past sheet of the hyperboloid `(x − r)·(x − r) = σ²`. The map
//! `τ ↦ sqrt(|Δx(τ)|² + σ²)/c` is a contraction for subluminal sources, so the
//! solver runs a damped fixed-point iteration and falls back to bisection on
//! the monotone function `c τ − sqrt(|Δx(τ)|² + σ²)`.

use thiserror::Error;

use crate::minkowski::{dot, FourVector};
use crate::worldline::{ParticleSpec, Worldline, WorldlineError, WorldlineHistory, WorldlineSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RetardationError {
    #[error("history too short: root search needs t = {needed} but the history starts at {earliest}")]
    HistoryTooShort { needed: f64, earliest: f64 },
    #[error("delay root did not converge after {iterations} iterations (last τ = {last}, residual {residual:e})")]
    NoConvergence { iterations: usize, last: f64, residual: f64 },
    #[error("grazing configuration: |R̃·u| = {w:e} below {threshold:e}")]
    DegenerateJacobian { w: f64, threshold: f64 },
    #[error(transparent)]
    Worldline(#[from] WorldlineError),
}

/// Solver controls.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RootOptions {
    pub max_iter: usize,
    /// Relative factor in `root_tol = root_rel_tol·(1 + d² + σ²)`.
    pub root_rel_tol: f64,
    /// Relative factor in `jac_tol = jac_rel_tol·|R̃|·|u|`.
    pub jac_rel_tol: f64,
}

impl Default for RootOptions {
    fn default() -> Self {
        RootOptions { max_iter: 200, root_rel_tol: 1e-12, jac_rel_tol: 1e-10 }
    }
}

/// A solved causal root.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DelayRoot {
    /// Coordinate delay τ ≥ 0.
    pub t_ret: f64,
    /// Proper time elapsed on the source between emission and the observer time.
    pub s_ret: f64,
    /// Source state at emission.
    pub source_event: WorldlineSample,
    /// `(cτ)² − |Δx|² − σ²` at the returned root.
    pub residual: f64,
    /// Tolerance the residual was checked against.
    pub tolerance: f64,
}

impl DelayRoot {
    /// Separation `X = x_observer − r_source` (future pointing, `X·X = σ²`).
    pub fn separation(&self, observer: &FourVector) -> FourVector {
        *observer - self.source_event.r
    }
}

fn dist2(a: &[f64; 3], b: &FourVector) -> f64 {
    (0..3).map(|k| (a[k] - b[k + 1]).powi(2)).sum()
}

fn check_lower<W: Worldline + ?Sized>(src: &W, t: f64) -> Result<(), RetardationError> {
    if let Some(e) = src.earliest_time() {
        if t < e {
            return Err(RetardationError::HistoryTooShort { needed: t, earliest: e });
        }
    }
    Ok(())
}

/// Causal root for `observer` against `src`, seeded from the static estimate.
pub fn causal_root<W: Worldline + ?Sized>(src: &W, observer: &FourVector, sigma: f64, opts: &RootOptions) -> Result<DelayRoot, RetardationError> {
    causal_root_seeded(src, observer, sigma, opts, None)
}

/// Causal root with an explicit seed for the delay.
pub fn causal_root_seeded<W: Worldline + ?Sized>(
    src: &W,
    observer: &FourVector,
    sigma: f64,
    opts: &RootOptions,
    seed: Option<f64>,
) -> Result<DelayRoot, RetardationError> {
    let c = src.c();
    let t_obs = observer[0] / c;
    let xo = observer.spatial();
    let latest = src.latest_time();
    let sig2 = sigma * sigma;
    let lo_bound = (t_obs - latest).max(0.0);

    let g = |tau: f64| -> Result<f64, RetardationError> {
        let te = t_obs - tau;
        check_lower(src, te)?;
        let p = src.position_at(te)?;
        Ok((dist2(&xo, &p) + sig2).sqrt() / c)
    };

    let static_seed = {
        let p = src.position_at(t_obs.min(latest))?;
        (dist2(&xo, &p) + sig2).sqrt() / c
    };
    let mut tau = seed.unwrap_or(static_seed).max(lo_bound);

    let mut lambda = 1.0;
    let mut last_step = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let next = g(tau)?;
        let step = next - tau;
        if step.abs() <= 4.0 * f64::EPSILON * next.abs().max(f64::MIN_POSITIVE) {
            tau = next;
            converged = true;
            break;
        }
        if step.abs() >= last_step {
            lambda *= 0.5;
            if lambda < 1.0 / 64.0 {
                break;
            }
        }
        last_step = step.abs();
        let cand = tau + lambda * step;
        tau = cand.max(lo_bound);
    }
    if !converged {
        tau = bisect(src, observer, sigma, lo_bound, static_seed.max(tau))?;
    }
    finish(src, observer, sigma, tau, opts, iterations)
}

fn bisect<W: Worldline + ?Sized>(src: &W, observer: &FourVector, sigma: f64, lo0: f64, guess: f64) -> Result<f64, RetardationError> {
    let c = src.c();
    let t_obs = observer[0] / c;
    let xo = observer.spatial();
    let h = |tau: f64| -> Result<f64, RetardationError> {
        let te = t_obs - tau;
        check_lower(src, te)?;
        let p = src.position_at(te)?;
        Ok(c * tau - (dist2(&xo, &p) + sigma * sigma).sqrt())
    };
    let mut lo = lo0;
    if h(lo)? > 0.0 {
        return Err(WorldlineError::QueryBeyondPresent { t: t_obs - lo, latest: src.latest_time() }.into());
    }
    let mut hi = (2.0 * guess).max(lo + f64::MIN_POSITIVE.sqrt());
    let mut grow = 0;
    while h(hi)? <= 0.0 {
        lo = hi;
        hi *= 2.0;
        grow += 1;
        if grow > 200 {
            return Err(RetardationError::NoConvergence { iterations: grow, last: hi, residual: f64::NAN });
        }
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid)? <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

fn finish<W: Worldline + ?Sized>(src: &W, observer: &FourVector, sigma: f64, tau: f64, opts: &RootOptions, iterations: usize) -> Result<DelayRoot, RetardationError> {
    let c = src.c();
    let t_obs = observer[0] / c;
    let te = t_obs - tau;
    check_lower(src, te)?;
    let ev = src.sample_at(te)?;
    let d2 = dist2(&observer.spatial(), &ev.r);
    let residual = (c * tau).powi(2) - d2 - sigma * sigma;
    let tolerance = opts.root_rel_tol * (1.0 + d2 + sigma * sigma);
    if !(residual.abs() <= tolerance) {
        return Err(RetardationError::NoConvergence { iterations, last: tau, residual });
    }
    let latest = src.latest_time();
    let s_obs = if t_obs <= latest {
        src.sample_at(t_obs)?.s
    } else {
        let l = src.sample_at(latest)?;
        l.s + c * (t_obs - latest) * dot(&l.u, &l.u).sqrt() / l.u[0]
    };
    Ok(DelayRoot { t_ret: tau, s_ret: s_obs - ev.s, source_event: ev, residual, tolerance })
}

/// One-particle delay at time `t` of the particle's own history.
pub fn self_delay(h: &WorldlineHistory, t: f64, sigma: f64) -> Result<DelayRoot, RetardationError> {
    let present = h.position_at(t)?;
    causal_root(h, &present, sigma, &RootOptions::default())
}

/// Two-particle delay: source history `src`, observer event at `observer`,
/// hyperboloid radius `sigma_shift` (σ_i for the A-root, σ_j for the B-root).
pub fn pair_delay<W: Worldline + ?Sized>(src: &W, observer: &FourVector, sigma_shift: f64) -> Result<DelayRoot, RetardationError> {
    causal_root(src, observer, sigma_shift, &RootOptions::default())
}

/// Rejects grazing configurations where `|X·u|` is tiny compared with `|X||u|`.
pub fn check_grazing(x: &FourVector, u: &FourVector, opts: &RootOptions) -> Result<f64, RetardationError> {
    let w = dot(x, u);
    let threshold = opts.jac_rel_tol * x.euclid() * u.euclid();
    if !(w.abs() >= threshold) || w == 0.0 {
        return Err(RetardationError::DegenerateJacobian { w, threshold });
    }
    Ok(w)
}

/// Resolves `2q ∫ ds W(s) δ((x − r(s))² − σ²)` on the causal branch:
/// `q W(s_ret) / |X·u(s_ret)|` with `X = x − r(s_ret)`.
pub fn delta_line_integral<W, F>(src: &W, observer: &FourVector, sigma: f64, charge: f64, weight: F) -> Result<FourVector, RetardationError>
where
    W: Worldline + ?Sized,
    F: Fn(&WorldlineSample) -> FourVector,
{
    let opts = RootOptions::default();
    let root = causal_root(src, observer, sigma, &opts)?;
    let x = root.separation(observer);
    let w = check_grazing(&x, &root.source_event.u, &opts)?;
    Ok(weight(&root.source_event) * (charge / w.abs()))
}

/// Shifted Liénard-Wiechert potential `q u(s_ret)/|X·u(s_ret)|` (contravariant).
pub fn retarded_potential<W: Worldline + ?Sized>(src: &W, observer: &FourVector, sigma: f64, charge: f64) -> Result<FourVector, RetardationError> {
    delta_line_integral(src, observer, sigma, charge, |e| e.u)
}

/// Largest self and pair delay among `particles` evaluated at time `t0`.
///
/// Pair roots are solved for both radii of each ordered pair.
pub fn max_delay(particles: &[(&ParticleSpec, &WorldlineHistory)], t0: f64) -> Result<f64, RetardationError> {
    let opts = RootOptions::default();
    let mut best = 0.0f64;
    for (i, (spec_i, hist_i)) in particles.iter().enumerate() {
        let obs = hist_i.position_at(t0)?;
        best = best.max(causal_root(*hist_i, &obs, spec_i.radius, &opts)?.t_ret);
        for (j, (spec_j, hist_j)) in particles.iter().enumerate() {
            if i == j {
                continue;
            }
            for sigma in [spec_i.radius, spec_j.radius] {
                best = best.max(causal_root(*hist_j, &obs, sigma, &opts)?.t_ret);
            }
        }
    }
    Ok(best)
}
