use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shellnbody::minkowski::FourVector;
use shellnbody::retardation::*;
use shellnbody::worldline::{ParticleSpec, Worldline, WorldlineHistory};

fn uniform(beta: [f64; 3], x0: [f64; 3]) -> WorldlineHistory {
    WorldlineHistory::inertial(1.0, FourVector::from_parts(0.0, x0), FourVector::velocity_from_beta(beta), 0.0).unwrap()
}

/// Independent bracketing bisection on `(cτ)² − |x − y(t − τ)|² − σ² = 0`.
fn bisection_root(src: &dyn Worldline, obs: &FourVector, sigma: f64) -> f64 {
    let c = src.c();
    let t = obs[0] / c;
    let g = |tau: f64| {
        let y = src.position_at(t - tau).unwrap();
        let d2: f64 = (1..4).map(|k| (obs[k] - y[k]).powi(2)).sum();
        (c * tau).powi(2) - d2 - sigma * sigma
    };
    let (mut lo, mut hi) = (0.0, 1.0);
    while g(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn self_delay_examples() {
    let rest = uniform([0.0; 3], [0.0; 3]);
    assert_eq!(self_delay(&rest, 0.0, 1.0).unwrap().t_ret, 1.0);
    assert_eq!(self_delay(&rest, 0.0, 0.0).unwrap().t_ret, 0.0);
    let moving = uniform([0.5, 0.0, 0.0], [0.0; 3]);
    let gamma = 1.0 / (1.0f64 - 0.25).sqrt();
    let root = self_delay(&moving, 0.0, 1.0).unwrap();
    assert!((root.t_ret - gamma).abs() < 1e-12, "{}", root.t_ret - gamma);
    assert!((root.t_ret - 1.1547005383792515).abs() < 1e-12);
    let obs = moving.position_at(0.0).unwrap();
    assert!((root.t_ret - bisection_root(&moving, &obs, 1.0)).abs() < 1e-12);
    assert!((root.s_ret - 1.0).abs() < 1e-12);
}

#[test]
fn pair_delay_examples() {
    let src = uniform([0.0; 3], [3.0, 0.0, 0.0]);
    let obs = FourVector::new(0.0, 0.0, 0.0, 0.0);
    assert_eq!(pair_delay(&src, &obs, 4.0).unwrap().t_ret, 5.0);
    let d = 2.5;
    let src = uniform([0.0; 3], [0.0, d, 0.0]);
    assert!((pair_delay(&src, &obs, 0.0).unwrap().t_ret - d).abs() < 1e-15);
}

#[test]
fn moving_source_matches_bisection() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..20 {
        let beta: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.5..0.5));
        let x0: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-3.0..3.0));
        let src = uniform(beta, x0);
        let obs = FourVector::new(rng.gen_range(-1.0..1.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), 0.0);
        let sigma = rng.gen_range(0.0..2.0);
        let root = pair_delay(&src, &obs, sigma).unwrap();
        let oracle = bisection_root(&src, &obs, sigma);
        assert!((root.t_ret - oracle).abs() < 1e-12 * (1.0 + oracle), "{} vs {oracle}", root.t_ret);
        let x = root.separation(&obs);
        assert!((x.norm_sqr() - sigma * sigma).abs() <= root.tolerance);
        assert!(x[0] >= 0.0);
    }
}

#[test]
fn delta_integral_examples() {
    let src = uniform([0.0; 3], [2.0, 0.0, 0.0]);
    let obs = FourVector::ZERO;
    assert_eq!(retarded_potential(&src, &obs, 0.5, 0.0).unwrap(), FourVector::ZERO);
    let d = 2.0;
    let a = retarded_potential(&src, &obs, 1e-6 * d, 0.7).unwrap();
    assert!((a[0] - 0.7 / d).abs() < 1e-10);
    assert!(a.spatial().iter().all(|x| *x == 0.0));
    let w = delta_line_integral(&src, &obs, 1.0, 1.0, |_| FourVector::new(1.0, 0.0, 0.0, 0.0)).unwrap();
    assert!((w[0] - 1.0 / 5.0f64.sqrt()).abs() < 1e-14);
}

#[test]
fn max_delay_examples() {
    let one = uniform([0.0; 3], [0.0; 3]);
    let spec = ParticleSpec::new("a", 1.0, 0.0, 1.0).unwrap();
    assert_eq!(max_delay(&[(&spec, &one)], 0.0).unwrap(), 1.0);

    let a = uniform([0.0; 3], [0.0; 3]);
    let b = uniform([0.0; 3], [3.0, 0.0, 0.0]);
    let sa = ParticleSpec::new("a", 1.0, 0.0, 4.0).unwrap();
    let sb = ParticleSpec::new("b", 1.0, 0.0, 4.0).unwrap();
    assert_eq!(max_delay(&[(&sa, &a), (&sb, &b)], 0.0).unwrap(), 5.0);
}

#[test]
fn max_delay_equals_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pos: Vec<[f64; 3]> = (0..3).map(|_| std::array::from_fn(|_| rng.gen_range(-2.0..2.0))).collect();
    let radii: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.5)).collect();
    let hist: Vec<WorldlineHistory> = pos.iter().map(|p| uniform([0.0; 3], *p)).collect();
    let specs: Vec<ParticleSpec> = radii.iter().map(|r| ParticleSpec::new("p", 1.0, 0.0, *r).unwrap()).collect();
    let pairs: Vec<(&ParticleSpec, &WorldlineHistory)> = specs.iter().zip(&hist).collect();
    let mut brute = 0.0f64;
    for i in 0..3 {
        brute = brute.max(radii[i]);
        for j in 0..3 {
            if i != j {
                let d2: f64 = (0..3).map(|k| (pos[i][k] - pos[j][k]).powi(2)).sum();
                brute = brute.max((d2 + radii[i].powi(2)).sqrt()).max((d2 + radii[j].powi(2)).sqrt());
            }
        }
    }
    assert!((max_delay(&pairs, 0.0).unwrap() - brute).abs() < 1e-12);
}

#[test]
fn bounded_history_reports_coverage() {
    let mut first = uniform([0.0; 3], [0.0; 3]).samples()[0];
    first.t = 0.0;
    let h = WorldlineHistory::new(1.0, first, Default::default(), shellnbody::worldline::PastExtension::Bounded, Default::default()).unwrap();
    match self_delay(&h, 0.0, 1.0) {
        Err(RetardationError::HistoryTooShort { needed, earliest }) => {
            assert!(needed < earliest);
        }
        other => panic!("{other:?}"),
    }
}

proptest! {
    #[test]
    fn uniform_self_root_is_gamma_sigma(bx in -0.9f64..0.9, by in -0.4f64..0.4, sigma in 0.01f64..5.0) {
        prop_assume!(bx * bx + by * by < 0.95);
        let h = uniform([bx, by, 0.0], [0.0; 3]);
        let gamma = 1.0 / (1.0 - bx * bx - by * by).sqrt();
        let root = self_delay(&h, 0.0, sigma).unwrap();
        prop_assert!((root.t_ret - gamma * sigma).abs() < 1e-11 * (1.0 + gamma * sigma));
    }
}
