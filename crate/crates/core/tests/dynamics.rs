use shellnbody::dynamics::{flow_non_bijectivity_check, seed, Diagnostics, InitialCondition, ParticleInit, StepOptions, SystemState};
use shellnbody::fields::{ExternalFieldModel, SelfForceMode};
use shellnbody::worldline::ParticleSpec;

fn instant(label: &str, m: f64, q: f64, sigma: f64, x: [f64; 3], beta: [f64; 3]) -> ParticleInit {
    ParticleInit { spec: ParticleSpec::new(label, m, q, sigma).unwrap(), initial: InitialCondition::Instant { position: x, beta } }
}

fn pair(dt: f64, q: f64) -> SystemState {
    let a = instant("a", 1.0, q, 0.2, [0.0, 0.0, 0.0], [0.1, 0.05, 0.0]);
    let b = instant("b", 1.0, q, 0.3, [2.0, 0.0, 0.0], [-0.1, 0.0, 0.02]);
    seed(&[a, b], 0.0, 1.0, ExternalFieldModel::None, SelfForceMode::Exact, StepOptions::new(dt)).unwrap()
}

#[test]
fn free_motion_is_exact_over_many_steps() {
    let p = instant("free", 2.0, 0.0, 0.5, [1.0, -2.0, 0.5], [0.3, -0.2, 0.1]);
    let mut s = seed(&[p], 0.0, 1.0, ExternalFieldModel::None, SelfForceMode::Exact, StepOptions::new(0.01)).unwrap();
    let mut d = Diagnostics::default();
    s.run(10.0, &mut d).unwrap();
    assert_eq!(d.records.len(), 1000);
    let l = s.histories[0].latest();
    let want = [1.0 + 0.3 * 10.0, -2.0 - 0.2 * 10.0, 0.5 + 0.1 * 10.0];
    for k in 0..3 {
        assert!((l.r[k + 1] - want[k]).abs() < 1e-12, "{k}: {}", l.r[k + 1] - want[k]);
    }
    assert!(d.records.iter().all(|r| r.constraint_defect[0] < 1e-13));
}

#[test]
fn static_pair_initial_acceleration_matches_closed_form() {
    let (q, sigma, d) = (0.3, 0.5, 2.0);
    let a = instant("a", 5.0, q, sigma, [0.0; 3], [0.0; 3]);
    let b = instant("b", 5.0, q, sigma, [d, 0.0, 0.0], [0.0; 3]);
    let s = seed(&[a, b], 0.0, 1.0, ExternalFieldModel::None, SelfForceMode::Exact, StepOptions::new(0.05)).unwrap();
    let e = 2.0 * q * d / (d * d + sigma * sigma).powf(1.5);
    let want = q * e / 5.0;
    let du = s.current_derivatives();
    assert!((du[1].du[1] - want).abs() < 1e-8 * want);
    assert!((du[0].du[1] + want).abs() < 1e-8 * want);
    assert!(du[1].du[2].abs() < 1e-15 && du[1].du[0].abs() < 1e-15);
}

#[test]
fn magnetic_field_preserves_speed() {
    // Tiny charge in a strong field: Lorentz force of order one, self force of order q².
    let q = 1e-8;
    let p = instant("m", 1.0, q, 1.0, [0.0; 3], [0.4, 0.0, 0.0]);
    let ext = ExternalFieldModel::Uniform { e: [0.0; 3], b: [0.0, 0.0, 1.0 / q] };
    let mut s = seed(&[p], 0.0, 1.0, ext, SelfForceMode::Exact, StepOptions::new(0.01)).unwrap();
    let mut d = Diagnostics::default();
    s.run(10.0, &mut d).unwrap();
    let u0 = s.histories[0].first().u;
    let speed0 = (u0[1] * u0[1] + u0[2] * u0[2]).sqrt();
    for smp in s.histories[0].samples() {
        let sp = (smp.u[1] * smp.u[1] + smp.u[2] * smp.u[2] + smp.u[3] * smp.u[3]).sqrt();
        assert!((sp - speed0).abs() < 1e-10, "{}", sp - speed0);
    }
}

#[test]
fn diagnostics_rows_match_steps_and_csv_is_deterministic() {
    let mut outs = Vec::new();
    for _ in 0..2 {
        let mut s = pair(0.05, 0.2);
        let mut d = Diagnostics::default();
        s.run(0.5, &mut d).unwrap();
        assert_eq!(d.records.len(), 10);
        let mut buf = Vec::new();
        d.write_csv(&mut buf, Some("x")).unwrap();
        let mut tbuf = Vec::new();
        s.histories[1].write_csv(&mut tbuf, None).unwrap();
        outs.push((buf, tbuf));
    }
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn parallel_and_serial_agree() {
    let mut a = pair(0.05, 0.2);
    let mut b = pair(0.05, 0.2);
    b.options.parallel = true;
    let (mut da, mut db) = (Diagnostics::default(), Diagnostics::default());
    a.run(0.5, &mut da).unwrap();
    b.run(0.5, &mut db).unwrap();
    assert_eq!(a.histories[0].samples(), b.histories[0].samples());
}

#[test]
fn equal_charges_released_move_symmetrically() {
    let a = instant("a", 1.0, 0.2, 0.3, [-1.0, 0.0, 0.0], [0.0; 3]);
    let b = instant("b", 1.0, 0.2, 0.3, [1.0, 0.0, 0.0], [0.0; 3]);
    let (rep, _, _) = shellnbody::dynamics::demo_globally_isolated(&[a, b], 0.0, 2.0, 1.0, StepOptions::new(0.02)).unwrap();
    assert!(rep.mirror_residual.unwrap() < 1e-9);
}

#[test]
fn identical_or_uncharged_runs_do_not_diverge() {
    let mut a = pair(0.05, 0.2);
    let mut b = pair(0.05, 0.2);
    let rep = flow_non_bijectivity_check(&mut a, &mut b, 0.5).unwrap();
    assert_eq!(rep.max_divergence, 0.0);
}

#[test]
fn line_element_matches_proper_time_increment() {
    let mut s = pair(0.02, 0.1);
    let mut d = Diagnostics::default();
    s.run(1.0, &mut d).unwrap();
    for h in &s.histories {
        for w in h.samples().windows(2).filter(|w| w[0].t >= 0.0) {
            let dr = w[1].r - w[0].r;
            let ds = dr.norm_sqr().sqrt();
            assert!(((w[1].s - w[0].s) - ds).abs() < 1e-8 * ds);
        }
    }
}

#[test]
fn locally_isolated_particle_keeps_self_force_after_switch_off() {
    let spec = ParticleSpec::new("p", 1.0, 0.2, 0.2).unwrap();
    let init = InitialCondition::Instant { position: [0.0; 3], beta: [0.0; 3] };
    let ext = ExternalFieldModel::Uniform { e: [0.5, 0.0, 0.0], b: [0.0; 3] };
    let (rep, _, _) = shellnbody::dynamics::demo_locally_isolated(spec.clone(), init.clone(), ext, 0.0, 0.5, 1.0, 1.0, StepOptions::new(0.01)).unwrap();
    assert!(rep.max_self_force_after > 1e-12);
    let (rep0, _, _) = shellnbody::dynamics::demo_locally_isolated(spec, init, ExternalFieldModel::None, 0.0, 0.5, 1.0, 1.0, StepOptions::new(0.01)).unwrap();
    assert_eq!(rep0.max_self_force_after, 0.0);
}
