//! Subcommands and exit-code contract.
//!
//! Exit codes: 0 success, 2 validation, 3 numerical failure or failed
//! assertion, 4 missing artifact. Failures print `error[<category>]: <message>`
//! on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::canonical::{
    check_bracket_algebra, fundamental_bracket_residual, instant_form_constrained, unconstrained_generators, CanonicalState, FrozenHistoryContext,
    PhaseFunction, Polynomial,
};
use crate::dynamics::{demo_globally_isolated, demo_locally_isolated, flow_non_bijectivity_check, seed, Diagnostics, InitialCondition, ParticleInit, SystemState};
use crate::fields::{asymptotic_self_force, exact_self_force, SelfForceMode};
use crate::harness::config::{ConfigError, ExternalKind, RunConfig};
use crate::harness::oracle::{swap_asymmetry, ActionOracle, OracleError, SmoothPath};
use crate::harness::output::{emit_plot_data, hash_comment, write_checks, write_table, write_trajectory, CheckRow, OutputError};
use crate::harness::curved_prehistory;
use crate::worldline::Worldline;

#[derive(Debug, Parser)]
#[command(name = "shellnbody", version, about = "Retarded N-body dynamics of finite-size charged particles")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Integrate the configured system; writes trajectories and diagnostics.
    Run(ConfigArgs),
    /// Poisson-bracket certificates on random phase-space states.
    CheckPb(OptionalConfigArgs),
    /// Instant-form certificate, isolated-system reports and the flow check.
    DemoNoInteraction(ConfigArgs),
    /// Exact versus asymptotic self force over a list of radii.
    CompareAsymptotic(ConfigArgs),
    /// Discretized-action gradient oracle.
    ActionOracle(ConfigArgs),
    /// Plot-ready CSVs from an existing output directory.
    PlotData {
        run_dir: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

#[derive(Debug, clap::Args)]
pub struct ConfigArgs {
    pub config: PathBuf,
    /// Overrides `output_dir` from the configuration.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct OptionalConfigArgs {
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("{} check(s) failed: {}", .0.len(), .0.join(", "))]
    Assertion(Vec<String>),
    #[error("{0}")]
    MissingArtifact(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) | CliError::Assertion(_) => 3,
            CliError::MissingArtifact(_) => 4,
        }
    }

    pub fn category(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Numerical(_) => "numerical",
            CliError::Assertion(_) => "assertion",
            CliError::MissingArtifact(_) => "missing-artifact",
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Unreadable { .. } => CliError::MissingArtifact(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<OutputError> for CliError {
    fn from(e: OutputError) -> Self {
        CliError::MissingArtifact(e.to_string())
    }
}

impl From<OracleError> for CliError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::InvalidConfig(_) | OracleError::WidthTooSmall { .. } | OracleError::WidthTooLarge { .. } => CliError::Validation(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

fn numerical<E: std::fmt::Display>(e: E) -> CliError {
    CliError::Numerical(e.to_string())
}

/// Parses `args` (including the program name), runs the subcommand and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.category(), e);
            e.exit_code()
        }
    }
}

pub fn execute(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Run(a) => cmd_run(a),
        Command::CheckPb(a) => cmd_check_pb(a),
        Command::DemoNoInteraction(a) => cmd_demo(a),
        Command::CompareAsymptotic(a) => cmd_compare(a),
        Command::ActionOracle(a) => cmd_oracle(a),
        Command::PlotData { run_dir, output_dir } => {
            let out = output_dir.clone().unwrap_or_else(|| run_dir.join("plots"));
            emit_plot_data(run_dir, &out)?;
            Ok(())
        }
    }
}

struct Loaded {
    cfg: RunConfig,
    inits: Vec<ParticleInit>,
    out: PathBuf,
    comment: String,
}

fn load(config: &Path, output_dir: &Option<PathBuf>) -> Result<Loaded, CliError> {
    let cfg = RunConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let inits = cfg.particle_inits(base)?;
    let out = output_dir.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let comment = hash_comment(&cfg.hash());
    Ok(Loaded { cfg, inits, out, comment })
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::MissingArtifact(format!("{}: {e}", dir.display())))
}

fn fail_on(rows: &[CheckRow]) -> Result<(), CliError> {
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed).map(|r| r.check.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Assertion(failed))
    }
}

fn seeded(l: &Loaded, mode: SelfForceMode) -> Result<SystemState, CliError> {
    seed(&l.inits, l.cfg.t0, l.cfg.c, l.cfg.external_model(), mode, l.cfg.step_options()).map_err(numerical)
}

fn cmd_run(a: &ConfigArgs) -> Result<(), CliError> {
    let l = load(&a.config, &a.output_dir)?;
    let mut state = seeded(&l, l.cfg.mode)?;
    let mut diag = Diagnostics::default();
    state.run(l.cfg.t_end, &mut diag).map_err(numerical)?;
    create_dir(&l.out)?;
    for (spec, h) in state.specs.iter().zip(&state.histories) {
        write_trajectory(&l.out, &spec.label, h, l.cfg.t0, &l.comment)?;
    }
    let path = l.out.join("diagnostics.csv");
    let file = std::fs::File::create(&path).map_err(|e| CliError::MissingArtifact(format!("{}: {e}", path.display())))?;
    diag.write_csv(std::io::BufWriter::new(file), Some(&l.comment)).map_err(|e| CliError::MissingArtifact(e.to_string()))?;
    Ok(())
}

fn random_polynomial<R: Rng>(rng: &mut R, slots: usize) -> Polynomial {
    let mut p = Polynomial::zero();
    for _ in 0..4 {
        let degree = rng.gen_range(1..=3);
        let mut term = Polynomial::constant(rng.gen_range(-1.0..1.0));
        for _ in 0..degree {
            term = term.mul(&Polynomial::var(rng.gen_range(0..slots)));
        }
        p = p.add(&term);
    }
    p
}

/// Bracket certificates shared by `check-pb` and the acceptance binary.
pub fn bracket_certificates(n: usize, states: usize, scale: f64, seed: u64) -> Vec<CheckRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = unconstrained_generators(n);
    let (mut fund, mut lorentz, mut opposite, mut jacobi, mut algebra) = (0.0_f64, 0.0_f64, f64::INFINITY, 0.0_f64, 0.0_f64);
    for k in 0..states {
        let x = CanonicalState::random(n, &mut rng, scale);
        fund = fund.max(fundamental_bracket_residual(&x).unwrap_or(f64::INFINITY));
        let rep = g.lorentz_residuals(&x);
        lorentz = lorentz.max(rep.consistent);
        opposite = opposite.min(rep.opposite_sign);
        if k < 10 {
            jacobi = jacobi.max(g.jacobi_residual(&x));
            let triple: (PhaseFunction, PhaseFunction, PhaseFunction) =
                (random_polynomial(&mut rng, 8 * n).into(), random_polynomial(&mut rng, 8 * n).into(), random_polynomial(&mut rng, 8 * n).into());
            algebra = algebra.max(check_bracket_algebra(&x, &[triple]).map(|r| r.max()).unwrap_or(f64::INFINITY));
        }
    }
    vec![
        CheckRow::at_most("fundamental_brackets", fund, 1e-14),
        CheckRow::at_most("lorentz_conditions", lorentz, 1e-11),
        CheckRow::info("lorentz_conditions_opposite_sign", opposite),
        CheckRow::at_most("generator_jacobi", jacobi, 1e-10),
        CheckRow::at_most("bracket_algebra", algebra, 1e-10),
    ]
}

fn cmd_check_pb(a: &OptionalConfigArgs) -> Result<(), CliError> {
    let (n, states, scale, seed, out, comment) = match &a.config {
        Some(path) => {
            let l = load(path, &a.output_dir)?;
            (l.cfg.particles.len(), l.cfg.check.states, l.cfg.check.scale, l.cfg.seed, l.out, l.comment)
        }
        None => (2, 100, 2.0, 1, a.output_dir.clone().unwrap_or_else(|| PathBuf::from("out")), hash_comment("default")),
    };
    let rows = bracket_certificates(n, states, scale, seed);
    create_dir(&out)?;
    write_checks(&out.join("pb_residuals.csv"), &comment, &rows)?;
    fail_on(&rows)
}

fn cmd_demo(a: &ConfigArgs) -> Result<(), CliError> {
    let l = load(&a.config, &a.output_dir)?;
    let cfg = &l.cfg;
    let mut rows = Vec::new();

    let mut state = seeded(&l, SelfForceMode::Exact)?;
    let mut diag = Diagnostics::default();
    state.run(cfg.t_end, &mut diag).map_err(numerical)?;
    let ctx = FrozenHistoryContext::capture(&state);
    let xp = ctx.constrained_state().map_err(numerical)?;
    let rep = instant_form_constrained(&xp, &ctx, 1e-3).map_err(numerical)?;
    let interacting = cfg.particles.len() >= 2 && cfg.particles.iter().filter(|p| p.charge != 0.0).count() >= 2;
    if interacting {
        rows.push(CheckRow::above("instant_form_bracket", rep.max_bracket(), 1e-8));
    } else {
        rows.push(CheckRow::at_most("instant_form_bracket", rep.max_bracket(), 1e-12));
    }
    rows.push(CheckRow::at_most("position_increment_residual", rep.position_increment_residual, 1e-6));
    rows.push(CheckRow::at_most("momentum_increment_residual", rep.momentum_increment_residual, 1e-6));

    if cfg.external.kind == ExternalKind::Uniform {
        let t_switch = cfg.demo.t_switch.or(cfg.external.switch_off).unwrap_or(0.5 * (cfg.t0 + cfg.t_end));
        let first = &l.inits[0];
        let (rep, _, _) = demo_locally_isolated(first.spec.clone(), first.initial.clone(), cfg.external_unswitched(), cfg.t0, t_switch, cfg.t_end, cfg.c, cfg.step_options())
            .map_err(numerical)?;
        rows.push(CheckRow::info("local_self_force_after_switch", rep.max_self_force_after));
        rows.push(CheckRow::info("local_h_eff_max_jump", rep.max_h_eff_jump));
    }
    if cfg.particles.len() >= 2 && cfg.external.kind == ExternalKind::None {
        let (rep, _, _) = demo_globally_isolated(&l.inits, cfg.t0, cfg.t_end, cfg.c, cfg.step_options()).map_err(numerical)?;
        rows.push(CheckRow::info("global_momentum_drift", rep.momentum_drift));
        if let Some(m) = rep.mirror_residual {
            rows.push(CheckRow::info("global_mirror_residual", m));
        }
    }

    let mut same_a = seeded(&l, SelfForceMode::Exact)?;
    let mut same_b = seeded(&l, SelfForceMode::Exact)?;
    let same = flow_non_bijectivity_check(&mut same_a, &mut same_b, cfg.t_end).map_err(numerical)?;
    rows.push(CheckRow::at_most("flow_identical_prehistory_divergence", same.max_divergence, 0.0));
    let curved: Vec<ParticleInit> = l
        .inits
        .iter()
        .map(|p| match &p.initial {
            InitialCondition::Instant { position, beta } => {
                let h = curved_prehistory(cfg.c, cfg.t0, *position, *beta, [0.05, -0.03, 0.02], 4.0, cfg.dt, &cfg.step_options())?;
                Ok(ParticleInit { spec: p.spec.clone(), initial: InitialCondition::History(h) })
            }
            InitialCondition::History(_) => Ok(p.clone()),
        })
        .collect::<Result<_, crate::worldline::WorldlineError>>()
        .map_err(numerical)?;
    let mut straight = seeded(&l, SelfForceMode::Exact)?;
    let mut bent = seed(&curved, cfg.t0, cfg.c, cfg.external_model(), SelfForceMode::Exact, cfg.step_options()).map_err(numerical)?;
    let flow = flow_non_bijectivity_check(&mut straight, &mut bent, cfg.t_end).map_err(numerical)?;
    rows.push(CheckRow::info("flow_initial_mismatch", flow.initial_mismatch));
    rows.push(CheckRow::info("flow_curved_prehistory_divergence", flow.max_divergence));

    create_dir(&l.out)?;
    write_checks(&l.out.join("no_interaction.csv"), &l.comment, &rows)?;
    fail_on(&rows)
}

/// Largest spatial distance between matching samples at `t ≥ t0`, and the value at the last sample.
fn position_gap(a: &SystemState, b: &SystemState, t0: f64) -> (f64, f64) {
    let mut worst = 0.0_f64;
    let mut last = 0.0_f64;
    for (ha, hb) in a.histories.iter().zip(&b.histories) {
        let mut final_gap = 0.0;
        for (sa, sb) in ha.samples().iter().zip(hb.samples()).filter(|(s, _)| s.t >= t0) {
            let d = (1..4).map(|k| (sa.r[k] - sb.r[k]).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(d);
            final_gap = d;
        }
        last = last.max(final_gap);
    }
    (worst, last)
}

fn cmd_compare(a: &ConfigArgs) -> Result<(), CliError> {
    let l = load(&a.config, &a.output_dir)?;
    let cfg = &l.cfg;
    let mut body = Vec::new();
    for &sigma in &cfg.compare.sigmas {
        let inits: Vec<ParticleInit> = l
            .inits
            .iter()
            .map(|p| {
                let mut q = p.clone();
                q.spec.radius = sigma;
                q
            })
            .collect();
        let mut runs = Vec::new();
        for mode in [SelfForceMode::Exact, SelfForceMode::Asymptotic] {
            let mut s = seed(&inits, cfg.t0, cfg.c, cfg.external_model(), mode, cfg.step_options()).map_err(numerical)?;
            s.run(cfg.t_end, &mut Diagnostics::default()).map_err(numerical)?;
            runs.push(s);
        }
        let (max_gap, final_gap) = position_gap(&runs[0], &runs[1], cfg.t0);
        let h = &runs[0].histories[0];
        let spec = &runs[0].specs[0];
        let lst = h.latest();
        let exact = exact_self_force(h, &lst.r, &lst.u, spec.charge, sigma).map_err(numerical)?;
        let asym = asymptotic_self_force(h, &lst.r, spec.charge, sigma).map_err(numerical)?;
        body.push(vec![sigma.to_string(), (exact - asym).euclid().to_string(), max_gap.to_string(), final_gap.to_string()]);
    }
    create_dir(&l.out)?;
    write_table(&l.out.join("asymptotic_gap.csv"), &l.comment, &["sigma", "self_force_gap", "max_position_gap", "final_position_gap"], &body)?;
    Ok(())
}

/// Oracle checks shared by `action-oracle` and the acceptance binary.
pub struct OracleOutcome {
    pub rows: Vec<CheckRow>,
    pub residual_table: Vec<Vec<String>>,
}

pub fn oracle_checks(cfg: &RunConfig, inits: &[ParticleInit]) -> Result<OracleOutcome, CliError> {
    let specs = cfg.specs();
    let ocfg = cfg.oracle.oracle_config();
    let span = cfg.t_end - cfg.t0;
    let window = (cfg.t0 + cfg.oracle.window[0] * span, cfg.t0 + cfg.oracle.window[1] * span);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();

    let mut state = seed(inits, cfg.t0, cfg.c, cfg.external_model(), SelfForceMode::Exact, cfg.step_options()).map_err(numerical)?;
    state.run(cfg.t_end, &mut Diagnostics::default()).map_err(numerical)?;
    let lines: Vec<&dyn Worldline> = state.histories.iter().map(|h| h as &dyn Worldline).collect();
    let oracle = ActionOracle::from_lines(&specs, &lines, &cfg.external_model(), cfg.c, window, &ocfg)?;
    let g0 = oracle.gradient_norm(&oracle.curves);
    let mut g1 = f64::INFINITY;
    for _ in 0..cfg.oracle.copies {
        g1 = g1.min(oracle.gradient_norm(&oracle.perturbed(cfg.oracle.perturbation, &mut rng)));
    }
    rows.push(CheckRow::at_most("extremality_ratio", g0 / g1, 0.1));

    let mut paths = Vec::new();
    for p in &cfg.particles {
        let x0 = p.position.unwrap_or([0.0; 3]);
        paths.push(SmoothPath::random(&mut rng, x0, cfg.c));
    }
    let reach = specs.iter().map(|s| s.radius).fold(0.0, f64::max)
        + cfg.particles.iter().flat_map(|p| cfg.particles.iter().map(move |q| {
            let (a, b) = (p.position.unwrap_or([0.0; 3]), q.position.unwrap_or([0.0; 3]));
            (0..3).map(|k| (a[k] - b[k]).powi(2)).sum::<f64>().sqrt()
        })).fold(0.0, f64::max);
    let t_start = window.0 - 4.0 * (reach + 1.0) / cfg.c;
    let histories = paths.iter().map(|p| p.history(cfg.c, t_start, window.1, cfg.dt.min(0.01))).collect::<Result<Vec<_>, _>>().map_err(numerical)?;
    let smooth_lines: Vec<&dyn Worldline> = histories.iter().map(|h| h as &dyn Worldline).collect();
    let coarse = ActionOracle::from_lines(&specs, &smooth_lines, &cfg.external_model(), cfg.c, window, &ocfg)?;
    let cmp = coarse.compare_with_forces(&smooth_lines)?;
    let mut fine_cfg = ocfg.clone();
    fine_cfg.nodes *= 2;
    fine_cfg.width = ocfg.width.map(|w| 0.5 * w);
    let fine = ActionOracle::from_lines(&specs, &smooth_lines, &cfg.external_model(), cfg.c, window, &fine_cfg)?;
    let cmp_fine = fine.compare_with_forces(&smooth_lines)?;
    rows.push(CheckRow::at_most("force_gradient_rel_error", cmp.coupling_rel_error, 0.03));
    rows.push(CheckRow::info("euler_lagrange_rel_error", cmp.total_rel_error));
    rows.push(CheckRow::at_most("force_gradient_rel_error_refined", cmp_fine.coupling_rel_error, cmp.coupling_rel_error));

    if specs.len() >= 2 {
        let w = coarse.widths[0][1].max(1e-3);
        let (asym, scale) = swap_asymmetry(&specs, &oracle.curves, &coarse.curves, w, cfg.c);
        let equal_radii = specs.iter().all(|s| s.radius == specs[0].radius);
        if equal_radii {
            rows.push(CheckRow::at_most("swap_asymmetry", asym.abs(), 1e-12 * scale.max(1e-300)));
        } else {
            rows.push(CheckRow::info("swap_asymmetry_unequal_radii", asym.abs() / scale.max(1e-300)));
        }
    }

    let residual_table = cmp
        .nodes
        .iter()
        .map(|n| {
            let mut r = vec![specs[n.particle].label.clone(), n.node.to_string(), n.t.to_string()];
            r.extend(n.force.0.iter().map(|x| x.to_string()));
            r.extend(n.gradient.0.iter().map(|x| x.to_string()));
            r
        })
        .collect();
    Ok(OracleOutcome { rows, residual_table })
}

fn cmd_oracle(a: &ConfigArgs) -> Result<(), CliError> {
    let l = load(&a.config, &a.output_dir)?;
    let outcome = oracle_checks(&l.cfg, &l.inits)?;
    create_dir(&l.out)?;
    write_checks(&l.out.join("oracle_summary.csv"), &l.comment, &outcome.rows)?;
    write_table(
        &l.out.join("oracle_residuals.csv"),
        &l.comment,
        &["particle", "node", "t", "force0", "force1", "force2", "force3", "gradient0", "gradient1", "gradient2", "gradient3"],
        &outcome.residual_table,
    )?;
    fail_on(&outcome.rows)
}
