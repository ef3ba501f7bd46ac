//! Run configuration (TOML).

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dynamics::{InitialCondition, ParticleInit, StepOptions};
use crate::fields::{ExternalFieldModel, SelfForceMode};
use crate::harness::oracle::OracleConfig;
use crate::worldline::{ConstraintTolerances, Interpolation, ParticleSpec, PastExtension, WorldlineHistory};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Unreadable { path: PathBuf, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

fn default_c() -> f64 {
    1.0
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_c")]
    pub c: f64,
    pub dt: f64,
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    #[serde(default)]
    pub mode: SelfForceMode,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Seed for randomized checks.
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub parallel: bool,
    #[serde(default)]
    pub renormalize: bool,
    #[serde(default)]
    pub interpolation: Interpolation,
    #[serde(default)]
    pub tolerances: ConstraintTolerances,
    #[serde(default)]
    pub external: ExternalConfig,
    pub particles: Vec<ParticleConfig>,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub compare: CompareSection,
    #[serde(default)]
    pub demo: DemoSection,
    #[serde(default)]
    pub check: CheckSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExternalKind {
    #[default]
    None,
    Uniform,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalConfig {
    #[serde(default)]
    pub kind: ExternalKind,
    #[serde(default)]
    pub e: [f64; 3],
    #[serde(default)]
    pub b: [f64; 3],
    /// Coordinate time at which the field is switched off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_off: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticleConfig {
    pub label: String,
    pub rest_mass: f64,
    pub charge: f64,
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<[f64; 3]>,
    /// Trajectory table whose last sample sits at `t0`; relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prehistory: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub nodes: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    pub width_factor: f64,
    pub fd_step: f64,
    /// Varied window as fractions of `[t0, t_end]`.
    pub window: [f64; 2],
    /// Amplitude of the perturbed copies.
    pub perturbation: f64,
    /// Number of perturbed copies.
    pub copies: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        let o = OracleConfig::default();
        OracleSection { nodes: o.nodes, width: o.width, width_factor: o.width_factor, fd_step: o.fd_step, window: [0.5, 0.8], perturbation: 0.01, copies: 3 }
    }
}

impl OracleSection {
    pub fn oracle_config(&self) -> OracleConfig {
        OracleConfig { nodes: self.nodes, width: self.width, width_factor: self.width_factor, fd_step: self.fd_step }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareSection {
    /// Radii assigned to every particle, one paired run per entry.
    pub sigmas: Vec<f64>,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection { sigmas: vec![0.4, 0.2, 0.1] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    /// Switch-off time of the locally isolated scenario; defaults to the midpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_switch: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CheckSection {
    /// Random phase-space states for the bracket checks.
    pub states: usize,
    /// Scale of the random states.
    pub scale: f64,
}

impl Default for CheckSection {
    fn default() -> Self {
        CheckSection { states: 100, scale: 2.0 }
    }
}

fn finite(name: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} is not finite")))
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Unreadable { path: path.to_path_buf(), message: e.to_string() })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        for (n, v) in [("c", self.c), ("dt", self.dt), ("t0", self.t0), ("t_end", self.t_end)] {
            finite(n, v)?;
        }
        if self.c <= 0.0 {
            return bad(format!("c = {} must be positive", self.c));
        }
        if self.dt <= 0.0 {
            return bad(format!("dt = {} must be positive", self.dt));
        }
        if self.t_end <= self.t0 {
            return bad(format!("t_end = {} must exceed t0 = {}", self.t_end, self.t0));
        }
        let t = self.tolerances;
        if !(t.constraint_tol > 0.0 && t.hard_tol >= t.constraint_tol && t.hard_tol.is_finite()) {
            return bad("tolerances need 0 < constraint_tol ≤ hard_tol".into());
        }
        for v in self.external.e.iter().chain(&self.external.b) {
            finite("external field", *v)?;
        }
        if let Some(ts) = self.external.switch_off {
            finite("external.switch_off", ts)?;
        }
        if self.external.kind == ExternalKind::None && (self.external.e != [0.0; 3] || self.external.b != [0.0; 3]) {
            return bad("external field values given with kind = \"none\"".into());
        }
        if self.particles.is_empty() {
            return bad("no particles".into());
        }
        let mut labels = HashSet::new();
        for p in &self.particles {
            if p.label.is_empty() || !p.label.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-') {
                return bad(format!("label {:?} must be non-empty and use [A-Za-z0-9_-]", p.label));
            }
            if !labels.insert(p.label.as_str()) {
                return bad(format!("duplicate label {:?}", p.label));
            }
            ParticleSpec::new(p.label.clone(), p.rest_mass, p.charge, p.radius).map_err(|e| ConfigError::Invalid(e.to_string()))?;
            match (&p.position, &p.beta, &p.prehistory) {
                (Some(x), Some(b), None) => {
                    for v in x.iter().chain(b) {
                        finite(&p.label, *v)?;
                    }
                    if b.iter().map(|v| v * v).sum::<f64>() >= 1.0 {
                        return bad(format!("particle {}: |beta| must be below 1", p.label));
                    }
                }
                (None, None, Some(_)) => {}
                _ => return bad(format!("particle {}: give either position and beta, or prehistory", p.label)),
            }
        }
        self.oracle_config_checked()?;
        let [wa, wb] = self.oracle.window;
        if !(0.0 <= wa && wa < wb && wb <= 1.0) {
            return bad(format!("oracle.window = {:?} must satisfy 0 ≤ a < b ≤ 1", self.oracle.window));
        }
        if !(self.oracle.perturbation.is_finite() && self.oracle.perturbation > 0.0) || self.oracle.copies == 0 {
            return bad("oracle.perturbation must be positive and oracle.copies at least 1".into());
        }
        if self.compare.sigmas.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("compare.sigmas must be positive".into());
        }
        if let Some(ts) = self.demo.t_switch {
            if !(ts.is_finite() && ts >= self.t0 && ts < self.t_end) {
                return bad(format!("demo.t_switch = {ts} must lie in [t0, t_end)"));
            }
        }
        if self.check.states == 0 || !(self.check.scale.is_finite() && self.check.scale > 0.0) {
            return bad("check.states must be positive and check.scale positive".into());
        }
        Ok(())
    }

    fn oracle_config_checked(&self) -> Result<OracleConfig, ConfigError> {
        let o = self.oracle.oracle_config();
        o.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(o)
    }

    pub fn step_options(&self) -> StepOptions {
        let mut o = StepOptions::new(self.dt);
        o.parallel = self.parallel;
        o.renormalize = self.renormalize;
        o.interpolation = self.interpolation;
        o.tolerances = self.tolerances;
        o
    }

    pub fn external_model(&self) -> ExternalFieldModel {
        let base = match self.external.kind {
            ExternalKind::None => return ExternalFieldModel::None,
            ExternalKind::Uniform => ExternalFieldModel::Uniform { e: self.external.e, b: self.external.b },
        };
        match self.external.switch_off {
            Some(t_off) => ExternalFieldModel::Switched { inner: Box::new(base), t_off, c: self.c },
            None => base,
        }
    }

    /// External field without the switch-off.
    pub fn external_unswitched(&self) -> ExternalFieldModel {
        match self.external.kind {
            ExternalKind::None => ExternalFieldModel::None,
            ExternalKind::Uniform => ExternalFieldModel::Uniform { e: self.external.e, b: self.external.b },
        }
    }

    pub fn specs(&self) -> Vec<ParticleSpec> {
        self.particles.iter().map(|p| ParticleSpec::new(p.label.clone(), p.rest_mass, p.charge, p.radius).expect("validated")).collect()
    }

    /// Particle initial data; prehistory paths are resolved against `base_dir`.
    pub fn particle_inits(&self, base_dir: &Path) -> Result<Vec<ParticleInit>, ConfigError> {
        self.particles
            .iter()
            .zip(self.specs())
            .map(|(p, spec)| {
                let initial = match (&p.position, &p.beta, &p.prehistory) {
                    (Some(x), Some(b), _) => InitialCondition::Instant { position: *x, beta: *b },
                    (_, _, Some(path)) => {
                        let full = if path.is_absolute() { path.clone() } else { base_dir.join(path) };
                        let file = std::fs::File::open(&full).map_err(|e| ConfigError::Unreadable { path: full.clone(), message: e.to_string() })?;
                        let samples = WorldlineHistory::read_csv_samples(file).map_err(|e| ConfigError::Invalid(format!("{}: {e}", full.display())))?;
                        let h = WorldlineHistory::from_samples(self.c, samples, self.interpolation, PastExtension::Inertial, self.tolerances)
                            .map_err(|e| ConfigError::Invalid(format!("{}: {e}", full.display())))?;
                        InitialCondition::History(h)
                    }
                    _ => unreachable!("validated"),
                };
                Ok(ParticleInit { spec, initial })
            })
            .collect()
    }
}
