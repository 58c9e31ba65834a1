//! Experiment configuration: key=value files, flag overrides, validation.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ivpcond_core::amplification::DEFAULT_COST_CAP;
use ivpcond_core::CaseId;

/// Rescaling weight used for Case 3 when none is given.
pub const THETA_CASE3: f64 = 60.0;
/// Rescaling weight used for Case 4 when none is given.
pub const THETA_CASE4: f64 = 0.05;
/// Number of Galerkin modes in the Kuramoto–Sivashinsky truncation.
pub const KSE_MODES: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("line {0}: expected key=value")]
    Syntax(usize),
    #[error("missing `{0}`")]
    Missing(&'static str),
    #[error("{0}")]
    Inconsistent(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Model {
    Lorenz,
    KseDirect,
    KseIm,
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Lorenz => "lorenz",
            Model::KseDirect => "kse-direct",
            Model::KseIm => "kse-im",
        }
    }

    pub fn is_kse(self) -> bool {
        matches!(self, Model::KseDirect | Model::KseIm)
    }
}

impl FromStr for Model {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "lorenz" => Ok(Model::Lorenz),
            "kse-direct" => Ok(Model::KseDirect),
            "kse-im" => Ok(Model::KseIm),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Initial state of a direct KSE run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KseInit {
    /// `u(0) = Q(0)(Ψ(0, y0), y0)` with `(y0)_j = (−1)^j/√p`, the state the
    /// inertial-manifold run starts from.
    #[default]
    Manifold,
    /// `a_j = (−1)^j/4` on all 16 modes.
    Alternating,
}

impl KseInit {
    pub fn name(self) -> &'static str {
        match self {
            KseInit::Manifold => "manifold",
            KseInit::Alternating => "alternating",
        }
    }
}

impl FromStr for KseInit {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "manifold" => Ok(KseInit::Manifold),
            "alternating" => Ok(KseInit::Alternating),
            _ => Err(()),
        }
    }
}

/// Inertial-manifold settings for `kse-im`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImSettings {
    /// `dim Y`.
    pub p: usize,
    pub dt: f64,
    pub t_inf: f64,
    pub mesh_intervals: usize,
}

impl Default for ImSettings {
    fn default() -> Self {
        Self { p: 8, dt: 1e-3, t_inf: 5e-4, mesh_intervals: 8 }
    }
}

/// One fully resolved experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: Model,
    pub case: CaseId,
    pub tol: f64,
    /// Final time; runs start at `t = 0`.
    pub t_final: f64,
    /// Present iff the case rescales time.
    pub theta: Option<f64>,
    /// Present iff the model is `kse-im`.
    pub im: Option<ImSettings>,
    /// `0` starts Hager's iteration from `1/m`; other values seed a random start.
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub cost_cap: usize,
    pub kse_init: KseInit,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(ConfigError::Inconsistent("tol must be positive"));
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(ConfigError::Inconsistent("T must exceed the initial time 0"));
        }
        match (self.case.rescaled(), self.theta) {
            (true, None) => return Err(ConfigError::Missing("theta")),
            (false, Some(_)) => return Err(ConfigError::Inconsistent("theta applies to cases 3 and 4 only")),
            (true, Some(th)) if !(th > 0.0) || !th.is_finite() => {
                return Err(ConfigError::Inconsistent("theta must be positive"))
            }
            _ => {}
        }
        match (self.model, &self.im) {
            (Model::KseIm, None) => return Err(ConfigError::Missing("im settings")),
            (Model::KseIm, Some(im)) => {
                if im.p == 0 || im.p >= KSE_MODES {
                    return Err(ConfigError::Inconsistent("p must lie in 1..16"));
                }
                if !(im.dt > 0.0) || !(im.t_inf > 0.0) || im.mesh_intervals == 0 {
                    return Err(ConfigError::Inconsistent("dt, tinf and mesh intervals must be positive"));
                }
            }
            (_, Some(_)) => return Err(ConfigError::Inconsistent("p, dt and tinf apply to kse-im only")),
            _ => {}
        }
        if self.cost_cap == 0 {
            return Err(ConfigError::Inconsistent("cost cap must be positive"));
        }
        Ok(())
    }

    /// Canonical `key=value` text, one key per line in fixed order. The
    /// output path is excluded: it does not affect results.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            s.push_str(k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        };
        put("model", self.model.to_string());
        put("case", self.case.index().to_string());
        put("tol", fmt_num(self.tol));
        put("T", fmt_num(self.t_final));
        if let Some(th) = self.theta {
            put("theta", fmt_num(th));
        }
        if let Some(im) = &self.im {
            put("p", im.p.to_string());
            put("dt", fmt_num(im.dt));
            put("tinf", fmt_num(im.t_inf));
            put("mesh_intervals", im.mesh_intervals.to_string());
        }
        if self.model == Model::KseDirect {
            put("kse_init", self.kse_init.name().to_string());
        }
        put("seed", self.seed.to_string());
        put("cost_cap", self.cost_cap.to_string());
        s
    }
}

/// Shortest round-trip representation.
pub fn fmt_num(v: f64) -> String {
    format!("{v:e}")
}

/// Unresolved settings: every field optional, as read from a file or flags.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings {
    pub model: Option<Model>,
    pub case: Option<u8>,
    pub tol: Option<f64>,
    pub t_final: Option<f64>,
    pub theta: Option<f64>,
    pub p: Option<usize>,
    pub dt: Option<f64>,
    pub t_inf: Option<f64>,
    pub mesh_intervals: Option<usize>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub cost_cap: Option<usize>,
    pub kse_init: Option<KseInit>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::InvalidValue { key: key.to_string(), value: value.to_string() })
}

impl Settings {
    /// Parses `key=value` lines; blank lines and `#` comments are ignored.
    pub fn parse_file(text: &str) -> Result<Self, ConfigError> {
        let mut s = Settings::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax(i + 1))?;
            s.set(k.trim(), v.trim())?;
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "model" => self.model = Some(parse(key, value)?),
            "case" => self.case = Some(parse(key, value)?),
            "tol" => self.tol = Some(parse(key, value)?),
            "T" => self.t_final = Some(parse(key, value)?),
            "theta" => self.theta = Some(parse(key, value)?),
            "p" => self.p = Some(parse(key, value)?),
            "dt" => self.dt = Some(parse(key, value)?),
            "tinf" => self.t_inf = Some(parse(key, value)?),
            "mesh_intervals" => self.mesh_intervals = Some(parse(key, value)?),
            "seed" => self.seed = Some(parse(key, value)?),
            "out" => self.output = Some(PathBuf::from(value)),
            "cost_cap" => self.cost_cap = Some(parse(key, value)?),
            "kse_init" => self.kse_init = Some(parse(key, value)?),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Fields of `other` that are set replace those of `self`.
    pub fn overlay(self, other: Settings) -> Settings {
        Settings {
            model: other.model.or(self.model),
            case: other.case.or(self.case),
            tol: other.tol.or(self.tol),
            t_final: other.t_final.or(self.t_final),
            theta: other.theta.or(self.theta),
            p: other.p.or(self.p),
            dt: other.dt.or(self.dt),
            t_inf: other.t_inf.or(self.t_inf),
            mesh_intervals: other.mesh_intervals.or(self.mesh_intervals),
            seed: other.seed.or(self.seed),
            output: other.output.or(self.output),
            cost_cap: other.cost_cap.or(self.cost_cap),
            kse_init: other.kse_init.or(self.kse_init),
        }
    }

    /// Fills defaults and validates. `theta` defaults to 60 (Case 3) or
    /// 0.05 (Case 4); the manifold settings default to `p = 8`,
    /// `dt = 1e-3`, `T∞ = 5e-4` for `kse-im`.
    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        let model = self.model.ok_or(ConfigError::Missing("model"))?;
        let case = self.case.ok_or(ConfigError::Missing("case"))?;
        let case = CaseId::from_index(case)
            .ok_or_else(|| ConfigError::InvalidValue { key: "case".into(), value: case.to_string() })?;
        let tol = match (self.tol, model) {
            (Some(t), _) => t,
            (None, Model::Lorenz) => return Err(ConfigError::Missing("tol")),
            (None, _) => 1e-4,
        };
        let t_final = self.t_final.ok_or(ConfigError::Missing("T"))?;
        let theta = match case {
            CaseId::ForwardRescaled => Some(self.theta.unwrap_or(THETA_CASE3)),
            CaseId::ShadowingRescaled => Some(self.theta.unwrap_or(THETA_CASE4)),
            _ => self.theta,
        };
        let has_im = self.p.is_some() || self.dt.is_some() || self.t_inf.is_some() || self.mesh_intervals.is_some();
        let im = if model == Model::KseIm || has_im {
            let d = ImSettings::default();
            Some(ImSettings {
                p: self.p.unwrap_or(d.p),
                dt: self.dt.unwrap_or(d.dt),
                t_inf: self.t_inf.unwrap_or(d.t_inf),
                mesh_intervals: self.mesh_intervals.unwrap_or(d.mesh_intervals),
            })
        } else {
            None
        };
        if self.kse_init.is_some() && model != Model::KseDirect {
            return Err(ConfigError::Inconsistent("kse_init applies to kse-direct only"));
        }
        let cfg = ExperimentConfig {
            model,
            case,
            tol,
            t_final,
            theta,
            im,
            seed: self.seed.unwrap_or(0),
            output: self.output.clone(),
            cost_cap: self.cost_cap.unwrap_or(DEFAULT_COST_CAP),
            kse_init: self.kse_init.unwrap_or_default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
