//! Experiment drivers: trajectory, transitions, amplification report.

use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use sha1::{Digest, Sha1};

use ivpcond_core::amplification::{AmplificationError, ReportOptions};
use ivpcond_core::householder::{HouseholderChain, Linearization, TriangularizedSystem};
use ivpcond_core::manifold::{evaluate_psi, im_trajectory, manifold_transitions, ImConfig, ManifoldSolver};
use ivpcond_core::models::{Kse, Lorenz, LorenzParams, Permuted};
use ivpcond_core::ode::integrate_adaptive;
use ivpcond_core::{AmplificationReport, CaseId, TransitionSet, VectorField};

use crate::config::{ConfigError, ExperimentConfig, ImSettings, KseInit, Model, KSE_MODES};

pub const CODE_VERSION: &str = concat!("ivpcond-", env!("CARGO_PKG_VERSION"));

/// Run statistics of an inertial-manifold trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImStats {
    pub settings: ImSettings,
    pub bvp_solves: usize,
    pub mean_newton: f64,
}

/// Outcome of a row beyond its numbers.
#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    Ok,
    /// The exact norm was not attempted: `L` has more columns than the cap.
    CostCap,
    /// The normal equations could not be factored.
    RankDeficient,
    /// The pipeline failed; the row holds what was computed before.
    Failed(String),
}

impl Status {
    pub fn label(&self) -> String {
        match self {
            Status::Ok => "ok".into(),
            Status::CostCap => "cost-cap".into(),
            Status::RankDeficient => "rank-deficient".into(),
            Status::Failed(m) => format!("failed: {m}"),
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, Status::Failed(_))
    }
}

/// One output row.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub model: Model,
    pub case: CaseId,
    pub tol: f64,
    pub t_final: f64,
    pub theta: Option<f64>,
    /// `‖L†‖∞`, `+∞` on overflow.
    pub exact: Option<f64>,
    /// `‖L†G‖∞ / ‖G‖∞`.
    pub residual_estimate: Option<f64>,
    pub hager: Option<f64>,
    /// `2‖L†G‖∞`.
    pub global_error: Option<f64>,
    pub n_steps: Option<usize>,
    pub wall_seconds: f64,
    pub im: Option<ImStats>,
    pub status: Status,
    pub config_hash: String,
}

/// Git blob hash of the canonical configuration and code version.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    let mut text = cfg.canonical();
    text.push_str("code_version=");
    text.push_str(CODE_VERSION);
    text.push('\n');
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", text.len()).as_bytes());
    h.update(text.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Transitions and residuals of one trajectory, shared by all cases.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub transitions: TransitionSet,
    pub residuals: Option<Vec<DVector<f64>>>,
    pub im: Option<ImStats>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{message}")]
pub struct PrepareError {
    pub message: String,
    /// Steps completed before the failure.
    pub n_steps: Option<usize>,
}

impl PrepareError {
    fn new(message: impl ToString) -> Self {
        Self { message: message.to_string(), n_steps: None }
    }
}

/// The 16-mode KSE field permuted to `(a_{p+1}, …, a_16, a_1, …, a_p)` and
/// its triangularised form about `u = 0`, with `x` the stiff modes.
pub fn kse_inertial_system(p: usize) -> Result<TriangularizedSystem<Permuted<Kse>>, PrepareError> {
    let perm: Vec<usize> = (p..KSE_MODES).chain(0..p).collect();
    let field = Permuted::new(Kse::default(), perm).ok_or_else(|| PrepareError::new("bad permutation"))?;
    let l = field.jacobian(0.0, &[0.0; KSE_MODES]);
    TriangularizedSystem::new(field, Linearization::Constant(l), KSE_MODES - p).map_err(PrepareError::new)
}

pub fn im_config(s: &ImSettings) -> ImConfig {
    let mut cfg = ImConfig::new(s.p, s.t_inf, s.dt);
    cfg.mesh_intervals = s.mesh_intervals;
    cfg
}

/// `u(0) = Q(0)(Ψ(0, y0), y0)` in the original mode order, with
/// `(y0)_j = (−1)^j/√p` and a cold chain.
pub fn kse_manifold_state(s: &ImSettings) -> Result<Vec<f64>, PrepareError> {
    let sys = kse_inertial_system(s.p)?;
    let y0 = Kse::alternating_state(s.p);
    let chain = HouseholderChain::cold(KSE_MODES, KSE_MODES - s.p);
    let point = evaluate_psi(&sys, &im_config(s), 0.0, &y0, &chain, &y0).map_err(PrepareError::new)?;
    let mut z = point.x.as_slice().to_vec();
    z.extend_from_slice(&y0);
    let u = point.chain.q() * DVector::from_vec(z);
    Ok(sys.field().backward(u.as_slice()))
}

fn direct<F: VectorField>(field: &F, u0: &[f64], cfg: &ExperimentConfig) -> Result<Prepared, PrepareError> {
    let traj = integrate_adaptive(field, u0, 0.0, cfg.t_final, cfg.tol).map_err(PrepareError::new)?;
    let transitions = TransitionSet::from_trajectory(field, &traj, 0.0, 1)
        .map_err(|e| PrepareError { message: e.to_string(), n_steps: Some(traj.len()) })?;
    Ok(Prepared { transitions, residuals: traj.residuals, im: None, seconds: 0.0 })
}

fn inertial(cfg: &ExperimentConfig, s: &ImSettings) -> Result<Prepared, PrepareError> {
    let sys = kse_inertial_system(s.p)?;
    let chain = HouseholderChain::cold(KSE_MODES, KSE_MODES - s.p);
    let solver = ManifoldSolver::new(&sys, im_config(s), &chain, 0.0, cfg.t_final).map_err(PrepareError::new)?;
    let y0 = Kse::alternating_state(s.p);
    let run = im_trajectory(&solver, 0.0, &y0, cfg.t_final).map_err(|f| PrepareError {
        message: f.error.to_string(),
        n_steps: f.partial.map(|t| t.len()),
    })?;
    let transitions = manifold_transitions(&solver, &run, 0.0)
        .map_err(|e| PrepareError { message: e.to_string(), n_steps: Some(run.trajectory.len()) })?;
    let stats = ImStats { settings: *s, bvp_solves: run.bvp_solves, mean_newton: run.mean_newton_iterations() };
    Ok(Prepared { transitions, residuals: None, im: Some(stats), seconds: 0.0 })
}

/// Integrates the model and builds its transitions. The rescaling weight is
/// applied per case in [`report`].
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, PrepareError> {
    let start = Instant::now();
    let mut prepared = match cfg.model {
        Model::Lorenz => direct(&Lorenz::new(LorenzParams::default()), &Lorenz::INITIAL_STATE, cfg)?,
        Model::KseDirect => {
            let u0 = match cfg.kse_init {
                KseInit::Manifold => kse_manifold_state(&ImSettings::default())?,
                KseInit::Alternating => Kse::alternating_state(KSE_MODES),
            };
            direct(&Kse::default(), &u0, cfg)?
        }
        Model::KseIm => {
            let s = cfg.im.ok_or_else(|| PrepareError::new("missing manifold settings"))?;
            inertial(cfg, &s)?
        }
    };
    prepared.seconds = start.elapsed().as_secs_f64();
    Ok(prepared)
}

fn empty_row(cfg: &ExperimentConfig, status: Status) -> Row {
    Row {
        model: cfg.model,
        case: cfg.case,
        tol: cfg.tol,
        t_final: cfg.t_final,
        theta: cfg.theta,
        exact: None,
        residual_estimate: None,
        hager: None,
        global_error: None,
        n_steps: None,
        wall_seconds: 0.0,
        im: cfg.im.map(|settings| ImStats { settings, bvp_solves: 0, mean_newton: 0.0 }),
        status,
        config_hash: config_hash(cfg),
    }
}

/// The row for `cfg` from a prepared trajectory.
pub fn report(cfg: &ExperimentConfig, prepared: &Prepared) -> Row {
    let start = Instant::now();
    let ts = prepared.transitions.with_theta(cfg.theta.unwrap_or(0.0));
    let opts = ReportOptions {
        cost_cap: cfg.cost_cap,
        hager_seed: (cfg.seed != 0).then_some(cfg.seed),
        ..ReportOptions::default()
    };
    let mut row = empty_row(cfg, Status::Ok);
    row.n_steps = Some(ts.len());
    row.im = prepared.im;
    match AmplificationReport::compute(cfg.case, &ts, prepared.residuals.as_deref(), cfg.tol, &opts) {
        Ok(r) => {
            row.exact = r.exact_norm;
            row.residual_estimate = r.residual_estimate;
            row.hager = r.hager_bound;
            row.global_error = r.global_error;
            row.status = match r.exact_error {
                Some(AmplificationError::CostCapExceeded { .. }) => Status::CostCap,
                Some(AmplificationError::RankDeficient { .. }) => Status::RankDeficient,
                Some(e) => Status::Failed(e.to_string()),
                None => Status::Ok,
            };
        }
        Err(e) => row.status = Status::Failed(e.to_string()),
    }
    row.wall_seconds = prepared.seconds + start.elapsed().as_secs_f64();
    row
}

/// One row: integrate, build transitions, report.
pub fn run_condition(cfg: &ExperimentConfig) -> Row {
    match prepare(cfg) {
        Ok(p) => report(cfg, &p),
        Err(e) => {
            let mut row = empty_row(cfg, Status::Failed(e.message));
            row.n_steps = e.n_steps;
            row
        }
    }
}

/// Rows for several cases of one trajectory. All configurations must share
/// model, tolerance, horizon and manifold settings.
pub fn run_cases(cfgs: &[ExperimentConfig]) -> Vec<Row> {
    let Some(first) = cfgs.first() else { return Vec::new() };
    match prepare(first) {
        Ok(p) => cfgs.iter().map(|c| report(c, &p)).collect(),
        Err(e) => cfgs
            .iter()
            .map(|c| {
                let mut row = empty_row(c, Status::Failed(e.message.clone()));
                row.n_steps = e.n_steps;
                row
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Tol,
    T,
    Theta,
}

impl std::str::FromStr for Axis {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "tol" => Ok(Axis::Tol),
            "T" => Ok(Axis::T),
            "theta" => Ok(Axis::Theta),
            _ => Err(()),
        }
    }
}

/// The configurations of a scan, validated up front.
pub fn scan_configs(base: &ExperimentConfig, axis: Axis, values: &[f64]) -> Result<Vec<ExperimentConfig>, ConfigError> {
    let ascending = values.windows(2).all(|w| w[0] <= w[1]);
    let descending = values.windows(2).all(|w| w[0] >= w[1]);
    if !(ascending || descending) {
        return Err(ConfigError::Inconsistent("scan values must be sorted"));
    }
    values
        .iter()
        .map(|&v| {
            let mut c = base.clone();
            match axis {
                Axis::Tol => c.tol = v,
                Axis::T => c.t_final = v,
                Axis::Theta => {
                    if !c.case.rescaled() {
                        return Err(ConfigError::Inconsistent("a theta scan needs case 3 or 4"));
                    }
                    c.theta = Some(v);
                }
            }
            c.validate()?;
            Ok(c)
        })
        .collect()
}

/// One row per configuration, computed in parallel, in input order.
pub fn run_scan(cfgs: &[ExperimentConfig]) -> Vec<Row> {
    cfgs.par_iter().map(run_condition).collect()
}
