//! Inertial manifold `x = Ψ(t, y)` of a triangularised system.
//!
//! In the frame `u = Q(t) z`, `z = (x, y)`, the manifold point over
//! `y(t0) = y0` is `x(t0)` for the solution of the boundary value problem
//! `ż = L_p z + Qᵀ N(Qz, t)` on `[t0 − T∞, t0]` with `x(t0 − T∞) = 0` and
//! `y(t0) = y0`. Trajectories on the manifold follow the reduced equation
//! `ẏ = G₁(t, y)`, the `y` rows of the transformed field at `(Ψ(t, y), y)`.
//!
//! The reflector chain depends on `t` only, so it is integrated once over
//! the whole time window and kept out of the boundary value unknowns.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::bvp::{ivp_guess, solve_bvp, uniform_mesh, BvpError, BvpOptions, BvpProblem};
use crate::householder::{HouseholderChain, HouseholderError, TriangularizedSystem};
use crate::ode::{
    ab2_integrate, integrate_adaptive, rk45_step, Ab2Error, Ab2Starter, FnField, OdeError, Trajectory, TransitionSet,
    VectorField,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImConfig {
    /// Dimension of the manifold coordinates `y`.
    pub p: usize,
    /// Truncation of the infinite past.
    pub t_inf: f64,
    /// Fixed step of the reduced integration.
    pub dt: f64,
    /// State increment of the finite-difference transitions.
    pub fd_dx: f64,
    /// Flow increment of the finite-difference transitions; `None` uses the
    /// trajectory step.
    pub fd_dt: Option<f64>,
    pub bvp_tol: f64,
    /// Collocation intervals on `[t0 − T∞, t0]`.
    pub mesh_intervals: usize,
    /// Tolerance of the initial-guess and chain integrations.
    pub ivp_tol: f64,
}

impl ImConfig {
    pub fn new(p: usize, t_inf: f64, dt: f64) -> Self {
        Self { p, t_inf, dt, fd_dx: 1e-4, fd_dt: None, bvp_tol: 1e-6, mesh_intervals: 8, ivp_tol: 1e-8 }
    }

    pub fn validate(&self, d: usize) -> Result<(), ManifoldError> {
        if self.p == 0 || self.p >= d {
            return Err(ManifoldError::InvalidConfig("need 0 < p < d"));
        }
        let positive = [self.t_inf, self.dt, self.fd_dx, self.fd_dt.unwrap_or(1.0), self.bvp_tol, self.ivp_tol];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) || self.mesh_intervals == 0 {
            return Err(ManifoldError::InvalidConfig("T∞, increments and tolerances must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ManifoldError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("initial guess blew up for t0 = {t0}: {source}")]
    GuessBlowup { t0: f64, source: OdeError },
    #[error("boundary value solve failed for t0 = {t0}: {source}")]
    Bvp { t0: f64, source: BvpError },
    #[error("reflector chain integration failed: {0}")]
    Chain(OdeError),
    #[error(transparent)]
    Householder(#[from] HouseholderError),
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// Summary of the boundary value solve behind a manifold point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub newton_iterations: usize,
    pub max_residual: f64,
    pub mesh_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldPoint {
    pub t: f64,
    pub y: DVector<f64>,
    /// `Ψ(t, y)`.
    pub x: DVector<f64>,
    pub chain: HouseholderChain,
    pub certificate: Certificate,
}

/// `ŵ(t)` on a time window.
#[derive(Debug, Clone)]
pub struct ChainTrack {
    template: HouseholderChain,
    /// `None` when the chain is stationary.
    path: Option<Trajectory>,
    interval: (f64, f64),
}

impl ChainTrack {
    pub fn new<F: VectorField>(
        sys: &TriangularizedSystem<F>,
        chain: &HouseholderChain,
        a: f64,
        b: f64,
        tol: f64,
    ) -> Result<Self, ManifoldError> {
        let (rates, _) = chain.rates(&sys.linear_part(a));
        let stationary = sys.has_constant_linearization() && rates.iter().all(|r| r.amax() == 0.0);
        let path = if stationary {
            None
        } else {
            Some(integrate_adaptive(&sys.chain_field(), &chain.to_flat(), a, b, tol).map_err(ManifoldError::Chain)?)
        };
        Ok(Self { template: chain.clone(), path, interval: (a, b) })
    }

    pub fn interval(&self) -> (f64, f64) {
        self.interval
    }

    pub fn is_stationary(&self) -> bool {
        self.path.is_none()
    }

    /// The chain at `t`, clamped to the window.
    pub fn chain_at<F: VectorField>(&self, sys: &TriangularizedSystem<F>, t: f64) -> HouseholderChain {
        let mut chain = self.template.clone();
        if let Some(path) = &self.path {
            let t = t.clamp(self.interval.0, self.interval.1);
            let k = path.times.partition_point(|&s| s <= t).max(1) - 1;
            let h = t - path.times[k];
            if h == 0.0 {
                chain.set_flat(path.states[k].as_slice());
            } else {
                let step = rk45_step(&sys.chain_field(), path.times[k], path.states[k].as_slice(), h)
                    .expect("step within an accepted interval");
                chain.set_flat(step.high.as_slice());
            }
        }
        chain
    }
}

/// `L(t)`, `L_p(t)` and `Q(t)`.
#[derive(Debug, Clone)]
struct Frame {
    l: DMatrix<f64>,
    lp: DMatrix<f64>,
    q: DMatrix<f64>,
}

impl Frame {
    fn new<F: VectorField>(sys: &TriangularizedSystem<F>, chain: &HouseholderChain, t: f64) -> Self {
        let l = sys.linear_part(t);
        let (_, lp) = chain.rates(&l);
        Self { l, lp, q: chain.q() }
    }

    /// `L_p z + Qᵀ(f(Qz) − L Qz)`.
    fn rhs<F: VectorField>(&self, field: &F, t: f64, z: &[f64], out: &mut [f64]) {
        let zv = DVector::from_column_slice(z);
        let u = &self.q * &zv;
        let mut f = DVector::zeros(z.len());
        field.rhs(t, u.as_slice(), f.as_mut_slice());
        f -= &self.l * &u;
        let dz = &self.lp * zv + self.q.tr_mul(&f);
        out.copy_from_slice(dz.as_slice());
    }
}

/// Evaluates `Ψ` and the reduced field for one system and time window.
pub struct ManifoldSolver<'a, F> {
    sys: &'a TriangularizedSystem<F>,
    cfg: ImConfig,
    track: ChainTrack,
    fixed: Option<Frame>,
}

struct ManifoldBvp<'s, 'a, F> {
    solver: &'s ManifoldSolver<'a, F>,
    interval: (f64, f64),
    y0: &'s [f64],
    frames: Vec<(f64, Frame)>,
}

impl<F: VectorField> BvpProblem for ManifoldBvp<'_, '_, F> {
    fn dim(&self) -> usize {
        self.solver.sys.dim()
    }
    fn interval(&self) -> (f64, f64) {
        self.interval
    }
    fn rhs(&self, t: f64, z: &[f64], out: &mut [f64]) {
        let idx = self.frames.binary_search_by(|(s, _)| s.total_cmp(&t));
        match idx {
            Ok(k) => self.frames[k].1.rhs(self.solver.sys.field(), t, z, out),
            Err(_) => self.solver.z_rhs(t, z, out),
        }
    }
    fn n_left(&self) -> usize {
        self.solver.sys.p()
    }
    fn left_bc(&self, za: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&za[..self.solver.sys.p()]);
    }
    fn right_bc(&self, zb: &[f64], out: &mut [f64]) {
        let px = self.solver.sys.p();
        for (o, (z, y)) in out.iter_mut().zip(zb[px..].iter().zip(self.y0)) {
            *o = z - y;
        }
    }
}

impl<'a, F: VectorField> ManifoldSolver<'a, F> {
    /// Prepares evaluations of `Ψ(t, ·)` for `t ∈ [t_start, t_end]`, with
    /// `chain` the reflectors at `t_start − T∞`.
    pub fn new(
        sys: &'a TriangularizedSystem<F>,
        cfg: ImConfig,
        chain: &HouseholderChain,
        t_start: f64,
        t_end: f64,
    ) -> Result<Self, ManifoldError> {
        cfg.validate(sys.dim())?;
        if cfg.p != sys.q() {
            return Err(ManifoldError::InvalidConfig("p must equal the y-block size of the system"));
        }
        if chain.dim() != sys.dim() || chain.p() != sys.p() {
            return Err(ManifoldError::InvalidConfig("chain does not match the system"));
        }
        if !(t_end >= t_start) {
            return Err(ManifoldError::InvalidConfig("need t_end ≥ t_start"));
        }
        let a = t_start - cfg.t_inf;
        let track = ChainTrack::new(sys, chain, a, t_end.max(a + cfg.t_inf), cfg.ivp_tol.min(1e-10))?;
        let fixed = track.is_stationary().then(|| Frame::new(sys, chain, a));
        Ok(Self { sys, cfg, track, fixed })
    }

    pub fn config(&self) -> &ImConfig {
        &self.cfg
    }

    pub fn system(&self) -> &TriangularizedSystem<F> {
        self.sys
    }

    pub fn track(&self) -> &ChainTrack {
        &self.track
    }

    fn frame(&self, t: f64) -> Frame {
        match &self.fixed {
            Some(f) => f.clone(),
            None => Frame::new(self.sys, &self.track.chain_at(self.sys, t), t),
        }
    }

    /// The full transformed field `ż` at `t`.
    pub fn z_rhs(&self, t: f64, z: &[f64], out: &mut [f64]) {
        match &self.fixed {
            Some(f) => f.rhs(self.sys.field(), t, z, out),
            None => self.frame(t).rhs(self.sys.field(), t, z, out),
        }
    }

    pub fn z_field(&self) -> impl VectorField + '_ {
        FnField::new(self.sys.dim(), move |t, z: &[f64], out: &mut [f64]| self.z_rhs(t, z, out))
    }

    /// `G₁(t, x, y)`: the `y` rows of the transformed field.
    pub fn g1(&self, t: f64, x: &[f64], y: &[f64]) -> DVector<f64> {
        let px = self.sys.p();
        let mut z = x.to_vec();
        z.extend_from_slice(y);
        let mut out = vec![0.0; z.len()];
        self.z_rhs(t, &z, &mut out);
        DVector::from_column_slice(&out[px..])
    }

    /// `Ψ(t0, y0)`, seeding the initial guess with `y_left` at `t0 − T∞`.
    pub fn psi(&self, t0: f64, y0: &[f64], y_left: &[f64]) -> Result<ManifoldPoint, ManifoldError> {
        let (px, q) = (self.sys.p(), self.sys.q());
        if y0.len() != q || y_left.len() != q {
            return Err(ManifoldError::InvalidConfig("y has the wrong dimension"));
        }
        if y0.iter().chain(y_left).any(|v| !v.is_finite()) {
            return Err(ManifoldError::InvalidConfig("y must be finite"));
        }
        let a = t0 - self.cfg.t_inf;
        let mesh = uniform_mesh(a, t0, self.cfg.mesh_intervals);
        let frames = if self.fixed.is_some() {
            Vec::new()
        } else {
            let mut times: Vec<f64> = mesh.clone();
            times.extend(mesh.windows(2).map(|w| 0.5 * (w[0] + w[1])));
            times.sort_by(f64::total_cmp);
            times.into_iter().map(|t| (t, self.frame(t))).collect()
        };
        let problem = ManifoldBvp { solver: self, interval: (a, t0), y0, frames };

        let field = problem_field(&problem);
        let y_left = self.shoot(&field, a, t0, y0, y_left)?;
        let mut z_left = vec![0.0; px];
        z_left.extend_from_slice(y_left.as_slice());
        let guess = ivp_guess(&field, &z_left, &mesh, self.cfg.ivp_tol, |_, _| false).map_err(|e| match e {
            BvpError::Ode(source) => ManifoldError::GuessBlowup { t0, source },
            source => ManifoldError::Bvp { t0, source },
        })?;
        let sol = solve_bvp(&problem, &guess, &BvpOptions::new(self.cfg.bvp_tol))
            .map_err(|source| ManifoldError::Bvp { t0, source })?;
        let right = sol.right();
        Ok(ManifoldPoint {
            t: t0,
            y: DVector::from_column_slice(y0),
            x: right.rows(0, px).into_owned(),
            chain: self.track.chain_at(self.sys, t0),
            certificate: Certificate {
                newton_iterations: sol.newton_iterations,
                max_residual: sol.max_residual,
                mesh_points: sol.mesh.len(),
            },
        })
    }

    /// `y` at `t0` of the guess integration started from `(0, y_left)`.
    fn guess_end<V: VectorField>(&self, field: &V, a: f64, t0: f64, y_left: &[f64]) -> Result<DVector<f64>, ManifoldError> {
        let px = self.sys.p();
        let mut z = vec![0.0; px];
        z.extend_from_slice(y_left);
        let traj = integrate_adaptive(field, &z, a, t0, self.cfg.ivp_tol)
            .map_err(|source| ManifoldError::GuessBlowup { t0, source })?;
        Ok(traj.final_state().rows(px, self.sys.q()).into_owned())
    }

    /// Corrects `y_left` by finite-difference shooting while the guess
    /// misses `y0` by more than `SHOOT_THRESHOLD·max(1, ‖y0‖∞)`.
    fn shoot<V: VectorField>(
        &self,
        field: &V,
        a: f64,
        t0: f64,
        y0: &[f64],
        y_left: &[f64],
    ) -> Result<DVector<f64>, ManifoldError> {
        const SHOOT_THRESHOLD: f64 = 0.1;
        const MAX_SHOTS: usize = 4;
        let q = self.sys.q();
        let target = DVector::from_column_slice(y0);
        let scale = target.amax().max(1.0);
        let mut left = DVector::from_column_slice(y_left);
        for _ in 0..MAX_SHOTS {
            let end = self.guess_end(field, a, t0, left.as_slice())?;
            let miss = &target - &end;
            if miss.amax() <= SHOOT_THRESHOLD * scale {
                break;
            }
            let mut jac = DMatrix::zeros(q, q);
            for j in 0..q {
                let mut probe = left.clone();
                let eps = 1e-6 * left[j].abs().max(1.0);
                probe[j] += eps;
                let moved = self.guess_end(field, a, t0, probe.as_slice())?;
                jac.set_column(j, &((moved - &end) / eps));
            }
            match jac.lu().solve(&miss) {
                Some(step) if step.iter().all(|v| v.is_finite()) => left += step,
                _ => break,
            }
        }
        Ok(left)
    }

    /// `G₁(t, y)` on the manifold, with the point that certifies it.
    pub fn reduced_rhs(&self, t: f64, y: &[f64]) -> Result<(DVector<f64>, ManifoldPoint), ManifoldError> {
        let point = self.psi(t, y, y)?;
        Ok((self.g1(t, point.x.as_slice(), y), point))
    }

    /// Relative distance of the full flow from the manifold after one step:
    /// `(x, y)` at `point` is advanced by `h`, and the new `x` is compared
    /// with `Ψ` at the new `y`, scaled by `max(1, ‖x‖∞)`.
    pub fn consistency_drift(&self, point: &ManifoldPoint, h: f64, tol: f64) -> Result<f64, ManifoldError> {
        let px = self.sys.p();
        let mut z0 = point.x.as_slice().to_vec();
        z0.extend_from_slice(point.y.as_slice());
        let traj = integrate_adaptive(&self.z_field(), &z0, point.t, point.t + h, tol)?;
        let z1 = traj.final_state();
        let y1 = z1.rows(px, self.sys.q()).into_owned();
        let next = self.psi(point.t + h, y1.as_slice(), y1.as_slice())?;
        let gap = (z1.rows(0, px) - &next.x).amax();
        Ok(gap / point.x.amax().max(1.0))
    }
}

fn problem_field<'p, P: BvpProblem>(problem: &'p P) -> impl VectorField + 'p {
    FnField::new(problem.dim(), move |t, z: &[f64], out: &mut [f64]| problem.rhs(t, z, out))
}

/// `Ψ(t0, y0)` with the reflectors `chain` at `t0 − T∞` and the initial
/// guess started from `(0, y_left)` there.
pub fn evaluate_psi<F: VectorField>(
    sys: &TriangularizedSystem<F>,
    cfg: &ImConfig,
    t0: f64,
    y0: &[f64],
    chain: &HouseholderChain,
    y_left: &[f64],
) -> Result<ManifoldPoint, ManifoldError> {
    ManifoldSolver::new(sys, *cfg, chain, t0, t0)?.psi(t0, y0, y_left)
}

/// A reduced trajectory with the manifold point at each node.
#[derive(Debug, Clone)]
pub struct ImRun {
    pub trajectory: Trajectory,
    pub points: Vec<ManifoldPoint>,
    pub bvp_solves: usize,
    pub newton_iterations: usize,
}

impl ImRun {
    pub fn mean_newton_iterations(&self) -> f64 {
        self.newton_iterations as f64 / self.bvp_solves.max(1) as f64
    }
}

/// Failure of [`im_trajectory`] with the nodes completed so far.
#[derive(Debug, Clone)]
pub struct ImFailure {
    pub error: ManifoldError,
    pub partial: Option<Box<Trajectory>>,
}

impl From<ManifoldError> for ImFailure {
    fn from(error: ManifoldError) -> Self {
        Self { error, partial: None }
    }
}

/// Two-step Adams–Bashforth on `ẏ = G₁(t, y)` from `y(t0) = y0` to
/// `t_end` with step `cfg.dt`, evaluating `Ψ` at every stage.
pub fn im_trajectory<F: VectorField>(
    solver: &ManifoldSolver<'_, F>,
    t0: f64,
    y0: &[f64],
    t_end: f64,
) -> Result<ImRun, ImFailure> {
    let mut evaluations: Vec<ManifoldPoint> = Vec::new();
    let result = ab2_integrate(
        |t, y: &[f64], out: &mut [f64]| {
            let (g, point) = solver.reduced_rhs(t, y)?;
            out.copy_from_slice(g.as_slice());
            evaluations.push(point);
            Ok::<(), ManifoldError>(())
        },
        y0,
        t0,
        t_end,
        solver.cfg.dt,
        Ab2Starter::ExplicitMidpoint,
    );
    let trajectory = result.map_err(|f| ImFailure {
        error: match f.error {
            Ab2Error::Rhs(e) => e,
            Ab2Error::Ode(e) => ManifoldError::Ode(e),
        },
        partial: f.partial.map(Box::new),
    })?;
    let mut bvp_solves = evaluations.len();
    let mut newton_iterations: usize = evaluations.iter().map(|p| p.certificate.newton_iterations).sum();
    let mut points = Vec::with_capacity(trajectory.times.len());
    for (&t, y) in trajectory.times.iter().zip(&trajectory.states) {
        let found = evaluations.iter().position(|p| p.t == t && p.y == *y);
        let point = match found {
            Some(k) => evaluations.swap_remove(k),
            None => {
                let p = solver.psi(t, y.as_slice(), y.as_slice()).map_err(|error| ImFailure {
                    error,
                    partial: Some(Box::new(trajectory.clone())),
                })?;
                bvp_solves += 1;
                newton_iterations += p.certificate.newton_iterations;
                p
            }
        };
        points.push(point);
    }
    Ok(ImRun { trajectory, points, bvp_solves, newton_iterations })
}

/// Transitions of the reduced flow by finite differences.
///
/// For node `n` and direction `e_j`, both `y_n` and `y_n + Δx e_j` are
/// advanced by one forward-Euler step of length `δt` of the reduced field,
/// giving `y⁺` and `(Δy)_{n,j}`; then
/// `δ_{n,j} = ((Δy)_{n,j} − y⁺ − Δx e_j)/(Δx δt)`, `X_n = I + h_n Δ_n`
/// and `f_n = G₁(t_n, y_n)`.
pub fn manifold_transitions<F: VectorField>(
    solver: &ManifoldSolver<'_, F>,
    run: &ImRun,
    theta: f64,
) -> Result<TransitionSet, ManifoldError> {
    let q = solver.sys.q();
    let dx = solver.cfg.fd_dx;
    let traj = &run.trajectory;
    let mut propagators = Vec::with_capacity(traj.len());
    let mut drifts = Vec::with_capacity(traj.len());
    for n in 0..traj.len() {
        let t = traj.times[n];
        let h = traj.steps[n];
        let fd_dt = solver.cfg.fd_dt.unwrap_or(h);
        let y = &traj.states[n];
        let point = &run.points[n];
        let g = solver.g1(t, point.x.as_slice(), y.as_slice());
        let y_plus = y + &g * fd_dt;
        let mut delta = DMatrix::zeros(q, q);
        for j in 0..q {
            let mut probe = y.clone();
            probe[j] += dx;
            let (gp, _) = solver.reduced_rhs(t, probe.as_slice())?;
            let moved = &probe + gp * fd_dt;
            let mut col = moved - &y_plus;
            col[j] -= dx;
            delta.set_column(j, &(col / (dx * fd_dt)));
        }
        propagators.push(DMatrix::identity(q, q) + delta * h);
        drifts.push(g);
    }
    Ok(TransitionSet::new(propagators, drifts, traj.steps.clone(), theta)?)
}

/// The manifold points of `run` with the largest relative drift, as
/// `(node, drift)`.
pub fn max_consistency_drift<F: VectorField>(
    solver: &ManifoldSolver<'_, F>,
    run: &ImRun,
    tol: f64,
) -> Result<(usize, f64), ManifoldError> {
    let mut worst = (0, 0.0);
    for (n, point) in run.points.iter().enumerate().take(run.trajectory.len()) {
        let drift = solver.consistency_drift(point, run.trajectory.steps[n], tol)?;
        if drift > worst.1 {
            worst = (n, drift);
        }
    }
    Ok(worst)
}
