//! Time integration with local error capture, and the per-step linear data
//! (`X_n`, `f_n`, `h_n`) the error operators are built from.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::dense;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OdeError {
    #[error("non-finite state component at t = {t}")]
    Overflow { t: f64 },
    #[error("step size {h:e} underflowed at t = {t} (problem too stiff for an explicit pair)")]
    StepUnderflow { t: f64, h: f64 },
    #[error("exceeded {0} integration steps")]
    TooManySteps(usize),
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
}

/// Right-hand side `u̇ = f(t, u)` of a `dim`-dimensional system.
///
/// Implementors without an analytic jacobian inherit the central
/// finite-difference fallback [`fd_jacobian`].
pub trait VectorField {
    fn dim(&self) -> usize;

    /// Writes `f(t, u)` into `out` (length `dim`).
    fn rhs(&self, t: f64, u: &[f64], out: &mut [f64]);

    fn jacobian(&self, t: f64, u: &[f64]) -> DMatrix<f64> {
        fd_jacobian(self, t, u)
    }
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn rhs(&self, t: f64, u: &[f64], out: &mut [f64]) {
        (**self).rhs(t, u, out)
    }
    fn jacobian(&self, t: f64, u: &[f64]) -> DMatrix<f64> {
        (**self).jacobian(t, u)
    }
}

/// Central differences with increment `1e-6·max(1, ‖u‖∞)`.
pub fn fd_jacobian<F: VectorField + ?Sized>(field: &F, t: f64, u: &[f64]) -> DMatrix<f64> {
    let d = field.dim();
    let eps = 1e-6 * dense::inf_norm(u).max(1.0);
    let mut jac = DMatrix::zeros(d, d);
    let mut probe = u.to_vec();
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    for j in 0..d {
        probe[j] = u[j] + eps;
        field.rhs(t, &probe, &mut plus);
        probe[j] = u[j] - eps;
        field.rhs(t, &probe, &mut minus);
        probe[j] = u[j];
        for i in 0..d {
            jac[(i, j)] = (plus[i] - minus[i]) / (2.0 * eps);
        }
    }
    jac
}

/// A vector field given by a closure; the jacobian is the FD fallback.
pub struct FnField<R> {
    dim: usize,
    rhs: R,
}

impl<R: Fn(f64, &[f64], &mut [f64])> FnField<R> {
    pub fn new(dim: usize, rhs: R) -> Self {
        Self { dim, rhs }
    }
}

impl<R: Fn(f64, &[f64], &mut [f64])> VectorField for FnField<R> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn rhs(&self, t: f64, u: &[f64], out: &mut [f64]) {
        (self.rhs)(t, u, out)
    }
}

/// Time mesh, states and (optionally) per-step local residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    /// `steps[n] = times[n + 1] - times[n]`.
    pub steps: Vec<f64>,
    /// `G_n = x_{n+1} - φ(x_n, h_n; t_n)`, one per step.
    pub residuals: Option<Vec<DVector<f64>>>,
}

impl Trajectory {
    /// Builds a trajectory from nodes, deriving the step sequence.
    pub fn from_nodes(
        times: Vec<f64>,
        states: Vec<DVector<f64>>,
        residuals: Option<Vec<DVector<f64>>>,
    ) -> Result<Self, OdeError> {
        if times.is_empty() || times.len() != states.len() {
            return Err(OdeError::InvalidInput("times and states must be non-empty and equally long"));
        }
        let steps: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
        if steps.iter().any(|&h| !(h > 0.0)) {
            return Err(OdeError::InvalidInput("times must be strictly increasing"));
        }
        if let Some(r) = &residuals {
            if r.len() != steps.len() {
                return Err(OdeError::InvalidInput("one residual per step required"));
            }
        }
        Ok(Self { times, states, steps, residuals })
    }

    /// A constant trajectory on `[t_start, t_end]`, e.g. an equilibrium.
    pub fn stationary(state: DVector<f64>, t_start: f64, t_end: f64) -> Self {
        Self {
            times: vec![t_start, t_end],
            states: vec![state.clone(), state],
            steps: vec![t_end - t_start],
            residuals: None,
        }
    }

    /// Number of steps `N`.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states[0].len()
    }

    pub fn final_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory has at least one node")
    }

    /// Piecewise-linear interpolation, held constant outside the mesh.
    pub fn state_at(&self, t: f64) -> DVector<f64> {
        let n = self.times.len();
        if t <= self.times[0] || n == 1 {
            return self.states[0].clone();
        }
        if t >= self.times[n - 1] {
            return self.states[n - 1].clone();
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let w = (t - self.times[k]) / self.steps[k];
        &self.states[k] * (1.0 - w) + &self.states[k + 1] * w
    }

    /// Largest `‖G_n‖∞`, if residuals were recorded.
    pub fn max_residual(&self) -> Option<f64> {
        self.residuals
            .as_ref()
            .map(|r| r.iter().map(|g| g.amax()).fold(0.0, f64::max))
    }
}

// Dormand–Prince 5(4).
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One embedded step: fifth-order advance, fourth-order advance, and
/// `err = ‖high - low‖∞`.
#[derive(Debug, Clone, PartialEq)]
pub struct Rk45Step {
    pub high: DVector<f64>,
    pub low: DVector<f64>,
    pub err: f64,
}

pub fn rk45_step<F: VectorField + ?Sized>(field: &F, t: f64, u: &[f64], h: f64) -> Result<Rk45Step, OdeError> {
    if !(h > 0.0) {
        return Err(OdeError::InvalidInput("step must be positive"));
    }
    let d = field.dim();
    let mut k = [(); 7].map(|_| vec![0.0; d]);
    let mut stage = vec![0.0; d];
    for s in 0..7 {
        stage.copy_from_slice(u);
        for (j, kj) in k.iter().enumerate().take(s) {
            let a = A[s][j];
            if a != 0.0 {
                for (st, kv) in stage.iter_mut().zip(kj) {
                    *st += h * a * kv;
                }
            }
        }
        if stage.iter().any(|x| !x.is_finite()) {
            return Err(OdeError::Overflow { t: t + C[s] * h });
        }
        let (head, tail) = k.split_at_mut(s);
        let _ = head;
        field.rhs(t + C[s] * h, &stage, &mut tail[0]);
        if tail[0].iter().any(|x| !x.is_finite()) {
            return Err(OdeError::Overflow { t: t + C[s] * h });
        }
    }
    // Stage 7 was evaluated at the fifth-order solution.
    let high = DVector::from_column_slice(&stage);
    let mut low = DVector::from_column_slice(u);
    for (s, ks) in k.iter().enumerate() {
        let b = B4[s];
        if b != 0.0 {
            for (l, kv) in low.iter_mut().zip(ks) {
                *l += h * b * kv;
            }
        }
    }
    let err = high.iter().zip(low.iter()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if !err.is_finite() || low.iter().any(|x| !x.is_finite()) {
        return Err(OdeError::Overflow { t: t + h });
    }
    debug_assert!(B5.iter().zip(A[6].iter()).all(|(a, b)| a == b));
    Ok(Rk45Step { high, low, err })
}

/// Step-size controller and limits for [`integrate_adaptive_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveOptions {
    /// Absolute bound on the per-step embedded error estimate.
    pub tol: f64,
    pub safety: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    pub initial_step: Option<f64>,
    pub max_steps: usize,
}

impl AdaptiveOptions {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            safety: 0.9,
            min_factor: 0.2,
            max_factor: 5.0,
            initial_step: None,
            max_steps: 10_000_000,
        }
    }
}

fn initial_step<F: VectorField + ?Sized>(field: &F, t0: f64, u0: &[f64], span: f64, tol: f64) -> f64 {
    let d = field.dim();
    let mut f0 = vec![0.0; d];
    field.rhs(t0, u0, &mut f0);
    let d0 = dense::inf_norm(u0) / tol;
    let d1 = dense::inf_norm(&f0) / tol;
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    let h0 = h0.min(span);
    let u1: Vec<f64> = u0.iter().zip(&f0).map(|(u, f)| u + h0 * f).collect();
    let mut f1 = vec![0.0; d];
    field.rhs(t0 + h0, &u1, &mut f1);
    let diff: Vec<f64> = f1.iter().zip(&f0).map(|(a, b)| a - b).collect();
    let d2 = dense::inf_norm(&diff) / tol / h0;
    let dm = d1.max(d2);
    let h1 = if !(dm > 1e-15) {
        (h0 * 1e-3).max(1e-6)
    } else {
        libm::pow(0.01 / dm, 0.2)
    };
    (100.0 * h0).min(h1).min(span)
}

/// Adaptive Dormand–Prince integration on `[t0, t_end]` with absolute local
/// error control. The fourth-order solution is propagated and
/// `G_n = low - high` is recorded for every accepted step.
pub fn integrate_adaptive<F: VectorField + ?Sized>(
    field: &F,
    u0: &[f64],
    t0: f64,
    t_end: f64,
    tol: f64,
) -> Result<Trajectory, OdeError> {
    integrate_adaptive_with(field, u0, t0, t_end, &AdaptiveOptions::new(tol), |_, _| false)
}

/// As [`integrate_adaptive`], with explicit controller options and a hook run
/// on the current state just before each candidate step is computed. A hook
/// returning `true` has modified the state; the stored node is overwritten
/// with the modified value.
pub fn integrate_adaptive_with<F, H>(
    field: &F,
    u0: &[f64],
    t0: f64,
    t_end: f64,
    opts: &AdaptiveOptions,
    mut pre_step: H,
) -> Result<Trajectory, OdeError>
where
    F: VectorField + ?Sized,
    H: FnMut(f64, &mut [f64]) -> bool,
{
    if !(t_end > t0) {
        return Err(OdeError::InvalidInput("final time must exceed initial time"));
    }
    if !(opts.tol > 0.0) {
        return Err(OdeError::InvalidInput("tolerance must be positive"));
    }
    if u0.len() != field.dim() {
        return Err(OdeError::InvalidInput("initial state has wrong dimension"));
    }
    if u0.iter().any(|x| !x.is_finite()) {
        return Err(OdeError::Overflow { t: t0 });
    }
    let tol = opts.tol;
    let mut h = opts.initial_step.unwrap_or_else(|| initial_step(field, t0, u0, t_end - t0, tol));
    let mut t = t0;
    let mut u = u0.to_vec();
    let mut times = vec![t0];
    let mut states = vec![DVector::from_column_slice(u0)];
    let mut residuals = Vec::new();

    while t < t_end {
        if pre_step(t, &mut u) {
            *states.last_mut().expect("non-empty") = DVector::from_column_slice(&u);
        }
        let remaining = t_end - t;
        let mut last = false;
        if h >= remaining || remaining - h <= 1e-8 * h {
            h = remaining;
            last = true;
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(OdeError::StepUnderflow { t, h });
        }
        let step = rk45_step(field, t, &u, h)?;
        let err = step.err;
        if err <= tol {
            t = if last { t_end } else { t + h };
            residuals.push(&step.low - &step.high);
            u.copy_from_slice(step.low.as_slice());
            times.push(t);
            states.push(step.low);
            if times.len() > opts.max_steps {
                return Err(OdeError::TooManySteps(opts.max_steps));
            }
        }
        let factor = if err == 0.0 {
            opts.max_factor
        } else {
            (opts.safety * libm::pow(tol / err, 0.2)).clamp(opts.min_factor, opts.max_factor)
        };
        h *= factor;
    }
    let steps = times.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(Trajectory { times, states, steps, residuals: Some(residuals) })
}

/// Per-step propagators, drifts and steps plus the rescaling weight `θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionSet {
    pub propagators: Vec<DMatrix<f64>>,
    pub drifts: Vec<DVector<f64>>,
    pub steps: Vec<f64>,
    pub theta: f64,
}

impl TransitionSet {
    pub fn new(
        propagators: Vec<DMatrix<f64>>,
        drifts: Vec<DVector<f64>>,
        steps: Vec<f64>,
        theta: f64,
    ) -> Result<Self, OdeError> {
        let n = propagators.len();
        if n == 0 || drifts.len() != n || steps.len() != n {
            return Err(OdeError::InvalidInput("propagators, drifts and steps need equal non-zero length"));
        }
        if !(theta >= 0.0) {
            return Err(OdeError::InvalidInput("theta must be nonnegative"));
        }
        let d = propagators[0].nrows();
        if propagators.iter().any(|x| x.shape() != (d, d)) || drifts.iter().any(|f| f.len() != d) {
            return Err(OdeError::InvalidInput("inconsistent block dimensions"));
        }
        Ok(Self { propagators, drifts, steps, theta })
    }

    /// `X_n` by forward Euler on the variational equation and
    /// `f_n = f(t_{n+1}, x_{n+1})` for every step of `trajectory`.
    pub fn from_trajectory<F: VectorField + ?Sized>(
        field: &F,
        trajectory: &Trajectory,
        theta: f64,
        substeps: usize,
    ) -> Result<Self, OdeError> {
        let n = trajectory.len();
        let propagators = (0..n)
            .map(|k| variational_transition(field, trajectory, k, substeps))
            .collect::<Result<Vec<_>, _>>()?;
        let drifts = (0..n).map(|k| drift_vector(field, trajectory, k)).collect::<Result<Vec<_>, _>>()?;
        Self::new(propagators, drifts, trajectory.steps.clone(), theta)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.propagators[0].nrows()
    }

    pub fn with_theta(&self, theta: f64) -> Self {
        Self { theta, ..self.clone() }
    }
}

/// `X_n = Π_k (I + (h_n/s) Df(t_k, u(t_k)))` over `s` forward-Euler substeps,
/// with `u` linearly interpolated between the stored nodes.
pub fn variational_transition<F: VectorField + ?Sized>(
    field: &F,
    trajectory: &Trajectory,
    n: usize,
    substeps: usize,
) -> Result<DMatrix<f64>, OdeError> {
    if n >= trajectory.len() {
        return Err(OdeError::InvalidInput("step index out of range"));
    }
    if substeps == 0 {
        return Err(OdeError::InvalidInput("substeps must be positive"));
    }
    let d = field.dim();
    let h = trajectory.steps[n] / substeps as f64;
    let (xa, xb) = (&trajectory.states[n], &trajectory.states[n + 1]);
    let mut x = DMatrix::identity(d, d);
    for k in 0..substeps {
        let w = k as f64 / substeps as f64;
        let u = xa * (1.0 - w) + xb * w;
        let t = trajectory.times[n] + k as f64 * h;
        let mut step = field.jacobian(t, u.as_slice()) * h;
        for i in 0..d {
            step[(i, i)] += 1.0;
        }
        x = step * x;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(OdeError::Overflow { t: trajectory.times[n] });
    }
    Ok(x)
}

/// `f_n = f(t_{n+1}, x_{n+1})`.
pub fn drift_vector<F: VectorField + ?Sized>(
    field: &F,
    trajectory: &Trajectory,
    n: usize,
) -> Result<DVector<f64>, OdeError> {
    if n >= trajectory.len() {
        return Err(OdeError::InvalidInput("step index out of range"));
    }
    let mut out = vec![0.0; field.dim()];
    field.rhs(trajectory.times[n + 1], trajectory.states[n + 1].as_slice(), &mut out);
    Ok(DVector::from_vec(out))
}

/// How [`ab2_integrate`] obtains `y_1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ab2Starter {
    #[default]
    ExplicitMidpoint,
    ForwardEuler,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Ab2Error<E> {
    Rhs(E),
    Ode(OdeError),
}

/// Failure of a fixed-step run, with the nodes completed so far.
#[derive(Debug, Clone)]
pub struct Ab2Failure<E> {
    pub error: Ab2Error<E>,
    pub partial: Option<Trajectory>,
}

/// Two-step Adams–Bashforth on `[t0, t_end]`.
///
/// The interval is split into `N = round((t_end - t0)/dt)` equal steps, so
/// the last node lands on `t_end`. `rhs` may fail; the failure is returned
/// together with the partial trajectory.
pub fn ab2_integrate<E, R>(
    mut rhs: R,
    y0: &[f64],
    t0: f64,
    t_end: f64,
    dt: f64,
    starter: Ab2Starter,
) -> Result<Trajectory, Ab2Failure<E>>
where
    R: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
{
    let fail = |error: Ab2Error<E>, times: &[f64], states: &[DVector<f64>]| Ab2Failure {
        error,
        partial: Trajectory::from_nodes(times.to_vec(), states.to_vec(), None).ok(),
    };
    if !(dt > 0.0) || !(t_end > t0) {
        return Err(Ab2Failure {
            error: Ab2Error::Ode(OdeError::InvalidInput("need dt > 0 and t_end > t0")),
            partial: None,
        });
    }
    let p = y0.len();
    let n_steps = libm::round((t_end - t0) / dt).max(1.0) as usize;
    let h = (t_end - t0) / n_steps as f64;
    let node_time = |n: usize| if n == n_steps { t_end } else { t0 + n as f64 * h };

    let mut times = vec![t0];
    let mut states = vec![DVector::from_column_slice(y0)];
    let mut f_prev = vec![0.0; p];
    let mut f_cur = vec![0.0; p];
    let mut y = y0.to_vec();

    if let Err(e) = rhs(t0, &y, &mut f_prev) {
        return Err(fail(Ab2Error::Rhs(e), &times, &states));
    }
    match starter {
        Ab2Starter::ForwardEuler => {
            for (yi, fi) in y.iter_mut().zip(&f_prev) {
                *yi += h * fi;
            }
        }
        Ab2Starter::ExplicitMidpoint => {
            let mid: Vec<f64> = y.iter().zip(&f_prev).map(|(a, b)| a + 0.5 * h * b).collect();
            let mut f_mid = vec![0.0; p];
            if let Err(e) = rhs(t0 + 0.5 * h, &mid, &mut f_mid) {
                return Err(fail(Ab2Error::Rhs(e), &times, &states));
            }
            for (yi, fi) in y.iter_mut().zip(&f_mid) {
                *yi += h * fi;
            }
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(fail(Ab2Error::Ode(OdeError::Overflow { t: node_time(1) }), &times, &states));
    }
    times.push(node_time(1));
    states.push(DVector::from_column_slice(&y));

    for n in 1..n_steps {
        let t = node_time(n);
        if let Err(e) = rhs(t, &y, &mut f_cur) {
            return Err(fail(Ab2Error::Rhs(e), &times, &states));
        }
        for i in 0..p {
            y[i] += h * (1.5 * f_cur[i] - 0.5 * f_prev[i]);
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(fail(Ab2Error::Ode(OdeError::Overflow { t: node_time(n + 1) }), &times, &states));
        }
        core::mem::swap(&mut f_prev, &mut f_cur);
        times.push(node_time(n + 1));
        states.push(DVector::from_column_slice(&y));
    }
    let steps = times.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(Trajectory { times, states, steps, residuals: None })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Lorenz, LorenzParams};
    use approx::assert_relative_eq;

    fn zero_field(d: usize) -> FnField<impl Fn(f64, &[f64], &mut [f64])> {
        FnField::new(d, |_, _, out: &mut [f64]| out.fill(0.0))
    }

    fn growth(lambda: f64) -> FnField<impl Fn(f64, &[f64], &mut [f64])> {
        FnField::new(1, move |_, u: &[f64], out: &mut [f64]| out[0] = lambda * u[0])
    }

    #[test]
    fn constant_field_step_is_exact() {
        let s = rk45_step(&zero_field(3), 0.0, &[1.0, -2.0, 3.0], 0.1).unwrap();
        assert_eq!(s.high.as_slice(), &[1.0, -2.0, 3.0]);
        assert_eq!(s.low.as_slice(), &[1.0, -2.0, 3.0]);
        assert_eq!(s.err, 0.0);
    }

    #[test]
    fn exponential_step_matches_closed_form() {
        let s = rk45_step(&growth(1.0), 0.0, &[1.0], 0.1).unwrap();
        assert!((s.high[0] - libm::exp(0.1)).abs() < 1e-9);
        assert!(s.err <= 1e-8);
    }

    #[test]
    fn lorenz_step_error_is_small_and_consistent_with_halving() {
        let lorenz = Lorenz::new(LorenzParams::default());
        let u = [0.0, 1.0, 0.0];
        let s = rk45_step(&lorenz, 0.0, &u, 1e-3).unwrap();
        assert!(s.err <= 1e-9);
        // two half steps of the fifth-order solution as oracle
        let a = rk45_step(&lorenz, 0.0, &u, 5e-4).unwrap();
        let b = rk45_step(&lorenz, 5e-4, a.high.as_slice(), 5e-4).unwrap();
        assert!((&s.low - &b.high).amax() <= 1e-9);
    }

    #[test]
    fn step_rejects_nonpositive_h() {
        assert!(matches!(rk45_step(&growth(1.0), 0.0, &[1.0], 0.0), Err(OdeError::InvalidInput(_))));
    }

    #[test]
    fn overflow_reports_time() {
        let blow = FnField::new(1, |_, u: &[f64], out: &mut [f64]| out[0] = u[0] * u[0] * 1e300);
        match rk45_step(&blow, 2.0, &[1e10], 1.0) {
            Err(OdeError::Overflow { t }) => assert!(t >= 2.0),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn fixed_step_order_is_five() {
        // global error with the fifth-order solution propagated
        let field = growth(1.0);
        let run = |n: usize| {
            let h = 1.0 / n as f64;
            let mut u = 1.0;
            for k in 0..n {
                u = rk45_step(&field, k as f64 * h, &[u], h).unwrap().high[0];
            }
            (u - libm::exp(1.0)).abs()
        };
        let errs: Vec<f64> = [4, 8, 16, 32].iter().map(|&n| run(n)).collect();
        let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
        let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
        assert!(mean >= libm::pow(2.0, 4.5), "ratios {ratios:?}");
    }

    #[test]
    fn zero_field_trajectory_is_constant() {
        let traj = integrate_adaptive(&zero_field(2), &[3.0, 4.0], 0.0, 1.0, 1e-6).unwrap();
        assert_eq!(*traj.times.last().unwrap(), 1.0);
        for s in &traj.states {
            assert_eq!(s.as_slice(), &[3.0, 4.0]);
        }
        assert!(traj.residuals.as_ref().unwrap().iter().all(|g| g.amax() == 0.0));
    }

    #[test]
    fn lorenz_residuals_bounded_and_close_to_tight_run() {
        let lorenz = Lorenz::new(LorenzParams::default());
        let u0 = [0.0, 1.0, 0.0];
        let loose = integrate_adaptive(&lorenz, &u0, 0.0, 1.0, 1e-4).unwrap();
        assert!(loose.max_residual().unwrap() <= 1e-4);
        let tight = integrate_adaptive(&lorenz, &u0, 0.0, 1.0, 1e-10).unwrap();
        for (t, x) in loose.times.iter().zip(&loose.states) {
            let reference = dense_reference(&tight, &lorenz, *t);
            assert!((x - reference).amax() <= 1e-2, "t = {t}");
        }
        assert_eq!(*loose.times.last().unwrap(), 1.0);
        for (w, h) in loose.times.windows(2).zip(&loose.steps) {
            assert_eq!(w[1] - w[0], *h);
        }
    }

    // Re-integrate from the nearest tight node to hit t exactly.
    fn dense_reference(tight: &Trajectory, field: &Lorenz, t: f64) -> DVector<f64> {
        let k = tight.times.partition_point(|&s| s <= t).saturating_sub(1);
        let t0 = tight.times[k];
        if t - t0 <= 0.0 {
            return tight.states[k].clone();
        }
        integrate_adaptive(field, tight.states[k].as_slice(), t0, t, 1e-12)
            .unwrap()
            .final_state()
            .clone()
    }

    #[test]
    fn lorenz_long_run_stays_on_attractor() {
        let lorenz = Lorenz::new(LorenzParams::default());
        let traj = integrate_adaptive(&lorenz, &[0.0, 1.0, 0.0], 0.0, 100.0, 1e-8).unwrap();
        assert!(traj.states.iter().all(|s| s.amax() <= 60.0));
        assert!(traj.max_residual().unwrap() <= 1e-8);
    }

    #[test]
    fn residuals_are_reproducible_by_replay() {
        let lorenz = Lorenz::new(LorenzParams::default());
        let traj = integrate_adaptive(&lorenz, &[0.0, 1.0, 0.0], 0.0, 2.0, 1e-6).unwrap();
        let g = traj.residuals.as_ref().unwrap();
        for n in (0..traj.len()).step_by(7) {
            let s = rk45_step(&lorenz, traj.times[n], traj.states[n].as_slice(), traj.steps[n]).unwrap();
            // replay with the stored difference may differ from the step the
            // integrator took by the rounding of t_{n+1} - t_n
            assert_relative_eq!((&s.low - &s.high).amax(), g[n].amax(), max_relative = 1e-6, epsilon = 1e-15);
            assert!((&s.low - &traj.states[n + 1]).amax() <= 1e-12);
        }
    }

    #[test]
    fn stiffness_is_reported() {
        let stiff = FnField::new(1, |_, u: &[f64], out: &mut [f64]| out[0] = -1e18 * u[0] + 1e18);
        let err = integrate_adaptive(&stiff, &[0.0], 0.0, 1.0, 1e-12).unwrap_err();
        assert!(matches!(err, OdeError::StepUnderflow { .. } | OdeError::TooManySteps(_)), "{err:?}");
    }

    #[test]
    fn rejects_bad_interval_and_tolerance() {
        assert!(integrate_adaptive(&growth(1.0), &[1.0], 1.0, 1.0, 1e-6).is_err());
        assert!(integrate_adaptive(&growth(1.0), &[1.0], 0.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn transition_of_zero_field_is_identity() {
        let traj = integrate_adaptive(&zero_field(2), &[1.0, 1.0], 0.0, 1.0, 1e-6).unwrap();
        let x = variational_transition(&zero_field(2), &traj, 0, 1).unwrap();
        assert_eq!(x, DMatrix::identity(2, 2));
        assert_eq!(drift_vector(&zero_field(2), &traj, 0).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_euler_propagator() {
        let traj = Trajectory::from_nodes(
            vec![0.0, 0.01],
            vec![DVector::from_element(1, 1.0), DVector::from_element(1, 0.99)],
            None,
        )
        .unwrap();
        let field = crate::models::Linear::new(DMatrix::from_element(1, 1, -1.0));
        let x = variational_transition(&field, &traj, 0, 1).unwrap();
        assert_relative_eq!(x[(0, 0)], 0.99, epsilon = 1e-15);
    }

    #[test]
    fn drift_is_field_at_next_node() {
        let traj = Trajectory::from_nodes(
            vec![0.0, 0.5],
            vec![DVector::from_element(1, 1.0), DVector::from_element(1, 2.0)],
            None,
        )
        .unwrap();
        assert_eq!(drift_vector(&growth(1.0), &traj, 0).unwrap()[0], 2.0);
        let lorenz = Lorenz::new(LorenzParams::default());
        let traj = Trajectory::from_nodes(
            vec![0.0, 0.1],
            vec![DVector::from_element(3, 0.0), DVector::from_element(3, 1.0)],
            None,
        )
        .unwrap();
        let f = drift_vector(&lorenz, &traj, 0).unwrap();
        assert_relative_eq!(f[0], 0.0);
        assert_relative_eq!(f[1], 26.0);
        assert_relative_eq!(f[2], -5.0 / 3.0, epsilon = 1e-15);
    }

    // Frozen-coefficient oracle: exp(h J) by a truncated Taylor series.
    fn expm_taylor(m: &DMatrix<f64>) -> DMatrix<f64> {
        let d = m.nrows();
        let mut term = DMatrix::identity(d, d);
        let mut sum = term.clone();
        for k in 1..30 {
            term = &term * m / k as f64;
            sum += &term;
        }
        sum
    }

    #[test]
    fn substepped_transition_matches_frozen_exponential() {
        let lorenz = Lorenz::new(LorenzParams::default());
        let traj = integrate_adaptive(&lorenz, &[1.0, 2.0, 20.0], 0.0, 0.05, 1e-10).unwrap();
        let h = 1e-3;
        let x1 = rk45_step(&lorenz, 0.0, &[1.0, 2.0, 20.0], h).unwrap().high;
        let single = Trajectory::from_nodes(
            vec![0.0, h],
            vec![DVector::from_column_slice(&[1.0, 2.0, 20.0]), x1],
            None,
        )
        .unwrap();
        let x = variational_transition(&lorenz, &single, 0, 16).unwrap();
        let oracle = expm_taylor(&(lorenz.jacobian(0.0, &[1.0, 2.0, 20.0]) * h));
        assert!((&x - &oracle).amax() <= 1e-4);
        assert!(!traj.is_empty());
    }

    #[test]
    fn substep_doubling_converges_at_first_order() {
        let lorenz = Lorenz::new(LorenzParams::default());
        let traj = integrate_adaptive(&lorenz, &[1.0, 2.0, 20.0], 0.0, 0.5, 1e-4).unwrap();
        let n = traj.len() / 2;
        let xs: Vec<DMatrix<f64>> = [4, 8, 16, 32, 64]
            .iter()
            .map(|&s| variational_transition(&lorenz, &traj, n, s).unwrap())
            .collect();
        for w in xs.windows(3) {
            let a = (&w[1] - &w[0]).norm();
            let b = (&w[2] - &w[1]).norm();
            assert!(b <= 0.6 * a, "{b} vs {a}");
        }
    }

    #[test]
    fn fd_jacobian_matches_analytic() {
        let lorenz = Lorenz::new(LorenzParams::default());
        for u in [[1.0, -3.0, 12.0], [-8.0, 2.5, 30.0], [0.1, 0.2, 0.3]] {
            let a = lorenz.jacobian(0.0, &u);
            let f = fd_jacobian(&lorenz, 0.0, &u);
            assert!((&a - &f).amax() <= 1e-4 * a.amax());
        }
    }

    #[test]
    fn ab2_constant_and_linear() {
        let zero = |_: f64, _: &[f64], out: &mut [f64]| -> Result<(), ()> {
            out.fill(0.0);
            Ok(())
        };
        let traj = ab2_integrate(zero, &[2.0], 0.0, 1.0, 0.1, Ab2Starter::ExplicitMidpoint).unwrap();
        assert!(traj.states.iter().all(|s| s[0] == 2.0));

        let one = |_: f64, _: &[f64], out: &mut [f64]| -> Result<(), ()> {
            out[0] = 1.0;
            Ok(())
        };
        let traj = ab2_integrate(one, &[0.0], 0.0, 1.0, 0.1, Ab2Starter::ExplicitMidpoint).unwrap();
        assert_eq!(traj.len(), 10);
        assert_eq!(*traj.times.last().unwrap(), 1.0);
        assert!((traj.final_state()[0] - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn ab2_decay_matches_exponential() {
        let decay = |_: f64, y: &[f64], out: &mut [f64]| -> Result<(), ()> {
            out[0] = -y[0];
            Ok(())
        };
        let traj = ab2_integrate(decay, &[1.0], 0.0, 1.0, 1e-3, Ab2Starter::ExplicitMidpoint).unwrap();
        assert!((traj.final_state()[0] - libm::exp(-1.0)).abs() <= 1e-5);
    }

    #[test]
    fn ab2_reports_partial_trajectory_on_failure() {
        let failing = |t: f64, y: &[f64], out: &mut [f64]| -> Result<(), &'static str> {
            if t > 0.35 {
                return Err("boom");
            }
            out[0] = y[0];
            Ok(())
        };
        let fail = ab2_integrate(failing, &[1.0], 0.0, 1.0, 0.1, Ab2Starter::ExplicitMidpoint).unwrap_err();
        assert_eq!(fail.error, Ab2Error::Rhs("boom"));
        // nodes 0.0..=0.4 exist; the rhs call at t = 0.4 fails
        assert_eq!(fail.partial.unwrap().times.len(), 5);
    }
}
