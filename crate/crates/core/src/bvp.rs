//! Two-point boundary value problems by 3-stage Lobatto IIIA collocation
//! and damped Newton.
//!
//! On each mesh interval `[s_j, s_{j+1}]` with `h = s_{j+1} − s_j` the
//! stage at the midpoint is eliminated,
//! `z_m = (z_j + z_{j+1})/2 + h (f_j − f_{j+1})/8`, leaving the condensed
//! equations `Φ_j = z_{j+1} − z_j − h (f_j + 4 f_m + f_{j+1})/6 = 0`.
//! The residual is `[left_bc(z_0); Φ_0; …; Φ_{M−1}; right_bc(z_M)]`.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::dense::inf_norm;
use crate::ode::{integrate_adaptive_with, AdaptiveOptions, OdeError, VectorField};

pub trait BvpProblem {
    fn dim(&self) -> usize;
    fn interval(&self) -> (f64, f64);
    fn rhs(&self, t: f64, z: &[f64], out: &mut [f64]);
    /// Number of residuals imposed at the left end; the right end takes
    /// the remaining `dim − n_left`.
    fn n_left(&self) -> usize;
    fn left_bc(&self, za: &[f64], out: &mut [f64]);
    fn right_bc(&self, zb: &[f64], out: &mut [f64]);
    /// Transform applied to a converged solution, node by node. Returns
    /// whether anything changed.
    fn post_converge(&self, _mesh: &[f64], _values: &mut [DVector<f64>]) -> bool {
        false
    }
}

impl<P: BvpProblem + ?Sized> BvpProblem for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn interval(&self) -> (f64, f64) {
        (**self).interval()
    }
    fn rhs(&self, t: f64, z: &[f64], out: &mut [f64]) {
        (**self).rhs(t, z, out)
    }
    fn n_left(&self) -> usize {
        (**self).n_left()
    }
    fn left_bc(&self, za: &[f64], out: &mut [f64]) {
        (**self).left_bc(za, out)
    }
    fn right_bc(&self, zb: &[f64], out: &mut [f64]) {
        (**self).right_bc(zb, out)
    }
    fn post_converge(&self, mesh: &[f64], values: &mut [DVector<f64>]) -> bool {
        (**self).post_converge(mesh, values)
    }
}

/// Values on a mesh `a = s_0 < … < s_M = b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshFunction {
    pub mesh: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

impl MeshFunction {
    /// The constant function `value` on `mesh`.
    pub fn constant(mesh: Vec<f64>, value: &[f64]) -> Self {
        let values = vec![DVector::from_column_slice(value); mesh.len()];
        Self { mesh, values }
    }
}

/// `intervals + 1` equally spaced points on `[a, b]`.
pub fn uniform_mesh(a: f64, b: f64, intervals: usize) -> Vec<f64> {
    let n = intervals.max(1);
    (0..=n).map(|j| if j == n { b } else { a + (b - a) * j as f64 / n as f64 }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BvpSolution {
    pub mesh: Vec<f64>,
    pub values: Vec<DVector<f64>>,
    /// `f(s_j, z_j)`, used by the interpolant.
    pub slopes: Vec<DVector<f64>>,
    pub newton_iterations: usize,
    /// `∞`-norm of the full collocation residual.
    pub max_residual: f64,
}

impl BvpSolution {
    pub fn left(&self) -> &DVector<f64> {
        &self.values[0]
    }

    pub fn right(&self) -> &DVector<f64> {
        self.values.last().expect("non-empty mesh")
    }

    /// Piecewise cubic Hermite interpolant, clamped to the interval.
    pub fn eval(&self, t: f64) -> DVector<f64> {
        let m = self.mesh.len();
        let t = t.clamp(self.mesh[0], self.mesh[m - 1]);
        let j = (self.mesh.partition_point(|&s| s <= t).max(1) - 1).min(m - 2);
        let (s0, s1) = (self.mesh[j], self.mesh[j + 1]);
        let h = s1 - s0;
        let x = (t - s0) / h;
        let h00 = (1.0 + 2.0 * x) * (1.0 - x) * (1.0 - x);
        let h10 = x * (1.0 - x) * (1.0 - x);
        let h01 = x * x * (3.0 - 2.0 * x);
        let h11 = x * x * (x - 1.0);
        &self.values[j] * h00 + &self.slopes[j] * (h10 * h) + &self.values[j + 1] * h01 + &self.slopes[j + 1] * (h11 * h)
    }

    pub fn as_mesh_function(&self) -> MeshFunction {
        MeshFunction { mesh: self.mesh.clone(), values: self.values.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BvpError {
    #[error("invalid input: {0}")]
    InvalidInput(&'static str),
    #[error("Newton stagnated at residual {residual:e} after {iterations} iterations")]
    Stagnation { residual: f64, iterations: usize, best: Box<MeshFunction> },
    #[error("Newton did not converge in {iterations} iterations (residual {residual:e})")]
    MaxIterations { residual: f64, iterations: usize, best: Box<MeshFunction> },
    #[error("singular collocation jacobian")]
    SingularJacobian { best: Box<MeshFunction> },
    #[error("refined mesh needs {points} points, maximum is {max}")]
    MeshExhausted { points: usize, max: usize },
    #[error(transparent)]
    Ode(#[from] OdeError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BvpOptions {
    /// Bound on the `∞`-norm of the collocation residual.
    pub tol: f64,
    pub max_newton: usize,
    pub max_halvings: usize,
    /// Solve once more on the mesh with all midpoints inserted.
    pub refine: bool,
    pub max_points: usize,
}

impl BvpOptions {
    pub fn new(tol: f64) -> Self {
        Self { tol, max_newton: 50, max_halvings: 8, refine: false, max_points: 10_000 }
    }
}

struct Collocation<'a, P: ?Sized> {
    problem: &'a P,
    mesh: &'a [f64],
    d: usize,
}

impl<P: BvpProblem + ?Sized> Collocation<'_, P> {
    fn nodes(&self) -> usize {
        self.mesh.len()
    }

    fn slope(&self, j: usize, z: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.d];
        self.problem.rhs(self.mesh[j], z, &mut f);
        f
    }

    /// `Φ_j` from node values and slopes.
    fn interval_residual(&self, j: usize, z0: &[f64], f0: &[f64], z1: &[f64], f1: &[f64], out: &mut [f64]) {
        let d = self.d;
        let h = self.mesh[j + 1] - self.mesh[j];
        let zm: Vec<f64> = (0..d).map(|i| 0.5 * (z0[i] + z1[i]) + h * (f0[i] - f1[i]) / 8.0).collect();
        let mut fm = vec![0.0; d];
        self.problem.rhs(0.5 * (self.mesh[j] + self.mesh[j + 1]), &zm, &mut fm);
        for i in 0..d {
            out[i] = z1[i] - z0[i] - h * (f0[i] + 4.0 * fm[i] + f1[i]) / 6.0;
        }
    }

    fn residual(&self, z: &[f64]) -> Vec<f64> {
        let d = self.d;
        let m = self.nodes();
        let nl = self.problem.n_left();
        let slopes: Vec<Vec<f64>> = (0..m).map(|j| self.slope(j, &z[j * d..(j + 1) * d])).collect();
        let mut out = vec![0.0; m * d];
        self.problem.left_bc(&z[..d], &mut out[..nl]);
        for j in 0..m - 1 {
            let row = nl + j * d;
            self.interval_residual(
                j,
                &z[j * d..(j + 1) * d],
                &slopes[j],
                &z[(j + 1) * d..(j + 2) * d],
                &slopes[j + 1],
                &mut out[row..row + d],
            );
        }
        self.problem.right_bc(&z[(m - 1) * d..], &mut out[nl + (m - 1) * d..]);
        out
    }

    /// Forward-difference jacobian exploiting that node `j` only enters
    /// `Φ_{j−1}`, `Φ_j` and the boundary residuals.
    fn jacobian(&self, z: &[f64]) -> DMatrix<f64> {
        let d = self.d;
        let m = self.nodes();
        let nl = self.problem.n_left();
        let n = m * d;
        let base = self.residual(z);
        let slopes: Vec<Vec<f64>> = (0..m).map(|j| self.slope(j, &z[j * d..(j + 1) * d])).collect();
        let mut jac = DMatrix::zeros(n, n);
        let mut zp = z.to_vec();
        let mut buf = vec![0.0; d];
        for j in 0..m {
            for c in 0..d {
                let col = j * d + c;
                let eps = 1e-7 * z[col].abs().max(1.0);
                zp[col] = z[col] + eps;
                let eps = zp[col] - z[col];
                let zj = &zp[j * d..(j + 1) * d];
                let fj = self.slope(j, zj);
                if j == 0 {
                    self.problem.left_bc(zj, &mut buf[..nl]);
                    for r in 0..nl {
                        jac[(r, col)] = (buf[r] - base[r]) / eps;
                    }
                }
                if j == m - 1 {
                    let nr = d - nl;
                    self.problem.right_bc(zj, &mut buf[..nr]);
                    for r in 0..nr {
                        jac[(nl + (m - 1) * d + r, col)] = (buf[r] - base[nl + (m - 1) * d + r]) / eps;
                    }
                }
                if j > 0 {
                    let row = nl + (j - 1) * d;
                    self.interval_residual(j - 1, &z[(j - 1) * d..j * d], &slopes[j - 1], zj, &fj, &mut buf);
                    for r in 0..d {
                        jac[(row + r, col)] = (buf[r] - base[row + r]) / eps;
                    }
                }
                if j + 1 < m {
                    let row = nl + j * d;
                    self.interval_residual(j, zj, &fj, &z[(j + 1) * d..(j + 2) * d], &slopes[j + 1], &mut buf);
                    for r in 0..d {
                        jac[(row + r, col)] = (buf[r] - base[row + r]) / eps;
                    }
                }
                zp[col] = z[col];
            }
        }
        jac
    }

    fn to_mesh_function(&self, z: &[f64]) -> MeshFunction {
        MeshFunction {
            mesh: self.mesh.to_vec(),
            values: z.chunks(self.d).map(DVector::from_column_slice).collect(),
        }
    }
}

fn validate<P: BvpProblem + ?Sized>(problem: &P, guess: &MeshFunction, opts: &BvpOptions) -> Result<(), BvpError> {
    let d = problem.dim();
    let (a, b) = problem.interval();
    if d == 0 || problem.n_left() > d {
        return Err(BvpError::InvalidInput("need dim > 0 and n_left ≤ dim"));
    }
    if !(opts.tol > 0.0) {
        return Err(BvpError::InvalidInput("tolerance must be positive"));
    }
    let m = &guess.mesh;
    if m.len() < 2 || m.len() != guess.values.len() {
        return Err(BvpError::InvalidInput("guess needs at least two nodes with one value each"));
    }
    if m.len() > opts.max_points {
        return Err(BvpError::MeshExhausted { points: m.len(), max: opts.max_points });
    }
    if m[0] != a || m[m.len() - 1] != b || m.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(BvpError::InvalidInput("mesh must increase strictly from a to b"));
    }
    if guess.values.iter().any(|v| v.len() != d || v.iter().any(|x| !x.is_finite())) {
        return Err(BvpError::InvalidInput("guess values must be finite with the problem dimension"));
    }
    Ok(())
}

fn two_norm(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// Damped Newton: full steps are halved until the 2-norm of the residual
/// decreases; convergence is judged in the `∞`-norm.
fn newton<P: BvpProblem + ?Sized>(problem: &P, guess: &MeshFunction, opts: &BvpOptions) -> Result<BvpSolution, BvpError> {
    let d = problem.dim();
    let col = Collocation { problem, mesh: &guess.mesh, d };
    let mut z: Vec<f64> = guess.values.iter().flat_map(|v| v.iter().copied()).collect();
    let mut res = col.residual(&z);
    let mut norm = inf_norm(&res);
    let mut merit = two_norm(&res);
    let mut iterations = 0;
    while !(norm <= opts.tol) {
        if iterations == opts.max_newton {
            return Err(BvpError::MaxIterations {
                residual: norm,
                iterations,
                best: Box::new(col.to_mesh_function(&z)),
            });
        }
        let jac = col.jacobian(&z);
        let rhs = DVector::from_iterator(res.len(), res.iter().map(|r| -r));
        let step = match jac.lu().solve(&rhs) {
            Some(s) if s.iter().all(|x| x.is_finite()) => s,
            _ => return Err(BvpError::SingularJacobian { best: Box::new(col.to_mesh_function(&z)) }),
        };
        iterations += 1;
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let trial: Vec<f64> = z.iter().zip(step.iter()).map(|(a, s)| a + lambda * s).collect();
            let trial_res = col.residual(&trial);
            let trial_merit = two_norm(&trial_res);
            if trial_merit < merit {
                norm = inf_norm(&trial_res);
                merit = trial_merit;
                z = trial;
                res = trial_res;
                accepted = true;
                break;
            }
            lambda *= 0.5;
        }
        if !accepted {
            return Err(BvpError::Stagnation { residual: norm, iterations, best: Box::new(col.to_mesh_function(&z)) });
        }
    }
    let values: Vec<DVector<f64>> = z.chunks(d).map(DVector::from_column_slice).collect();
    let slopes = (0..values.len()).map(|j| DVector::from_vec(col.slope(j, values[j].as_slice()))).collect();
    Ok(BvpSolution { mesh: guess.mesh.clone(), values, slopes, newton_iterations: iterations, max_residual: norm })
}

/// Solves `problem` starting from `guess` on the guess mesh.
///
/// After convergence the problem's `post_converge` transform is applied; if
/// it changed the solution, Newton is run once more from the result.
pub fn solve_bvp<P: BvpProblem + ?Sized>(problem: &P, guess: &MeshFunction, opts: &BvpOptions) -> Result<BvpSolution, BvpError> {
    validate(problem, guess, opts)?;
    let mut sol = newton(problem, guess, opts)?;
    if opts.refine {
        let n = 2 * sol.mesh.len() - 1;
        if n > opts.max_points {
            return Err(BvpError::MeshExhausted { points: n, max: opts.max_points });
        }
        let mut mesh = Vec::with_capacity(n);
        for w in sol.mesh.windows(2) {
            mesh.push(w[0]);
            mesh.push(0.5 * (w[0] + w[1]));
        }
        mesh.push(*sol.mesh.last().expect("non-empty"));
        let values = mesh.iter().map(|&t| sol.eval(t)).collect();
        let iterations = sol.newton_iterations;
        sol = newton(problem, &MeshFunction { mesh, values }, opts)?;
        sol.newton_iterations += iterations;
    }
    let mut values = sol.values.clone();
    if problem.post_converge(&sol.mesh, &mut values) {
        let iterations = sol.newton_iterations;
        sol = newton(problem, &MeshFunction { mesh: sol.mesh.clone(), values }, opts)?;
        sol.newton_iterations += iterations;
    }
    Ok(sol)
}

/// A guess on `mesh` by integrating `field` from `za` at `mesh[0]`, node to
/// node, with `pre_step` run before every candidate step.
pub fn ivp_guess<F, H>(field: &F, za: &[f64], mesh: &[f64], tol: f64, mut pre_step: H) -> Result<MeshFunction, BvpError>
where
    F: VectorField + ?Sized,
    H: FnMut(f64, &mut [f64]) -> bool,
{
    if mesh.len() < 2 || mesh.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(BvpError::InvalidInput("mesh must increase strictly"));
    }
    let opts = AdaptiveOptions::new(tol);
    let mut values = Vec::with_capacity(mesh.len());
    let mut cur = DVector::from_column_slice(za);
    pre_step(mesh[0], cur.as_mut_slice());
    values.push(cur.clone());
    for w in mesh.windows(2) {
        let traj = integrate_adaptive_with(field, cur.as_slice(), w[0], w[1], &opts, &mut pre_step)?;
        cur = traj.final_state().clone();
        values.push(cur.clone());
    }
    Ok(MeshFunction { mesh: mesh.to_vec(), values })
}
