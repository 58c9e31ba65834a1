//! Continuous Householder triangularisation of a linearised flow.
//!
//! A chain of `p` reflectors `Q_i = diag(I_{i−1}, P_i)`, with
//! `P_i = I − 2wwᵀ/(wᵀw)` and `w = (1, ŵ_i)`, defines `Q = Q_1⋯Q_p`. With
//! `u = Qz` the system `u̇ = L(t)u + N(u, t)` becomes
//! `ż = L_p z + Qᵀ N(Qz, t)` where `L_p = QᵀLQ − QᵀQ̇` is block upper
//! triangular, `L_p = [[A, C], [0, B]]`, and `A` (`p×p`) is upper triangular.
//! The `ŵ_i` follow the ODE returned by [`w_rhs`].

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector};

use crate::ode::{integrate_adaptive_with, AdaptiveOptions, OdeError, Trajectory, VectorField};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum HouseholderError {
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(&'static str),
    #[error("reembedding a zero vector")]
    ZeroVector,
    #[error(transparent)]
    Ode(#[from] OdeError),
}

/// `w = (1, ŵ)` and `s = wᵀw`.
fn full_w(what: &[f64]) -> (DVector<f64>, f64) {
    let mut w = DVector::zeros(what.len() + 1);
    w[0] = 1.0;
    w.rows_mut(1, what.len()).copy_from_slice(what);
    let s = w.norm_squared();
    (w, s)
}

/// The reflector `P = I − 2vvᵀ` of size `len(ŵ) + 1`. The unit vector is
/// `v = −σ w/‖w‖`, so `e_1ᵀv = −σ/‖w‖`; `P` itself does not depend on `σ`.
pub fn reflector_from_w(what: &DVector<f64>, sigma: f64) -> DMatrix<f64> {
    let v = householder_unit(what, sigma);
    let m = v.len();
    DMatrix::identity(m, m) - &v * v.transpose() * 2.0
}

/// The unit Householder vector `v = −σ w/‖w‖`.
pub fn householder_unit(what: &DVector<f64>, sigma: f64) -> DVector<f64> {
    let (w, s) = full_w(what.as_slice());
    w * (-sigma / libm::sqrt(s))
}

/// `ŵ` and `σ` for which `P x = σ‖x‖e_1`, with the sign chosen so that
/// `ŵᵀŵ ≤ 1`: `σ = −1` if `x_1 ≥ 0`, else `+1`.
pub fn what_from_column(x: &[f64]) -> (DVector<f64>, f64) {
    let norm = libm::sqrt(x.iter().map(|v| v * v).sum());
    let m = x.len();
    if norm == 0.0 {
        return (DVector::zeros(m - 1), -1.0);
    }
    let sigma = if x[0] >= 0.0 { -1.0 } else { 1.0 };
    // first column of P is q = σx/‖x‖, and ŵ = −q̂/(1 − q_1)
    let q1 = sigma * x[0] / norm;
    let what = DVector::from_fn(m - 1, |i, _| -(sigma * x[i + 1] / norm) / (1.0 - q1));
    (what, sigma)
}

/// Offset of the trailing block acted on by `ŵ` in a `d×d` matrix.
fn offset(d: usize, what: &DVector<f64>) -> usize {
    d - 1 - what.len()
}

/// `dŵ/dt` keeping the first column of the trailing block of
/// `P M P − P Ṗ` triangular, where `M = [[μ, rᵀ], [l, M̂]]` is the trailing
/// block of `lprev` at the offset implied by `len(ŵ)`:
///
/// `ŵ̇ = (1 − s/2) l + M̂ŵ + (μ + ŵᵀl − 2 wᵀMw / s) ŵ`.
pub fn w_rhs(lprev: &DMatrix<f64>, what: &DVector<f64>) -> DVector<f64> {
    let d = lprev.nrows();
    let k = offset(d, what);
    let m = lprev.view((k, k), (d - k, d - k));
    let (w, s) = full_w(what.as_slice());
    let mu = m[(0, 0)];
    let l = m.view((1, 0), (d - k - 1, 1));
    let mhat = m.view((1, 1), (d - k - 1, d - k - 1));
    let c = w.dot(&(m * &w));
    let wl = what.dot(&l.column(0));
    let mut out = l.column(0) * (1.0 - 0.5 * s);
    out += mhat * what;
    out += what * (mu + wl - 2.0 * c / s);
    out
}

/// `L_i = Q_i L_{i−1} Q_i − Q_i Q̇_i` written in `w` (zero-padded to size
/// `d`) and `ẇ`:
///
/// `L − (2/s)(w wᵀL + L w wᵀ) + (4 wᵀLw/s²) wwᵀ − (2/s)(wẇᵀ − ẇwᵀ)`.
pub fn lq_update(lprev: &DMatrix<f64>, what: &DVector<f64>, dwhat: &DVector<f64>) -> DMatrix<f64> {
    let d = lprev.nrows();
    let k = offset(d, what);
    let mut w = DVector::zeros(d);
    w[k] = 1.0;
    w.rows_mut(k + 1, what.len()).copy_from(what);
    let mut wd = DVector::zeros(d);
    wd.rows_mut(k + 1, what.len()).copy_from(dwhat);
    let s = w.norm_squared();
    let wtl = lprev.tr_mul(&w);
    let lw = lprev * &w;
    let c = w.dot(&lw);
    let mut out = lprev.clone();
    out -= (&w * wtl.transpose() + &lw * w.transpose()) * (2.0 / s);
    out += &w * w.transpose() * (4.0 * c / (s * s));
    out -= (&w * wd.transpose() - &wd * w.transpose()) * (2.0 / s);
    out
}

/// The other Householder vector for the same column: `ŵ' = −ŵ/(ŵᵀŵ)`, to
/// be paired with `−σ`. Maps `ŵᵀŵ > 1` into the unit ball.
pub fn reembed(what: &DVector<f64>) -> Result<DVector<f64>, HouseholderError> {
    let s = what.norm_squared();
    if s == 0.0 {
        return Err(HouseholderError::ZeroVector);
    }
    Ok(what * (-1.0 / s))
}

/// The `ŵ_i` and `σ_i` of `Q(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HouseholderChain {
    d: usize,
    whats: Vec<DVector<f64>>,
    sigmas: Vec<f64>,
}

impl HouseholderChain {
    pub fn new(d: usize, whats: Vec<DVector<f64>>, sigmas: Vec<f64>) -> Result<Self, HouseholderError> {
        if whats.len() != sigmas.len() || whats.len() >= d.max(1) {
            return Err(HouseholderError::InvalidDimensions("need 1 ≤ p < d reflectors with one sign each"));
        }
        if whats.iter().enumerate().any(|(i, w)| w.len() != d - 1 - i) {
            return Err(HouseholderError::InvalidDimensions("ŵ_i must have length d − i"));
        }
        if sigmas.iter().any(|s| s.abs() != 1.0) {
            return Err(HouseholderError::InvalidDimensions("signs must be ±1"));
        }
        Ok(Self { d, whats, sigmas })
    }

    /// `ŵ_i = 0`, `σ_i = −1`: the chain obtained from `X = I`.
    pub fn cold(d: usize, p: usize) -> Self {
        assert!(p < d, "need p < d");
        Self { d, whats: (0..p).map(|i| DVector::zeros(d - 1 - i)).collect(), sigmas: vec![-1.0; p] }
    }

    /// Householder triangularisation of the first `p` columns of `x`.
    pub fn from_matrix(x: &DMatrix<f64>, p: usize) -> Result<Self, HouseholderError> {
        Self::triangularise(x, p, None)
    }

    /// As [`Self::from_matrix`], taking the non-canonical embedding for
    /// reflector `flip`.
    fn triangularise(x: &DMatrix<f64>, p: usize, flip: Option<usize>) -> Result<Self, HouseholderError> {
        let d = x.nrows();
        if !x.is_square() || p >= d {
            return Err(HouseholderError::InvalidDimensions("need square matrix and p < d"));
        }
        let mut a = x.clone();
        let mut whats = Vec::with_capacity(p);
        let mut sigmas = Vec::with_capacity(p);
        for i in 0..p {
            let col: Vec<f64> = a.view((i, i), (d - i, 1)).iter().copied().collect();
            let (mut what, mut sigma) = what_from_column(&col);
            if flip == Some(i) {
                what = reembed(&what)?;
                sigma = -sigma;
            }
            let pm = reflector_from_w(&what, sigma);
            let block = &pm * a.view((i, 0), (d - i, d));
            a.view_mut((i, 0), (d - i, d)).copy_from(&block);
            whats.push(what);
            sigmas.push(sigma);
        }
        Ok(Self { d, whats, sigmas })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn p(&self) -> usize {
        self.whats.len()
    }

    pub fn whats(&self) -> &[DVector<f64>] {
        &self.whats
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Number of scalars in the stacked `ŵ_1, …, ŵ_p`.
    pub fn flat_len(d: usize, p: usize) -> usize {
        (0..p).map(|i| d - 1 - i).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.whats.iter().flat_map(|w| w.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut pos = 0;
        for w in &mut self.whats {
            let n = w.len();
            w.copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
    }

    /// The full `d×d` matrix `Q_i = diag(I_{i−1}, P_i)` (`i` from 0).
    pub fn reflector(&self, i: usize) -> DMatrix<f64> {
        let mut q = DMatrix::identity(self.d, self.d);
        q.view_mut((i, i), (self.d - i, self.d - i))
            .copy_from(&reflector_from_w(&self.whats[i], self.sigmas[i]));
        q
    }

    /// `Q = Q_1⋯Q_p`.
    pub fn q(&self) -> DMatrix<f64> {
        let mut q = DMatrix::identity(self.d, self.d);
        for i in 0..self.p() {
            q *= self.reflector(i);
        }
        q
    }

    /// `dŵ_i/dt` for the coefficient matrix `l`, and the triangularised
    /// `L_p`.
    pub fn rates(&self, l: &DMatrix<f64>) -> (Vec<DVector<f64>>, DMatrix<f64>) {
        let mut cur = l.clone();
        let mut rates = Vec::with_capacity(self.p());
        for w in &self.whats {
            let dw = w_rhs(&cur, w);
            cur = lq_update(&cur, w, &dw);
            rates.push(dw);
        }
        (rates, cur)
    }

    /// Some `ŵ_i` violates `ŵᵀŵ ≤ 1`.
    pub fn needs_reembedding(&self) -> bool {
        self.whats.iter().any(|w| w.norm_squared() > 1.0)
    }

    /// Moves every `ŵ_i` back into the unit ball; returns whether any
    /// changed. The reflectors after a flipped one are rebuilt so that the
    /// columns of `Q` only change sign.
    pub fn reembed(&mut self) -> bool {
        if !self.needs_reembedding() {
            return false;
        }
        *self = Self::triangularise(&self.q(), self.p(), None).expect("valid chain");
        true
    }

    /// Forces the other embedding of reflector `i`, rebuilding the later
    /// reflectors as in [`Self::reembed`].
    pub fn reembed_index(&mut self, i: usize) -> Result<(), HouseholderError> {
        *self = Self::triangularise(&self.q(), self.p(), Some(i))?;
        Ok(())
    }
}

/// Source of the linear part `L(t)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Linearization {
    Constant(DMatrix<f64>),
    /// `L(t) = Df(t, v(t))` along a stored trajectory, held constant beyond
    /// its ends.
    Along(Trajectory),
}

/// Blocks of `L_p` at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularBlocks {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// `L_p` in full.
    pub full: DMatrix<f64>,
}

/// A vector field rewritten in the moving frame `u = Q(t) z`.
#[derive(Debug, Clone)]
pub struct TriangularizedSystem<F> {
    field: F,
    linearization: Linearization,
    p: usize,
}

impl<F: VectorField> TriangularizedSystem<F> {
    pub fn new(field: F, linearization: Linearization, p: usize) -> Result<Self, HouseholderError> {
        let d = field.dim();
        if p == 0 || p >= d {
            return Err(HouseholderError::InvalidDimensions("need 1 ≤ p < d"));
        }
        let ok = match &linearization {
            Linearization::Constant(m) => m.shape() == (d, d),
            Linearization::Along(t) => t.dim() == d,
        };
        if !ok {
            return Err(HouseholderError::InvalidDimensions("linearisation does not match the field"));
        }
        Ok(Self { field, linearization, p })
    }

    pub fn field(&self) -> &F {
        &self.field
    }

    pub fn dim(&self) -> usize {
        self.field.dim()
    }

    /// Size of the `x` block (number of reflectors).
    pub fn p(&self) -> usize {
        self.p
    }

    /// Size of the `y` block.
    pub fn q(&self) -> usize {
        self.dim() - self.p
    }

    pub fn has_constant_linearization(&self) -> bool {
        matches!(self.linearization, Linearization::Constant(_))
    }

    pub fn linear_part(&self, t: f64) -> DMatrix<f64> {
        match &self.linearization {
            Linearization::Constant(m) => m.clone(),
            Linearization::Along(traj) => self.field.jacobian(t, traj.state_at(t).as_slice()),
        }
    }

    pub fn blocks(&self, t: f64, chain: &HouseholderChain) -> TriangularBlocks {
        let (_, full) = chain.rates(&self.linear_part(t));
        let p = self.p;
        let q = self.q();
        TriangularBlocks {
            a: full.view((0, 0), (p, p)).into_owned(),
            b: full.view((p, p), (q, q)).into_owned(),
            c: full.view((0, p), (p, q)).into_owned(),
            full,
        }
    }

    /// `N(u, t) = f(u, t) − L(t) u`.
    pub fn residual_nonlinearity(&self, t: f64, l: &DMatrix<f64>, u: &[f64]) -> DVector<f64> {
        let mut f = DVector::zeros(self.dim());
        self.field.rhs(t, u, f.as_mut_slice());
        f - l * DVector::from_column_slice(u)
    }

    /// `(F, G)(t, x, y)`: the blocks of `Qᵀ N(Q(x, y), t)`.
    pub fn nonlinear(&self, t: f64, chain: &HouseholderChain, x: &[f64], y: &[f64]) -> (DVector<f64>, DVector<f64>) {
        let q = chain.q();
        let mut z = DVector::zeros(self.dim());
        z.rows_mut(0, self.p).copy_from_slice(x);
        z.rows_mut(self.p, self.q()).copy_from_slice(y);
        let u = &q * z;
        let n = q.tr_mul(&self.residual_nonlinearity(t, &self.linear_part(t), u.as_slice()));
        (n.rows(0, self.p).into_owned(), n.rows(self.p, self.q()).into_owned())
    }

    /// `ż = L_p z + Qᵀ N(Qz, t)` for a frozen chain; also returns `dŵ/dt`.
    pub fn z_rhs(&self, t: f64, chain: &HouseholderChain, z: &[f64], out: &mut [f64]) -> Vec<DVector<f64>> {
        let l = self.linear_part(t);
        let (rates, lp) = chain.rates(&l);
        let q = chain.q();
        let zv = DVector::from_column_slice(z);
        let u = &q * &zv;
        let n = self.residual_nonlinearity(t, &l, u.as_slice());
        let dz = lp * zv + q.tr_mul(&n);
        out.copy_from_slice(dz.as_slice());
        rates
    }

    /// The field on `(z, ŵ_1, …, ŵ_p)`.
    pub fn augmented(&self) -> AugmentedField<'_, F> {
        AugmentedField { sys: self }
    }

    /// The field on `(ŵ_1, …, ŵ_p)` alone.
    pub fn chain_field(&self) -> ChainField<'_, F> {
        ChainField { sys: self }
    }

    /// Integrates the augmented system from `u(t0) = u0` with the frame
    /// given by `chain`, reembedding before each candidate step.
    pub fn integrate(
        &self,
        u0: &[f64],
        chain: &HouseholderChain,
        t0: f64,
        t1: f64,
        tol: f64,
    ) -> Result<FrameRun, HouseholderError> {
        let d = self.dim();
        let z0 = chain.q().tr_mul(&DVector::from_column_slice(u0));
        let mut s0 = z0.as_slice().to_vec();
        s0.extend(chain.to_flat());
        let mut work = chain.clone();
        let mut flips = Vec::new();
        let mut sigma_log = vec![(t0, chain.sigmas().to_vec())];
        let opts = AdaptiveOptions::new(tol);
        let mut hook = |t: f64, s: &mut [f64]| {
            work.set_flat(&s[d..]);
            if !work.needs_reembedding() {
                return false;
            }
            let q_old = work.q();
            work.reembed();
            let z = DVector::from_column_slice(&s[..d]);
            let z_new = work.q().tr_mul(&(q_old * z));
            s[..d].copy_from_slice(z_new.as_slice());
            s[d..].copy_from_slice(&work.to_flat());
            flips.push(t);
            sigma_log.push((t, work.sigmas().to_vec()));
            true
        };
        let mut trajectory = integrate_adaptive_with(&self.augmented(), &s0, t0, t1, &opts, &mut hook)?;
        let last = trajectory.states.last_mut().expect("non-empty");
        let mut tail = last.as_slice().to_vec();
        if hook(t1, &mut tail) {
            last.copy_from_slice(&tail);
        }
        Ok(FrameRun { d, p: self.p, trajectory, flips, sigma_log })
    }
}

/// Output of [`TriangularizedSystem::integrate`].
#[derive(Debug, Clone)]
pub struct FrameRun {
    d: usize,
    p: usize,
    /// States `(z, ŵ…)`.
    pub trajectory: Trajectory,
    /// Times at which some reflector was reembedded.
    pub flips: Vec<f64>,
    /// `σ` in force from each time on.
    pub sigma_log: Vec<(f64, Vec<f64>)>,
}

impl FrameRun {
    /// The chain at node `n`.
    pub fn chain_at(&self, n: usize) -> HouseholderChain {
        let t = self.trajectory.times[n];
        let k = self.sigma_log.partition_point(|(s, _)| *s <= t).max(1) - 1;
        let mut chain = HouseholderChain::cold(self.d, self.p);
        chain.sigmas.copy_from_slice(&self.sigma_log[k].1);
        chain.set_flat(&self.trajectory.states[n].as_slice()[self.d..]);
        chain
    }

    /// `u = Q z` at node `n`.
    pub fn original_state(&self, n: usize) -> DVector<f64> {
        let z = self.trajectory.states[n].rows(0, self.d).into_owned();
        self.chain_at(n).q() * z
    }
}

pub struct AugmentedField<'a, F> {
    sys: &'a TriangularizedSystem<F>,
}

impl<F: VectorField> VectorField for AugmentedField<'_, F> {
    fn dim(&self) -> usize {
        let d = self.sys.dim();
        d + HouseholderChain::flat_len(d, self.sys.p)
    }

    fn rhs(&self, t: f64, s: &[f64], out: &mut [f64]) {
        let d = self.sys.dim();
        let mut chain = HouseholderChain::cold(d, self.sys.p);
        chain.set_flat(&s[d..]);
        let rates = self.sys.z_rhs(t, &chain, &s[..d], &mut out[..d]);
        let mut pos = d;
        for r in rates {
            out[pos..pos + r.len()].copy_from_slice(r.as_slice());
            pos += r.len();
        }
    }
}

pub struct ChainField<'a, F> {
    sys: &'a TriangularizedSystem<F>,
}

impl<F: VectorField> VectorField for ChainField<'_, F> {
    fn dim(&self) -> usize {
        HouseholderChain::flat_len(self.sys.dim(), self.sys.p)
    }

    fn rhs(&self, t: f64, s: &[f64], out: &mut [f64]) {
        let mut chain = HouseholderChain::cold(self.sys.dim(), self.sys.p);
        chain.set_flat(s);
        let (rates, _) = chain.rates(&self.sys.linear_part(t));
        let mut pos = 0;
        for r in rates {
            out[pos..pos + r.len()].copy_from_slice(r.as_slice());
            pos += r.len();
        }
    }
}
