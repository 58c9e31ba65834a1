//! Linearised step-constraint operators `L` for the four error models and
//! estimators of `‖L†‖∞`.
//!
//! Unknowns are the state corrections `Δx` (from `Δx_1` in Cases 1/3, from
//! `Δx_0` in Cases 2/4) and, in Cases 3/4, one scalar `ν_n` per step whose
//! operator column is `-θ f_n`. The physical step perturbation is
//! `Δh_n = θ ν_n`. Row `n` of `L` is
//!
//! ```text
//! Δx_{n+1} − X_n Δx_n − θ f_n ν_n        (Δx_0 ≡ 0 in Cases 1/3)
//! ```

mod correction;
mod estimate;
mod normal;

pub use correction::{
    case3_forward_substitution, min_norm_correction, min_norm_solve, smw_case_transfer, Correction, SmwTransfer,
};
pub use estimate::{exact_infnorm, exact_infnorm_with_cap, hager_lower_bound, DEFAULT_COST_CAP};
pub use normal::{normal_blocks, BlockFactorization, BlockTridiagonal};

use alloc::vec::Vec;
use core::fmt;
use nalgebra::{DMatrix, DVector};

use crate::ode::TransitionSet;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AmplificationError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(&'static str),
    #[error("pivot block {block} is not positive definite (L lacks full row rank)")]
    RankDeficient { block: usize },
    #[error("{columns} columns exceed the cost cap of {cap}")]
    CostCapExceeded { columns: usize, cap: usize },
    #[error("residual vector is zero; the estimate is undefined")]
    ZeroResidual,
    #[error("capacitance matrix is numerically singular (smallest eigenvalue {min_eigenvalue:e})")]
    SingularCapacitance { min_eigenvalue: f64 },
    #[error("case {0} has no square operator")]
    NotSquare(CaseId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CaseId {
    /// Forward error: `Δx_0 = 0`, fixed steps.
    Forward = 1,
    /// Shadowing: free `Δx_0`, fixed steps.
    Shadowing = 2,
    /// Forward error with time rescaling.
    ForwardRescaled = 3,
    /// Shadowing with time rescaling.
    ShadowingRescaled = 4,
}

impl CaseId {
    pub const ALL: [CaseId; 4] = [CaseId::Forward, CaseId::Shadowing, CaseId::ForwardRescaled, CaseId::ShadowingRescaled];

    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            1 => Some(Self::Forward),
            2 => Some(Self::Shadowing),
            3 => Some(Self::ForwardRescaled),
            4 => Some(Self::ShadowingRescaled),
            _ => None,
        }
    }

    pub fn index(self) -> u8 {
        self as u8
    }

    /// `Δx_0` is an unknown.
    pub fn free_initial(self) -> bool {
        matches!(self, Self::Shadowing | Self::ShadowingRescaled)
    }

    /// Step perturbations are unknowns.
    pub fn rescaled(self) -> bool {
        matches!(self, Self::ForwardRescaled | Self::ShadowingRescaled)
    }

    /// Number of state blocks among the unknowns.
    pub fn state_blocks(self, n: usize) -> usize {
        if self.free_initial() {
            n + 1
        } else {
            n
        }
    }

    /// Columns of `L` for `n` steps of dimension `d`.
    pub fn columns(self, n: usize, d: usize) -> usize {
        self.state_blocks(n) * d + if self.rescaled() { n } else { 0 }
    }
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

fn check_blocks(ts: &TransitionSet, v: &[DVector<f64>], len: usize) -> Result<(), AmplificationError> {
    if v.len() != len || v.iter().any(|x| x.len() != ts.dim()) {
        return Err(AmplificationError::DimensionMismatch("block sequence has wrong shape"));
    }
    Ok(())
}

/// `L (Δx, ν)`, one `d`-vector per step.
///
/// `dx` holds `Δx_1..Δx_N` (Cases 1/3) or `Δx_0..Δx_N` (Cases 2/4); `dnu`
/// must be given exactly for Cases 3/4.
pub fn apply_operator(
    case: CaseId,
    ts: &TransitionSet,
    dx: &[DVector<f64>],
    dnu: Option<&[f64]>,
) -> Result<Vec<DVector<f64>>, AmplificationError> {
    let n = ts.len();
    check_blocks(ts, dx, case.state_blocks(n))?;
    match (case.rescaled(), dnu) {
        (true, Some(v)) if v.len() == n => {}
        (false, None) => {}
        _ => return Err(AmplificationError::DimensionMismatch("step unknowns must be given exactly for Cases 3/4")),
    }
    let off = usize::from(!case.free_initial());
    let state = |j: usize| -> Option<&DVector<f64>> { if j < off { None } else { Some(&dx[j - off]) } };
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let mut row = state(k + 1).expect("Δx_{n+1} is always an unknown").clone();
        if let Some(xk) = state(k) {
            row -= &ts.propagators[k] * xk;
        }
        if let Some(v) = dnu {
            row.axpy(-ts.theta * v[k], &ts.drifts[k], 1.0);
        }
        out.push(row);
    }
    Ok(out)
}

/// `Lᵀ w`, returned as (state blocks, step unknowns); the latter is empty for
/// Cases 1/2.
pub fn apply_adjoint(
    case: CaseId,
    ts: &TransitionSet,
    w: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<f64>), AmplificationError> {
    let n = ts.len();
    check_blocks(ts, w, n)?;
    let first = usize::from(!case.free_initial());
    let mut dx = Vec::with_capacity(case.state_blocks(n));
    for j in first..=n {
        let mut col = if j >= 1 { w[j - 1].clone() } else { DVector::zeros(ts.dim()) };
        if j < n {
            col -= ts.propagators[j].tr_mul(&w[j]);
        }
        dx.push(col);
    }
    let dnu = if case.rescaled() {
        (0..n).map(|k| -ts.theta * ts.drifts[k].dot(&w[k])).collect()
    } else {
        Vec::new()
    };
    Ok((dx, dnu))
}

/// Assembles `L` as a dense matrix, unknowns ordered `(Δx…, ν…)`. Intended
/// for small instances and cross-checks.
pub fn dense_operator(case: CaseId, ts: &TransitionSet) -> DMatrix<f64> {
    let (n, d) = (ts.len(), ts.dim());
    let off = usize::from(!case.free_initial());
    let sb = case.state_blocks(n);
    let mut l = DMatrix::zeros(n * d, case.columns(n, d));
    for k in 0..n {
        let c_next = (k + 1 - off) * d;
        for i in 0..d {
            l[(k * d + i, c_next + i)] = 1.0;
        }
        if k >= off {
            let c = (k - off) * d;
            l.view_mut((k * d, c), (d, d)).copy_from(&(-&ts.propagators[k]));
        }
        if case.rescaled() {
            for i in 0..d {
                l[(k * d + i, sb * d + k)] = -ts.theta * ts.drifts[k][i];
            }
        }
    }
    l
}

fn stack(v: &[DVector<f64>]) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.iter().map(|x| x.len()).sum());
    for x in v {
        out.extend(x.iter().copied());
    }
    out
}

fn unstack(d: usize, flat: &[f64]) -> Vec<DVector<f64>> {
    flat.chunks(d).map(DVector::from_column_slice).collect()
}

/// Options for [`AmplificationReport::compute`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportOptions {
    /// Refuse the exact norm when `L` has more columns than this.
    pub cost_cap: usize,
    /// Random start for the Hager iteration; `None` uses `b = 1/m`.
    pub hager_seed: Option<u64>,
    pub compute_exact: bool,
    pub compute_hager: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { cost_cap: DEFAULT_COST_CAP, hager_seed: None, compute_exact: true, compute_hager: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmplificationReport {
    pub case: CaseId,
    pub theta: f64,
    /// `‖L†‖∞`; `+∞` when the solve overflowed.
    pub exact_norm: Option<f64>,
    /// Why `exact_norm` is absent, if it was requested.
    pub exact_error: Option<AmplificationError>,
    /// Case 1 only.
    pub hager_bound: Option<f64>,
    /// `‖L†G‖∞ / ‖G‖∞`.
    pub residual_estimate: Option<f64>,
    /// `2‖L†G‖∞`.
    pub global_error: Option<f64>,
    /// `2‖L†‖∞·tol`, using the exact norm when available and the residual
    /// estimate otherwise.
    pub state_correction_bound: Option<f64>,
    /// `2θ‖L†‖∞·tol` (Cases 3/4).
    pub step_correction_bound: Option<f64>,
}

impl AmplificationReport {
    pub fn compute(
        case: CaseId,
        ts: &TransitionSet,
        residuals: Option<&[DVector<f64>]>,
        tol: f64,
        opts: &ReportOptions,
    ) -> Result<Self, AmplificationError> {
        let (exact_norm, exact_error) = if opts.compute_exact {
            match exact_infnorm_with_cap(case, ts, opts.cost_cap) {
                Ok(v) => (Some(v), None),
                Err(e @ (AmplificationError::CostCapExceeded { .. } | AmplificationError::RankDeficient { .. })) => {
                    (None, Some(e))
                }
                Err(e) => return Err(e),
            }
        } else {
            (None, None)
        };
        let hager_bound = if opts.compute_hager && case == CaseId::Forward {
            Some(hager_lower_bound(ts, opts.hager_seed)?)
        } else {
            None
        };
        let (residual_estimate, global_error) = match residuals {
            Some(g) => match min_norm_correction(case, ts, g) {
                Ok(c) => (Some(c.estimate), Some(2.0 * c.norm)),
                Err(AmplificationError::ZeroResidual) => (None, Some(0.0)),
                Err(AmplificationError::RankDeficient { .. }) => (None, None),
                Err(e) => return Err(e),
            },
            None => (None, None),
        };
        let norm = exact_norm.or(residual_estimate);
        let state_correction_bound = norm.map(|v| 2.0 * v * tol);
        let step_correction_bound = if case.rescaled() { norm.map(|v| 2.0 * ts.theta * v * tol) } else { None };
        Ok(Self {
            case,
            theta: ts.theta,
            exact_norm,
            exact_error,
            hager_bound,
            residual_estimate,
            global_error,
            state_correction_bound,
            step_correction_bound,
        })
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn random_ts(seed: u64, d: usize, n: usize, theta: f64, contractive: bool) -> TransitionSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = if contractive { 0.5 / d as f64 } else { 1.5 };
        let propagators = (0..n)
            .map(|_| DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0) * scale))
            .collect();
        let drifts = (0..n).map(|_| DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0))).collect();
        TransitionSet::new(propagators, drifts, vec![0.1; n], theta).unwrap()
    }

    pub(crate) fn random_blocks(seed: u64, d: usize, n: usize) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        (0..n).map(|_| DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0))).collect()
    }

    pub(crate) fn pinv_infnorm(l: &DMatrix<f64>) -> f64 {
        let p = l.clone().pseudo_inverse(1e-300).unwrap();
        (0..p.nrows()).map(|i| p.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
    }

    pub(crate) fn identity_ts(d: usize, n: usize, theta: f64) -> TransitionSet {
        TransitionSet::new(vec![DMatrix::identity(d, d); n], vec![DVector::zeros(d); n], vec![1.0; n], theta).unwrap()
    }
}

pub(crate) fn to_flat(v: &[DVector<f64>]) -> Vec<f64> {
    stack(v)
}

pub(crate) fn from_flat(d: usize, v: &[f64]) -> Vec<DVector<f64>> {
    unstack(d, v)
}

#[cfg(test)]
pub(crate) fn zeros(d: usize, n: usize) -> Vec<DVector<f64>> {
    vec![DVector::zeros(d); n]
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;

    fn unknowns(case: CaseId, ts: &TransitionSet, seed: u64) -> (Vec<DVector<f64>>, Option<Vec<f64>>) {
        let dx = random_blocks(seed, ts.dim(), case.state_blocks(ts.len()));
        let dnu = case.rescaled().then(|| random_blocks(seed + 1, 1, ts.len()).iter().map(|v| v[0]).collect());
        (dx, dnu)
    }

    #[test]
    fn telescoping_and_trivial_rows() {
        let ts = identity_ts(2, 3, 0.0);
        let dx = vec![DVector::from_vec(vec![1.0, 2.0]); 4];
        let out = apply_operator(CaseId::Shadowing, &ts, &dx, None).unwrap();
        assert!(out.iter().all(|r| r.amax() == 0.0));

        let ts = identity_ts(2, 1, 0.0);
        let v = DVector::from_vec(vec![3.0, -1.0]);
        let out = apply_operator(CaseId::Forward, &ts, std::slice::from_ref(&v), None).unwrap();
        assert_eq!(out[0], v);
    }

    #[test]
    fn operator_and_adjoint_match_dense() {
        for case in CaseId::ALL {
            for seed in 0..5 {
                let ts = random_ts(seed, 2, 3, 0.7, seed % 2 == 0);
                let l = dense_operator(case, &ts);
                let (dx, dnu) = unknowns(case, &ts, seed);
                let mut flat = stack(&dx);
                if let Some(v) = &dnu {
                    flat.extend(v);
                }
                let dense = &l * DVector::from_vec(flat);
                let ours = stack(&apply_operator(case, &ts, &dx, dnu.as_deref()).unwrap());
                assert!((dense - DVector::from_vec(ours)).amax() <= 1e-12);

                let w = random_blocks(seed + 10, 2, 3);
                let dense_t = l.transpose() * DVector::from_vec(stack(&w));
                let (ax, anu) = apply_adjoint(case, &ts, &w).unwrap();
                let mut ours = stack(&ax);
                ours.extend(anu);
                assert!((dense_t - DVector::from_vec(ours)).amax() <= 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_examples() {
        let ts = identity_ts(2, 3, 0.0);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        let w = vec![e1.clone(), DVector::zeros(2), DVector::zeros(2)];
        let (dx, _) = apply_adjoint(CaseId::Shadowing, &ts, &w).unwrap();
        assert_eq!(dx[0], -&e1);
        assert_eq!(dx[1], e1);
        assert!(dx[2..].iter().all(|v| v.amax() == 0.0));

        let ts = random_ts(4, 3, 2, 2.5, true);
        let w = random_blocks(5, 3, 2);
        let (_, dnu) = apply_adjoint(CaseId::ForwardRescaled, &ts, &w).unwrap();
        for k in 0..2 {
            assert!((dnu[k] + 2.5 * ts.drifts[k].dot(&w[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn shape_errors() {
        let ts = identity_ts(2, 3, 1.0);
        assert!(apply_operator(CaseId::Forward, &ts, &zeros(2, 4), None).is_err());
        assert!(apply_operator(CaseId::ForwardRescaled, &ts, &zeros(2, 3), None).is_err());
        assert!(apply_operator(CaseId::Shadowing, &ts, &zeros(2, 4), Some(&[0.0; 3])).is_err());
        assert!(apply_adjoint(CaseId::Forward, &ts, &zeros(3, 3)).is_err());
    }

    #[test]
    fn case_metadata() {
        assert_eq!(CaseId::from_index(3), Some(CaseId::ForwardRescaled));
        assert_eq!(CaseId::from_index(5), None);
        assert_eq!(CaseId::ShadowingRescaled.columns(10, 3), 11 * 3 + 10);
        assert_eq!(CaseId::Forward.columns(10, 3), 30);
    }

    #[test]
    fn report_respects_lower_bound_and_cap() {
        let ts = random_ts(11, 3, 8, 0.0, false);
        let g = random_blocks(12, 3, 8);
        let r = AmplificationReport::compute(CaseId::Forward, &ts, Some(&g), 1e-6, &ReportOptions::default()).unwrap();
        let exact = r.exact_norm.unwrap();
        assert!(r.hager_bound.unwrap() <= exact * (1.0 + 1e-12));
        assert!(r.residual_estimate.unwrap() <= exact * (1.0 + 1e-12));
        assert!((r.state_correction_bound.unwrap() - 2e-6 * exact).abs() <= 1e-18 * exact);
        assert!(r.step_correction_bound.is_none());

        let opts = ReportOptions { cost_cap: 5, ..Default::default() };
        let r = AmplificationReport::compute(CaseId::Shadowing, &ts, Some(&g), 1e-6, &opts).unwrap();
        assert!(r.exact_norm.is_none());
        assert!(matches!(r.exact_error, Some(AmplificationError::CostCapExceeded { .. })));
        assert!(r.residual_estimate.is_some());
        assert_eq!(r.state_correction_bound, r.residual_estimate.map(|e| 2e-6 * e));
    }
}
