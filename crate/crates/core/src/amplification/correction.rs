//! Minimum-norm corrections `L v = b` and the Case 3 ↔ Case 4 low-rank
//! transfer.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::estimate::forward_solve;
use super::{apply_adjoint, from_flat, normal_blocks, to_flat, AmplificationError, BlockFactorization, CaseId};
use crate::dense;
use crate::ode::TransitionSet;

/// Result of [`min_norm_correction`].
#[derive(Debug, Clone, PartialEq)]
pub struct Correction {
    pub dx: Vec<DVector<f64>>,
    /// Solved step unknowns `ν_n` (empty for Cases 1/2).
    pub dnu: Vec<f64>,
    /// `Δh_n = θ ν_n`.
    pub dh: Vec<f64>,
    /// `‖(Δx, ν)‖∞ = ‖L†G‖∞`.
    pub norm: f64,
    /// `‖L†G‖∞ / ‖G‖∞`.
    pub estimate: f64,
}

/// Minimum 2-norm solution of `L (Δx, ν) = b`.
pub fn min_norm_solve(
    case: CaseId,
    ts: &TransitionSet,
    b: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<f64>), AmplificationError> {
    let (n, d) = (ts.len(), ts.dim());
    if b.len() != n || b.iter().any(|v| v.len() != d) {
        return Err(AmplificationError::DimensionMismatch("one residual block per step required"));
    }
    if case == CaseId::Forward {
        let props: Vec<Vec<f64>> = ts.propagators.iter().map(dense::flatten).collect();
        let r = to_flat(b);
        let mut y = vec![0.0; r.len()];
        forward_solve(d, &props, &r, &mut y);
        return Ok((from_flat(d, &y), Vec::new()));
    }
    let fact = normal_blocks(case, ts).factor()?;
    let z = fact.solve(b);
    apply_adjoint(case, ts, &z)
}

/// The first Newton correction `L (Δx, ν) = −G` in minimum norm, and the
/// residual-based amplification estimate `‖(Δx, ν)‖∞ / ‖G‖∞`.
pub fn min_norm_correction(
    case: CaseId,
    ts: &TransitionSet,
    residuals: &[DVector<f64>],
) -> Result<Correction, AmplificationError> {
    let g_norm = residuals.iter().map(|g| dense::inf_norm(g.as_slice())).fold(0.0, f64::max);
    let neg: Vec<DVector<f64>> = residuals.iter().map(|g| -g).collect();
    let (dx, dnu) = min_norm_solve(case, ts, &neg)?;
    if g_norm == 0.0 {
        return Err(AmplificationError::ZeroResidual);
    }
    let norm = dx
        .iter()
        .map(|v| dense::inf_norm(v.as_slice()))
        .chain(dnu.iter().map(|v| v.abs()))
        .fold(0.0, |m: f64, v| if v.is_nan() { f64::INFINITY } else { m.max(v) });
    let dh = dnu.iter().map(|v| ts.theta * v).collect();
    Ok(Correction { dx, dnu, dh, norm, estimate: norm / g_norm })
}

/// Step-by-step solve of the Case 3 system `L₃ (Δx, ν) = b` with `Δx_0 = 0`.
///
/// Each step takes the minimum-norm solution of
/// `[I | −θf_n] (Δx_{n+1}, ν_n) = b_n + X_nΔx_n`, using
/// `(I + θ²ffᵀ)⁻¹ = I − θ²ffᵀ/(1 + θ²fᵀf)`.
pub fn case3_forward_substitution(
    ts: &TransitionSet,
    b: &[DVector<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<f64>), AmplificationError> {
    let (n, d) = (ts.len(), ts.dim());
    if b.len() != n || b.iter().any(|v| v.len() != d) {
        return Err(AmplificationError::DimensionMismatch("one right-hand side block per step required"));
    }
    let theta2 = ts.theta * ts.theta;
    let mut dx: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut dnu = Vec::with_capacity(n);
    for k in 0..n {
        let mut g = b[k].clone();
        if k > 0 {
            g += &ts.propagators[k] * &dx[k - 1];
        }
        let f = &ts.drifts[k];
        let y = &g - f * (theta2 * f.dot(&g) / (1.0 + theta2 * f.dot(f)));
        dnu.push(-ts.theta * f.dot(&y));
        dx.push(y);
    }
    Ok((dx, dnu))
}

/// `(L₃L₃ᵀ)⁻¹` applied through the Case 4 factorisation.
///
/// `L₄L₄ᵀ = L₃L₃ᵀ + UUᵀ` with `U = (X_0; 0; …; 0)`, so
/// `(L₃L₃ᵀ)⁻¹ r = y + W C⁻¹ X_0ᵀ y_0` where `y = (L₄L₄ᵀ)⁻¹ r`,
/// `W = (L₄L₄ᵀ)⁻¹ U` and the capacitance matrix is `C = I − X_0ᵀ W_0`.
#[derive(Debug, Clone)]
pub struct SmwTransfer {
    d: usize,
    fact: BlockFactorization,
    x0: DMatrix<f64>,
    /// Columns of `W`, stacked.
    w: Vec<Vec<f64>>,
    c_inv: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

impl SmwTransfer {
    /// Smallest capacitance eigenvalue accepted as nonsingular. The
    /// eigenvalues always lie in `(0, 1]`.
    pub const SINGULAR_THRESHOLD: f64 = 1e-12;

    pub fn new(ts: &TransitionSet) -> Result<Self, AmplificationError> {
        let (n, d) = (ts.len(), ts.dim());
        let fact = normal_blocks(CaseId::ShadowingRescaled, ts).factor()?;
        let x0 = ts.propagators[0].clone();
        let w: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut col = vec![0.0; n * d];
                for r in 0..d {
                    col[r] = x0[(r, i)];
                }
                fact.solve_in_place(&mut col);
                col
            })
            .collect();
        let w0 = DMatrix::from_fn(d, d, |r, c| w[c][r]);
        let cap = DMatrix::identity(d, d) - x0.tr_mul(&w0);
        let cap = (&cap + cap.transpose()) * 0.5;
        let eig = SymmetricEigen::new(cap.clone());
        let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        let min = eigenvalues.first().copied().unwrap_or(1.0);
        if !(min > Self::SINGULAR_THRESHOLD) {
            return Err(AmplificationError::SingularCapacitance { min_eigenvalue: min });
        }
        let c_inv = cap
            .cholesky()
            .ok_or(AmplificationError::SingularCapacitance { min_eigenvalue: min })?
            .inverse();
        Ok(Self { d, fact, x0, w, c_inv, eigenvalues })
    }

    /// Capacitance eigenvalues in ascending order.
    pub fn capacitance_eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn solve(&self, rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, AmplificationError> {
        let d = self.d;
        if rhs.len() != self.fact.len() || rhs.iter().any(|v| v.len() != d) {
            return Err(AmplificationError::DimensionMismatch("right-hand side has wrong shape"));
        }
        let mut y = to_flat(rhs);
        self.fact.solve_in_place(&mut y);
        let s = self.x0.tr_mul(&DVector::from_column_slice(&y[..d]));
        let t = &self.c_inv * s;
        for (col, ti) in self.w.iter().zip(t.iter()) {
            for (yv, wv) in y.iter_mut().zip(col) {
                *yv += ti * wv;
            }
        }
        Ok(from_flat(d, &y))
    }
}

/// `(L₃L₃ᵀ)⁻¹ rhs` via [`SmwTransfer`].
pub fn smw_case_transfer(ts: &TransitionSet, rhs: &[DVector<f64>]) -> Result<Vec<DVector<f64>>, AmplificationError> {
    SmwTransfer::new(ts)?.solve(rhs)
}
