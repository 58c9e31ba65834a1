//! `LLᵀ` as a block tridiagonal matrix and its block `LDLᵀ` factorisation.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::{Cholesky, DMatrix, DVector};

use super::{AmplificationError, CaseId};
use crate::dense;
use crate::ode::TransitionSet;

/// Symmetric block tridiagonal matrix: `diag[n]` on the diagonal and
/// `offdiag[n]` in block position `(n, n+1)` (its transpose at `(n+1, n)`).
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTridiagonal {
    pub diag: Vec<DMatrix<f64>>,
    pub offdiag: Vec<DMatrix<f64>>,
}

impl BlockTridiagonal {
    pub fn new(diag: Vec<DMatrix<f64>>, offdiag: Vec<DMatrix<f64>>) -> Result<Self, AmplificationError> {
        let n = diag.len();
        if n == 0 || offdiag.len() + 1 != n {
            return Err(AmplificationError::DimensionMismatch("need N diagonal and N-1 off-diagonal blocks"));
        }
        let d = diag[0].nrows();
        if diag.iter().chain(&offdiag).any(|b| b.shape() != (d, d)) {
            return Err(AmplificationError::DimensionMismatch("blocks must share one square shape"));
        }
        Ok(Self { diag, offdiag })
    }

    pub fn block_dim(&self) -> usize {
        self.diag[0].nrows()
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let (n, d) = (self.len(), self.block_dim());
        let mut m = DMatrix::zeros(n * d, n * d);
        for (k, b) in self.diag.iter().enumerate() {
            m.view_mut((k * d, k * d), (d, d)).copy_from(b);
        }
        for (k, e) in self.offdiag.iter().enumerate() {
            m.view_mut((k * d, (k + 1) * d), (d, d)).copy_from(e);
            m.view_mut(((k + 1) * d, k * d), (d, d)).copy_from(&e.transpose());
        }
        m
    }

    pub fn factor(&self) -> Result<BlockFactorization, AmplificationError> {
        BlockFactorization::new(self)
    }
}

/// Closed-form blocks of `LLᵀ`:
/// `D_n = [n ≥ 1 or free Δx_0] X_nX_nᵀ + I + θ² f_nf_nᵀ [rescaled]`,
/// `E_n = −X_{n+1}ᵀ`.
pub fn normal_blocks(case: CaseId, ts: &TransitionSet) -> BlockTridiagonal {
    let (n, d) = (ts.len(), ts.dim());
    let theta2 = ts.theta * ts.theta;
    let diag = (0..n)
        .map(|k| {
            let mut b = DMatrix::identity(d, d);
            if k >= 1 || case.free_initial() {
                b += &ts.propagators[k] * ts.propagators[k].transpose();
            }
            if case.rescaled() {
                b += &ts.drifts[k] * ts.drifts[k].transpose() * theta2;
            }
            b
        })
        .collect();
    let offdiag = (0..n.saturating_sub(1)).map(|k| -ts.propagators[k + 1].transpose()).collect();
    BlockTridiagonal { diag, offdiag }
}

/// Block `LDLᵀ`: pivots `S_0 = D_0`, `S_n = D_n − E_{n−1}ᵀ S_{n−1}⁻¹ E_{n−1}`.
///
/// Stores `S_n⁻¹` and the multipliers `M_n = E_{n−1}ᵀ S_{n−1}⁻¹`, both
/// row-major. Immutable once built and reusable for any number of solves.
#[derive(Debug, Clone)]
pub struct BlockFactorization {
    d: usize,
    s_inv: Vec<Vec<f64>>,
    /// `mult[0]` is unused.
    mult: Vec<Vec<f64>>,
}

impl BlockFactorization {
    pub fn new(blocks: &BlockTridiagonal) -> Result<Self, AmplificationError> {
        let (n, d) = (blocks.len(), blocks.block_dim());
        let mut s_inv = Vec::with_capacity(n);
        let mut mult = Vec::with_capacity(n);
        mult.push(Vec::new());
        let mut prev_inv: Option<DMatrix<f64>> = None;
        for k in 0..n {
            let mut s = blocks.diag[k].clone();
            if let Some(pinv) = &prev_inv {
                let e = &blocks.offdiag[k - 1];
                let m = e.tr_mul(pinv);
                s -= &m * e;
                mult.push(dense::flatten(&m));
            }
            let s = (&s + s.transpose()) * 0.5;
            let chol = Cholesky::new(s).ok_or(AmplificationError::RankDeficient { block: k })?;
            let inv = chol.inverse();
            if inv.iter().any(|v| !v.is_finite()) {
                return Err(AmplificationError::RankDeficient { block: k });
            }
            s_inv.push(dense::flatten(&inv));
            prev_inv = Some(inv);
        }
        Ok(Self { d, s_inv, mult })
    }

    pub fn len(&self) -> usize {
        self.s_inv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s_inv.is_empty()
    }

    pub fn block_dim(&self) -> usize {
        self.d
    }

    /// Solves `(LLᵀ) z = r` in place; `r` is the stacked block vector.
    pub fn solve_in_place(&self, r: &mut [f64]) {
        let (n, d) = (self.len(), self.d);
        assert_eq!(r.len(), n * d, "right-hand side has wrong length");
        let mut tmp = vec![0.0; d];
        for k in 1..n {
            let (head, tail) = r.split_at_mut(k * d);
            dense::gemv_sub(d, &self.mult[k], &head[(k - 1) * d..], &mut tail[..d]);
        }
        for k in 0..n {
            let blk = &mut r[k * d..(k + 1) * d];
            dense::gemv(d, &self.s_inv[k], blk, &mut tmp);
            blk.copy_from_slice(&tmp);
        }
        for k in (0..n.saturating_sub(1)).rev() {
            let (head, tail) = r.split_at_mut((k + 1) * d);
            dense::gemv_t_sub(d, &self.mult[k + 1], &tail[..d], &mut head[k * d..]);
        }
    }

    pub fn solve(&self, rhs: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let mut flat = super::to_flat(rhs);
        self.solve_in_place(&mut flat);
        super::from_flat(self.d, &flat)
    }

    /// Solves for `c` stacked right-hand sides at once. `rhs` holds one
    /// row-major `d×c` block per block row, all zero before `start`. Calls
    /// `visit(k, z_k)` for every solution block in reverse order and returns
    /// nothing; the solution is not retained.
    pub(crate) fn sweep_multi<V: FnMut(usize, &[f64])>(&self, c: usize, start: usize, rhs: &mut [f64], mut visit: V) {
        let (n, d) = (self.len(), self.d);
        let bs = d * c;
        let mut tmp = vec![0.0; bs];
        for k in start + 1..n {
            let (head, tail) = rhs.split_at_mut(k * bs);
            dense::gemm_sub(d, c, &self.mult[k], &head[(k - 1) * bs..], &mut tail[..bs]);
        }
        for k in start..n {
            let blk = &mut rhs[k * bs..(k + 1) * bs];
            dense::gemm(d, c, &self.s_inv[k], blk, &mut tmp);
            blk.copy_from_slice(&tmp);
        }
        visit(n - 1, &rhs[(n - 1) * bs..]);
        for k in (0..n - 1).rev() {
            let (head, tail) = rhs.split_at_mut((k + 1) * bs);
            let blk = &mut head[k * bs..];
            if k < start {
                dense::gemm_t(d, c, &self.mult[k + 1], &tail[..bs], &mut tmp);
                for (b, t) in blk[..bs].iter_mut().zip(&tmp) {
                    *b = -t;
                }
            } else {
                dense::gemm_t_sub(d, c, &self.mult[k + 1], &tail[..bs], &mut blk[..bs]);
            }
            visit(k, &blk[..bs]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::super::{dense_operator, to_flat};
    use super::*;

    #[test]
    fn zero_propagators_give_identity_blocks() {
        let ts = TransitionSet::new(vec![DMatrix::zeros(2, 2); 3], vec![DVector::zeros(2); 3], vec![1.0; 3], 0.0).unwrap();
        let b = normal_blocks(CaseId::Shadowing, &ts);
        assert!(b.diag.iter().all(|m| *m == DMatrix::identity(2, 2)));
        assert!(b.offdiag.iter().all(|m| m.amax() == 0.0));
    }

    #[test]
    fn closed_forms_match_dense_product() {
        for case in CaseId::ALL {
            for seed in 0..4 {
                let ts = random_ts(seed, 2, 4, 1.3, seed % 2 == 1);
                let l = dense_operator(case, &ts);
                let llt = &l * l.transpose();
                let ours = normal_blocks(case, &ts).to_dense();
                assert!((llt - ours).amax() <= 1e-12, "case {case}");
            }
        }
    }

    #[test]
    fn case4_is_case3_plus_initial_term() {
        let ts = random_ts(9, 3, 5, 0.4, false);
        let b3 = normal_blocks(CaseId::ForwardRescaled, &ts);
        let b4 = normal_blocks(CaseId::ShadowingRescaled, &ts);
        let u = &ts.propagators[0] * ts.propagators[0].transpose();
        assert!((&b4.diag[0] - &b3.diag[0] - u).amax() <= 1e-14);
        for k in 1..5 {
            assert_eq!(b4.diag[k], b3.diag[k]);
        }
        assert_eq!(b4.offdiag, b3.offdiag);
    }

    #[test]
    fn identity_blocks_solve_trivially() {
        let b = BlockTridiagonal::new(vec![DMatrix::identity(2, 2); 3], vec![DMatrix::zeros(2, 2); 2]).unwrap();
        let f = b.factor().unwrap();
        let r = random_blocks(1, 2, 3);
        assert_eq!(f.solve(&r), r);
    }

    // Scalar Thomas algorithm as an independent oracle.
    fn thomas(a: &[f64], b: &[f64], c: &[f64], r: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut cp = vec![0.0; n];
        let mut rp = vec![0.0; n];
        cp[0] = c.first().copied().unwrap_or(0.0) / b[0];
        rp[0] = r[0] / b[0];
        for i in 1..n {
            let m = b[i] - a[i - 1] * cp[i - 1];
            cp[i] = if i < n - 1 { c[i] / m } else { 0.0 };
            rp[i] = (r[i] - a[i - 1] * rp[i - 1]) / m;
        }
        let mut x = vec![0.0; n];
        x[n - 1] = rp[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = rp[i] - cp[i] * x[i + 1];
        }
        x
    }

    #[test]
    fn scalar_blocks_match_thomas() {
        let diag = [4.0, 5.0, 3.0, 6.0, 4.5];
        let off = [1.0, -2.0, 0.5, 1.5];
        let b = BlockTridiagonal::new(
            diag.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
            off.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
        )
        .unwrap();
        let r = [1.0, -2.0, 3.0, 0.5, 2.0];
        let mut z = r.to_vec();
        b.factor().unwrap().solve_in_place(&mut z);
        let oracle = thomas(&off, &diag, &off, &r);
        for (a, o) in z.iter().zip(&oracle) {
            assert!((a - o).abs() <= 1e-14);
        }
    }

    #[test]
    fn random_spd_matches_dense_solve() {
        for case in CaseId::ALL {
            let ts = random_ts(21, 3, 6, 0.8, false);
            let b = normal_blocks(case, &ts);
            let r = random_blocks(3, 3, 6);
            let z = b.factor().unwrap().solve(&r);
            let dense = b.to_dense().lu().solve(&DVector::from_vec(to_flat(&r))).unwrap();
            let ours = DVector::from_vec(to_flat(&z));
            assert!((&ours - &dense).amax() <= 1e-10 * dense.amax());
        }
    }

    #[test]
    fn multi_sweep_matches_single_solves() {
        let ts = random_ts(5, 2, 5, 0.3, false);
        let f = normal_blocks(CaseId::ShadowingRescaled, &ts).factor().unwrap();
        // two columns, nonzero from block 2 on
        let c = 2;
        let mut rhs = vec![0.0; 5 * 2 * c];
        let cols: Vec<Vec<f64>> = (0..c)
            .map(|j| {
                let mut v = to_flat(&random_blocks(40 + j as u64, 2, 5));
                v[..4].fill(0.0);
                v
            })
            .collect();
        for (j, col) in cols.iter().enumerate() {
            for (i, v) in col.iter().enumerate() {
                rhs[i * c + j] = *v;
            }
        }
        let mut got = vec![0.0; 5 * 2 * c];
        f.sweep_multi(c, 2, &mut rhs, |k, z| got[k * 4..(k + 1) * 4].copy_from_slice(z));
        for (j, col) in cols.iter().enumerate() {
            let mut z = col.clone();
            f.solve_in_place(&mut z);
            for (i, v) in z.iter().enumerate() {
                assert!((got[i * c + j] - v).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn indefinite_pivot_is_rank_deficient() {
        let b = BlockTridiagonal::new(
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
            vec![DMatrix::from_element(1, 1, 2.0)],
        )
        .unwrap();
        assert_eq!(b.factor().unwrap_err(), AmplificationError::RankDeficient { block: 1 });
    }
}
