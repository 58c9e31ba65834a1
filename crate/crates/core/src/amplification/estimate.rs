//! `‖L†‖∞` exactly (column by column) and Hager's lower bound for Case 1.

use alloc::vec;
use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use super::{normal_blocks, AmplificationError, BlockFactorization, CaseId};
use crate::dense;
use crate::ode::TransitionSet;

/// Default limit on the number of columns of `L` for [`exact_infnorm`].
pub const DEFAULT_COST_CAP: usize = 200_000;

/// `‖L†‖∞` with the default cost cap.
pub fn exact_infnorm(case: CaseId, ts: &TransitionSet) -> Result<f64, AmplificationError> {
    exact_infnorm_with_cap(case, ts, DEFAULT_COST_CAP)
}

/// `‖L†‖∞ = max_c ‖(LLᵀ)⁻¹ L e_c‖₁` over the columns `c` of `L`.
///
/// Case 1 solves with the square `L` directly. The work is quadratic in the
/// number of steps; instances with more than `cap` columns are refused.
/// Overflow in the solves is reported as `+∞`.
pub fn exact_infnorm_with_cap(case: CaseId, ts: &TransitionSet, cap: usize) -> Result<f64, AmplificationError> {
    let columns = case.columns(ts.len(), ts.dim());
    if columns > cap {
        return Err(AmplificationError::CostCapExceeded { columns, cap });
    }
    if case == CaseId::Forward {
        return Ok(forward_infnorm(ts));
    }
    let fact = normal_blocks(case, ts).factor()?;
    let props: Vec<Vec<f64>> = ts.propagators.iter().map(dense::flatten).collect();
    let batches = batches(case, ts.len());
    let run = |b: &Batch, buf: &mut Vec<f64>| batch_norm(case, ts, &props, &fact, b, buf);
    #[cfg(feature = "parallel")]
    let norms: Vec<f64> = {
        use rayon::prelude::*;
        batches.par_iter().map_init(Vec::new, |buf, b| run(b, buf)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let norms: Vec<f64> = {
        let mut buf = Vec::new();
        batches.iter().map(|b| run(b, &mut buf)).collect()
    };
    Ok(norms.into_iter().fold(0.0, nan_max))
}

fn nan_max(m: f64, v: f64) -> f64 {
    if v.is_nan() || v > m {
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    } else {
        m
    }
}

/// A group of columns of `L` sharing their nonzero block rows.
#[derive(Debug, Clone, Copy)]
enum Batch {
    /// `Δx_0`: only row 0, block `−X_0`.
    Initial,
    /// `Δx_{k+1}` (and `ν_k` when rescaled): rows `k` and `k+1`.
    Step(usize),
}

fn batches(case: CaseId, n: usize) -> Vec<Batch> {
    let mut out = Vec::with_capacity(n + 1);
    if case.free_initial() {
        out.push(Batch::Initial);
    }
    out.extend((0..n).map(Batch::Step));
    out
}

fn batch_norm(
    case: CaseId,
    ts: &TransitionSet,
    props: &[Vec<f64>],
    fact: &BlockFactorization,
    batch: &Batch,
    buf: &mut Vec<f64>,
) -> f64 {
    let (n, d) = (ts.len(), ts.dim());
    let (start, c) = match *batch {
        Batch::Initial => (0, d),
        Batch::Step(k) => (k, if case.rescaled() { d + 1 } else { d }),
    };
    let bs = d * c;
    buf.clear();
    buf.resize(n * bs, 0.0);
    match batch {
        Batch::Initial => {
            let x0 = &props[0];
            for i in 0..d {
                for j in 0..d {
                    buf[i * c + j] = -x0[i * d + j];
                }
            }
        }
        Batch::Step(k) => {
            let k = *k;
            let row = &mut buf[k * bs..(k + 1) * bs];
            for i in 0..d {
                row[i * c + i] = 1.0;
                if c > d {
                    row[i * c + d] = -ts.theta * ts.drifts[k][i];
                }
            }
            if k + 1 < n {
                let x = &props[k + 1];
                let row = &mut buf[(k + 1) * bs..(k + 2) * bs];
                for i in 0..d {
                    for j in 0..d {
                        row[i * c + j] = -x[i * d + j];
                    }
                }
            }
        }
    }
    let mut sums = vec![0.0; c];
    fact.sweep_multi(c, start, buf, |_, z| {
        for (idx, v) in z.iter().enumerate() {
            sums[idx % c] += v.abs();
        }
    });
    sums.into_iter().fold(0.0, nan_max)
}

/// Case 1: row `Δx_J` of `L⁻¹` is `z` with `Lᵀ z = e`, i.e. `z_{J−1} = e`,
/// `z_{k−1} = X_kᵀ z_k`, zero beyond.
fn forward_infnorm(ts: &TransitionSet) -> f64 {
    let (n, d) = (ts.len(), ts.dim());
    let props: Vec<Vec<f64>> = ts.propagators.iter().map(dense::flatten).collect();
    let run = |j: usize, z: &mut Vec<f64>, tmp: &mut Vec<f64>| -> f64 {
        z.clear();
        z.resize(d * d, 0.0);
        tmp.resize(d * d, 0.0);
        for i in 0..d {
            z[i * d + i] = 1.0;
        }
        let mut sums = vec![1.0; d];
        for k in (1..j).rev() {
            dense::gemm_t(d, d, &props[k], z, tmp);
            core::mem::swap(z, tmp);
            for (idx, v) in z.iter().enumerate() {
                sums[idx % d] += v.abs();
            }
        }
        sums.into_iter().fold(0.0, nan_max)
    };
    #[cfg(feature = "parallel")]
    let norms: Vec<f64> = {
        use rayon::prelude::*;
        (1..=n)
            .into_par_iter()
            .map_init(|| (Vec::new(), Vec::new()), |(z, t), j| run(j, z, t))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let norms: Vec<f64> = {
        let (mut z, mut t) = (Vec::new(), Vec::new());
        (1..=n).map(|j| run(j, &mut z, &mut t)).collect()
    };
    norms.into_iter().fold(0.0, nan_max)
}

/// `Lᵀ x = b` for Case 1 (`b` indexed by unknowns `Δx_1..Δx_N`).
pub(crate) fn forward_solve_t(d: usize, props: &[Vec<f64>], b: &[f64], x: &mut [f64]) {
    let n = props.len();
    x.copy_from_slice(b);
    let mut acc = vec![0.0; d];
    for j in (1..n).rev() {
        let (head, tail) = x.split_at_mut(j * d);
        // x_{j−1} = b_j + X_jᵀ x_j; b_j lives in head block j−1.
        dense::gemv_t(d, &props[j], &tail[..d], &mut acc);
        for (h, a) in head[(j - 1) * d..].iter_mut().zip(&acc) {
            *h += a;
        }
    }
}

/// `L y = r` for Case 1: `Δx_1 = r_0`, `Δx_{n+1} = r_n + X_n Δx_n`.
pub(crate) fn forward_solve(d: usize, props: &[Vec<f64>], r: &[f64], y: &mut [f64]) {
    let n = props.len();
    y.copy_from_slice(r);
    let mut acc = vec![0.0; d];
    for k in 1..n {
        let (head, tail) = y.split_at_mut(k * d);
        dense::gemv(d, &props[k], &head[(k - 1) * d..], &mut acc);
        for (t, a) in tail[..d].iter_mut().zip(&acc) {
            *t += a;
        }
    }
}

/// Hager's lower bound for `‖L⁻¹‖∞ = ‖L⁻ᵀ‖₁`, Case 1.
///
/// Starts from `b = (1/m, …, 1/m)`, or from a seeded random positive vector
/// with `‖b‖₁ = 1`. Each iteration solves `Lᵀx = b` (candidate `‖x‖₁`) and
/// `Lb' = sign(x)`, moving to `b = e_i` with `i = argmax |b'_i|`. Stops when
/// the index repeats or the candidate fails to increase.
pub fn hager_lower_bound(ts: &TransitionSet, seed: Option<u64>) -> Result<f64, AmplificationError> {
    const MAX_ITERATIONS: usize = 10;
    let (n, d) = (ts.len(), ts.dim());
    let m = n * d;
    let props: Vec<Vec<f64>> = ts.propagators.iter().map(dense::flatten).collect();
    let mut b = match seed {
        None => vec![1.0 / m as f64; m],
        Some(s) => {
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let v: Vec<f64> = (0..m).map(|_| ((rng.next_u64() >> 11) as f64 + 1.0) * libm::ldexp(1.0, -53)).collect();
            let total: f64 = v.iter().sum();
            v.into_iter().map(|x| x / total).collect()
        }
    };
    let mut x = vec![0.0; m];
    let mut bp = vec![0.0; m];
    let mut best = 0.0f64;
    let mut c1 = 0.0;
    let mut i1 = usize::MAX;
    for iter in 0..MAX_ITERATIONS {
        forward_solve_t(d, &props, &b, &mut x);
        let c2 = dense::one_norm(&x);
        if c2.is_nan() {
            return Ok(f64::INFINITY);
        }
        best = best.max(c2);
        let xi: Vec<f64> = x.iter().map(|&v| if v >= 0.0 { 1.0 } else { -1.0 }).collect();
        forward_solve(d, &props, &xi, &mut bp);
        let i2 = bp
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) })
            .0;
        if iter > 0 && (i2 == i1 || c2 <= c1) {
            break;
        }
        i1 = i2;
        c1 = c2;
        b.fill(0.0);
        b[i2] = 1.0;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::super::testing::*;
    use super::super::dense_operator;
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;

    #[test]
    fn single_step_forward_is_identity() {
        let ts = random_ts(3, 3, 1, 0.0, false);
        assert_eq!(exact_infnorm(CaseId::Forward, &ts).unwrap(), 1.0);
    }

    #[test]
    fn all_cases_match_pinv_oracle() {
        for case in CaseId::ALL {
            for seed in 0..6 {
                for (d, n) in [(1, 5), (2, 4), (3, 6)] {
                    let ts = random_ts(seed * 31 + d as u64, d, n, 0.9, seed % 2 == 0);
                    let ours = exact_infnorm(case, &ts).unwrap();
                    let oracle = pinv_infnorm(&dense_operator(case, &ts));
                    assert!((ours - oracle).abs() <= 1e-8 * oracle, "case {case}: {ours} vs {oracle}");
                }
            }
        }
    }

    #[test]
    fn theta_limits() {
        let ts = random_ts(77, 3, 10, 1e-10, false);
        let c1 = exact_infnorm(CaseId::Forward, &ts).unwrap();
        let c3 = exact_infnorm(CaseId::ForwardRescaled, &ts).unwrap();
        let c2 = exact_infnorm(CaseId::Shadowing, &ts).unwrap();
        let c4 = exact_infnorm(CaseId::ShadowingRescaled, &ts).unwrap();
        assert!((c1 - c3).abs() <= 1e-6 * c1);
        assert!((c2 - c4).abs() <= 1e-6 * c2);
    }

    #[test]
    fn cost_cap_refuses() {
        let ts = random_ts(1, 3, 10, 1.0, true);
        assert_eq!(
            exact_infnorm_with_cap(CaseId::ShadowingRescaled, &ts, 42).unwrap_err(),
            AmplificationError::CostCapExceeded { columns: 43, cap: 42 }
        );
    }

    #[test]
    fn overflow_reports_infinity() {
        let d = 2;
        let n = 400;
        let big = DMatrix::identity(d, d) * 1e10;
        let ts = TransitionSet::new(vec![big; n], vec![DVector::zeros(d); n], vec![1.0; n], 0.0).unwrap();
        assert_eq!(exact_infnorm(CaseId::Forward, &ts).unwrap(), f64::INFINITY);
    }

    #[test]
    fn hager_identity() {
        let ts = TransitionSet::new(vec![DMatrix::zeros(2, 2); 2], vec![DVector::zeros(2); 2], vec![1.0; 2], 0.0).unwrap();
        assert_eq!(hager_lower_bound(&ts, None).unwrap(), 1.0);
    }

    #[test]
    fn triangular_solves_match_dense() {
        let ts = random_ts(8, 3, 5, 0.0, false);
        let l = dense_operator(CaseId::Forward, &ts);
        let props: Vec<Vec<f64>> = ts.propagators.iter().map(dense::flatten).collect();
        let r: Vec<f64> = (0..15).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut y = vec![0.0; 15];
        forward_solve(3, &props, &r, &mut y);
        assert!((&l * DVector::from_vec(y.clone()) - DVector::from_vec(r.clone())).amax() < 1e-12);
        forward_solve_t(3, &props, &r, &mut y);
        assert!((l.transpose() * DVector::from_vec(y) - DVector::from_vec(r)).amax() < 1e-12);
    }

    // Propagators are perturbations of the identity: X_n = I + E_n with
    // E_n uniform in [-1, 1].
    #[test]
    fn hager_is_usually_exact() {
        use rand::{Rng, SeedableRng};
        let mut hits = 0;
        for seed in 0..100 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let props = (0..8)
                .map(|_| DMatrix::identity(3, 3) + DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)))
                .collect();
            let ts = TransitionSet::new(props, vec![DVector::zeros(3); 8], vec![1.0; 8], 0.0).unwrap();
            let exact = pinv_infnorm(&dense_operator(CaseId::Forward, &ts));
            let h = hager_lower_bound(&ts, None).unwrap();
            assert!(h <= exact * (1.0 + 1e-10));
            if (h - exact).abs() <= 1e-10 * exact {
                hits += 1;
            }
        }
        assert!(hits >= 80, "hager exact on {hits}/100");
    }

    #[test]
    fn seeded_start_is_a_lower_bound() {
        for seed in 0..20 {
            let ts = random_ts(seed, 3, 8, 0.0, seed % 2 == 0);
            let exact = exact_infnorm(CaseId::Forward, &ts).unwrap();
            let h = hager_lower_bound(&ts, Some(seed)).unwrap();
            assert!(h <= exact * (1.0 + 1e-12) && h > 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn oracle_equivalence(seed in 0u64..10_000, d in 1usize..=4, n in 1usize..=12, contractive: bool, case_idx in 1u8..=4) {
            let case = CaseId::from_index(case_idx).unwrap();
            let ts = random_ts(seed, d, n, 0.6, contractive);
            let ours = exact_infnorm(case, &ts).unwrap();
            let oracle = pinv_infnorm(&dense_operator(case, &ts));
            prop_assert!((ours - oracle).abs() <= 1e-8 * oracle);
        }

        #[test]
        fn hager_never_exceeds_exact(seed in 0u64..10_000, d in 1usize..=4, n in 1usize..=12) {
            let ts = random_ts(seed, d, n, 0.0, false);
            let exact = exact_infnorm(CaseId::Forward, &ts).unwrap();
            prop_assert!(hager_lower_bound(&ts, None).unwrap() <= exact * (1.0 + 1e-12));
        }
    }
}
