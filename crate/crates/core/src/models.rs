//! Concrete vector fields with analytic jacobians.

use alloc::vec;
use alloc::vec::Vec;
use nalgebra::DMatrix;

use crate::ode::VectorField;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzParams {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self { sigma: 10.0, rho: 28.0, beta: 8.0 / 3.0 }
    }
}

/// Lorenz '63: `(σ(y−x), ρx − xz − y, xy − βz)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Lorenz {
    pub params: LorenzParams,
}

impl Lorenz {
    pub fn new(params: LorenzParams) -> Self {
        Self { params }
    }

    pub const INITIAL_STATE: [f64; 3] = [0.0, 1.0, 0.0];
}

impl VectorField for Lorenz {
    fn dim(&self) -> usize {
        3
    }

    fn rhs(&self, _t: f64, u: &[f64], out: &mut [f64]) {
        let LorenzParams { sigma, rho, beta } = self.params;
        let (x, y, z) = (u[0], u[1], u[2]);
        out[0] = sigma * (y - x);
        out[1] = rho * x - x * z - y;
        out[2] = x * y - beta * z;
    }

    fn jacobian(&self, _t: f64, u: &[f64]) -> DMatrix<f64> {
        let LorenzParams { sigma, rho, beta } = self.params;
        let (x, y, z) = (u[0], u[1], u[2]);
        DMatrix::from_row_slice(3, 3, &[-sigma, sigma, 0.0, rho - z, -1.0, -x, y, x, -beta])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KseParams {
    pub xi: f64,
    pub modes: usize,
}

impl Default for KseParams {
    fn default() -> Self {
        Self { xi: 0.02991, modes: 16 }
    }
}

/// Sine-Galerkin truncation of `w_s = (w²)_y − w_yy − ξ w_yyyy` with
/// `w = Σ_{k=1..K} a_k sin(ky)`:
///
/// `ȧ_m = (m² − ξm⁴) a_m − m [Σ_{l=1}^{K−m} a_l a_{l+m} − ½ Σ_{k=1}^{m−1} a_k a_{m−k}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Kse {
    pub params: KseParams,
    growth: Vec<f64>,
}

impl Kse {
    pub fn new(params: KseParams) -> Self {
        let growth = (1..=params.modes)
            .map(|m| {
                let m = m as f64;
                m * m - params.xi * m * m * m * m
            })
            .collect();
        Self { params, growth }
    }

    /// Linear growth rates `m² − ξm⁴`, `m = 1..K`.
    pub fn growth_rates(&self) -> &[f64] {
        &self.growth
    }

    /// `a_j = (−1)^j / √n` for `j = 1..n`.
    pub fn alternating_state(n: usize) -> Vec<f64> {
        let s = 1.0 / libm::sqrt(n as f64);
        (1..=n).map(|j| if j % 2 == 0 { s } else { -s }).collect()
    }
}

impl Default for Kse {
    fn default() -> Self {
        Self::new(KseParams::default())
    }
}

impl VectorField for Kse {
    fn dim(&self) -> usize {
        self.params.modes
    }

    fn rhs(&self, _t: f64, a: &[f64], out: &mut [f64]) {
        let k = self.params.modes;
        for m in 1..=k {
            let mut shift = 0.0;
            for l in 1..=k - m {
                shift += a[l - 1] * a[l + m - 1];
            }
            let mut conv = 0.0;
            for j in 1..m {
                conv += a[j - 1] * a[m - j - 1];
            }
            out[m - 1] = self.growth[m - 1] * a[m - 1] - m as f64 * (shift - 0.5 * conv);
        }
    }

    fn jacobian(&self, _t: f64, a: &[f64]) -> DMatrix<f64> {
        let k = self.params.modes;
        let mut jac = DMatrix::zeros(k, k);
        for m in 1..=k {
            let mf = m as f64;
            for j in 1..=k {
                let mut dn = 0.0;
                if j + m <= k {
                    dn += a[j + m - 1];
                }
                if j > m {
                    dn += a[j - m - 1];
                }
                if j < m {
                    dn -= a[m - j - 1];
                }
                jac[(m - 1, j - 1)] = -mf * dn;
            }
            jac[(m - 1, m - 1)] += self.growth[m - 1];
        }
        jac
    }
}

/// A field viewed in permuted coordinates: `v[i] = u[perm[i]]`.
#[derive(Debug, Clone)]
pub struct Permuted<F> {
    inner: F,
    perm: Vec<usize>,
}

impl<F: VectorField> Permuted<F> {
    /// Returns `None` if `perm` is not a permutation of `0..dim`.
    pub fn new(inner: F, perm: Vec<usize>) -> Option<Self> {
        let d = inner.dim();
        if perm.len() != d {
            return None;
        }
        let mut seen = vec![false; d];
        for &p in &perm {
            if p >= d || seen[p] {
                return None;
            }
            seen[p] = true;
        }
        Some(Self { inner, perm })
    }

    pub fn inner(&self) -> &F {
        &self.inner
    }

    pub fn permutation(&self) -> &[usize] {
        &self.perm
    }

    /// Original coordinates to permuted ones.
    pub fn forward(&self, u: &[f64]) -> Vec<f64> {
        self.perm.iter().map(|&p| u[p]).collect()
    }

    /// Permuted coordinates back to original ones.
    pub fn backward(&self, v: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; v.len()];
        for (i, &p) in self.perm.iter().enumerate() {
            u[p] = v[i];
        }
        u
    }
}

impl<F: VectorField> VectorField for Permuted<F> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn rhs(&self, t: f64, v: &[f64], out: &mut [f64]) {
        let u = self.backward(v);
        let mut fu = vec![0.0; u.len()];
        self.inner.rhs(t, &u, &mut fu);
        for (o, &p) in out.iter_mut().zip(&self.perm) {
            *o = fu[p];
        }
    }

    fn jacobian(&self, t: f64, v: &[f64]) -> DMatrix<f64> {
        let u = self.backward(v);
        let j = self.inner.jacobian(t, &u);
        let d = self.perm.len();
        DMatrix::from_fn(d, d, |r, c| j[(self.perm[r], self.perm[c])])
    }
}

/// Autonomous linear field `u̇ = M u`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub matrix: DMatrix<f64>,
}

impl Linear {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        assert!(matrix.is_square(), "linear field needs a square matrix");
        Self { matrix }
    }
}

impl VectorField for Linear {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn rhs(&self, _t: f64, u: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (i, o) in out.iter_mut().enumerate().take(d) {
            *o = (0..d).map(|j| self.matrix[(i, j)] * u[j]).sum();
        }
    }

    fn jacobian(&self, _t: f64, _u: &[f64]) -> DMatrix<f64> {
        self.matrix.clone()
    }
}
