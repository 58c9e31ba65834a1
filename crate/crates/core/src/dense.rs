//! Small kernels on row-major `d×d` blocks stored in flat slices.

use alloc::vec::Vec;
use nalgebra::DMatrix;

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| {
        let a = x.abs();
        if a > m || a.is_nan() {
            a
        } else {
            m
        }
    })
}

pub(crate) fn one_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row-major copy of a square matrix.
pub(crate) fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// `out = m x`
#[inline]
pub(crate) fn gemv(d: usize, m: &[f64], x: &[f64], out: &mut [f64]) {
    for i in 0..d {
        let row = &m[i * d..(i + 1) * d];
        out[i] = dot(row, x);
    }
}

/// `out -= m x`
#[inline]
pub(crate) fn gemv_sub(d: usize, m: &[f64], x: &[f64], out: &mut [f64]) {
    for i in 0..d {
        let row = &m[i * d..(i + 1) * d];
        out[i] -= dot(row, x);
    }
}

/// `out = mᵀ x`
#[inline]
pub(crate) fn gemv_t(d: usize, m: &[f64], x: &[f64], out: &mut [f64]) {
    out[..d].fill(0.0);
    for (i, &xi) in x.iter().enumerate().take(d) {
        if xi == 0.0 {
            continue;
        }
        let row = &m[i * d..(i + 1) * d];
        for (o, r) in out.iter_mut().zip(row) {
            *o += r * xi;
        }
    }
}

/// `out -= mᵀ x`
#[inline]
pub(crate) fn gemv_t_sub(d: usize, m: &[f64], x: &[f64], out: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate().take(d) {
        if xi == 0.0 {
            continue;
        }
        let row = &m[i * d..(i + 1) * d];
        for (o, r) in out.iter_mut().zip(row) {
            *o -= r * xi;
        }
    }
}

/// `out = a b` with `a` `d×d` and `b`, `out` `d×c`, all row-major.
#[inline]
pub(crate) fn gemm(d: usize, c: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out[..d * c].fill(0.0);
    for i in 0..d {
        let orow = &mut out[i * c..(i + 1) * c];
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[k * c..(k + 1) * c]) {
                *o += aik * bv;
            }
        }
    }
}

/// `out -= a b`
#[inline]
pub(crate) fn gemm_sub(d: usize, c: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..d {
        let orow = &mut out[i * c..(i + 1) * c];
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[k * c..(k + 1) * c]) {
                *o -= aik * bv;
            }
        }
    }
}

/// `out = aᵀ b`
#[inline]
pub(crate) fn gemm_t(d: usize, c: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out[..d * c].fill(0.0);
    for k in 0..d {
        let brow = &b[k * c..(k + 1) * c];
        for i in 0..d {
            let aki = a[k * d + i];
            if aki == 0.0 {
                continue;
            }
            for (o, bv) in out[i * c..(i + 1) * c].iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
}

/// `out -= aᵀ b`
#[inline]
pub(crate) fn gemm_t_sub(d: usize, c: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for k in 0..d {
        let brow = &b[k * c..(k + 1) * c];
        for i in 0..d {
            let aki = a[k * d + i];
            if aki == 0.0 {
                continue;
            }
            for (o, bv) in out[i * c..(i + 1) * c].iter_mut().zip(brow) {
                *o -= aki * bv;
            }
        }
    }
}
