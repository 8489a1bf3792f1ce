//! Shared numerical kernels: adaptive quadrature, bracketed bisection,
//! central differences, and small dense symmetric solves.

use crate::error::{Error, Result};

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance
/// `tol`, splitting first at the supplied interior `knots` so piecewise
/// integrands converge at full order.
pub fn integrate<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, knots: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    if b < a {
        return -integrate(f, b, a, tol, knots);
    }
    let mut cuts: Vec<f64> = knots.iter().copied().filter(|&k| k > a && k < b).collect();
    cuts.sort_by(|x, y| x.partial_cmp(y).unwrap());
    cuts.dedup();
    let mut total = 0.0;
    let mut lo = a;
    let piece_tol = tol / (cuts.len() + 1) as f64;
    for hi in cuts.into_iter().chain(std::iter::once(b)) {
        total += adaptive_simpson(f, lo, hi, piece_tol);
        lo = hi;
    }
    total
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Bracketed bisection for a root of `f` in `[lo, hi]`.
///
/// Fails with [`Error::NoBracket`] when the endpoint values do not change
/// sign. Iterates until the interval shrinks below `tol_x`, then checks the
/// residual against `tol_f`.
pub fn bisect<F: Fn(f64) -> f64>(
    f: &F,
    mut lo: f64,
    mut hi: f64,
    tol_x: f64,
    tol_f: f64,
    what: &str,
) -> Result<f64> {
    let flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    if flo.signum() == fhi.signum() || !flo.is_finite() || !fhi.is_finite() {
        return Err(Error::NoBracket(format!(
            "{what}: f({lo})={flo}, f({hi})={fhi}"
        )));
    }
    let mut flo = flo;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let fmid = f(mid);
        if fmid == 0.0 {
            return Ok(mid);
        }
        if fmid.signum() == flo.signum() {
            lo = mid;
            flo = fmid;
        } else {
            hi = mid;
        }
        if hi - lo < tol_x {
            break;
        }
    }
    let root = 0.5 * (lo + hi);
    let res = f(root);
    if res.abs() > tol_f {
        return Err(Error::NoBracket(format!(
            "{what}: residual {res} above {tol_f} at {root}"
        )));
    }
    Ok(root)
}

/// Central finite difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_diff<F: Fn(f64) -> f64>(f: &F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Cholesky factor of a symmetric positive definite matrix in row-major
/// order. Returns the lower factor, or an error naming the failing pivot.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::RegressionIllConditioned(format!(
                        "pivot {i} is {s:.3e}"
                    )));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve `L L^T x = b` given the lower Cholesky factor.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Crude 2-norm condition estimate of a symmetric positive definite matrix
/// via a few power iterations on `A` and on `A^{-1}` (through its factor).
pub fn condition_spd(a: &[f64], l: &[f64], n: usize) -> f64 {
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut hi = 0.0;
    for _ in 0..30 {
        let w = matvec(a, n, &v);
        hi = norm2(&w);
        if hi == 0.0 {
            return f64::INFINITY;
        }
        v = scale(&w, 1.0 / hi);
    }
    let mut u = vec![1.0 / (n as f64).sqrt(); n];
    let mut inv_hi = 0.0;
    for _ in 0..30 {
        let w = cholesky_solve(l, n, &u);
        inv_hi = norm2(&w);
        if inv_hi == 0.0 {
            return f64::INFINITY;
        }
        u = scale(&w, 1.0 / inv_hi);
    }
    hi * inv_hi
}

fn matvec(a: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    (0..n)
        .map(|i| (0..n).map(|j| a[i * n + j] * v[j]).sum())
        .collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn scale(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}
