//! Discrete prolate spheroidal (Slepian) sequences.
//!
//! Tapers are computed from the classic symmetric tridiagonal formulation:
//! its eigenvectors equal the concentration-problem eigenvectors, but the
//! eigenvalues are well separated, so plain bisection plus inverse iteration
//! is accurate and fast even for long windows.

use ndarray::Array2;

/// Returns `k` unit-energy Slepian tapers of length `n` with time-half-
/// bandwidth product `nw`, as a `[k x n]` array ordered by decreasing
/// concentration.
pub fn dpss_tapers(n: usize, nw: f64, k: usize) -> Array2<f64> {
    assert!(n >= 2, "taper length must be at least 2");
    assert!(k >= 1 && k < n, "need 1 <= k < n");
    assert!(nw > 0.0 && nw < n as f64 / 2.0, "invalid time-half-bandwidth");

    let w = nw / n as f64;
    let cosw = (2.0 * std::f64::consts::PI * w).cos();
    let diag: Vec<f64> = (0..n)
        .map(|t| {
            let c = (n as f64 - 1.0) / 2.0 - t as f64;
            c * c * cosw
        })
        .collect();
    let off: Vec<f64> = (1..n).map(|t| (t * (n - t)) as f64 / 2.0).collect();

    // Gershgorin bounds for bisection.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { off[i - 1].abs() } else { 0.0 } + if i < n - 1 { off[i].abs() } else { 0.0 };
        lo = lo.min(diag[i] - r);
        hi = hi.max(diag[i] + r);
    }

    let mut tapers = Array2::zeros((k, n));
    let mut found: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        // j-th largest eigenvalue = eigenvalue index n-1-j (ascending).
        let target = n - 1 - j;
        let lambda = bisect_eigenvalue(&diag, &off, lo, hi, target);
        let v = inverse_iteration(&diag, &off, lambda, &found);
        for (t, &val) in v.iter().enumerate() {
            tapers[[j, t]] = val;
        }
        found.push(v);
    }
    tapers
}

/// Number of eigenvalues of the tridiagonal matrix strictly below `x`
/// (Sturm sequence count via the LDL^T recurrence).
fn sturm_count(diag: &[f64], off: &[f64], x: f64) -> usize {
    let n = diag.len();
    let mut count = 0;
    let mut q = diag[0] - x;
    if q < 0.0 {
        count += 1;
    }
    for i in 1..n {
        let e2 = off[i - 1] * off[i - 1];
        let denom = if q.abs() < 1e-300 { 1e-300_f64.copysign(q) } else { q };
        q = diag[i] - x - e2 / denom;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Bisection for the eigenvalue with ascending index `target`.
fn bisect_eigenvalue(diag: &[f64], off: &[f64], mut lo: f64, mut hi: f64, target: usize) -> f64 {
    for _ in 0..120 {
        let mid = 0.5 * (lo + hi);
        if sturm_count(diag, off, mid) <= target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Inverse iteration for one eigenvector of the shifted tridiagonal system,
/// with Gram-Schmidt against previously found vectors.
fn inverse_iteration(diag: &[f64], off: &[f64], lambda: f64, prev: &[Vec<f64>]) -> Vec<f64> {
    let n = diag.len();
    // Deterministic pseudo-random start vector.
    let mut v: Vec<f64> = (0..n)
        .map(|i| {
            let s = (i as u64).wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        })
        .collect();
    normalize(&mut v);

    for _ in 0..4 {
        let mut y = solve_shifted_tridiag(diag, off, lambda, &v);
        for p in prev {
            let dot: f64 = y.iter().zip(p).map(|(a, b)| a * b).sum();
            for (yi, pi) in y.iter_mut().zip(p) {
                *yi -= dot * pi;
            }
        }
        normalize(&mut y);
        v = y;
    }

    // Fix the overall sign: first significant element positive.
    let max_abs = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if let Some(first) = v.iter().find(|x| x.abs() > 1e-8 * max_abs) {
        if *first < 0.0 {
            for x in &mut v {
                *x = -*x;
            }
        }
    }
    v
}

/// Solves (T - lambda I) x = b for tridiagonal T via LU with partial
/// pivoting (one extra superdiagonal of fill-in).
fn solve_shifted_tridiag(diag: &[f64], off: &[f64], lambda: f64, b: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut d: Vec<f64> = diag.iter().map(|&x| x - lambda).collect();
    let mut e: Vec<f64> = off.to_vec(); // superdiagonal
    let mut c: Vec<f64> = off.to_vec(); // subdiagonal
    let mut f = vec![0.0; n]; // second superdiagonal fill-in
    let mut x = b.to_vec();

    for i in 0..n - 1 {
        if c[i].abs() > d[i].abs() {
            // Pivot: swap row i and i+1.
            x.swap(i, i + 1);
            std::mem::swap(&mut d[i], &mut c[i]);
            let tmp = e[i];
            e[i] = d[i + 1];
            d[i + 1] = tmp;
            if i + 1 < n - 1 {
                f[i] = e[i + 1];
                e[i + 1] = 0.0;
            }
        }
        let piv = if d[i].abs() < 1e-300 { 1e-300_f64.copysign(d[i]) } else { d[i] };
        let m = c[i] / piv;
        d[i + 1] -= m * e[i];
        if i + 1 < n - 1 {
            e[i + 1] -= m * f[i];
        }
        x[i + 1] -= m * x[i];
    }

    // Back substitution.
    let piv = if d[n - 1].abs() < 1e-300 { 1e-300_f64.copysign(d[n - 1]) } else { d[n - 1] };
    x[n - 1] /= piv;
    if n >= 2 {
        let piv = if d[n - 2].abs() < 1e-300 { 1e-300_f64.copysign(d[n - 2]) } else { d[n - 2] };
        x[n - 2] = (x[n - 2] - e[n - 2] * x[n - 1]) / piv;
    }
    for i in (0..n.saturating_sub(2)).rev() {
        let piv = if d[i].abs() < 1e-300 { 1e-300_f64.copysign(d[i]) } else { d[i] };
        x[i] = (x[i] - e[i] * x[i + 1] - f[i] * x[i + 2]) / piv;
    }
    x
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tridiag_mul(diag: &[f64], off: &[f64], v: &[f64]) -> Vec<f64> {
        let n = diag.len();
        (0..n)
            .map(|i| {
                let mut s = diag[i] * v[i];
                if i > 0 {
                    s += off[i - 1] * v[i - 1];
                }
                if i < n - 1 {
                    s += off[i] * v[i + 1];
                }
                s
            })
            .collect()
    }

    #[test]
    fn tapers_are_orthonormal() {
        let t = dpss_tapers(256, 4.0, 7);
        for i in 0..7 {
            for j in 0..7 {
                let dot: f64 = (0..256).map(|s| t[[i, s]] * t[[j, s]]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8, "({i},{j}) dot={dot}");
            }
        }
    }

    #[test]
    fn tapers_are_eigenvectors_of_the_tridiagonal() {
        let n = 300;
        let nw = 4.0;
        let w = nw / n as f64;
        let cosw = (2.0 * std::f64::consts::PI * w).cos();
        let diag: Vec<f64> = (0..n)
            .map(|t| {
                let c = (n as f64 - 1.0) / 2.0 - t as f64;
                c * c * cosw
            })
            .collect();
        let off: Vec<f64> = (1..n).map(|t| (t * (n - t)) as f64 / 2.0).collect();

        let tapers = dpss_tapers(n, nw, 5);
        for k in 0..5 {
            let v: Vec<f64> = (0..n).map(|i| tapers[[k, i]]).collect();
            let tv = tridiag_mul(&diag, &off, &v);
            // Rayleigh quotient as the eigenvalue estimate.
            let lambda: f64 = tv.iter().zip(&v).map(|(a, b)| a * b).sum();
            let resid: f64 = tv
                .iter()
                .zip(&v)
                .map(|(a, b)| (a - lambda * b) * (a - lambda * b))
                .sum::<f64>()
                .sqrt();
            assert!(resid < 1e-6 * lambda.abs().max(1.0), "k={k} resid={resid}");
        }
    }

    #[test]
    fn first_taper_concentrates_in_band() {
        // The leading taper's spectrum must hold nearly all its energy
        // inside |f| <= W.
        let n = 512;
        let nw = 4.0;
        let t = dpss_tapers(n, nw, 1);
        let x: Vec<f64> = (0..n).map(|i| t[[0, i]]).collect();
        let pad = 8 * n;
        let mut padded = vec![0.0; pad];
        padded[..n].copy_from_slice(&x);
        let spec = crate::dsp::fft::fft_real(&padded);
        let w = nw / n as f64;
        let total: f64 = spec.iter().map(|c| c.norm_sqr()).sum();
        let inband: f64 = spec
            .iter()
            .enumerate()
            .filter(|(i, _)| {
                let f = if *i <= pad / 2 { *i as f64 } else { *i as f64 - pad as f64 } / pad as f64;
                f.abs() <= w
            })
            .map(|(_, c)| c.norm_sqr())
            .sum();
        assert!(inband / total > 0.999, "concentration {}", inband / total);
    }
}
