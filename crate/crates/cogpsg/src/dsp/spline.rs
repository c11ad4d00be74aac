//! Natural cubic spline interpolation (used to resample RR tachograms onto a
//! uniform grid).

/// Interpolating natural cubic spline over strictly increasing knots.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    /// Second derivatives at the knots.
    m: Vec<f64>,
}

impl CubicSpline {
    /// Builds the spline. Requires at least two knots with strictly
    /// increasing abscissae.
    pub fn new(xs: &[f64], ys: &[f64]) -> CubicSpline {
        assert_eq!(xs.len(), ys.len());
        assert!(xs.len() >= 2, "need at least two knots");
        assert!(
            xs.windows(2).all(|w| w[1] > w[0]),
            "knots must be strictly increasing"
        );
        let n = xs.len();
        let mut m = vec![0.0; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives.
            let sys_n = n - 2;
            let mut diag = vec![0.0; sys_n];
            let mut sub = vec![0.0; sys_n];
            let mut sup = vec![0.0; sys_n];
            let mut rhs = vec![0.0; sys_n];
            for i in 0..sys_n {
                let h0 = xs[i + 1] - xs[i];
                let h1 = xs[i + 2] - xs[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                sub[i] = h0;
                sup[i] = h1;
                rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h1 - (ys[i + 1] - ys[i]) / h0);
            }
            // Thomas algorithm.
            for i in 1..sys_n {
                let w = sub[i] / diag[i - 1];
                diag[i] -= w * sup[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[sys_n] = rhs[sys_n - 1] / diag[sys_n - 1];
            for i in (0..sys_n - 1).rev() {
                m[i + 1] = (rhs[i] - sup[i] * m[i + 2]) / diag[i];
            }
        }
        CubicSpline { xs: xs.to_vec(), ys: ys.to_vec(), m }
    }

    /// Evaluates the spline; clamps to the end values outside the knot range.
    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = match self.xs.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => return self.ys[i],
            Err(i) => i - 1,
        };
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproduces_straight_lines_exactly() {
        let xs: Vec<f64> = vec![0.0, 1.0, 2.5, 4.0, 7.0];
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x - 2.0).collect();
        let s = CubicSpline::new(&xs, &ys);
        for i in 0..70 {
            let x = i as f64 * 0.1;
            assert!((s.eval(x) - (3.0 * x - 2.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn approximates_smooth_functions() {
        let xs: Vec<f64> = (0..40).map(|i| i as f64 * 0.25).collect();
        let ys: Vec<f64> = xs.iter().map(|x| (x * 0.7).sin()).collect();
        let s = CubicSpline::new(&xs, &ys);
        for i in 0..95 {
            let x = 0.125 + i as f64 * 0.1;
            assert!((s.eval(x) - (x * 0.7).sin()).abs() < 1e-3);
        }
    }
}
