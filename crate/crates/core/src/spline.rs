//! Not-a-knot cubic splines over arbitrary increasing knots, vector valued.
//!
//! Every derivative along the path parameter goes through this module, so the
//! discrete operators and their inverses share one differentiation rule.

use nalgebra::{DMatrix, DVector};

/// Five-point Gauss–Legendre rule on [-1, 1].
pub(crate) const GAUSS_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683,
    0.0,
    0.538_469_310_105_683,
    0.906_179_845_938_664,
];
pub(crate) const GAUSS_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189,
    0.478_628_670_499_366,
    0.568_888_888_888_889,
    0.478_628_670_499_366,
    0.236_926_885_056_189,
];

/// Gauss points and weights mapped to `[a, b]`.
pub(crate) fn gauss_on(a: f64, b: f64) -> [(f64, f64); 5] {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut out = [(0.0, 0.0); 5];
    for k in 0..5 {
        out[k] = (mid + half * GAUSS_NODES[k], half * GAUSS_WEIGHTS[k]);
    }
    out
}

/// Interpolating cubic spline with not-a-knot end conditions.
///
/// Values are stored row-per-knot so that one spline carries all components
/// of a curve in ℝ^N.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    knots: Vec<f64>,
    values: DMatrix<f64>,
    second: DMatrix<f64>,
}

impl CubicSpline {
    /// Builds the spline from a knot vector and a `knots × components` matrix.
    ///
    /// Panics if fewer than two knots are given or the knots are not strictly
    /// increasing; callers validate their grids first.
    pub fn new(knots: &[f64], values: DMatrix<f64>) -> Self {
        let p = knots.len();
        assert!(p >= 2, "spline needs at least two knots");
        assert_eq!(values.nrows(), p, "one value row per knot");
        assert!(
            knots.windows(2).all(|w| w[1] > w[0]),
            "spline knots must be strictly increasing"
        );
        let second = second_derivatives(knots, &values);
        Self {
            knots: knots.to_vec(),
            values,
            second,
        }
    }

    pub fn from_points(knots: &[f64], points: &[DVector<f64>]) -> Self {
        let dim = points.first().map_or(0, |p| p.len());
        let values = DMatrix::from_fn(points.len(), dim, |i, j| points[i][j]);
        Self::new(knots, values)
    }

    pub fn scalar(knots: &[f64], values: &[f64]) -> Self {
        Self::new(knots, DMatrix::from_column_slice(values.len(), 1, values))
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    fn cell(&self, x: f64) -> usize {
        let p = self.knots.len();
        let idx = self.knots.partition_point(|&k| k <= x);
        idx.saturating_sub(1).min(p - 2)
    }

    pub fn eval(&self, x: f64) -> DVector<f64> {
        let i = self.cell(x);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let (a, b) = (x1 - x, x - x0);
        DVector::from_fn(self.dim(), |c, _| {
            let (m0, m1) = (self.second[(i, c)], self.second[(i + 1, c)]);
            let (y0, y1) = (self.values[(i, c)], self.values[(i + 1, c)]);
            m0 * a * a * a / (6.0 * h)
                + m1 * b * b * b / (6.0 * h)
                + (y0 / h - m0 * h / 6.0) * a
                + (y1 / h - m1 * h / 6.0) * b
        })
    }

    pub fn deriv(&self, x: f64) -> DVector<f64> {
        let i = self.cell(x);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let (a, b) = (x1 - x, x - x0);
        DVector::from_fn(self.dim(), |c, _| {
            let (m0, m1) = (self.second[(i, c)], self.second[(i + 1, c)]);
            let (y0, y1) = (self.values[(i, c)], self.values[(i + 1, c)]);
            -m0 * a * a / (2.0 * h) + m1 * b * b / (2.0 * h) + (y1 - y0) / h - (m1 - m0) * h / 6.0
        })
    }

    pub fn deriv2(&self, x: f64) -> DVector<f64> {
        let i = self.cell(x);
        let (x0, x1) = (self.knots[i], self.knots[i + 1]);
        let h = x1 - x0;
        let (a, b) = (x1 - x, x - x0);
        DVector::from_fn(self.dim(), |c, _| {
            (self.second[(i, c)] * a + self.second[(i + 1, c)] * b) / h
        })
    }

    /// First derivatives at every knot.
    pub fn knot_derivs(&self) -> Vec<DVector<f64>> {
        let p = self.knots.len();
        (0..p)
            .map(|i| {
                // left end of cell i, except the last knot which is the right end of cell p-2
                let (cell, at_right) = if i + 1 < p { (i, false) } else { (p - 2, true) };
                let h = self.knots[cell + 1] - self.knots[cell];
                DVector::from_fn(self.dim(), |c, _| {
                    let (m0, m1) = (self.second[(cell, c)], self.second[(cell + 1, c)]);
                    let slope = (self.values[(cell + 1, c)] - self.values[(cell, c)]) / h;
                    if at_right {
                        slope + h * (2.0 * m1 + m0) / 6.0
                    } else {
                        slope - h * (2.0 * m0 + m1) / 6.0
                    }
                })
            })
            .collect()
    }

    /// Second derivatives at every knot.
    pub fn knot_second_derivs(&self) -> Vec<DVector<f64>> {
        (0..self.knots.len()).map(|i| self.second.row(i).transpose()).collect()
    }
}

/// Solves for the knot second derivatives under not-a-knot end conditions.
fn second_derivatives(x: &[f64], y: &DMatrix<f64>) -> DMatrix<f64> {
    let p = x.len();
    let k = y.ncols();
    let mut m = DMatrix::zeros(p, k);
    match p {
        2 => return m,
        3 => {
            // a single parabola
            let (h0, h1) = (x[1] - x[0], x[2] - x[1]);
            for c in 0..k {
                let d0 = (y[(1, c)] - y[(0, c)]) / h0;
                let d1 = (y[(2, c)] - y[(1, c)]) / h1;
                let curv = 2.0 * (d1 - d0) / (h0 + h1);
                for i in 0..3 {
                    m[(i, c)] = curv;
                }
            }
            return m;
        }
        _ => {}
    }
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let rows = p - 2;
    let mut lower = vec![0.0; rows];
    let mut diag = vec![0.0; rows];
    let mut upper = vec![0.0; rows];
    let mut rhs = DMatrix::zeros(rows, k);
    for r in 0..rows {
        let i = r + 1;
        lower[r] = h[i - 1];
        diag[r] = 2.0 * (h[i - 1] + h[i]);
        upper[r] = h[i];
        for c in 0..k {
            rhs[(r, c)] = 6.0 * ((y[(i + 1, c)] - y[(i, c)]) / h[i] - (y[(i, c)] - y[(i - 1, c)]) / h[i - 1]);
        }
    }
    // eliminate M_0 from the first row
    let (h0, h1) = (h[0], h[1]);
    diag[0] += h0 * (h0 + h1) / h1;
    upper[0] -= h0 * h0 / h1;
    lower[0] = 0.0;
    // eliminate M_{p-1} from the last row
    let (a, b) = (h[p - 3], h[p - 2]);
    diag[rows - 1] += b * (a + b) / a;
    lower[rows - 1] -= b * b / a;
    upper[rows - 1] = 0.0;

    let inner = solve_tridiagonal(&lower, &diag, &upper, rhs);
    for r in 0..rows {
        m.set_row(r + 1, &inner.row(r));
    }
    for c in 0..k {
        m[(0, c)] = ((h0 + h1) * m[(1, c)] - h0 * m[(2, c)]) / h1;
        m[(p - 1, c)] = ((a + b) * m[(p - 2, c)] - b * m[(p - 3, c)]) / a;
    }
    m
}

fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], mut rhs: DMatrix<f64>) -> DMatrix<f64> {
    let n = diag.len();
    let k = rhs.ncols();
    let mut c_prime = vec![0.0; n];
    let mut denom = diag[0];
    c_prime[0] = upper[0] / denom;
    for c in 0..k {
        rhs[(0, c)] /= denom;
    }
    for i in 1..n {
        denom = diag[i] - lower[i] * c_prime[i - 1];
        c_prime[i] = if i + 1 < n { upper[i] / denom } else { 0.0 };
        for c in 0..k {
            rhs[(i, c)] = (rhs[(i, c)] - lower[i] * rhs[(i - 1, c)]) / denom;
        }
    }
    for i in (0..n - 1).rev() {
        for c in 0..k {
            rhs[(i, c)] -= c_prime[i] * rhs[(i + 1, c)];
        }
    }
    rhs
}

/// Matrix `D` with `(D y)_i = S'(x_i)` for the spline through `y`.
pub fn differentiation_matrix(knots: &[f64]) -> DMatrix<f64> {
    let p = knots.len();
    let basis = CubicSpline::new(knots, DMatrix::identity(p, p));
    let derivs = basis.knot_derivs();
    DMatrix::from_fn(p, p, |i, j| derivs[i][j])
}

/// Weights `w` with `S(x) = Σ_j w_j y_j`.
pub fn interpolation_weights(knots: &[f64], x: f64) -> DVector<f64> {
    let p = knots.len();
    CubicSpline::new(knots, DMatrix::identity(p, p)).eval(x)
}

/// Weights `w` with `S'(x) = Σ_j w_j y_j`.
pub fn derivative_weights(knots: &[f64], x: f64) -> DVector<f64> {
    let p = knots.len();
    CubicSpline::new(knots, DMatrix::identity(p, p)).deriv(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Vec<f64> {
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }

    #[test]
    fn reproduces_cubics_exactly() {
        let x = grid(9);
        let f = |t: f64| 2.0 * t * t * t - t * t + 0.5 * t - 3.0;
        let df = |t: f64| 6.0 * t * t - 2.0 * t + 0.5;
        let y: Vec<f64> = x.iter().map(|&t| f(t)).collect();
        let s = CubicSpline::scalar(&x, &y);
        for &t in &[0.0, 0.03, 0.37, 0.5, 0.91, 1.0] {
            assert!((s.eval(t)[0] - f(t)).abs() < 1e-12);
            assert!((s.deriv(t)[0] - df(t)).abs() < 1e-11);
            assert!((s.deriv2(t)[0] - (12.0 * t - 2.0)).abs() < 1e-9);
        }
        for (i, d) in s.knot_derivs().iter().enumerate() {
            assert!((d[0] - df(x[i])).abs() < 1e-11);
        }
    }

    #[test]
    fn nonuniform_knots_and_small_sizes() {
        let x = vec![0.0, 0.1, 0.15, 0.4, 1.0];
        let y: Vec<f64> = x.iter().map(|t| t * t * t).collect();
        let s = CubicSpline::scalar(&x, &y);
        assert!((s.deriv(0.7)[0] - 3.0 * 0.49).abs() < 1e-10);

        let s3 = CubicSpline::scalar(&[0.0, 0.5, 1.0], &[0.0, 0.25, 1.0]);
        assert!((s3.deriv(0.2)[0] - 0.4).abs() < 1e-12);
        let s2 = CubicSpline::scalar(&[0.0, 1.0], &[1.0, 3.0]);
        assert!((s2.eval(0.25)[0] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn derivative_converges_at_fourth_order_on_smooth_data() {
        let err = |n: usize| {
            let x = grid(n);
            let y: Vec<f64> = x.iter().map(|t| (3.0 * t).sin()).collect();
            let d = CubicSpline::scalar(&x, &y).knot_derivs();
            x.iter()
                .zip(&d)
                .map(|(t, d)| (d[0] - 3.0 * (3.0 * t).cos()).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(20), err(40));
        assert!(e1 / e2 > 7.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn weight_vectors_match_direct_evaluation() {
        let x = grid(12);
        let y: Vec<f64> = x.iter().map(|t| (t * 5.0).cos()).collect();
        let s = CubicSpline::scalar(&x, &y);
        let yv = DVector::from_column_slice(&y);
        let w = interpolation_weights(&x, 0.437);
        assert!((w.dot(&yv) - s.eval(0.437)[0]).abs() < 1e-13);
        let dw = derivative_weights(&x, 0.437);
        assert!((dw.dot(&yv) - s.deriv(0.437)[0]).abs() < 1e-12);
        let d = differentiation_matrix(&x);
        let dy = &d * &yv;
        for (i, k) in s.knot_derivs().iter().enumerate() {
            assert!((dy[i] - k[0]).abs() < 1e-11);
        }
    }
}
