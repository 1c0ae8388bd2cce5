//! Least-squares projection of per-path values onto polynomials in the state.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Polynomial in the standardized state `z = (x − center) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyFit {
    pub center: f64,
    pub scale: f64,
    pub coeffs: Vec<f64>,
}

impl PolyFit {
    pub fn zero() -> Self {
        Self::constant(0.0)
    }

    pub fn constant(c: f64) -> Self {
        PolyFit { center: 0.0, scale: 1.0, coeffs: vec![c] }
    }

    /// Polynomial with monomial coefficients in raw `x`.
    pub fn from_raw(coeffs: Vec<f64>) -> Self {
        PolyFit { center: 0.0, scale: 1.0, coeffs }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        let z = (x - self.center) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * z + c)
    }

    /// d/dx of the polynomial.
    pub fn derivative(&self) -> PolyFit {
        if self.coeffs.len() <= 1 {
            return PolyFit { center: self.center, scale: self.scale, coeffs: vec![0.0] };
        }
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, &c)| k as f64 * c / self.scale)
            .collect();
        PolyFit { center: self.center, scale: self.scale, coeffs }
    }

    pub fn scaled(mut self, factor: f64) -> PolyFit {
        for c in &mut self.coeffs {
            *c *= factor;
        }
        self
    }

    /// Adds `slope · x`.
    pub fn add_linear(mut self, slope: f64) -> PolyFit {
        if self.coeffs.len() < 2 {
            self.coeffs.resize(2, 0.0);
        }
        self.coeffs[0] += slope * self.center;
        self.coeffs[1] += slope * self.scale;
        self
    }

    /// Monomial coefficients in raw `x`, lowest order first.
    pub fn raw_coefficients(&self) -> Vec<f64> {
        // Σ_k c_k ((x − m)/s)^k expanded with binomial coefficients.
        let n = self.coeffs.len();
        let mut out = vec![0.0; n];
        for (k, &ck) in self.coeffs.iter().enumerate() {
            let a = ck / self.scale.powi(k as i32);
            let mut binom = 1.0;
            for j in 0..=k {
                out[j] += a * binom * (-self.center).powi((k - j) as i32);
                binom = binom * (k - j) as f64 / (j + 1) as f64;
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
}

/// Result of a conditional-expectation fit.
#[derive(Debug, Clone)]
pub struct CondExp {
    pub fit: PolyFit,
    /// Fitted function evaluated at each input state.
    pub fitted: Vec<f64>,
    /// Degree actually used, lower than requested after a rank fallback.
    pub degree_used: usize,
}

impl CondExp {
    pub fn fell_back(&self, basis: RegressionBasis) -> bool {
        self.degree_used < basis.degree
    }
}

const RANK_TOL: f64 = 1e-11;

/// Projects `values` onto polynomials of `states` of degree ≤ `basis.degree`.
///
/// States are standardized before building the normal equations. When the
/// Gram matrix is numerically singular (too few distinct states) the degree
/// is lowered until it is not; a constant fit always succeeds.
pub fn condexp(values: &[f64], states: &[f64], basis: RegressionBasis) -> CondExp {
    assert_eq!(values.len(), states.len());
    let n = states.len();
    assert!(n > 0, "condexp needs at least one sample");
    let nf = n as f64;
    let center = states.iter().sum::<f64>() / nf;
    let var = states.iter().map(|x| (x - center).powi(2)).sum::<f64>() / nf;
    let spread_floor = 1e-12 * center.abs().max(1.0);
    let scale = if var.sqrt() > spread_floor { var.sqrt() } else { 1.0 };
    let mut degree = if var.sqrt() > spread_floor { basis.degree } else { 0 };

    loop {
        if let Some(coeffs) = solve_normal_equations(values, states, center, scale, degree) {
            let fit = PolyFit { center, scale, coeffs };
            let fitted = states.iter().map(|&x| fit.eval(x)).collect();
            if degree < basis.degree {
                log::debug!("condexp: rank fallback from degree {} to {}", basis.degree, degree);
            }
            return CondExp { fit, fitted, degree_used: degree };
        }
        degree -= 1;
    }
}

fn solve_normal_equations(values: &[f64], states: &[f64], center: f64, scale: f64, degree: usize) -> Option<Vec<f64>> {
    let d = degree + 1;
    let n = states.len() as f64;
    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    let mut pows = vec![0.0; 2 * d - 1];
    // Sum over paths of z^k for k ≤ 2·degree fills the Hankel Gram matrix.
    let mut moments = vec![0.0; 2 * d - 1];
    for (&x, &v) in states.iter().zip(values) {
        let z = (x - center) / scale;
        let mut p = 1.0;
        for slot in pows.iter_mut() {
            *slot = p;
            p *= z;
        }
        for (m, p) in moments.iter_mut().zip(&pows) {
            *m += p;
        }
        for (r, p) in rhs.iter_mut().zip(&pows[..d]) {
            *r += v * p;
        }
    }
    for i in 0..d {
        for j in 0..d {
            gram[i * d + j] = moments[i + j] / n;
        }
    }
    let g = DMatrix::from_row_slice(d, d, &gram);
    if degree > 0 {
        let eig = g.clone().symmetric_eigenvalues();
        let max = eig.iter().cloned().fold(0.0, f64::max);
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || min / max < RANK_TOL {
            return None;
        }
    }
    let b = DVector::from_iterator(d, rhs.iter().map(|r| r / n));
    let chol = g.cholesky()?;
    let sol = chol.solve(&b);
    let coeffs: Vec<f64> = sol.iter().cloned().collect();
    coeffs.iter().all(|c| c.is_finite()).then_some(coeffs)
}
