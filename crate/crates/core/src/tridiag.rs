//! Complex tridiagonal matrices and their LU (Thomas) factorisation.

use num_complex::Complex64;

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tridiag {
    /// `lower[i]` multiplies `x[i-1]` in row `i`; `lower[0]` is unused.
    pub lower: Vec<Complex64>,
    pub diag: Vec<Complex64>,
    /// `upper[i]` multiplies `x[i+1]` in row `i`; the last entry is unused.
    pub upper: Vec<Complex64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct SingularPivot {
    pub row: usize,
}

impl Tridiag {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn mul_vec(&self, x: &[Complex64], out: &mut [Complex64]) {
        let n = self.len();
        for i in 0..n {
            let mut acc = self.diag[i] * x[i];
            if i > 0 {
                acc += self.lower[i] * x[i - 1];
            }
            if i + 1 < n {
                acc += self.upper[i] * x[i + 1];
            }
            out[i] = acc;
        }
    }

    pub fn conj_transpose(&self) -> Tridiag {
        let n = self.len();
        let zero = Complex64::new(0.0, 0.0);
        let mut lower = vec![zero; n];
        let mut upper = vec![zero; n];
        for i in 0..n.saturating_sub(1) {
            // entry (i, i+1) moves to (i+1, i) and vice versa
            lower[i + 1] = self.upper[i].conj();
            upper[i] = self.lower[i + 1].conj();
        }
        Tridiag {
            lower,
            diag: self.diag.iter().map(|d| d.conj()).collect(),
            upper,
        }
    }

    pub fn factor(&self) -> Result<TridiagLu, SingularPivot> {
        let n = self.len();
        let scale = self.diag.iter().map(|d| d.norm()).fold(0.0_f64, f64::max).max(f64::MIN_POSITIVE);
        let mut pivots = Vec::with_capacity(n);
        let mut multipliers = Vec::with_capacity(n);
        let mut c_prime = Vec::with_capacity(n);
        for i in 0..n {
            let (l, piv) = if i == 0 {
                (Complex64::new(0.0, 0.0), self.diag[0])
            } else {
                let l = self.lower[i];
                (l, self.diag[i] - l * c_prime[i - 1])
            };
            if !(piv.norm() > 1e-14 * scale) || !piv.re.is_finite() || !piv.im.is_finite() {
                return Err(SingularPivot { row: i });
            }
            pivots.push(piv);
            multipliers.push(l);
            c_prime.push(if i + 1 < n { self.upper[i] / piv } else { Complex64::new(0.0, 0.0) });
        }
        Ok(TridiagLu {
            pivots,
            multipliers,
            c_prime,
        })
    }
}

#[derive(Debug, Clone)]
pub(crate) struct TridiagLu {
    pivots: Vec<Complex64>,
    multipliers: Vec<Complex64>,
    c_prime: Vec<Complex64>,
}

impl TridiagLu {
    /// Solves in place.
    pub fn solve(&self, rhs: &mut [Complex64]) {
        let n = self.pivots.len();
        rhs[0] /= self.pivots[0];
        for i in 1..n {
            let prev = rhs[i - 1];
            rhs[i] = (rhs[i] - self.multipliers[i] * prev) / self.pivots[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            let next = rhs[i + 1];
            rhs[i] -= self.c_prime[i] * next;
        }
    }
}
