//! Symmetric positive definite solver for matrices with half-bandwidth 4.

pub(crate) const BAND: usize = 4;

/// Lower band storage: `rows[i][k] = A[i][i - k]`.
#[derive(Debug, Clone)]
pub(crate) struct BandedSpd {
    rows: Vec<[f64; BAND + 1]>,
}

impl BandedSpd {
    pub(crate) fn zeros(n: usize) -> Self {
        Self { rows: vec![[0.0; BAND + 1]; n] }
    }

    /// Adds `v` to `A[i][j]` (and its mirror). Requires `|i - j| <= BAND`.
    #[inline]
    pub(crate) fn add(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        debug_assert!(hi - lo <= BAND);
        self.rows[hi][hi - lo] += v;
    }

    pub(crate) fn max_diag(&self) -> f64 {
        self.rows.iter().map(|r| r[0]).fold(0.0, f64::max)
    }

    pub(crate) fn add_diag(&mut self, v: f64) {
        for r in &mut self.rows {
            r[0] += v;
        }
    }

    /// In-place Cholesky `A = L Lᵀ`. Returns `None` if a pivot is not positive.
    pub(crate) fn factor(mut self) -> Option<BandedCholesky> {
        let n = self.rows.len();
        for i in 0..n {
            let k0 = i.saturating_sub(BAND);
            for j in k0..=i {
                // s = A[i][j] - sum_{k<j} L[i][k] L[j][k]
                let mut s = self.rows[i][i - j];
                let kmin = k0.max(j.saturating_sub(BAND));
                for k in kmin..j {
                    s -= self.rows[i][i - k] * self.rows[j][j - k];
                }
                if i == j {
                    if s.is_nan() || s <= 0.0 || s.is_infinite() {
                        return None;
                    }
                    self.rows[i][0] = s.sqrt();
                } else {
                    self.rows[i][i - j] = s / self.rows[j][0];
                }
            }
        }
        Some(BandedCholesky { rows: self.rows })
    }
}

pub(crate) struct BandedCholesky {
    rows: Vec<[f64; BAND + 1]>,
}

impl BandedCholesky {
    pub(crate) fn solve(&self, b: &mut [f64]) {
        let n = self.rows.len();
        debug_assert_eq!(b.len(), n);
        for i in 0..n {
            let mut s = b[i];
            for k in i.saturating_sub(BAND)..i {
                s -= self.rows[i][i - k] * b[k];
            }
            b[i] = s / self.rows[i][0];
        }
        for i in (0..n).rev() {
            let mut s = b[i];
            for k in (i + 1)..n.min(i + BAND + 1) {
                s -= self.rows[k][k - i] * b[k];
            }
            b[i] = s / self.rows[i][0];
        }
    }
}
