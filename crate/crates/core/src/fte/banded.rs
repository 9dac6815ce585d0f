//! Symmetric positive-definite band matrix with in-place Cholesky.

/// Lower band of a symmetric matrix: entry (i, j) with `i - bandwidth ≤ j ≤ i`.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bandwidth: usize,
    // row-major, row i holds columns i-bw ..= i at offsets 0 ..= bw
    data: Vec<f64>,
}

impl BandedSpd {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        BandedSpd {
            n,
            bandwidth,
            data: vec![0.0; n * (bandwidth + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i - j <= self.bandwidth);
        i * (self.bandwidth + 1) + (self.bandwidth - (i - j))
    }

    /// Entry (i, j) of the symmetric matrix; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if i - j > self.bandwidth {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to entry (i, j) (and implicitly (j, i)). Requires `i ≥ j`.
    #[inline]
    pub fn add_lower(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn add_diagonal(&mut self, i: usize, v: f64) {
        self.add_lower(i, i, v);
    }

    pub fn diagonal(&self, i: usize) -> f64 {
        self.data[self.idx(i, i)]
    }

    /// Replaces row and column `i` with the unit vector, decoupling variable `i`.
    pub fn pin(&mut self, i: usize) {
        let lo = i.saturating_sub(self.bandwidth);
        for j in lo..i {
            let k = self.idx(i, j);
            self.data[k] = 0.0;
        }
        let hi = (i + self.bandwidth + 1).min(self.n);
        for r in i + 1..hi {
            let k = self.idx(r, i);
            self.data[k] = 0.0;
        }
        let k = self.idx(i, i);
        self.data[k] = 1.0;
    }

    /// Cholesky factor `L` (stored in the same layout), or `None` if not positive definite.
    pub fn factor(mut self) -> Option<BandedCholesky> {
        let bw = self.bandwidth;
        let w = bw + 1;
        for j in 0..self.n {
            let lo = j.saturating_sub(bw);
            let row_j = j * w;
            let mut diag = self.data[row_j + bw];
            for k in lo..j {
                let l = self.data[row_j + bw - (j - k)];
                diag -= l * l;
            }
            if !(diag > 0.0) || !diag.is_finite() {
                return None;
            }
            let ljj = diag.sqrt();
            self.data[row_j + bw] = ljj;
            let hi = (j + bw + 1).min(self.n);
            for i in j + 1..hi {
                let row_i = i * w;
                let lo_i = i.saturating_sub(bw);
                let mut s = self.data[row_i + bw - (i - j)];
                for k in lo_i.max(lo)..j {
                    s -= self.data[row_i + bw - (i - k)] * self.data[row_j + bw - (j - k)];
                }
                self.data[row_i + bw - (i - j)] = s / ljj;
            }
        }
        Some(BandedCholesky { factor: self })
    }
}

#[derive(Debug, Clone)]
pub struct BandedCholesky {
    factor: BandedSpd,
}

impl BandedCholesky {
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let l = &self.factor;
        let n = l.n;
        let bw = l.bandwidth;
        let w = bw + 1;
        let mut y = rhs.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = y[i];
            for k in lo..i {
                s -= l.data[i * w + bw - (i - k)] * y[k];
            }
            y[i] = s / l.data[i * w + bw];
        }
        for i in (0..n).rev() {
            let hi = (i + bw + 1).min(n);
            let mut s = y[i];
            for k in i + 1..hi {
                s -= l.data[k * w + bw - (k - i)] * y[k];
            }
            y[i] = s / l.data[i * w + bw];
        }
        y
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_dense_cholesky() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 37;
        let bw = 5;
        let mut band = BandedSpd::zeros(n, bw);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i.saturating_sub(bw)..=i {
                let v: f64 = if i == j {
                    20.0 + rng.random::<f64>()
                } else {
                    rng.random::<f64>() - 0.5
                };
                band.add_lower(i, j, v);
                dense[(i, j)] = v;
                dense[(j, i)] = v;
            }
        }
        let rhs: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let x = band.factor().unwrap().solve(&rhs);
        let expected = dense.cholesky().unwrap().solve(&DVector::from_vec(rhs));
        for (a, b) in x.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pinned_variable_solves_to_rhs() {
        let mut band = BandedSpd::zeros(4, 1);
        for i in 0..4 {
            band.add_diagonal(i, 4.0);
            if i > 0 {
                band.add_lower(i, i - 1, 1.0);
            }
        }
        band.pin(2);
        let x = band.factor().unwrap().solve(&[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(x[2], 0.0);
    }

    #[test]
    fn indefinite_is_rejected() {
        let mut band = BandedSpd::zeros(2, 1);
        band.add_diagonal(0, 1.0);
        band.add_diagonal(1, 1.0);
        band.add_lower(1, 0, 2.0);
        assert!(band.factor().is_none());
    }
}
