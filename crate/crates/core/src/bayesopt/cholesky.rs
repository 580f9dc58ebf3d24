/// Lower-triangular Cholesky factor in packed row-major storage.
///
/// Rows are computed one at a time (Cholesky–Banachiewicz), so appending a
/// row for a new training point reproduces exactly what a factorization from
/// scratch would compute.
#[derive(Clone, Debug, Default)]
pub struct PackedCholesky {
    n: usize,
    data: Vec<f64>,
}

#[inline]
fn row_start(i: usize) -> usize {
    i * (i + 1) / 2
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * k + l] * b[4 * k + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in chunks * 4..a.len() {
        s += a[k] * b[k];
    }
    s
}

impl PackedCholesky {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            n: 0,
            data: Vec::with_capacity(row_start(n)),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        let s = row_start(i);
        &self.data[s..s + i + 1]
    }

    /// Appends the factor row for a matrix row `a` (`a.len() == len() + 1`,
    /// last entry on the diagonal). Returns `false`, leaving the factor
    /// untouched, if the extended matrix is not positive definite.
    pub fn push_row(&mut self, a: &[f64]) -> bool {
        let i = self.n;
        assert_eq!(a.len(), i + 1);
        let start = self.data.len();
        for j in 0..i {
            let (prev, cur) = self.data.split_at(start);
            let lj = &prev[row_start(j)..row_start(j) + j + 1];
            let s = a[j] - dot(&cur[..j], &lj[..j]);
            self.data.push(s / lj[j]);
        }
        let s = a[i] - dot(&self.data[start..start + i], &self.data[start..start + i]);
        if !(s > 0.0) || !s.is_finite() {
            self.data.truncate(start);
            return false;
        }
        self.data.push(s.sqrt());
        self.n += 1;
        true
    }

    /// Solves `L z = b`.
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let r = self.row(i);
            let s = b[i] - dot(&r[..i], &z[..i]);
            z.push(s / r[i]);
        }
        z
    }

    /// Solves `Lᵀ x = z`.
    pub fn backward(&self, z: &[f64]) -> Vec<f64> {
        let mut x = z.to_vec();
        for i in (0..self.n).rev() {
            let r = self.row(i);
            x[i] /= r[i];
            let xi = x[i];
            for k in 0..i {
                x[k] -= r[k] * xi;
            }
        }
        x
    }

    /// `log det(L Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.n).map(|i| self.row(i)[i].ln()).sum::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let d = (i as f64 - j as f64).abs();
                        (-d * d / 8.0).exp() + if i == j { 0.1 } else { 0.0 }
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn factor_reconstructs_matrix() {
        let a = spd(9);
        let mut l = PackedCholesky::new();
        for (i, row) in a.iter().enumerate() {
            assert!(l.push_row(&row[..=i]));
        }
        for i in 0..9 {
            for j in 0..=i {
                let s: f64 = (0..=j).map(|k| l.row(i)[k] * l.row(j)[k]).sum();
                assert!((s - a[i][j]).abs() < 1e-12);
            }
        }
        let b: Vec<f64> = (0..9).map(|i| i as f64 - 3.0).collect();
        let x = l.backward(&l.forward(&b));
        for i in 0..9 {
            let r: f64 = (0..9).map(|j| a[i][j] * x[j]).sum();
            assert!((r - b[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn indefinite_row_is_rejected_without_side_effects() {
        let mut l = PackedCholesky::new();
        assert!(l.push_row(&[1.0]));
        assert!(!l.push_row(&[2.0, 1.0]));
        assert_eq!(l.len(), 1);
        assert!(l.push_row(&[0.5, 1.0]));
        assert_eq!(l.len(), 2);
    }
}
