use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

/// Compressed sparse row matrix with `f64` values.
///
/// Column indices are strictly increasing within each row.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    pub fn new(
        rows: usize,
        cols: usize,
        row_ptr: Vec<usize>,
        col_idx: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self> {
        if row_ptr.len() != rows + 1 || row_ptr[0] != 0 || *row_ptr.last().unwrap() != col_idx.len() {
            return Err(Error::InvalidArgument("malformed CSR row pointer".into()));
        }
        if col_idx.len() != values.len() {
            return Err(Error::dims("Csr::new", col_idx.len(), values.len()));
        }
        for i in 0..rows {
            if row_ptr[i] > row_ptr[i + 1] {
                return Err(Error::InvalidArgument("CSR row pointer decreases".into()));
            }
            let cols_i = &col_idx[row_ptr[i]..row_ptr[i + 1]];
            if cols_i.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!("CSR row {i} not strictly increasing")));
            }
            if let Some(&c) = cols_i.last() {
                if c >= cols {
                    return Err(Error::NodeOutOfRange { index: c, n: cols });
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        })
    }

    /// An empty `rows × cols` matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            row_ptr: vec![0; rows + 1],
            col_idx: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: n,
            cols: n,
            row_ptr: (0..=n).collect(),
            col_idx: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    /// Keep the nonzero entries of a dense matrix.
    pub fn from_dense(d: &DenseMatrix) -> Self {
        let mut row_ptr = vec![0];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for i in 0..d.rows() {
            for (j, &v) in d.row(i).iter().enumerate() {
                if v != 0.0 {
                    col_idx.push(j);
                    values.push(v);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows: d.rows(),
            cols: d.cols(),
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        let mut d = DenseMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            let (c, v) = self.row(i);
            for (&j, &x) in c.iter().zip(v) {
                d.set(i, j, x);
            }
        }
        d
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[usize] {
        &self.col_idx
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column indices and values of row `i`.
    #[inline]
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
        (&self.col_idx[s..e], &self.values[s..e])
    }

    /// Value at `(i, j)`, zero when not stored.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (c, v) = self.row(i);
        c.binary_search(&j).map_or(0.0, |p| v[p])
    }

    /// Sub-matrix made of the given rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> Csr {
        let mut row_ptr = Vec::with_capacity(rows.len() + 1);
        row_ptr.push(0);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        for &r in rows {
            let (c, v) = self.row(r);
            col_idx.extend_from_slice(c);
            values.extend_from_slice(v);
            row_ptr.push(col_idx.len());
        }
        Csr {
            rows: rows.len(),
            cols: self.cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn transpose(&self) -> Csr {
        let mut counts = vec![0usize; self.cols + 1];
        for &c in &self.col_idx {
            counts[c + 1] += 1;
        }
        for j in 0..self.cols {
            counts[j + 1] += counts[j];
        }
        let row_ptr = counts.clone();
        let mut next = counts;
        let mut col_idx = vec![0; self.nnz()];
        let mut values = vec![0.0; self.nnz()];
        for i in 0..self.rows {
            let (c, v) = self.row(i);
            for (&j, &x) in c.iter().zip(v) {
                let p = next[j];
                col_idx[p] = i;
                values[p] = x;
                next[j] += 1;
            }
        }
        Csr {
            rows: self.cols,
            cols: self.rows,
            row_ptr,
            col_idx,
            values,
        }
    }
}

/// Sparse–dense product `a · h`.
pub fn spmm(a: &Csr, h: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols() != h.rows() {
        return Err(Error::dims("spmm", format!("{} rows in dense operand", a.cols()), h.rows()));
    }
    let mut out = DenseMatrix::zeros(a.rows(), h.cols());
    for i in 0..a.rows() {
        let (c, v) = a.row(i);
        let out_row = out.row_mut(i);
        for (&j, &x) in c.iter().zip(v) {
            for (o, &y) in out_row.iter_mut().zip(h.row(j)) {
                *o += x * y;
            }
        }
    }
    Ok(out)
}

/// Transposed product `aᵀ · g`.
pub fn spmm_t(a: &Csr, g: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows() != g.rows() {
        return Err(Error::dims("spmm_t", format!("{} rows in dense operand", a.rows()), g.rows()));
    }
    let mut out = DenseMatrix::zeros(a.cols(), g.cols());
    for i in 0..a.rows() {
        let (c, v) = a.row(i);
        let g_row = g.row(i);
        for (&j, &x) in c.iter().zip(v) {
            for (o, &y) in out.row_mut(j).iter_mut().zip(g_row) {
                *o += x * y;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn random_sparse(n: usize, m: usize, seed: u64) -> DenseMatrix {
        use rand::Rng;
        let mut rng = seed::rng(seed);
        DenseMatrix::from_fn(n, m, |_, _| {
            if rng.random::<f64>() < 0.3 {
                rng.random_range(-1.0..1.0)
            } else {
                0.0
            }
        })
    }

    #[test]
    fn identity_times_h_is_h() {
        let h = DenseMatrix::gaussian(5, 3, &mut seed::rng(1));
        assert_eq!(spmm(&Csr::identity(5), &h).unwrap(), h);
    }

    #[test]
    fn averaging_row() {
        let a = Csr::new(1, 2, vec![0, 2], vec![0, 1], vec![0.5, 0.5]).unwrap();
        let h = DenseMatrix::new(2, 1, vec![2.0, 4.0]).unwrap();
        assert_eq!(spmm(&a, &h).unwrap().data(), &[3.0]);
    }

    #[test]
    fn matches_dense_product() {
        let d = random_sparse(8, 8, 3);
        let a = Csr::from_dense(&d);
        let h = DenseMatrix::gaussian(8, 3, &mut seed::rng(4));
        let got = spmm(&a, &h).unwrap();
        assert!(got.max_abs_diff(&d.dot(&h)) < 1e-12);
        let g = DenseMatrix::gaussian(8, 2, &mut seed::rng(5));
        assert!(spmm_t(&a, &g).unwrap().max_abs_diff(&d.t_dot(&g)) < 1e-12);
        assert_eq!(a.transpose().to_dense(), d.transpose());
    }

    #[test]
    fn dimension_mismatch() {
        let a = Csr::identity(3);
        assert!(spmm(&a, &DenseMatrix::zeros(2, 2)).is_err());
        assert!(spmm_t(&a, &DenseMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn rejects_unsorted_columns() {
        assert!(Csr::new(1, 3, vec![0, 2], vec![2, 1], vec![1.0, 1.0]).is_err());
        assert!(Csr::new(1, 3, vec![0, 1], vec![3], vec![1.0]).is_err());
    }
}
