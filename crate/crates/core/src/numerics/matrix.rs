use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so zero-width matrices yield empty rows by hand
        let cols = self.cols.max(1);
        let n = self.rows;
        (0..n).map(move |r| {
            if self.cols == 0 {
                &self.data[0..0]
            } else {
                &self.data[r * cols..(r + 1) * cols]
            }
        })
    }

    /// Copies the given rows (in order, duplicates allowed) into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    fn same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    /// Elementwise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += s * other`, in place.
    pub fn add_scaled_in_place(&mut self, other: &Matrix, s: f64) -> Result<()> {
        self.same_shape(other, "add_scaled_in_place")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    /// Adds a `1 x cols` row vector to every row.
    pub fn add_row_broadcast(&self, bias: &Matrix) -> Result<Matrix> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape(
                "add_row_broadcast",
                format!("bias {:?} for matrix {:?}", bias.shape(), self.shape()),
            ));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for row in self.row_iter() {
            for (o, &v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry in each row; the first index wins ties.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.row_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Matrix product `a * b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (n, m, p) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, p);
    for i in 0..n {
        let out_row = &mut out.data[i * p..(i + 1) * p];
        for k in 0..m {
            let aik = a.data[i * m + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * p..(k + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Gradients of `a * b` with respect to `a` and `b`, given the upstream
/// gradient of the product.
pub fn matmul_backward(a: &Matrix, b: &Matrix, grad_out: &Matrix) -> Result<(Matrix, Matrix)> {
    if grad_out.shape() != (a.rows, b.cols) || a.cols != b.rows {
        return Err(Error::shape(
            "matmul_backward",
            format!(
                "a {:?}, b {:?}, grad {:?}",
                a.shape(),
                b.shape(),
                grad_out.shape()
            ),
        ));
    }
    let grad_a = matmul(grad_out, &b.transpose())?;
    let grad_b = matmul(&a.transpose(), grad_out)?;
    Ok((grad_a, grad_b))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for r in 0..z.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Backward of [`softmax_rows`]: maps a gradient on the probabilities to a
/// gradient on the logits.
pub fn softmax_rows_backward(probs: &Matrix, grad_probs: &Matrix) -> Result<Matrix> {
    probs.same_shape(grad_probs, "softmax_rows_backward")?;
    let mut out = Matrix::zeros(probs.rows, probs.cols);
    for r in 0..probs.rows {
        let p = probs.row(r);
        let g = grad_probs.row(r);
        let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
        for (o, (&pv, &gv)) in out.row_mut(r).iter_mut().zip(p.iter().zip(g)) {
            *o = pv * (gv - dot);
        }
    }
    Ok(out)
}

/// Row-wise log-softmax via the log-sum-exp trick.
pub fn log_softmax_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for r in 0..z.rows {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Backward of [`log_softmax_rows`] given the softmax probabilities of the
/// same logits.
pub fn log_softmax_rows_backward(probs: &Matrix, grad_logp: &Matrix) -> Result<Matrix> {
    probs.same_shape(grad_logp, "log_softmax_rows_backward")?;
    let mut out = grad_logp.clone();
    for r in 0..probs.rows {
        let total: f64 = grad_logp.row(r).iter().sum();
        for (o, &p) in out.row_mut(r).iter_mut().zip(probs.row(r)) {
            *o -= p * total;
        }
    }
    Ok(out)
}

/// `-sum_ij targets[i,j] * log_probs[i,j]`, averaged over rows.
pub fn cross_entropy_rows(targets: &Matrix, log_probs: &Matrix) -> Result<f64> {
    targets.same_shape(log_probs, "cross_entropy_rows")?;
    if targets.rows == 0 {
        return Ok(0.0);
    }
    let total: f64 = targets
        .data
        .iter()
        .zip(&log_probs.data)
        .filter(|(&t, _)| t != 0.0)
        .map(|(&t, &l)| t * l)
        .sum();
    Ok(-total / targets.rows as f64)
}

/// Gradient of [`cross_entropy_rows`] with respect to `log_probs`.
pub fn cross_entropy_rows_backward(targets: &Matrix) -> Matrix {
    let n = targets.rows.max(1) as f64;
    targets.map(|t| -t / n)
}

/// Scales each row to unit L2 norm. Rows with norm below `floor` are divided
/// by `floor` instead.
pub fn l2_normalize_rows(z: &Matrix, floor: f64) -> (Matrix, Vec<f64>) {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.rows);
    for r in 0..z.rows {
        let row = out.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let d = n.max(floor);
        for v in row.iter_mut() {
            *v /= d;
        }
        norms.push(n);
    }
    (out, norms)
}

/// Backward of [`l2_normalize_rows`]. `normalized` and `norms` are its outputs.
pub fn l2_normalize_rows_backward(
    normalized: &Matrix,
    norms: &[f64],
    floor: f64,
    grad_out: &Matrix,
) -> Result<Matrix> {
    normalized.same_shape(grad_out, "l2_normalize_rows_backward")?;
    let mut out = Matrix::zeros(normalized.rows, normalized.cols);
    for r in 0..normalized.rows {
        let e = normalized.row(r);
        let g = grad_out.row(r);
        let o = out.row_mut(r);
        if norms[r] < floor {
            for (ov, &gv) in o.iter_mut().zip(g) {
                *ov = gv / floor;
            }
            continue;
        }
        let dot: f64 = e.iter().zip(g).map(|(a, b)| a * b).sum();
        for ((ov, &ev), &gv) in o.iter_mut().zip(e).zip(g) {
            *ov = (gv - ev * dot) / norms[r];
        }
    }
    Ok(out)
}

/// Central finite-difference gradient of a scalar function of a matrix.
pub fn finite_difference_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix, h: f64) -> Matrix {
    assert!(h > 0.0, "finite difference step must be positive");
    let mut grad = Matrix::zeros(x.rows, x.cols);
    let mut probe = x.clone();
    for i in 0..x.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe);
        probe.data[i] = orig - h;
        let minus = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (plus - minus) / (2.0 * h);
    }
    grad
}

/// `||a - b|| / max(||a||, ||b||)` in the Frobenius norm; zero when both vanish.
pub fn relative_error(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..r * c).map(|_| rng.uniform_range(lo, hi)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let b = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);

        let a = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let v = Matrix::from_rows(&[[0.0], [5.0]]).unwrap();
        assert_eq!(
            matmul(&a, &v).unwrap(),
            Matrix::from_rows(&[[0.0], [0.0]]).unwrap()
        );
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_backward_matches_finite_differences() {
        let mut rng = Rng::new(7);
        let a = random(&mut rng, 3, 4, -2.0, 2.0);
        let b = random(&mut rng, 4, 2, -2.0, 2.0);
        let w = random(&mut rng, 3, 2, -1.0, 1.0);
        let f_a = |x: &Matrix| matmul(x, &b).unwrap().hadamard(&w).unwrap().sum();
        let f_b = |x: &Matrix| matmul(&a, x).unwrap().hadamard(&w).unwrap().sum();
        let (ga, gb) = matmul_backward(&a, &b, &w).unwrap();
        assert!(relative_error(&ga, &finite_difference_grad(f_a, &a, 1e-5)) < 1e-6);
        assert!(relative_error(&gb, &finite_difference_grad(f_b, &b, 1e-5)) < 1e-6);
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0]]).unwrap());
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        let p = softmax_rows(&Matrix::from_rows(&[[1000.0, 0.0]]).unwrap());
        assert!(p.is_finite());
        assert!((p.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(p.get(0, 1) < 1e-300);

        // direct exp-normalize, no max subtraction needed at this scale
        let z = [1.0f64, 2.0, 3.0];
        let total: f64 = z.iter().map(|v| v.exp()).sum();
        let p = softmax_rows(&Matrix::row_vector(&z));
        for (j, v) in z.iter().enumerate() {
            assert!((p.get(0, j) - v.exp() / total).abs() < 1e-15);
        }
        // reference values from high-precision evaluation
        let reference = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (j, r) in reference.iter().enumerate() {
            assert!((p.get(0, j) - r).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let t = Matrix::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        let l = Matrix::from_rows(&[[-5.0, 0.0, -7.0]]).unwrap();
        assert_eq!(cross_entropy_rows(&t, &l).unwrap(), 0.0);

        let t = Matrix::filled(2, 4, 0.25);
        let l = Matrix::filled(2, 4, 0.25f64.ln());
        assert!((cross_entropy_rows(&t, &l).unwrap() - 4f64.ln()).abs() < 1e-15);

        assert!(cross_entropy_rows(&Matrix::zeros(1, 2), &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn cross_entropy_backward_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let t = random(&mut rng, 3, 4, 0.0, 1.0);
        let l = random(&mut rng, 3, 4, -2.0, 2.0);
        let fd = finite_difference_grad(|x| cross_entropy_rows(&t, x).unwrap(), &l, 1e-5);
        assert!(relative_error(&cross_entropy_rows_backward(&t), &fd) < 1e-6);
    }

    #[test]
    fn finite_difference_examples() {
        let x = Matrix::from_rows(&[[3.0]]).unwrap();
        let g = finite_difference_grad(|m| m.as_slice().iter().map(|v| v * v).sum(), &x, 1e-5);
        assert!((g.get(0, 0) - 6.0).abs() < 1e-6);

        let g = finite_difference_grad(|_| 4.2, &Matrix::filled(2, 3, 1.0), 1e-5);
        assert_eq!(g, Matrix::zeros(2, 3));
    }

    #[test]
    fn softmax_cross_entropy_identity() {
        // d/dz CE(t, log_softmax(z)) = (softmax(z) - t) / rows
        let mut rng = Rng::new(3);
        let z = random(&mut rng, 4, 5, -2.0, 2.0);
        let mut t = Matrix::zeros(4, 5);
        for r in 0..4 {
            t.set(r, rng.below(5), 1.0);
        }
        let f = |x: &Matrix| cross_entropy_rows(&t, &log_softmax_rows(x)).unwrap();
        let fd = finite_difference_grad(f, &z, 1e-5);
        let analytic = softmax_rows(&z).sub(&t).unwrap().scale(0.25);
        assert!(relative_error(&analytic, &fd) < 1e-7);
    }

    #[test]
    fn backward_ops_match_finite_differences_on_random_inputs() {
        let mut rng = Rng::new(2024);
        for _ in 0..100 {
            let r = 1 + rng.below(4);
            let c = 2 + rng.below(4);
            let z = random(&mut rng, r, c, -2.0, 2.0);
            let w = random(&mut rng, r, c, -1.0, 1.0);
            let weighted = |m: &Matrix| m.hadamard(&w).unwrap().sum();

            let p = softmax_rows(&z);
            let g = softmax_rows_backward(&p, &w).unwrap();
            let fd = finite_difference_grad(|x| weighted(&softmax_rows(x)), &z, 1e-5);
            assert!(relative_error(&g, &fd) < 1e-5, "softmax");

            let g = log_softmax_rows_backward(&p, &w).unwrap();
            let fd = finite_difference_grad(|x| weighted(&log_softmax_rows(x)), &z, 1e-5);
            assert!(relative_error(&g, &fd) < 1e-5, "log_softmax");

            let (e, norms) = l2_normalize_rows(&z, 1e-12);
            let g = l2_normalize_rows_backward(&e, &norms, 1e-12, &w).unwrap();
            let fd = finite_difference_grad(|x| weighted(&l2_normalize_rows(x, 1e-12).0), &z, 1e-5);
            assert!(relative_error(&g, &fd) < 1e-5, "l2_normalize");

            let k = 1 + rng.below(3);
            let b = random(&mut rng, c, k, -2.0, 2.0);
            let wo = random(&mut rng, r, k, -1.0, 1.0);
            let (ga, gb) = matmul_backward(&z, &b, &wo).unwrap();
            let fa = finite_difference_grad(|x| matmul(x, &b).unwrap().hadamard(&wo).unwrap().sum(), &z, 1e-5);
            let fb = finite_difference_grad(|x| matmul(&z, x).unwrap().hadamard(&wo).unwrap().sum(), &b, 1e-5);
            assert!(relative_error(&ga, &fa) < 1e-5, "matmul a");
            assert!(relative_error(&gb, &fb) < 1e-5, "matmul b");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_for_large_inputs() {
        let mut rng = Rng::new(5);
        for _ in 0..100 {
            let z = random(&mut rng, 3, 7, -1e4, 1e4);
            let p = softmax_rows(&z);
            assert!(p.is_finite());
            for s in p.row_sums() {
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let m = Matrix::from_rows(&[[0.2, 0.4, 0.4], [0.9, 0.05, 0.05]]).unwrap();
        assert_eq!(m.argmax_rows(), vec![1, 0]);
    }
}
