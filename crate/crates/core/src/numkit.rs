//! Dense f64 kernels shared by every stage of the pipeline.
//!
//! Everything here is a pure function over immutable inputs. Sizes are
//! desk-scale, so the loops are written for clarity rather than speed.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite f64 values.
#[derive(Clone, Debug, PartialEq)]
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
            return Err(Error::LengthMismatch {
                op: "Matrix::from_vec",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix element {i}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::LengthMismatch {
                    op: "Matrix::from_rows",
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    /// A 1×n matrix; biases and norm gains are stored this way.
    pub fn row_vector(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-width matrix still has `rows` empty rows.
        let cols = self.cols;
        (0..self.rows).map(move |r| &self.data[r * cols..(r + 1) * cols])
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

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Rows gathered by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stack matrices of equal width vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for part in parts {
            if part.cols != cols {
                return Err(Error::ShapeMismatch {
                    op: "vstack",
                    left: (rows, cols),
                    right: part.shape(),
                });
            }
            data.extend_from_slice(&part.data);
            rows += part.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn check_finite(m: Matrix, op: &str) -> Result<Matrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite(format!("{op} result")))
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    check_finite(out, "matmul")
}

/// `a · bᵀ`. With `b` laid out as (out × in) this is a row-wise linear map.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_nt",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    check_finite(out, "matmul_nt")
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_tn",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let a_row = a.row(k);
        let b_row = b.row(k);
        for (i, &aki) in a_row.iter().enumerate() {
            let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aki * bkj;
            }
        }
    }
    check_finite(out, "matmul_tn")
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Adds a 1×cols bias row to every row of `m`.
pub fn add_row_broadcast(m: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows != 1 || bias.cols != m.cols {
        return Err(Error::ShapeMismatch {
            op: "add_row_broadcast",
            left: m.shape(),
            right: bias.shape(),
        });
    }
    let mut out = m.clone();
    for r in 0..out.rows {
        for (o, b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// Max-subtracted softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Standard normal CDF Φ(x).
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal density φ(x).
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// d/dx of [`gelu`]: `Φ(x) + x·φ(x)`.
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    normal_cdf(x) + x * normal_pdf(x)
}

pub fn layer_norm(v: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != v.len() || bias.len() != v.len() {
        return Err(Error::LengthMismatch {
            op: "layer_norm",
            expected: v.len(),
            found: if gain.len() != v.len() {
                gain.len()
            } else {
                bias.len()
            },
        });
    }
    if !(eps > 0.0) {
        return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let (normalized, _) = normalize(v, eps);
    Ok(normalized
        .iter()
        .zip(gain)
        .zip(bias)
        .map(|((x, g), b)| x * g + b)
        .collect())
}

/// Zero-mean, unit-variance version of `v` and the `1/σ` used.
pub(crate) fn normalize(v: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (v.iter().map(|x| (x - mean) * inv_std).collect(), inv_std)
}

/// Central-difference gradient of `f` at `p` with step `h`.
pub fn central_diff_grad<F>(mut f: F, p: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Bilinear 2× downsample of an `h × w` grid of feature rows.
///
/// Sampling at the centre of each 2×2 block weights the four members
/// equally, so each output row is the block mean. Bottom/right blocks of odd
/// grids average over the members that exist. Returns the output grid and its
/// `(h, w)`.
pub fn bilinear_downsample2x(grid: &Matrix, h: usize, w: usize) -> Result<(Matrix, usize, usize)> {
    if grid.rows != h * w {
        return Err(Error::LengthMismatch {
            op: "bilinear_downsample2x",
            expected: h * w,
            found: grid.rows,
        });
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let d = grid.cols;
    let mut out = Matrix::zeros(oh * ow, d);
    for bm in 0..oh {
        for bn in 0..ow {
            let dst = out.row_mut(bm * ow + bn);
            let mut members = 0usize;
            for m in (2 * bm)..(2 * bm + 2).min(h) {
                for n in (2 * bn)..(2 * bn + 2).min(w) {
                    for (o, v) in dst.iter_mut().zip(grid.row(m * w + n)) {
                        *o += v;
                    }
                    members += 1;
                }
            }
            let scale = 1.0 / members as f64;
            dst.iter_mut().for_each(|o| *o *= scale);
        }
    }
    Ok((out, oh, ow))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    /// Maclaurin series for erf; independent of libm.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        2.0 / PI.sqrt() * sum
    }

    #[test]
    fn identity_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = random(&mut rng, 3, 4);
        assert_eq!(matmul(&Matrix::identity(3), &m).unwrap(), m);
    }

    #[test]
    fn permutation_product() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let p = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let expected = Matrix::from_rows(&[vec![2.0, 1.0], vec![4.0, 3.0]]).unwrap();
        assert_eq!(matmul(&a, &p).unwrap(), expected);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 5, 7);
        let b = random(&mut rng, 7, 3);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        assert!(matmul_nt(&a, &b.transpose()).unwrap().max_abs_diff(&got) < 1e-12);
        assert!(matmul_tn(&a.transpose(), &b).unwrap().max_abs_diff(&got) < 1e-12);
    }

    #[test]
    fn matmul_dimension_error_names_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        match err {
            Error::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, (2, 3));
                assert_eq!(right, (2, 3));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn from_vec_rejects_nan() {
        assert!(matches!(
            Matrix::from_vec(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn softmax_examples() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0, 0.0]]).unwrap();
        for v in softmax_rows(&m).row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let m = Matrix::from_rows(&[vec![1000.0, 0.0]]).unwrap();
        let s = softmax_rows(&m);
        assert!(s.is_finite());
        assert!((s.get(0, 0) - 1.0).abs() < 1e-15);
        assert!(s.get(0, 1) < 1e-300);
        let m = Matrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let s = softmax_rows(&m);
        let e = std::f64::consts::E;
        assert!((s.get(0, 0) - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((s.get(0, 1) - e / (1.0 + e)).abs() < 1e-15);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu(0.0), 0.0);
        assert!((gelu(10.0) - 10.0).abs() < 1e-9);
        let oracle = 1.0 * 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
        assert!((gelu(1.0) - oracle).abs() < 1e-10);
        for &x in &[-3.0, -0.7, 0.2, 1.5, 2.5] {
            let oracle = x * 0.5 * (1.0 + erf_series(x / 2f64.sqrt()));
            assert!((gelu(x) - oracle).abs() < 1e-10, "x = {x}");
        }
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-2.0, -0.5, 0.0, 0.3, 1.7] {
            let fd = central_diff_grad(|p| gelu(p[0]), &[x], 1e-5).unwrap()[0];
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let out = layer_norm(&[3.0; 5], &[1.0; 5], &[0.0; 5], 1e-6).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));

        let out = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-15).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] + 1.0).abs() < 1e-12);

        let out = layer_norm(&[0.3, 9.0, -2.0], &[0.0; 3], &[0.5, -1.0, 2.0], 1e-6).unwrap();
        assert_eq!(out, vec![0.5, -1.0, 2.0]);

        assert!(matches!(
            layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-6),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn central_diff_examples() {
        let g = central_diff_grad(|p| p.iter().map(|x| x * x).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = central_diff_grad(|p| p[0] * p[1], &[3.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 5.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
        assert!(central_diff_grad(|p| 1.0 / p[0], &[0.0], 1.0).is_ok());
        assert!(matches!(
            central_diff_grad(|p| (p[0] - 1.0).ln(), &[1.0], 0.5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn downsample_means_and_odd_edges() {
        // 3x3 grid, one feature, value = index
        let grid = Matrix::from_vec(9, 1, (0..9).map(f64::from).collect()).unwrap();
        let (out, oh, ow) = bilinear_downsample2x(&grid, 3, 3).unwrap();
        assert_eq!((oh, ow), (2, 2));
        assert_eq!(out.data(), &[(0.0 + 1.0 + 3.0 + 4.0) / 4.0, 3.5, 6.5, 8.0]);
    }
}
