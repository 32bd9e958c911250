//! Dense row-major matrices and the distance kernels used throughout the crate.
//!
//! Storage is `f32`; dot products, norms and distances accumulate in `f64`
//! and round once at the end.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major `f32` matrix. One embedding per row when used as an embedding matrix.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    /// Builds a matrix, rejecting a wrong-length buffer or non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("buffer of {}", data.len()),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Precondition(format!(
                "non-finite value {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::dim("Matrix::from_rows", format!("row 0 len {cols}"), format!("row {i} len {}", r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    /// An empty matrix with a fixed column count.
    pub fn empty(cols: usize) -> Self {
        Self::zeros(0, cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, and a 0-column matrix still has `rows` empty rows.
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    /// Copies the listed rows, in the given order, into a new matrix.
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

    /// Copies the listed columns, in the given order, into a new matrix.
    pub fn select_cols(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.rows);
        for r in self.iter_rows() {
            data.extend(indices.iter().map(|&c| r[c]));
        }
        Matrix {
            rows: self.rows,
            cols: indices.len(),
            data,
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with `f64` accumulation.
pub fn dot(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| f64::from(a) * f64::from(b))
        .sum()
}

/// `out = mᵀ·x` for `m` of shape `(x.len(), out_len)`. Each output accumulates in `f64`.
pub fn matvec_t(m: &Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if m.rows != x.len() {
        return Err(Error::dim("matvec_t", format!("{}x{}", m.rows, m.cols), format!("vector len {}", x.len())));
    }
    let mut acc = vec![0.0f64; m.cols];
    for (xi, row) in x.iter().zip(m.iter_rows()) {
        let xi = f64::from(*xi);
        for (a, &w) in acc.iter_mut().zip(row) {
            *a += xi * f64::from(w);
        }
    }
    Ok(acc.into_iter().map(|v| v as f32).collect())
}

/// `out = m·x` for `m` of shape `(out_len, x.len())`.
pub fn matvec(m: &Matrix, x: &[f32]) -> Result<Vec<f32>> {
    if m.cols != x.len() {
        return Err(Error::dim("matvec", format!("{}x{}", m.rows, m.cols), format!("vector len {}", x.len())));
    }
    Ok(m.iter_rows().map(|row| dot(row, x) as f32).collect())
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::dim(
            "matmul",
            format!("{}x{}", a.rows, a.cols),
            format!("{}x{}", b.rows, b.cols),
        ));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    let mut acc = vec![0.0f64; b.cols];
    for i in 0..a.rows {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for (k, &aik) in a.row(i).iter().enumerate() {
            let aik = f64::from(aik);
            for (v, &bkj) in acc.iter_mut().zip(b.row(k)) {
                *v += aik * f64::from(bkj);
            }
        }
        for (o, v) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = *v as f32;
        }
    }
    Ok(out)
}

fn squared_distance(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum()
}

pub fn euclidean_distance(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::dim("euclidean_distance", u.len(), v.len()));
    }
    Ok(squared_distance(u, v).sqrt() as f32)
}

/// Distances from every query row to every gallery row, computed with the
/// direct difference formula (no norm-expansion shortcut).
pub fn pairwise_distances(queries: &Matrix, gallery: &Matrix) -> Result<Matrix> {
    if queries.cols != gallery.cols {
        return Err(Error::dim(
            "pairwise_distances",
            format!("queries {}x{}", queries.rows, queries.cols),
            format!("gallery {}x{}", gallery.rows, gallery.cols),
        ));
    }
    let mut out = Matrix::zeros(queries.rows, gallery.rows);
    for (i, q) in queries.iter_rows().enumerate() {
        for (o, g) in out.row_mut(i).iter_mut().zip(gallery.iter_rows()) {
            *o = squared_distance(q, g).sqrt() as f32;
        }
    }
    Ok(out)
}

/// Per-column L2 norm over all rows: the Frobenius norm of each embedding
/// dimension taken across a set of embeddings.
pub fn column_l2_norms(m: &Matrix) -> Result<Vec<f32>> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::Precondition(format!(
            "column_l2_norms needs a non-empty matrix, got {}x{}",
            m.rows, m.cols
        )));
    }
    let mut acc = vec![0.0f64; m.cols];
    for row in m.iter_rows() {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += f64::from(v) * f64::from(v);
        }
    }
    Ok(acc.into_iter().map(|v| v.sqrt() as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);

        let col = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
        let out = matmul(&m, &col).unwrap();
        assert_eq!(out.as_slice(), &[2.0, 4.0]);

        let z = matmul(&Matrix::zeros(3, 2), &m).unwrap();
        assert_eq!(z, Matrix::zeros(3, 2));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn distance_examples() {
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(euclidean_distance(&[0.0, 0.0], &[3.0, 4.0]).unwrap(), 5.0);
        let d = euclidean_distance(&[1.0, 1.0, 1.0], &[2.0, 3.0, 4.0]).unwrap();
        assert_eq!(d, 14.0f64.sqrt() as f32);
        assert!(euclidean_distance(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn pairwise_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_matrix(&mut rng, 3, 4);
        let g = random_matrix(&mut rng, 5, 4);
        let d = pairwise_distances(&q, &g).unwrap();
        assert_eq!(d.shape(), (3, 5));
        for i in 0..3 {
            for j in 0..5 {
                assert_eq!(d.get(i, j), euclidean_distance(q.row(i), g.row(j)).unwrap());
            }
        }
        let self_d = pairwise_distances(&q, &q).unwrap();
        for i in 0..3 {
            assert_eq!(self_d.get(i, i), 0.0);
        }
        let one = pairwise_distances(&q.select_rows(&[0]), &g.select_rows(&[1])).unwrap();
        assert_eq!(one.shape(), (1, 1));
        assert_eq!(one.get(0, 0), euclidean_distance(q.row(0), g.row(1)).unwrap());
        assert!(pairwise_distances(&q, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn column_norm_examples() {
        assert_eq!(column_l2_norms(&Matrix::identity(3)).unwrap(), vec![1.0; 3]);
        let m = Matrix::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(column_l2_norms(&m).unwrap(), vec![5.0]);
        let m = Matrix::from_rows(&[[1.0, 2.0], [2.0, 2.0]]).unwrap();
        assert_eq!(
            column_l2_norms(&m).unwrap(),
            vec![5.0f64.sqrt() as f32, 8.0f64.sqrt() as f32]
        );
        assert!(matches!(column_l2_norms(&Matrix::empty(3)), Err(Error::Precondition(_))));
    }

    #[test]
    fn rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f32::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0]).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vecs(n: usize) -> impl Strategy<Value = Vec<f32>> {
            prop::collection::vec(-100.0f32..100.0, n)
        }

        proptest! {
            #[test]
            fn triangle_inequality(n in 1usize..16, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_matrix(&mut rng, 3, n);
                let (a, b, c) = (m.row(0), m.row(1), m.row(2));
                let ab = f64::from(euclidean_distance(a, b).unwrap());
                let bc = f64::from(euclidean_distance(b, c).unwrap());
                let ac = f64::from(euclidean_distance(a, c).unwrap());
                prop_assert!(ac <= (ab + bc) * (1.0 + 1e-6) + 1e-12);
            }

            #[test]
            fn distance_symmetric(u in vecs(8), v in vecs(8)) {
                prop_assert_eq!(euclidean_distance(&u, &v).unwrap(), euclidean_distance(&v, &u).unwrap());
                prop_assert!(euclidean_distance(&u, &v).unwrap() >= 0.0);
            }

            #[test]
            fn column_norms_sum_to_frobenius(r in 1usize..20, c in 1usize..20, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random_matrix(&mut rng, r, c);
                let norms = column_l2_norms(&m).unwrap();
                let sum_sq: f64 = norms.iter().map(|&v| f64::from(v).powi(2)).sum();
                let fro = m.frobenius_norm().powi(2);
                prop_assert!((sum_sq - fro).abs() <= 1e-6 * fro.max(1e-12));
            }
        }
    }

    #[test]
    fn pairwise_equals_double_loop_up_to_64() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(r, g, c) in &[(1, 1, 1), (7, 13, 5), (64, 64, 64), (64, 3, 17)] {
            let q = random_matrix(&mut rng, r, c);
            let gm = random_matrix(&mut rng, g, c);
            let d = pairwise_distances(&q, &gm).unwrap();
            for i in 0..r {
                for j in 0..g {
                    let mut s = 0.0f64;
                    for k in 0..c {
                        let diff = f64::from(q.get(i, k)) - f64::from(gm.get(j, k));
                        s += diff * diff;
                    }
                    assert_eq!(d.get(i, j), s.sqrt() as f32);
                }
            }
        }
    }
}
