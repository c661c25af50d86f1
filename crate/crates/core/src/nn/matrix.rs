//! Row-major dense matrices and the three products needed for dense layers.
//!
//! Every output element is reduced sequentially in index order, so results
//! are bit-identical across runs and platforms. Inner loops run over
//! independent output elements, which lets the compiler vectorize them
//! without reordering any reduction.

use serde::{Deserialize, Serialize};

use crate::error::{MhdError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MhdError::Shape(format!("{} values cannot fill a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MhdError::Shape("ragged rows".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
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
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
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

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, k: f64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(MhdError::Shape(format!("cannot add {:?} to {:?}", other.shape(), self.shape())));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
        Ok(())
    }
}

/// `y = x · wᵀ + bias`, with `x: [B×in]`, `w: [out×in]`, `bias: [out]`.
pub fn affine(x: &Matrix, w: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if x.cols != w.cols || bias.len() != w.rows {
        return Err(MhdError::Shape(format!(
            "affine: input {:?}, weight {:?}, bias {}",
            x.shape(),
            w.shape(),
            bias.len()
        )));
    }
    let wt = w.transpose();
    let out_dim = w.rows;
    let mut y = Matrix::zeros(x.rows, out_dim);
    for b in 0..x.rows {
        let xr = x.row(b);
        let yr = &mut y.data[b * out_dim..(b + 1) * out_dim];
        yr.copy_from_slice(bias);
        for (i, &xi) in xr.iter().enumerate() {
            let wr = &wt.data[i * out_dim..(i + 1) * out_dim];
            for (yo, &wo) in yr.iter_mut().zip(wr) {
                *yo += xi * wo;
            }
        }
    }
    Ok(y)
}

/// `dx = dy · w`, with `dy: [B×out]`, `w: [out×in]`.
pub fn matmul_dy_w(dy: &Matrix, w: &Matrix) -> Result<Matrix> {
    if dy.cols != w.rows {
        return Err(MhdError::Shape(format!("dy·w: {:?} vs {:?}", dy.shape(), w.shape())));
    }
    let in_dim = w.cols;
    let mut dx = Matrix::zeros(dy.rows, in_dim);
    for b in 0..dy.rows {
        let dxr = &mut dx.data[b * in_dim..(b + 1) * in_dim];
        for (o, &g) in dy.row(b).iter().enumerate() {
            for (d, &wv) in dxr.iter_mut().zip(w.row(o)) {
                *d += g * wv;
            }
        }
    }
    Ok(dx)
}

/// `dw = dyᵀ · x`, with `dy: [B×out]`, `x: [B×in]`; also returns the bias
/// gradient (column sums of `dy`).
pub fn outer_accumulate(dy: &Matrix, x: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    if dy.rows != x.rows {
        return Err(MhdError::Shape(format!("dyᵀ·x: {:?} vs {:?}", dy.shape(), x.shape())));
    }
    let (out_dim, in_dim) = (dy.cols, x.cols);
    let mut dw = Matrix::zeros(out_dim, in_dim);
    let mut db = vec![0.0; out_dim];
    for b in 0..dy.rows {
        let xr = x.row(b);
        for (o, &g) in dy.row(b).iter().enumerate() {
            db[o] += g;
            let dwr = &mut dw.data[o * in_dim..(o + 1) * in_dim];
            for (d, &xv) in dwr.iter_mut().zip(xr) {
                *d += g * xv;
            }
        }
    }
    Ok((dw, db))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
        let mut y = Matrix::zeros(x.rows(), w.rows());
        for r in 0..x.rows() {
            for o in 0..w.rows() {
                let mut acc = b[o];
                for i in 0..x.cols() {
                    acc += x.get(r, i) * w.get(o, i);
                }
                y.set(r, o, acc);
            }
        }
        y
    }

    #[test]
    fn affine_matches_naive_loop_bitwise() {
        let x = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.25, 3.0, -1.5]]).unwrap();
        let w = Matrix::from_rows(&[vec![0.1, 0.2, 0.3], vec![-0.7, 0.11, 1.3]]).unwrap();
        let b = [0.01, -0.02];
        assert_eq!(affine(&x, &w, &b).unwrap(), naive_affine(&x, &w, &b));
    }

    #[test]
    fn shape_errors_are_reported() {
        let x = Matrix::zeros(2, 3);
        let w = Matrix::zeros(4, 2);
        assert!(matches!(affine(&x, &w, &[0.0; 4]), Err(MhdError::Shape(_))));
        assert!(Matrix::from_vec(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn transpose_and_select() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(m.transpose().row(1), &[2.0, 4.0, 6.0]);
        assert_eq!(m.select_rows(&[2, 0]).as_slice(), &[5.0, 6.0, 1.0, 2.0]);
    }
}
