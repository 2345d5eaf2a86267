//! Sums of matrix ⊗ vector outer products, `M = Σ_k B_k ⊗ v_k`.
//!
//! The tensor is never materialized. Contractions act on the factors:
//! `M v = Σ B_k ⟨v_k, v⟩`, `Xᵀ M = Σ ⟨B_k, X⟩ v_k` and
//! `⟨M, N⟩ = Σ_{k,l} ⟨B_k, B'_l⟩ ⟨v_k, v'_l⟩`.

use super::{frob_inner, Matrix, Vector};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SumTensor {
    rows: usize,
    cols: usize,
    len: usize,
    terms: Vec<(Matrix, Vector)>,
}

impl SumTensor {
    /// The zero tensor with the given factor shapes.
    pub fn zeros(rows: usize, cols: usize, len: usize) -> Self {
        Self {
            rows,
            cols,
            len,
            terms: Vec::new(),
        }
    }

    pub fn from_terms(terms: Vec<(Matrix, Vector)>) -> Result<Self> {
        let Some((b0, v0)) = terms.first() else {
            return Err(Error::dim("SumTensor::from_terms needs at least one term"));
        };
        let mut t = Self::zeros(b0.nrows(), b0.ncols(), v0.len());
        for (b, v) in terms {
            t.push(b, v)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, matrix: Matrix, vector: Vector) -> Result<()> {
        if matrix.shape() != (self.rows, self.cols) || vector.len() != self.len {
            return Err(Error::dim(format!(
                "term ({}x{}, {}) does not match tensor ({}x{}, {})",
                matrix.nrows(),
                matrix.ncols(),
                vector.len(),
                self.rows,
                self.cols,
                self.len
            )));
        }
        self.terms.push((matrix, vector));
        Ok(())
    }

    /// Adds `scale · (B ⊗ v)`.
    pub fn push_scaled(&mut self, scale: f64, matrix: &Matrix, vector: &Vector) -> Result<()> {
        self.push(matrix * scale, vector.clone())
    }

    pub fn terms(&self) -> &[(Matrix, Vector)] {
        &self.terms
    }

    pub fn matrix_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn vector_len(&self) -> usize {
        self.len
    }

    /// `self − other` as a longer list of terms.
    pub fn sub(&self, other: &SumTensor) -> Result<SumTensor> {
        self.check_compatible(other)?;
        let mut out = self.clone();
        for (b, v) in &other.terms {
            out.terms.push((-b, v.clone()));
        }
        Ok(out)
    }

    /// `M v = Σ B_k ⟨v_k, v⟩`.
    pub fn apply_right(&self, v: &Vector) -> Result<Matrix> {
        if v.len() != self.len {
            return Err(Error::dim(format!(
                "vector of length {} applied to tensor with vector parts of length {}",
                v.len(),
                self.len
            )));
        }
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (b, vk) in &self.terms {
            let c = vk.dot(v);
            if c != 0.0 {
                for (o, x) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
                    *o += c * x;
                }
            }
        }
        Ok(out)
    }

    /// `Xᵀ M = Σ ⟨B_k, X⟩ v_k`.
    pub fn apply_left(&self, x: &Matrix) -> Result<Vector> {
        if x.shape() != (self.rows, self.cols) {
            return Err(Error::dim(format!(
                "matrix {}x{} applied to tensor with matrix parts {}x{}",
                x.nrows(),
                x.ncols(),
                self.rows,
                self.cols
            )));
        }
        let mut out = Vector::zeros(self.len);
        for (b, vk) in &self.terms {
            let c = frob_inner(b, x);
            if c != 0.0 {
                out.axpy(c, vk, 1.0);
            }
        }
        Ok(out)
    }

    /// `⟨M, N⟩`, bilinear over all pairs of terms.
    pub fn inner(&self, other: &SumTensor) -> Result<f64> {
        self.check_compatible(other)?;
        let mut total = 0.0;
        for (b, v) in &self.terms {
            for (c, w) in &other.terms {
                let vw = v.dot(w);
                if vw != 0.0 {
                    total += frob_inner(b, c) * vw;
                }
            }
        }
        Ok(total)
    }

    /// `‖M‖_F = √⟨M, M⟩`, clamped at zero against rounding.
    pub fn frob_norm(&self) -> f64 {
        self.inner(self).map(|x| x.max(0.0).sqrt()).unwrap_or(0.0)
    }

    fn check_compatible(&self, other: &SumTensor) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols || self.len != other.len {
            return Err(Error::dim("tensor factor shapes differ"));
        }
        Ok(())
    }
}
