//! Dense embedding vectors and row-major matrices.

use crate::error::{Error, Result};

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::InvalidEmbedding(format!(
            "non-finite value {} at coordinate {i}",
            values[i]
        ))),
    }
}

/// A single finite, non-empty embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidEmbedding("zero-dimensional vector".into()));
        }
        check_finite(&values)?;
        Ok(Self(values))
    }

    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&v| f64::from(v)).collect())
    }

    /// Wrap values already known to be finite and non-empty.
    pub(crate) fn from_trusted(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty() && values.iter().all(|v| v.is_finite()));
        Self(values)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

impl AsRef<[f64]> for EmbeddingVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Row-major matrix of embeddings sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidEmbedding("zero-dimensional matrix".into()));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::InvalidEmbedding(format!(
                "{} values do not divide into rows of {dim}",
                data.len()
            )));
        }
        check_finite(&data)?;
        Ok(Self { dim, data })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::InvalidEmbedding("no rows".into()))?;
        let mut data = Vec::with_capacity(dim * rows.len());
        for r in rows {
            Error::check_dim(dim, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Self::new(dim, data)
    }

    pub(crate) fn from_trusted(dim: usize, data: Vec<f64>) -> Self {
        debug_assert!(dim > 0 && data.len().is_multiple_of(dim));
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_vector(&self, i: usize) -> EmbeddingVector {
        EmbeddingVector::from_trusted(self.row(i).to_vec())
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        Error::check_dim(self.dim, row.len())?;
        check_finite(row)?;
        self.data.extend_from_slice(row);
        Ok(())
    }

    /// Apply `f` to every row, producing a matrix of the same shape.
    pub fn map_rows<F>(&self, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &[f64]) -> Result<Vec<f64>>,
    {
        let mut data = Vec::with_capacity(self.data.len());
        for (i, row) in self.iter_rows().enumerate() {
            let out = f(i, row)?;
            Error::check_dim(self.dim, out.len())?;
            data.extend(out);
        }
        Self::new(self.dim, data)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either side has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let denom = norm(a) * norm(b);
    if denom == 0.0 {
        0.0
    } else {
        dot(a, b) / denom
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(EmbeddingVector::new(vec![]).is_err());
        assert!(EmbeddingVector::new(vec![1.0, f64::NAN]).is_err());
        assert!(EmbeddingMatrix::new(2, vec![1.0, 2.0, f64::INFINITY, 0.0]).is_err());
        assert!(EmbeddingMatrix::new(3, vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn rows_and_push() {
        let mut m = EmbeddingMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(m.rows(), 2);
        assert_eq!(m.row(1), &[3.0, 4.0]);
        assert!(matches!(
            m.push_row(&[1.0]),
            Err(Error::DimMismatch {
                expected: 2,
                actual: 1
            })
        ));
        m.push_row(&[5.0, 6.0]).unwrap();
        assert_eq!(m.rows(), 3);
    }

    #[test]
    fn cosine_of_zero_vector_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((cosine(&[1.0, 1.0], &[2.0, 2.0]) - 1.0).abs() < 1e-15);
    }
}
