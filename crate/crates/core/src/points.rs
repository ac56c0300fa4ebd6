//! Row-major point sets shared by datasets, context samplers and query grids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A set of `len()` points in `dim` dimensions stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::shape("points must have dimension >= 1"));
        }
        if !data.len().is_multiple_of(dim) {
            return Err(Error::shape(format!(
                "{} values do not split into points of dimension {dim}",
                data.len()
            )));
        }
        Ok(Points { dim, data })
    }

    pub fn empty(dim: usize) -> Self {
        Points {
            dim: dim.max(1),
            data: Vec::new(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows
            .first()
            .map(Vec::len)
            .ok_or_else(|| Error::shape("cannot infer dimension of an empty row list"))?;
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::shape("rows of unequal length"));
            }
            data.extend_from_slice(row);
        }
        Points::new(dim, data)
    }

    /// One-dimensional points from scalars.
    pub fn from_scalars(values: &[f64]) -> Self {
        Points {
            dim: 1,
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn push(&mut self, point: &[f64]) -> Result<()> {
        if point.len() != self.dim {
            return Err(Error::shape(format!(
                "point of dimension {} pushed into a set of dimension {}",
                point.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(point);
        Ok(())
    }

    /// Points selected by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Points {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Points {
            dim: self.dim,
            data,
        }
    }

    /// Concatenation of two point sets of equal dimension.
    pub fn concat(&self, other: &Points) -> Result<Points> {
        if self.dim != other.dim {
            return Err(Error::shape("cannot concatenate point sets of different dimension"));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Points {
            dim: self.dim,
            data,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
