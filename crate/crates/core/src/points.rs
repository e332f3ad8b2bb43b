//! Row-major point tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `n` points of dimension `dim`, stored contiguously.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Points {
    n: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            if !data.is_empty() {
                return Err(Error::Shape("zero-dimensional points with data".into()));
            }
            return Ok(Self { n: 0, dim, data });
        }
        if data.len() % dim != 0 {
            return Err(Error::Shape(format!(
                "{} values do not split into rows of {dim}",
                data.len()
            )));
        }
        Ok(Self {
            n: data.len() / dim,
            dim,
            data,
        })
    }

    /// Table of `n` zero-dimensional rows (an absent conditioning variable).
    pub fn empty_rows(n: usize) -> Self {
        Self {
            n,
            dim: 0,
            data: Vec::new(),
        }
    }

    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self {
            n: 0,
            dim,
            data: Vec::with_capacity(dim * n),
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: impl IntoIterator<Item = R>) -> Result<Self> {
        let mut p = Self::with_capacity(dim, 0);
        for r in rows {
            p.push(r.as_ref())?;
        }
        Ok(p)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Shape(format!(
                "row of length {} pushed into table of dim {}",
                row.len(),
                self.dim
            )));
        }
        self.data.extend_from_slice(row);
        self.n += 1;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self::with_capacity(self.dim, idx.len());
        for &i in idx {
            out.data.extend_from_slice(self.row(i));
        }
        out.n = idx.len();
        out
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Per-column (min, max).
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        (0..self.dim)
            .map(|j| {
                self.rows().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                    (lo.min(r[j]), hi.max(r[j]))
                })
            })
            .collect()
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_and_select() {
        let p = Points::new(2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p.row(1), &[3.0, 4.0]);
        let s = p.select(&[2, 0]);
        assert_eq!(s.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert_eq!(p.bounds(), vec![(1.0, 5.0), (2.0, 6.0)]);
    }

    #[test]
    fn ragged_rejected() {
        assert!(Points::new(2, vec![1.0, 2.0, 3.0]).is_err());
        let mut p = Points::with_capacity(3, 1);
        assert!(p.push(&[1.0]).is_err());
    }

    #[test]
    fn zero_dim_rows_keep_count() {
        let mut p = Points::empty_rows(3);
        assert_eq!(p.len(), 3);
        assert!(p.row(2).is_empty());
        p.push(&[]).unwrap();
        assert_eq!(p.select(&[0, 1]).len(), 2);
    }
}
