//! Axis-aligned box that inputs are expected to live in. Generators squash
//! their outputs into it, attacks project back onto it.

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DataDomain {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl DataDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.is_empty() || lo.len() != hi.len() {
            return Err(Error::Dimension(format!(
                "domain bounds of length {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h) || !l.is_finite() || !h.is_finite()) {
            return Err(Error::Domain("domain needs finite lo < hi per dimension".into()));
        }
        Ok(DataDomain { lo, hi })
    }

    /// The unit box [0,1]^d.
    pub fn unit(d: usize) -> Self {
        DataDomain {
            lo: vec![0.0; d],
            hi: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    /// Per-dimension widths.
    pub fn span(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }

    /// Clamp every row of a `[n, d]` batch into the box.
    pub fn clamp(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.cols() != self.dim() {
            return Err(Error::Dimension(format!(
                "clamp: batch shape {:?} vs domain dim {}",
                x.shape(),
                self.dim()
            )));
        }
        let d = self.dim();
        let data: Vec<f64> = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v.clamp(self.lo[i % d], self.hi[i % d]))
            .collect();
        Ok(Tensor::from_raw(x.shape().to_vec(), data))
    }

    /// Whether every row of the batch lies inside the box, with slack `tol`.
    pub fn contains(&self, x: &Tensor, tol: f64) -> bool {
        let d = self.dim();
        x.shape().len() == 2
            && x.cols() == d
            && x.data()
                .iter()
                .enumerate()
                .all(|(i, &v)| v >= self.lo[i % d] - tol && v <= self.hi[i % d] + tol)
    }
}
