//! Min–max scaling to `[0, 1]` with stored bounds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-column bounds. A zero-width column maps to 0 and back to its minimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    /// Bounds of every column of `x`.
    pub fn fit(x: &Tensor) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::InvalidArgument(
                "cannot fit bounds on an empty array".into(),
            ));
        }
        let c = x.cols();
        let mut min = vec![f64::INFINITY; c];
        let mut max = vec![f64::NEG_INFINITY; c];
        for r in x.rows_iter().take(x.rows()) {
            for j in 0..c {
                min[j] = min[j].min(r[j]);
                max[j] = max[j].max(r[j]);
            }
        }
        Ok(Self { min, max })
    }

    /// One bound pair shared by all `cols` columns, taken over every entry.
    pub fn fit_global(x: &Tensor) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::InvalidArgument(
                "cannot fit bounds on an empty array".into(),
            ));
        }
        let lo = x.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(Self::fixed(lo, hi, x.cols()))
    }

    pub fn fixed(lo: f64, hi: f64, cols: usize) -> Self {
        Self {
            min: vec![lo; cols],
            max: vec![hi; cols],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.cols() != self.dim() {
            return Err(Error::shape("MinMax", self.dim(), x.cols()));
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                let w = self.max[j] - self.min[j];
                *v = if w > 0.0 { (*v - self.min[j]) / w } else { 0.0 };
            }
        }
        Ok(out)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (j, v) in out.row_mut(i).iter_mut().enumerate() {
                *v = self.min[j] + *v * (self.max[j] - self.min[j]);
            }
        }
        Ok(out)
    }

    /// Raw-unit width of each column.
    pub fn widths(&self) -> Vec<f64> {
        self.min.iter().zip(&self.max).map(|(a, b)| b - a).collect()
    }
}
