use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Binary selection over the entries of a parameter matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
    k: usize,
}

impl Mask {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
            k: 0,
        }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![true; rows * cols],
            k: rows * cols,
        }
    }

    pub fn from_coords(rows: usize, cols: usize, coords: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut m = Self::empty(rows, cols);
        for (r, c) in coords {
            if r >= rows || c >= cols {
                return Err(Error::invalid(format!("coordinate ({r}, {c}) outside {rows}x{cols}")));
            }
            let slot = &mut m.bits[r * cols + c];
            if *slot {
                return Err(Error::invalid(format!("duplicate coordinate ({r}, {c})")));
            }
            *slot = true;
            m.k += 1;
        }
        Ok(m)
    }

    /// Mask over flat indices.
    pub fn from_indices(rows: usize, cols: usize, idx: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::from_coords(rows, cols, idx.into_iter().map(|i| (i / cols.max(1), i % cols.max(1))))
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn is_full(&self) -> bool {
        self.k == self.bits.len()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    /// Zeroes every entry outside the mask.
    pub fn apply(&self, m: &mut Matrix) {
        debug_assert_eq!(m.shape(), self.shape());
        for (v, &keep) in m.as_mut_slice().iter_mut().zip(&self.bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }

    pub fn complement(&self) -> Mask {
        Mask {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().map(|b| !b).collect(),
            k: self.bits.len() - self.k,
        }
    }
}

/// The selection view used during discovery is the same type.
pub type MaskView = Mask;
