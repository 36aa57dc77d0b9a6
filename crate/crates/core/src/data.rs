//! In-memory dataset types shared by the loaders, the miner and training.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::float::{self, Float};

/// Tolerance on row norms of a normalized [`EmbeddingMatrix`].
pub const NORM_TOLERANCE: f64 = 1e-5;

/// A small image stored channel-planar (`C×H×W`) with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRecord {
    pub index: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Float>,
    pub label: Option<u32>,
}

impl ImageRecord {
    pub fn new(
        index: usize,
        (channels, height, width): (usize, usize, usize),
        pixels: Vec<Float>,
        label: Option<u32>,
    ) -> Result<Self> {
        if pixels.len() != channels * height * width {
            return Err(Error::Shape {
                op: "image",
                left: alloc::vec![channels, height, width],
                right: alloc::vec![pixels.len()],
            });
        }
        if let Some(bad) = pixels.iter().position(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Numeric {
                op: "image",
                detail: format!("pixel {bad} outside [0,1]"),
            });
        }
        Ok(Self {
            index,
            channels,
            height,
            width,
            pixels,
            label,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }
}

/// `n × d` row-major embedding matrix, one row per encoded image.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    rows: Vec<Float>,
    normalized: bool,
}

impl EmbeddingMatrix {
    /// Wraps raw rows; `normalized` is set only if every row is unit-norm.
    pub fn new(n: usize, d: usize, rows: Vec<Float>) -> Result<Self> {
        if rows.len() != n * d {
            return Err(Error::Shape {
                op: "embedding_matrix",
                left: alloc::vec![n, d],
                right: alloc::vec![rows.len()],
            });
        }
        let mut m = Self {
            n,
            d,
            rows,
            normalized: false,
        };
        m.normalized = m.first_unnormalized_row().is_none();
        Ok(m)
    }

    /// L2-normalizes every row; zero rows are an error.
    pub fn normalized_from(n: usize, d: usize, mut rows: Vec<Float>) -> Result<Self> {
        if rows.len() != n * d {
            return Err(Error::Shape {
                op: "embedding_matrix",
                left: alloc::vec![n, d],
                right: alloc::vec![rows.len()],
            });
        }
        for i in 0..n {
            let row = &mut rows[i * d..(i + 1) * d];
            let nrm = float::norm(row);
            if !(nrm > 0.0) || !nrm.is_finite() {
                return Err(Error::DegenerateRow { row: i });
            }
            row.iter_mut().for_each(|v| *v /= nrm);
        }
        Ok(Self {
            n,
            d,
            rows,
            normalized: true,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn rows(&self) -> &[Float] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[Float] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    fn first_unnormalized_row(&self) -> Option<(usize, f64)> {
        (0..self.n).find_map(|i| {
            let nrm = float::norm(self.row(i)) as f64;
            ((nrm - 1.0).abs() > NORM_TOLERANCE).then_some((i, nrm))
        })
    }

    /// Errors with the first offending row unless every row is unit-norm.
    pub fn require_normalized(&self) -> Result<()> {
        match self.first_unnormalized_row() {
            None => Ok(()),
            Some((row, norm)) => Err(Error::NotNormalized { row, norm }),
        }
    }

    /// New matrix made of the given rows, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut rows = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            if i >= self.n {
                return Err(Error::IndexOutOfRange {
                    what: "embedding row",
                    index: i,
                    bound: self.n,
                });
            }
            rows.extend_from_slice(self.row(i));
        }
        Ok(Self {
            n: indices.len(),
            d: self.d,
            rows,
            normalized: self.normalized,
        })
    }
}

/// Mined semantic positive pairs over the first `source_k` images (or the
/// `source_k` selected images, indexed in dataset coordinates).
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticPairSet {
    pub pairs: Vec<(usize, usize)>,
    pub source_k: usize,
    pub min_threshold: f64,
    pub max_threshold: f64,
}

impl SemanticPairSet {
    pub fn empty(source_k: usize, min_threshold: f64, max_threshold: f64) -> Self {
        Self {
            pairs: Vec::new(),
            source_k,
            min_threshold,
            max_threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Checks: no self pairs, indices below `bound`, no duplicates.
    ///
    /// `bound` is `source_k` for first-K selection and the dataset size when
    /// pairs reference a random selection.
    pub fn validate(&self, bound: usize) -> Result<()> {
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.pairs {
            if a == b {
                return Err(Error::InvalidConfig(format!("self pair ({a},{b})")));
            }
            for i in [a, b] {
                if i >= bound {
                    return Err(Error::IndexOutOfRange {
                        what: "pair",
                        index: i,
                        bound,
                    });
                }
            }
            if !seen.insert((a, b)) {
                return Err(Error::InvalidConfig(format!("duplicate pair ({a},{b})")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn image_rejects_out_of_range_pixels() {
        assert!(ImageRecord::new(0, (1, 1, 2), vec![0.0, 1.0], None).is_ok());
        assert!(ImageRecord::new(0, (1, 1, 2), vec![0.0, 1.5], None).is_err());
        assert!(ImageRecord::new(0, (1, 2, 2), vec![0.0, 1.0], None).is_err());
    }

    #[test]
    fn normalization_flag_tracks_rows() {
        let m = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 0.6, 0.8]).unwrap();
        assert!(m.is_normalized());
        let m = EmbeddingMatrix::new(2, 2, vec![1.0, 0.0, 3.0, 4.0]).unwrap();
        assert!(!m.is_normalized());
        assert!(matches!(
            m.require_normalized(),
            Err(Error::NotNormalized { row: 1, .. })
        ));
        let m = EmbeddingMatrix::normalized_from(1, 2, vec![3.0, 4.0]).unwrap();
        assert_eq!(m.rows(), &[0.6, 0.8]);
        assert_eq!(
            EmbeddingMatrix::normalized_from(2, 2, vec![1.0, 0.0, 0.0, 0.0]),
            Err(Error::DegenerateRow { row: 1 })
        );
    }

    #[test]
    fn pair_set_validation() {
        let mut s = SemanticPairSet::empty(6, 0.96, 0.99);
        s.pairs = vec![(0, 5), (5, 0)];
        assert!(s.validate(6).is_ok());
        s.pairs.push((0, 5));
        assert!(s.validate(6).is_err());
        s.pairs = vec![(2, 2)];
        assert!(s.validate(6).is_err());
        s.pairs = vec![(0, 6)];
        assert!(s.validate(6).is_err());
    }
}
