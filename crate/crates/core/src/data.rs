use crate::error::{Error, Result};
use crate::real::Real;

/// `N` sequences of `T` steps over `D` locations with an observation mask.
///
/// Values under a `false` mask entry are zeroed on construction; nothing
/// downstream reads them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<R> {
    sequences: usize,
    steps: usize,
    dim: usize,
    values: Vec<R>,
    mask: Vec<bool>,
}

impl<R: Real> Dataset<R> {
    pub fn new(sequences: usize, steps: usize, dim: usize, mut values: Vec<R>, mask: Vec<bool>) -> Result<Self> {
        let n = sequences * steps * dim;
        if values.len() != n || mask.len() != n {
            return Err(Error::InvalidArgument(format!(
                "dataset of shape ({sequences}, {steps}, {dim}) needs {n} values and mask entries, got {} and {}",
                values.len(),
                mask.len()
            )));
        }
        for (v, &m) in values.iter_mut().zip(&mask) {
            if !m {
                *v = R::zero();
            } else if !v.is_finite() {
                return Err(Error::NonFinite("observed dataset value".into()));
            }
        }
        Ok(Self {
            sequences,
            steps,
            dim,
            values,
            mask,
        })
    }

    /// Fully observed dataset.
    pub fn dense(sequences: usize, steps: usize, dim: usize, values: Vec<R>) -> Result<Self> {
        let n = values.len();
        Self::new(sequences, steps, dim, values, vec![true; n])
    }

    pub fn sequences(&self) -> usize {
        self.sequences
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[R] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Values and mask of sequence `n`, each `T × D` row-major.
    pub fn sequence(&self, n: usize) -> (&[R], &[bool]) {
        let len = self.steps * self.dim;
        (&self.values[n * len..(n + 1) * len], &self.mask[n * len..(n + 1) * len])
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.mask.is_empty() {
            return 0.0;
        }
        self.mask.iter().filter(|m| !**m).count() as f64 / self.mask.len() as f64
    }

    /// Keeps the listed sequences, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let len = self.steps * self.dim;
        let mut values = Vec::with_capacity(indices.len() * len);
        let mut mask = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.sequences {
                return Err(Error::InvalidArgument(format!("sequence {i} out of range")));
            }
            let (v, m) = self.sequence(i);
            values.extend_from_slice(v);
            mask.extend_from_slice(m);
        }
        Self::new(indices.len(), self.steps, self.dim, values, mask)
    }

    /// Splits every sequence at time `at`: steps `[0, at)` and `[at, T)`.
    pub fn split_time(&self, at: usize) -> Result<(Self, Self)> {
        if at == 0 || at >= self.steps {
            return Err(Error::InvalidArgument(format!("time split {at} outside (0, {})", self.steps)));
        }
        let d = self.dim;
        let (mut hv, mut hm, mut tv, mut tm) = (vec![], vec![], vec![], vec![]);
        for n in 0..self.sequences {
            let (v, m) = self.sequence(n);
            hv.extend_from_slice(&v[..at * d]);
            hm.extend_from_slice(&m[..at * d]);
            tv.extend_from_slice(&v[at * d..]);
            tm.extend_from_slice(&m[at * d..]);
        }
        Ok((
            Self::new(self.sequences, at, d, hv, hm)?,
            Self::new(self.sequences, self.steps - at, d, tv, tm)?,
        ))
    }

    /// Splits off the trailing `count` sequences as a test set.
    pub fn split_sequences(&self, count: usize) -> Result<(Self, Self)> {
        if count == 0 || count >= self.sequences {
            return Err(Error::InvalidArgument(format!(
                "cannot hold out {count} of {} sequences",
                self.sequences
            )));
        }
        let cut = self.sequences - count;
        let train: Vec<usize> = (0..cut).collect();
        let test: Vec<usize> = (cut..self.sequences).collect();
        Ok((self.select(&train)?, self.select(&test)?))
    }

    /// Replaces the mask, zeroing newly hidden entries.
    pub fn with_mask(&self, mask: Vec<bool>) -> Result<Self> {
        let values = self
            .values
            .iter()
            .zip(&self.mask)
            .map(|(&v, &m)| if m { v } else { R::zero() })
            .collect();
        Self::new(self.sequences, self.steps, self.dim, values, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_values_are_zeroed() {
        let d = Dataset::new(1, 2, 2, vec![1.0f64, f64::NAN, 3.0, 4.0], vec![true, false, true, true]).unwrap();
        assert_eq!(d.values(), &[1.0, 0.0, 3.0, 4.0]);
        assert!((d.missing_fraction() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn observed_nan_rejected() {
        assert!(Dataset::new(1, 1, 1, vec![f64::NAN], vec![true]).is_err());
    }

    #[test]
    fn splits() {
        let v: Vec<f64> = (0..24).map(|x| x as f64).collect();
        let d = Dataset::dense(3, 4, 2, v).unwrap();
        let (a, b) = d.split_time(3).unwrap();
        assert_eq!(a.sequence(1).0, &[8.0, 9.0, 10.0, 11.0, 12.0, 13.0]);
        assert_eq!(b.sequence(2).0, &[22.0, 23.0]);
        let (tr, te) = d.split_sequences(1).unwrap();
        assert_eq!((tr.sequences(), te.sequences()), (2, 1));
        assert_eq!(te.sequence(0).0[0], 16.0);
        assert!(d.split_time(4).is_err());
    }
}
