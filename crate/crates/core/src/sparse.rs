use crate::error::{Error, Result};
use crate::hash::MAX_BITS;

/// Sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseVector {
    entries: Vec<(u32, f64)>,
}

impl SparseVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Takes entries that are already strictly increasing by index.
    pub fn from_sorted(entries: Vec<(u32, f64)>) -> Result<Self> {
        if let Some(w) = entries.windows(2).find(|w| w[0].0 >= w[1].0) {
            return Err(Error::contract(format!(
                "sparse indices not strictly increasing: {} then {}",
                w[0].0, w[1].0
            )));
        }
        Ok(SparseVector { entries })
    }

    /// Sorts by index and sums values that share an index.
    pub fn from_unsorted(mut entries: Vec<(u32, f64)>) -> Self {
        entries.sort_by_key(|&(i, _)| i);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
        for (i, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += v,
                _ => merged.push((i, v)),
            }
        }
        SparseVector { entries: merged }
    }

    /// Dense slice to sparse, keeping every coordinate (including zeros).
    pub fn from_dense(values: &[f64]) -> Self {
        SparseVector {
            entries: values.iter().enumerate().map(|(i, &v)| (i as u32, v)).collect(),
        }
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<(u32, f64)> {
        self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.entries.iter().copied()
    }

    pub fn indices(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(i, _)| i)
    }

    pub fn max_index(&self) -> Option<u32> {
        self.entries.last().map(|&(i, _)| i)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        SparseVector {
            entries: self.entries.iter().map(|&(i, v)| (i, alpha * v)).collect(),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.entries.iter().map(|&(_, v)| v * v).sum()
    }

    /// Sparse-sparse inner product (merge join).
    pub fn dot_sparse(&self, other: &SparseVector) -> f64 {
        let (mut a, mut b) = (self.entries.iter().peekable(), other.entries.iter().peekable());
        let mut acc = 0.0;
        while let (Some(&&(i, x)), Some(&&(j, y))) = (a.peek(), b.peek()) {
            match i.cmp(&j) {
                std::cmp::Ordering::Less => {
                    a.next();
                }
                std::cmp::Ordering::Greater => {
                    b.next();
                }
                std::cmp::Ordering::Equal => {
                    acc += x * y;
                    a.next();
                    b.next();
                }
            }
        }
        acc
    }
}

impl FromIterator<(u32, f64)> for SparseVector {
    fn from_iter<I: IntoIterator<Item = (u32, f64)>>(iter: I) -> Self {
        SparseVector::from_unsorted(iter.into_iter().collect())
    }
}

/// Dense hashed weight table plus per-weight last-touch timestamps. The
/// timestamp table is allocated on first use.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightModel {
    bits: u32,
    weights: Vec<f64>,
    timestamps: Vec<u64>,
}

impl WeightModel {
    pub fn new(bits: u32) -> Result<Self> {
        if bits > MAX_BITS {
            return Err(Error::config(format!("bits must be at most {MAX_BITS}, got {bits}")));
        }
        let size = 1usize << bits;
        Ok(WeightModel { bits, weights: vec![0.0; size], timestamps: Vec::new() })
    }

    /// Smallest table that holds `n` weights.
    pub fn with_capacity_for(n: usize) -> Self {
        let bits = n.max(1).next_power_of_two().trailing_zeros();
        WeightModel::new(bits).expect("small table")
    }

    pub fn from_weights(bits: u32, weights: Vec<f64>) -> Result<Self> {
        let mut model = WeightModel::new(bits)?;
        if weights.len() != model.weights.len() {
            return Err(Error::config(format!(
                "expected {} weights for bits={bits}, got {}",
                model.weights.len(),
                weights.len()
            )));
        }
        model.weights = weights;
        Ok(model)
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn get(&self, index: u32) -> f64 {
        self.weights[index as usize]
    }

    pub fn set(&mut self, index: u32, value: f64) {
        self.weights[index as usize] = value;
    }

    pub fn timestamp(&self, index: u32) -> u64 {
        self.timestamps.get(index as usize).copied().unwrap_or(0)
    }

    pub(crate) fn set_timestamp(&mut self, index: u32, t: u64) {
        if self.timestamps.is_empty() {
            self.timestamps = vec![0; self.weights.len()];
        }
        self.timestamps[index as usize] = t;
    }

    /// Errors unless every index of `x` addresses this table.
    pub fn check_range(&self, x: &SparseVector) -> Result<()> {
        match x.max_index() {
            Some(i) if i as usize >= self.weights.len() => {
                Err(Error::IndexOutOfRange { index: i, size: self.weights.len() })
            }
            _ => Ok(()),
        }
    }

    /// Nonzero weights in ascending index order.
    pub fn nonzero(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, &w)| w != 0.0)
            .map(|(i, &w)| (i as u32, w))
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }
}

/// `<x, w>`, accumulated in ascending index order.
pub fn dot(x: &SparseVector, w: &WeightModel) -> Result<f64> {
    w.check_range(x)?;
    Ok(dot_unchecked(x, w.weights()))
}

#[inline]
pub(crate) fn dot_unchecked(x: &SparseVector, w: &[f64]) -> f64 {
    let mut acc = 0.0;
    for &(i, v) in x.entries() {
        acc += v * w[i as usize];
    }
    acc
}
