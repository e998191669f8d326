//! Dense row-major f32 tensor used for weights, activations and calibration data.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::InvalidRecord {
                record: "<tensor>".into(),
                detail: format!("shape {:?} needs {} values, got {}", shape, n, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension; 1 for rank-0 tensors.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn item(&self, b: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Index of the largest value in each batch item (first wins on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.batch())
            .map(|b| {
                let row = self.item(b);
                let mut best = 0;
                for (i, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    /// Concatenate along the batch dimension.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::Empty("tensor list"))?;
        let tail = &first.shape[1..];
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(Error::InvalidRecord {
                    record: "<tensor>".into(),
                    detail: format!("cannot concatenate {:?} with {:?}", p.shape, first.shape),
                });
            }
            batch += p.batch();
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![batch];
        shape.extend_from_slice(tail);
        Ok(Tensor { shape, data })
    }

    /// Split along the batch dimension into chunks of at most `size` items.
    pub fn split(&self, size: usize) -> Vec<Tensor> {
        let n = self.item_len();
        let size = size.max(1);
        self.data
            .chunks(size * n.max(1))
            .map(|c| {
                let mut shape = self.shape.clone();
                shape[0] = c.len().checked_div(n).unwrap_or(0);
                Tensor { shape, data: c.to_vec() }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn split_then_concat_is_identity() {
        let t = Tensor::new(vec![5, 2], (0..10).map(|v| v as f32).collect()).unwrap();
        let parts = t.split(2);
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[2].shape, vec![1, 2]);
        assert_eq!(Tensor::concat(&parts).unwrap(), t);
    }

    #[test]
    fn argmax_prefers_first_on_ties() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 3.0, 3.0, -1.0, -2.0, -1.0]).unwrap();
        assert_eq!(t.argmax_rows(), vec![1, 0]);
    }
}
