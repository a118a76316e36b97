use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BatchSemantics, DType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dtype", content = "values", rename_all = "snake_case")]
pub enum TensorData {
    I64(Vec<i64>),
    F32(Vec<f32>),
}

impl TensorData {
    pub fn zeros(dtype: DType, len: usize) -> Self {
        match dtype {
            DType::I64 => TensorData::I64(vec![0; len]),
            DType::F32 => TensorData::F32(vec![0.0; len]),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::I64(v) => v.len(),
            TensorData::F32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::I64(_) => DType::I64,
            TensorData::F32(_) => DType::F32,
        }
    }

    pub fn slice_range(&self, start: usize, end: usize) -> TensorData {
        match self {
            TensorData::I64(v) => TensorData::I64(v[start..end].to_vec()),
            TensorData::F32(v) => TensorData::F32(v[start..end].to_vec()),
        }
    }

    /// Grows (never shrinks) to at least `len` elements.
    pub fn ensure_len(&mut self, len: usize) {
        match self {
            TensorData::I64(v) if v.len() < len => v.resize(len, 0),
            TensorData::F32(v) if v.len() < len => v.resize(len, 0.0),
            _ => {}
        }
    }

    pub fn extend_from(&mut self, other: &TensorData) {
        match (self, other) {
            (TensorData::I64(a), TensorData::I64(b)) => a.extend_from_slice(b),
            (TensorData::F32(a), TensorData::F32(b)) => a.extend_from_slice(b),
            _ => panic!("dtype mismatch in extend_from"),
        }
    }
}

/// A dense numeric tensor stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "shape {shape:?} does not match data length");
        Tensor { shape, data }
    }

    pub fn from_i64(shape: &[usize], values: Vec<i64>) -> Self {
        Tensor::new(shape.to_vec(), TensorData::I64(values))
    }

    pub fn from_f32(shape: &[usize], values: Vec<f32>) -> Self {
        Tensor::new(shape.to_vec(), TensorData::F32(values))
    }

    pub fn zeros(shape: &[usize], dtype: DType) -> Self {
        Tensor::new(shape.to_vec(), TensorData::zeros(dtype, shape.iter().product()))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn as_i64(&self) -> Option<&[i64]> {
        match &self.data {
            TensorData::I64(v) => Some(v),
            TensorData::F32(_) => None,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            TensorData::I64(_) => None,
        }
    }

    /// Exact equality for integer data; `rel`/`abs` tolerance for floating point.
    pub fn approx_eq(&self, other: &Tensor, rel: f32, abs: f32) -> bool {
        if self.shape != other.shape {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::I64(a), TensorData::I64(b)) => a == b,
            (TensorData::F32(a), TensorData::F32(b)) => a
                .iter()
                .zip(b)
                .all(|(x, y)| x == y || (x - y).abs() <= abs.max(rel * x.abs().max(y.abs()))),
            _ => false,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TensorOpError {
    #[error("split sizes {sizes:?} do not sum to batch extent {rows}")]
    SizeMismatch { sizes: Vec<usize>, rows: usize },
    #[error("split sizes must all be at least 1, got {0:?}")]
    EmptyPart(Vec<usize>),
    #[error("replicated tensors cannot be split")]
    SplitReplicated,
    #[error("cannot concatenate an empty list of parts")]
    NothingToConcat,
    #[error("parts disagree on row shape or dtype")]
    IncompatibleParts,
}

/// Splits `t` along dimension 0 into consecutive parts of the given extents.
pub fn split_rows(t: &Tensor, batch: BatchSemantics, sizes: &[usize]) -> Result<Vec<Tensor>, TensorOpError> {
    if batch == BatchSemantics::Replicated {
        return Err(TensorOpError::SplitReplicated);
    }
    if sizes.iter().sum::<usize>() != t.rows() {
        return Err(TensorOpError::SizeMismatch { sizes: sizes.to_vec(), rows: t.rows() });
    }
    if sizes.contains(&0) {
        return Err(TensorOpError::EmptyPart(sizes.to_vec()));
    }
    let row_len = t.row_len();
    let mut start = 0;
    Ok(sizes
        .iter()
        .map(|rows| {
            let mut shape = t.shape.clone();
            shape[0] = *rows;
            let part = Tensor::new(shape, t.data.slice_range(start * row_len, (start + rows) * row_len));
            start += rows;
            part
        })
        .collect())
}

/// Inverse of [`split_rows`].
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor, TensorOpError> {
    let first = parts.first().ok_or(TensorOpError::NothingToConcat)?;
    if parts
        .iter()
        .any(|p| p.shape.len() != first.shape.len() || p.shape[1..] != first.shape[1..] || p.dtype() != first.dtype())
    {
        return Err(TensorOpError::IncompatibleParts);
    }
    let mut data = first.data.clone();
    for p in &parts[1..] {
        data.extend_from(&p.data);
    }
    let mut shape = first.shape.clone();
    shape[0] = parts.iter().map(|p| p.rows()).sum();
    Ok(Tensor::new(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn x43() -> Tensor {
        Tensor::from_i64(&[4, 3], (0..12).collect())
    }

    #[test]
    fn split_then_concat_is_identity() {
        let x = x43();
        let parts = split_rows(&x, BatchSemantics::Batched, &[2, 2]).unwrap();
        assert_eq!(concat_rows(&parts).unwrap(), x);
    }

    #[test]
    fn asymmetric_split_shapes() {
        let parts = split_rows(&x43(), BatchSemantics::Batched, &[3, 1]).unwrap();
        assert_eq!(parts[0].shape, vec![3, 3]);
        assert_eq!(parts[1].shape, vec![1, 3]);
    }

    #[test]
    fn oversized_split_rejected() {
        assert!(matches!(
            split_rows(&x43(), BatchSemantics::Batched, &[2, 3]),
            Err(TensorOpError::SizeMismatch { .. })
        ));
    }

    #[test]
    fn replicated_split_rejected() {
        assert_eq!(split_rows(&x43(), BatchSemantics::Replicated, &[4]), Err(TensorOpError::SplitReplicated));
    }

    proptest! {
        #[test]
        fn concat_inverts_split(rows in 1usize..12, cols in 1usize..5, cuts in proptest::collection::vec(1usize..4, 1..5)) {
            let x = Tensor::from_i64(&[rows, cols], (0..(rows * cols) as i64).collect());
            // turn arbitrary cuts into a valid size list summing to rows
            let mut sizes = Vec::new();
            let mut left = rows;
            for c in cuts {
                if left == 0 { break; }
                let s = c.min(left);
                sizes.push(s);
                left -= s;
            }
            if left > 0 { sizes.push(left); }
            let parts = split_rows(&x, BatchSemantics::Batched, &sizes).unwrap();
            prop_assert_eq!(concat_rows(&parts).unwrap(), x);
        }
    }
}
