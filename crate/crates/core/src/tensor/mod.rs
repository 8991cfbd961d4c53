//! Dense `f64` tensors and a tape-style reverse-mode autodiff graph.
//!
//! Layout is row-major everywhere. Image batches are `N×H×W×C`, convolution
//! kernels are `KH×KW×C_in×C_out`. There is no broadcasting apart from the
//! scalar ops and the dedicated trailing-axis [`Graph::bias_add`].

mod check;
pub(crate) mod gemm;
mod graph;

pub use check::finite_diff_check;
pub use graph::{Graph, SeparableMap, Var};

use crate::error::{Error, Result};

/// Dense row-major array of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that every dimension is positive and that
    /// the element count matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} must be a nonempty list of positive sizes"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!("shape {shape:?} holds {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 1-D tensor from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len().max(1)],
            data: if data.is_empty() { vec![0.0] } else { data },
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Copies rows `[start, start+count)` along the leading axis.
    pub fn slice_leading(&self, start: usize, count: usize) -> Result<Tensor> {
        let lead = self.shape[0];
        if count == 0 || start + count > lead {
            return Err(Error::invalid(
                "slice_leading",
                format!("rows {start}..{} out of range for {:?}", start + count, self.shape),
            ));
        }
        let stride = self.data.len() / lead;
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor {
            shape,
            data: self.data[start * stride..(start + count) * stride].to_vec(),
        })
    }

    /// Gathers the given leading-axis rows into a new tensor.
    pub fn gather_leading(&self, rows: &[usize]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Empty("row selection"));
        }
        let lead = self.shape[0];
        let stride = self.data.len() / lead;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= lead {
                return Err(Error::invalid(
                    "gather_leading",
                    format!("row {r} out of range for {:?}", self.shape),
                ));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Adds a leading axis of size 1.
    pub fn unsqueeze_leading(self) -> Tensor {
        let mut shape = Vec::with_capacity(self.shape.len() + 1);
        shape.push(1);
        shape.extend_from_slice(&self.shape);
        Tensor {
            shape,
            data: self.data,
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Mean of `-log softmax(logits)[label]` over the rows of a `B×K` tensor,
/// computed directly (no graph).
pub fn cross_entropy_per_example(logits: &Tensor, labels: &[usize]) -> Result<Vec<f64>> {
    if logits.rank() != 2 {
        return Err(Error::invalid(
            "cross_entropy",
            format!("logits must be batch×classes, got {:?}", logits.shape()),
        ));
    }
    let (batch, classes) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != batch {
        return Err(Error::shape("cross_entropy", logits.shape(), &[labels.len()]));
    }
    let mut out = Vec::with_capacity(batch);
    for (row, &label) in logits.data().chunks_exact(classes).zip(labels) {
        if label >= classes {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label {label} outside [0, {classes})"),
            ));
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        out.push(lse - row[label]);
    }
    Ok(out)
}

/// Row-wise softmax of a `B×K` tensor.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 2 {
        return Err(Error::invalid(
            "softmax",
            format!("expected batch×classes, got {:?}", logits.shape()),
        ));
    }
    let classes = logits.shape()[1];
    let mut data = logits.data().to_vec();
    for row in data.chunks_exact_mut(classes) {
        softmax_in_place(row);
    }
    Tensor::new(logits.shape().to_vec(), data)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    let classes = *scores.shape().last().unwrap_or(&1);
    scores
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn cross_entropy_reference_values() {
        let t = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let l = cross_entropy_per_example(&t, &[2]).unwrap();
        assert!((l[0] - 0.407_605_964_444_380_3).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }

    #[test]
    fn gather_and_slice() {
        let t = Tensor::new(vec![3, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.gather_leading(&[2, 0]).unwrap().data(), &[4.0, 5.0, 0.0, 1.0]);
        assert_eq!(t.slice_leading(1, 2).unwrap().data(), &[2.0, 3.0, 4.0, 5.0]);
        assert!(t.slice_leading(2, 2).is_err());
    }
}
