//! Dense value carriers: [`Tensor`] for data and outputs, [`ParamVector`] for
//! the flattened model parameters.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major n-dimensional array of `f64`.
///
/// The leading dimension is the sample axis everywhere in this crate, so most
/// consumers view a tensor as a `rows x row_len` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::DimensionMismatch {
                what: "tensor data length",
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_matrix(m: Array2<f64>) -> Self {
        let shape = vec![m.nrows(), m.ncols()];
        let data = m.as_standard_layout().iter().copied().collect();
        Self { shape, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(Error::invalid(format!(
                    "row {i} has length {}, expected {width}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), width], data)
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

    /// Size of the leading (sample) dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of scalars per sample.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows(), self.row_len()), &self.data)
            .expect("tensor invariant: shape product equals data length")
    }

    pub fn to_matrix(&self) -> Array2<f64> {
        self.as_matrix().to_owned()
    }

    /// Gathers the given samples, in order, into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Tensor { shape, data }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// One named parameter block inside a [`ParamVector`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flattened model parameters with their layer layout.
///
/// Offsets are contiguous, non-overlapping and cover `[0, p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Vec<ParamSlot>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, layout: Vec<ParamSlot>) -> Result<Self> {
        validate_layout(&layout, values.len())?;
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<ParamSlot>) -> Result<Self> {
        let p = layout.iter().map(ParamSlot::len).sum();
        Self::new(vec![0.0; p], layout)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &[ParamSlot] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot_values(&self, slot: usize) -> &[f64] {
        &self.values[self.layout[slot].range()]
    }

    /// The values of one slot as a matrix. Vectors become `1 x n` rows.
    pub fn slot_matrix(&self, slot: usize) -> Array2<f64> {
        let s = &self.layout[slot];
        let (r, c) = matrix_dims(&s.shape);
        Array2::from_shape_vec((r, c), self.slot_values(slot).to_vec()).expect("slot shape matches its length")
    }

    /// A vector with the same layout and new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(values, self.layout.clone())
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
    }
}

fn validate_layout(layout: &[ParamSlot], p: usize) -> Result<()> {
    if p == 0 {
        return Err(Error::invalid("parameter vector must be non-empty"));
    }
    let mut next = 0;
    for slot in layout {
        if slot.offset != next {
            return Err(Error::invalid(format!(
                "slot `{}` starts at {} but previous slot ends at {next}",
                slot.name, slot.offset
            )));
        }
        next += slot.len();
    }
    if next != p {
        return Err(Error::DimensionMismatch {
            what: "parameter layout coverage",
            expected: p,
            found: next,
        });
    }
    Ok(())
}
