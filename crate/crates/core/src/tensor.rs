//! Dense row-major `f64` tensors.

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

/// A dense, row-major tensor of `f64` values.
///
/// Image batches use the `[N, C, H, W]` layout throughout the crate.
/// Serialized as its shape plus base64 of the little-endian values, which
/// round-trips every bit pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Encoded", into = "Encoded")]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Encoded {
    shape: Vec<usize>,
    data: String,
}

impl From<Tensor> for Encoded {
    fn from(t: Tensor) -> Self {
        let bytes: Vec<u8> = t.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        Encoded {
            shape: t.shape,
            data: STANDARD.encode(bytes),
        }
    }
}

impl TryFrom<Encoded> for Tensor {
    type Error = String;

    fn try_from(e: Encoded) -> Result<Self, String> {
        let bytes = STANDARD.decode(e.data.as_bytes()).map_err(|err| err.to_string())?;
        if bytes.len() % 8 != 0 {
            return Err(format!("{} bytes is not a whole number of f64 values", bytes.len()));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let expected: usize = e.shape.iter().product();
        if expected != data.len() {
            return Err(format!("shape {:?} needs {expected} values, found {}", e.shape, data.len()));
        }
        Ok(Tensor { shape: e.shape, data })
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Wraps `data` with the given shape.
    ///
    /// Panics if the element count does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
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

    /// Size of the leading (batch) dimension.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per leading-dimension entry.
    pub fn per_item(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    /// Returns a copy with a new shape of identical element count.
    pub fn reshape(&self, shape: &[usize]) -> Self {
        Self::from_vec(shape, self.data.clone())
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// `[N, C, H, W]` dimensions; panics for other ranks.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        match self.shape[..] {
            [n, c, h, w] => (n, c, h, w),
            _ => panic!("expected a rank-4 tensor, got shape {:?}", self.shape),
        }
    }

    /// Slice of the `i`-th entry along the leading dimension.
    pub fn item_slice(&self, i: usize) -> &[f64] {
        let m = self.per_item();
        &self.data[i * m..(i + 1) * m]
    }

    /// Gathers entries along the leading dimension into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Self {
        let m = self.per_item();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(self.item_slice(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, data }
    }

    /// Stacks equally shaped tensors along a new leading dimension.
    pub fn stack(items: &[&Tensor]) -> Self {
        assert!(!items.is_empty(), "cannot stack zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "stack of mismatched shapes");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Self { shape, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Self {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
