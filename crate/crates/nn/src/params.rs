use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::NnError;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors owned by one network.
#[derive(Debug)]
pub struct ParamStore<T> {
    tag: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self {
            tag: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: self.names.clone(),
            values: self.values.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tag: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub(crate) fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Appends `(name, shape, values)` of every parameter to `out` in order.
    pub fn write_blob(&self, out: &mut Vec<u8>) {
        for v in &self.values {
            for &x in v.data() {
                x.write_le(out);
            }
        }
    }

    /// Shapes in declaration order, for checkpoint headers.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.names
            .iter()
            .cloned()
            .zip(self.values.iter().map(|v| v.shape().to_vec()))
            .collect()
    }

    /// Overwrites all values from a blob produced by [`ParamStore::write_blob`].
    /// Returns the number of bytes consumed.
    pub fn read_blob(&mut self, bytes: &[u8]) -> Result<usize, NnError> {
        let need = self.num_scalars() * T::BYTES;
        if bytes.len() < need {
            return Err(NnError::Blob(format!(
                "parameter blob has {} bytes, expected at least {need}",
                bytes.len()
            )));
        }
        let mut off = 0;
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = T::read_le(&bytes[off..off + T::BYTES]);
                off += T::BYTES;
            }
        }
        Ok(off)
    }
}

/// Glorot-uniform initializer over `shape` with the given fan sizes.
pub fn glorot_uniform<T: Scalar, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-limit..limit)))
}
