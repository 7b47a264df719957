use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::real::Real;

/// Dense n-dimensional array, the value type for activations, parameters and
/// gradients. Immutable after construction: all operations return new tensors,
/// so values can be shared freely across threads.
#[derive(Clone, Debug)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Arc<Vec<F>>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "element count {} does not match shape {:?} (expects {})",
                data.len(),
                shape,
                numel
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![F::zero(); numel]) }
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: Arc::new(vec![value; numel]) }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![1], data: Arc::new(vec![value]) }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(&mut f).collect();
        Tensor { shape: shape.to_vec(), data: Arc::new(data) }
    }

    /// Uniform init on `[lo, hi)`. Sampling happens in f64 so the stream of
    /// random draws is identical across element types for a given rng state.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| F::from_f64(lo + (hi - lo) * rng.random::<f64>()))
    }

    pub fn rand_normal(shape: &[usize], mean: f64, std: f64, rng: &mut impl Rng) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            F::from_f64(mean + std * z)
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<F> {
        if !self.is_scalar() {
            return Err(Error::Contract(format!(
                "expected scalar tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Extents of a rank-2 tensor as (rows, cols).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Shape(format!("expected rank-2 tensor, got {other:?}"))),
        }
    }

    pub fn at2(&self, i: usize, j: usize) -> F {
        let cols = self.shape[1];
        self.data[i * cols + j]
    }

    pub fn at_flat(&self, i: usize) -> F {
        self.data[i]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| f(x)).collect()),
        }
    }

    pub fn zip(&self, other: &Tensor<F>, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op on mismatched shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data: Arc::new(data) })
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        self.map(|x| x * c)
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor<F>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} ({} elems) to {:?} ({} elems)",
                self.shape,
                self.numel(),
                shape,
                numel
            )));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    pub fn convert<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| G::from_f64(x.as_f64())).collect()),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.as_f64()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &F> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality of shape and payload; used by determinism contracts.
    pub fn bit_eq(&self, other: &Tensor<F>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

/// Index of a registered parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Flat, ordered registry of named parameters.
///
/// Models hold `ParamId`s rather than tensors, so the same model description
/// can address a student store and its EMA teacher clone interchangeably.
/// Registration order is the manifest order used by checkpoints and the
/// optimizer, which keeps every consumer deterministic.
#[derive(Clone, Debug)]
pub struct ParamStore<F> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.names.iter().any(|n| n == &name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.tensors[id.0]
    }

    pub fn set(&mut self, id: ParamId, tensor: Tensor<F>) -> Result<()> {
        if tensor.shape() != self.tensors[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {:?} expects shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                tensor.shape()
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    pub fn iter_mut_tensors(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.tensors.iter_mut()
    }

    pub fn tensors(&self) -> &[Tensor<F>] {
        &self.tensors
    }

    /// True when both stores register the same names with the same shapes in
    /// the same order.
    pub fn same_manifest(&self, other: &ParamStore<F>) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(other.tensors.iter())
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn bit_eq(&self, other: &ParamStore<F>) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(other.tensors.iter()).all(|(a, b)| a.bit_eq(b))
    }
}

impl<F: Real> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_count_must_match_shape() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        let ok = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(ok.numel(), 6);
    }

    #[test]
    fn reshape_preserves_data_and_checks_count() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }

    #[test]
    fn param_store_rejects_duplicate_names() {
        let mut store = ParamStore::<f32>::new();
        store.register("w", Tensor::zeros(&[2])).unwrap();
        assert!(store.register("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn param_store_set_checks_shape() {
        let mut store = ParamStore::<f32>::new();
        let id = store.register("w", Tensor::zeros(&[2, 2])).unwrap();
        assert!(store.set(id, Tensor::zeros(&[3])).is_err());
        assert!(store.set(id, Tensor::full(&[2, 2], 1.0)).is_ok());
    }

    #[test]
    fn uniform_sampling_stream_is_precision_independent() {
        use rand::SeedableRng;
        let mut r1 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut r2 = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::<f32>::rand_uniform(&[4], -1.0, 1.0, &mut r1);
        let b = Tensor::<f64>::rand_uniform(&[4], -1.0, 1.0, &mut r2);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
