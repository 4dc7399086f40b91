//! Named parameter traversal and the serializable [`ParameterStore`].

use indexmap::IndexMap;
use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Anything holding learnable tensors.
///
/// Both methods must yield the same names in the same order; that order is
/// the canonical parameter order used by the optimizer and checkpoints.
pub trait Parameters<T: Scalar> {
    fn params(&self) -> Vec<(String, ArrayViewD<'_, T>)>;
    fn params_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    fn fill_zero(&mut self) {
        for (_, mut t) in self.params_mut() {
            t.fill(T::zero());
        }
    }

    /// A same-shaped copy with every element zero, used as a gradient buffer.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        out.fill_zero();
        out
    }

    /// `self += scale * other`, tensor by tensor.
    fn add_scaled(&mut self, other: &Self, scale: T) {
        for ((_, mut dst), (_, src)) in self.params_mut().into_iter().zip(other.params()) {
            dst.zip_mut_with(&src, |d, &s| *d = *d + scale * s);
        }
    }

    fn scale(&mut self, factor: T) {
        for (_, mut t) in self.params_mut() {
            t.mapv_inplace(|v| v * factor);
        }
    }

    fn sum_squares(&self) -> T {
        self.params()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .fold(T::zero(), |acc, &v| acc + v * v)
    }

    /// Name of the first tensor holding a NaN or infinity.
    fn first_non_finite(&self) -> Option<String> {
        self.params()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(name, _)| name)
    }
}

/// Prefixes child parameter names with `prefix.`.
pub(crate) fn nest<'a, V: 'a>(prefix: &'a str, children: Vec<(String, V)>) -> impl Iterator<Item = (String, V)> + 'a {
    children.into_iter().map(move |(name, t)| (format!("{prefix}.{name}"), t))
}

/// Ordered `name -> tensor` map with deterministic iteration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterStore<T = f32> {
    entries: IndexMap<String, ArrayD<T>>,
}

impl<T: Scalar> Default for ParameterStore<T> {
    fn default() -> Self {
        Self { entries: IndexMap::new() }
    }
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_module<M: Parameters<T>>(module: &M) -> Self {
        let mut store = Self::new();
        for (name, t) in module.params() {
            store
                .insert(name, t.to_owned())
                .expect("module parameter names are unique");
        }
        store
    }

    /// Copies every entry into `module`, requiring an exact name and shape match.
    pub fn load_into<M: Parameters<T>>(&self, module: &mut M) -> Result<()> {
        let mut targets = module.params_mut();
        if targets.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, store has {}",
                targets.len(),
                self.len()
            )));
        }
        for (name, dst) in targets.iter_mut() {
            let src = self
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if src.shape() != dst.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: expected shape {:?}, found {:?}",
                    dst.shape(),
                    src.shape()
                )));
            }
            dst.assign(src);
        }
        Ok(())
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name}")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.entries.get(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        let mut out = ParameterStore::new();
        for (name, t) in self.iter() {
            let converted = t.mapv(|v| U::from_f64_lossy(v.to_f64_lossy()));
            out.entries.insert(name.to_string(), converted);
        }
        out
    }

    pub fn zeros(shapes: &[(&str, &[usize])]) -> Result<Self> {
        let mut out = Self::new();
        for (name, shape) in shapes {
            out.insert(*name, ArrayD::zeros(IxDyn(shape)))?;
        }
        Ok(out)
    }
}
