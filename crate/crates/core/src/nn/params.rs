use std::collections::HashMap;
use std::ops::Index;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Real, Tape, Var};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Ordered, named collection of parameter tensors.
#[derive(Clone, Default)]
pub struct ParamStore<F: Real> {
    names: Vec<String>,
    values: Vec<Arc<ArrayD<F>>>,
    index: HashMap<String, usize>,
}

impl<F: Real> std::fmt::Debug for ParamStore<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.names.len())
            .field("scalars", &self.num_scalars())
            .finish()
    }
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<F>) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.values.push(Arc::new(value));
        ParamId(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<F> {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &ArrayD<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v.as_ref()))
    }

    /// Registers every tensor on `tape` as a leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, trainable: bool) -> Bound<'t, F> {
        Bound {
            vars: self.values.iter().map(|v| tape.leaf_shared(Arc::clone(v), trainable)).collect(),
        }
    }

    /// Flattened copy of all parameters in store order.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for v in &self.values {
            out.extend(v.iter().copied());
        }
        out
    }

    /// Overwrites all parameters from a flat vector in store order.
    pub fn unflatten(&mut self, flat: &[F]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length");
        let mut offset = 0;
        for v in &mut self.values {
            let n = v.len();
            Arc::make_mut(v)
                .as_slice_mut()
                .expect("standard layout")
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }

    /// Element type conversion (e.g. `f32` weights into an `f64` gradient check).
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (_, name, v) in self.iter() {
            out.insert(name, v.mapv(|x| G::of(x.as_f64())));
        }
        out
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, v) in self.iter() {
            h.update(name.as_bytes());
            for &d in v.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &x in v.iter() {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Parameters of a store registered on one tape.
pub struct Bound<'t, F: Real> {
    vars: Vec<Var<'t, F>>,
}

impl<'t, F: Real> Index<ParamId> for Bound<'t, F> {
    type Output = Var<'t, F>;
    fn index(&self, id: ParamId) -> &Var<'t, F> {
        &self.vars[id.0]
    }
}

impl<'t, F: Real> Bound<'t, F> {
    /// Wraps already-registered leaves, in store order.
    #[cfg(test)]
    pub(crate) fn from_vars(vars: Vec<Var<'t, F>>) -> Self {
        Self { vars }
    }

    /// Gradients for every parameter, zeros where a parameter was unused.
    pub fn grads(&self, grads: &Gradients<F>) -> Vec<ArrayD<F>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }
}

/// Hierarchical parameter constructor, in the spirit of a var-builder.
pub struct Builder<'a, F: Real> {
    store: &'a mut ParamStore<F>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, F: Real> Builder<'a, F> {
    pub fn new(store: &'a mut ParamStore<F>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn pp(&mut self, name: impl AsRef<str>) -> Builder<'_, F> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        Builder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| F::of(self.rng.random_range(-bound..=bound)));
        let full = self.full(name);
        self.store.insert(&full, value)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        use rand_distr::{Distribution, StandardNormal};
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| {
            let z: f64 = StandardNormal.sample(&mut *self.rng);
            F::of(z * std)
        });
        let full = self.full(name);
        self.store.insert(&full, value)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        let full = self.full(name);
        self.store.insert(&full, ArrayD::from_elem(IxDyn(shape), F::of(value)))
    }
}
