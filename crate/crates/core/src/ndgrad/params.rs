use indexmap::IndexMap;

use super::{Array, Rng, Scalar, Tape, Var};
use crate::error::{Error, Result};

/// Named trainable arrays, iterated in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: IndexMap<String, Array>,
}

/// A [`ParamSet`] recorded onto a tape, one [`Var`] per name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Array::len).sum()
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamSet {
        Self { params: self.params.iter().map(|(k, v)| (k.clone(), Array::zeros(v.shape()))).collect() }
    }

    /// Record every parameter as a trainable leaf.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), tape.leaf(v.cast()))).collect() }
    }

    /// Record every parameter as a constant; adjoints never reach them.
    pub fn bind_frozen<T: Scalar>(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.params.iter().map(|(k, v)| (k.clone(), tape.constant(v.cast()))).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.params.values().all(Array::is_finite)
    }

    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|((ka, va), (kb, vb))| ka == kb && va.bit_eq(vb))
    }

    /// Concatenate the arrays whose names pass `keep`, in insertion order.
    pub fn flatten(&self, keep: impl Fn(&str) -> bool) -> Vec<f32> {
        self.params.iter().filter(|(k, _)| keep(k)).flat_map(|(_, v)| v.data().iter().copied()).collect()
    }
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::Contract(format!("no parameter named {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Rebind `name` to another variable, e.g. a leaf under test.
    pub fn with(mut self, name: &str, var: Var) -> Result<Self> {
        let slot = self.vars.get_mut(name).ok_or_else(|| Error::Contract(format!("no parameter named {name}")))?;
        *slot = var;
        Ok(self)
    }

    /// Adjoints of every bound parameter after `backward`, in single precision.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>) -> ParamSet {
        ParamSet { params: self.vars.iter().map(|(k, v)| (k.clone(), tape.grad(*v).cast())).collect() }
    }
}

/// Glorot-uniform matrix of shape `[fan_in, fan_out]`.
pub fn xavier(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Array {
    let limit = (6.0 / (fan_in + fan_out) as f32).sqrt();
    rng.uniform_array(&[fan_in, fan_out], -limit, limit)
}
