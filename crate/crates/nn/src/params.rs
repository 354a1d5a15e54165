use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::Float;
use crate::tape::BnStat;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub kind: ParamKind,
}

/// Named, ordered storage for every tensor a model owns.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value, kind });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i)).ok_or_else(|| Error::MissingParam(name.into()))
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(self.get(self.id(name)?))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.entries[id.0].kind
    }

    /// Number of scalar values in trainable parameters.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.kind == ParamKind::Trainable).map(|e| e.value.len()).sum()
    }

    /// Replaces `value` for `name`, keeping the shape contract.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.id(name)?;
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter `{name}` is {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry { name: e.name.clone(), value: e.value.cast(), kind: e.kind })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Folds batch statistics into running-statistic buffers:
    /// `running = (1 - momentum) * running + momentum * batch`.
    pub fn apply_bn_stats(&mut self, stats: &[BnStat<T>], momentum: f64) {
        let m = T::of(momentum);
        let keep = T::one() - m;
        for s in stats {
            for (id, batch) in [(s.running_mean, &s.mean), (s.running_var, &s.var)] {
                for (r, &b) in self.entries[id.0].value.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }

    /// Order-sensitive FNV-1a digest over names and raw values.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for e in &self.entries {
            eat(e.name.as_bytes());
            eat(&T::to_le_bytes_vec(e.value.data()));
        }
        h
    }
}

/// Samples a tensor from `N(0, std^2)`. Values are drawn in `f64` so that
/// `f32` and `f64` models built from the same seed agree up to rounding.
pub fn normal<T: Float, R: Rng + ?Sized>(shape: [usize; 4], std: f64, rng: &mut R) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("normal shape")
}
