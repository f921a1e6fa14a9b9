use std::ops::Index;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use vpnext_tensor::{numel, Graph, Scalar, Tensor, Var};

use crate::error::{ModelError, Result};

/// Position of a parameter inside the [`ParamStore`] it was built against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

/// Name-keyed parameter tensors in construction order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(ModelError::Param { name, msg: "duplicate name".into() });
        }
        self.entries.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn by_id(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0]
    }

    pub fn by_id_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Insert every parameter into `g`. Trainable leaves receive gradients;
    /// otherwise they enter as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .values()
            .map(|t| if trainable { g.param(t) } else { g.constant(t) })
            .collect();
        Bound { vars }
    }
}

/// Graph variables for a bound [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal with std `1/sqrt(fan_in)`, fan-in being every extent but the last.
    LeCun,
}

enum Source<'a, T> {
    Fresh(ChaCha8Rng),
    Load { from: &'a ParamStore<T>, used: usize },
}

/// Registers parameters while a model is assembled, either drawing fresh
/// values or pulling them by name from an existing store.
pub struct ParamBuilder<'a, T> {
    source: Source<'a, T>,
    store: ParamStore<T>,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn fresh(seed: u64) -> Self {
        ParamBuilder { source: Source::Fresh(ChaCha8Rng::seed_from_u64(seed)), store: ParamStore::new() }
    }

    pub fn load(from: &'a ParamStore<T>) -> Self {
        ParamBuilder { source: Source::Load { from, used: 0 }, store: ParamStore::new() }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let t = match &mut self.source {
            Source::Fresh(rng) => draw(rng, shape, init),
            Source::Load { from, used } => {
                let t = from.get(name).ok_or_else(|| ModelError::Param {
                    name: name.into(),
                    msg: "missing from the loaded parameters".into(),
                })?;
                if t.shape() != shape {
                    return Err(ModelError::Param {
                        name: name.into(),
                        msg: format!("has shape {:?}, architecture expects {:?}", t.shape(), shape),
                    });
                }
                *used += 1;
                t.clone()
            }
        };
        let id = ParamId(self.store.len());
        self.store.insert(name, t)?;
        Ok(id)
    }

    pub fn finish(self) -> Result<ParamStore<T>> {
        if let Source::Load { from, used } = self.source {
            if used != from.len() {
                let extra = from.names().find(|n| self.store.get(n).is_none()).unwrap_or_default();
                return Err(ModelError::Param {
                    name: extra.into(),
                    msg: "not part of this architecture".into(),
                });
            }
        }
        Ok(self.store)
    }
}

fn draw<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Tensor<T> {
    let std = match init {
        Init::Zeros => return Tensor::zeros(shape),
        Init::Ones => return Tensor::full(shape, T::one()),
        Init::Normal(s) => s,
        Init::LeCun => {
            let fan_in = numel(&shape[..shape.len().saturating_sub(1)]).max(1);
            1.0 / (fan_in as f64).sqrt()
        }
    };
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| T::from_f64(dist.sample(rng)))
}
