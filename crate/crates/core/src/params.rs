//! Named parameter storage and per-forward binding onto a tape.

use std::collections::HashMap;

use hrtnet_tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in registration order, keyed by dotted hierarchical names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: String, t: Tensor) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Invariant(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(ParamId(self.tensors.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.id(name).map(|id| &mut self.tensors[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Names matching `prefix` exactly or as a dotted parent.
    pub fn names_under<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names
            .iter()
            .map(String::as_str)
            .filter(move |n| n.strip_prefix(prefix).is_some_and(|r| r.is_empty() || r.starts_with('.')))
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: String::new(),
        }
    }

    pub fn sub(&mut self, name: impl std::fmt::Display) -> Builder<'_> {
        Builder {
            prefix: self.full(&name.to_string()),
            store: &mut *self.store,
            rng: &mut *self.rng,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn add(&mut self, name: &str, t: Tensor) -> ParamId {
        let full = self.full(name);
        self.store.insert(full, t).expect("parameter names are fixed by the architecture")
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let t = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Tensor::from_fn(shape, |_| dist.sample(self.rng))
        } else {
            Tensor::zeros(shape)
        };
        self.add(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, 1.0))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }
}

/// Binds parameters to tape leaves on first use within one forward pass.
pub struct Ctx<'t> {
    pub tape: &'t mut Tape,
    params: &'t ParamStore,
    bound: Vec<Option<Var>>,
    trainable: bool,
}

impl<'t> Ctx<'t> {
    /// `trainable` leaves receive gradients during `backward`.
    pub fn new(tape: &'t mut Tape, params: &'t ParamStore, trainable: bool) -> Self {
        let bound = vec![None; params.len()];
        Ctx {
            tape,
            params,
            bound,
            trainable,
        }
    }

    /// Uses caller-created vars (one per parameter, in registration order).
    pub fn with_vars(tape: &'t mut Tape, params: &'t ParamStore, vars: &[Var]) -> Result<Self> {
        if vars.len() != params.len() {
            return Err(Error::Invariant(format!(
                "{} vars supplied for {} parameters",
                vars.len(),
                params.len()
            )));
        }
        Ok(Ctx {
            tape,
            params,
            bound: vars.iter().copied().map(Some).collect(),
            trainable: true,
        })
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// Gradient per parameter after `backward`; `None` for parameters never used.
    pub fn param_grads(&self) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.tape.grad(v).map(<[f64]>::to_vec)))
            .collect()
    }
}
