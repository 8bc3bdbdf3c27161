//! Named parameter storage and binding of parameters into a [`Tape`].

use std::collections::{BTreeMap, HashMap};

use vpr_tensor::{DType, Gradients, SeededRng, Tape, Tensor, Var};

use crate::error::{config, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered collection of named parameter tensors. Insertion order is kept
/// so checkpoints and optimizer sweeps are deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool, trainable: bool) {
        for p in &mut self.params {
            if pred(&p.name) {
                p.trainable = trainable;
            }
        }
    }

    /// Replace the value of an existing parameter, checking its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| config(format!("missing parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(crate::Error::Dimension(format!(
                "parameter `{name}`: {:?} vs {:?}",
                p.value.shape(),
                value.shape()
            )));
        }
        let dtype = p.value.dtype();
        p.value = value.to_dtype(dtype);
        Ok(())
    }

    /// Merge another store under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ParamStore) -> Result<()> {
        for p in other.params {
            let trainable = p.trainable;
            let name = format!("{prefix}{}", p.name);
            self.insert(name.clone(), p.value)?;
            self.get_mut(&name).expect("just inserted").trainable = trainable;
        }
        Ok(())
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Normal with the given standard deviation.
    Normal(f64),
    /// Normal with std `1/sqrt(fan_in)`.
    FanIn(usize),
}

/// Creates parameters with deterministic per-tensor random streams.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    rng: SeededRng,
    dtype: DType,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, dtype: DType) -> Self {
        Self {
            store,
            rng: SeededRng::new(seed),
            dtype,
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init) -> Result<()> {
        let mut rng = self.rng.fork(self.store.len() as u64);
        let t = match init {
            Init::Zeros => Tensor::zeros(shape, self.dtype),
            Init::Ones => Tensor::full(shape, 1.0, self.dtype),
            Init::Const(v) => Tensor::full(shape, v, self.dtype),
            Init::Normal(std) => Tensor::randn(shape, std, self.dtype, &mut rng),
            Init::FanIn(fan_in) => Tensor::randn(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), self.dtype, &mut rng),
        };
        self.store.insert(name, t)
    }

    /// `{name}.w` `[in, out]` and `{name}.b` `[out]`.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, init: Init) -> Result<()> {
        self.add(format!("{name}.w"), &[fan_in, fan_out], init)?;
        self.add(format!("{name}.b"), &[fan_out], Init::Zeros)
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<()> {
        self.add(format!("{name}.g"), &[dim], Init::Ones)?;
        self.add(format!("{name}.b"), &[dim], Init::Zeros)
    }
}

/// A forward pass in progress: the tape plus lazily bound parameters.
pub struct Ctx<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: BTreeMap<String, Var>,
    track_grads: bool,
}

impl<'s> Ctx<'s> {
    /// `track_grads` false records no gradient bookkeeping for parameters.
    pub fn new(store: &'s ParamStore, dtype: DType, track_grads: bool) -> Self {
        Self {
            tape: Tape::new(dtype),
            store,
            bound: BTreeMap::new(),
            track_grads,
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Bind a parameter to the tape (once per pass).
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let param = self
            .store
            .get(name)
            .ok_or_else(|| config(format!("missing parameter `{name}`")))?;
        let v = self.tape.leaf(param.value.clone(), self.track_grads && param.trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Gradients of every bound trainable parameter reached by `loss`.
    pub fn param_grads(&self, loss: Var) -> Result<BTreeMap<String, Vec<f64>>> {
        let grads: Gradients = self.tape.backward(loss)?;
        Ok(self
            .bound
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|g| (name.clone(), g.to_vec())))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(&[1], DType::F32)).unwrap();
        assert!(s.insert("a", Tensor::zeros(&[1], DType::F32)).is_err());
    }

    #[test]
    fn builder_is_deterministic() {
        let build = || {
            let mut s = ParamStore::new();
            let mut b = ParamBuilder::new(&mut s, 9, DType::F32);
            b.linear("l", 3, 4, Init::FanIn(3)).unwrap();
            b.add("p", &[2], Init::Normal(0.02)).unwrap();
            s
        };
        assert_eq!(build(), build());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::full(&[2], 1.0, DType::F64)).unwrap();
        s.insert("v", Tensor::full(&[2], 2.0, DType::F64)).unwrap();
        s.set_trainable(|n| n == "v", false);
        let mut ctx = Ctx::new(&s, DType::F64, true);
        let w = ctx.p("w").unwrap();
        let v = ctx.p("v").unwrap();
        let y = ctx.tape.mul(w, v).unwrap();
        let l = ctx.tape.sum_all(y).unwrap();
        let g = ctx.param_grads(l).unwrap();
        assert_eq!(g.get("w").unwrap(), &vec![2.0, 2.0]);
        assert!(!g.contains_key("v"));
    }
}
