//! Named parameter storage, graph binding and initializers.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{invalid, Result};
use crate::tensor::{Graph, RunningStats, Tensor, Var};

pub type Rng64 = ChaCha8Rng;

/// Insertion-ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return invalid(format!("duplicate parameter name {name}"));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    /// Replaces an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let Some(&i) = self.index.get(name) else {
            return invalid(format!("unknown parameter {name}"));
        };
        if self.entries[i].1.shape() != t.shape() {
            return invalid(format!(
                "parameter {name}: shape {:?} cannot replace {:?}",
                t.shape(),
                self.entries[i].1.shape()
            ));
        }
        self.entries[i].1 = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Sum of sizes of entries whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, t)| t.numel()).sum()
    }
}

/// Batch-norm statistics keyed by layer name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsStore {
    entries: Vec<(String, RunningStats)>,
    index: HashMap<String, usize>,
}

impl StatsStore {
    pub fn insert(&mut self, name: impl Into<String>, stats: RunningStats) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return invalid(format!("duplicate statistics name {name}"));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, stats));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&RunningStats> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.entries.iter().map(|(n, s)| (n.as_str(), s))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Graph leaves for every parameter of a store.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn bind(g: &mut Graph, store: &ParamStore, requires_grad: bool) -> Self {
        let vars = store
            .iter()
            .map(|(n, t)| (n.to_string(), g.leaf(t.clone(), requires_grad)))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| crate::Error::InvalidArgument(format!("parameter {name} is not bound")))
    }

    /// Points `name` at a different node, e.g. a probe leaf in a gradient check.
    pub fn rebind(&mut self, name: &str, v: Var) -> Result<()> {
        match self.vars.get_mut(name) {
            Some(slot) => {
                *slot = v;
                Ok(())
            }
            None => invalid(format!("parameter {name} is not bound")),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, &v)| (n.as_str(), v))
    }
}

/// Everything a module forward pass needs besides its input.
pub struct Scope<'a> {
    pub g: &'a mut Graph,
    pub params: &'a Bindings,
    pub stats: &'a mut StatsStore,
    pub training: bool,
}

impl Scope<'_> {
    pub fn p(&self, name: &str) -> Result<Var> {
        self.params.get(name)
    }
}

pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-bound..=bound)).expect("finite uniform draw")
}

pub fn normal(shape: &[usize], std: f64, rng: &mut Rng64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape.to_vec(), |_| dist.sample(rng)).expect("finite normal draw")
}

/// He initialization for a layer followed by ReLU.
pub fn kaiming_normal(shape: &[usize], fan_in: usize, rng: &mut Rng64) -> Tensor {
    normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Default linear-layer draw `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn linear_init(shape: &[usize], fan_in: usize, rng: &mut Rng64) -> Tensor {
    uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng64) -> Tensor {
    uniform(shape, (6.0 / (fan_in + fan_out) as f64).sqrt(), rng)
}

pub fn filled(shape: &[usize], value: f64) -> Tensor {
    Tensor::full(shape.to_vec(), value).expect("finite fill")
}

pub fn seeded(seed: u64) -> Rng64 {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}
