//! Named parameter collections and their binding onto a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract_err, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside two standard deviations.
    TruncNormal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: impl Into<Vec<usize>>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape: shape.into(),
            init,
        }
    }
}

pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Parameters keyed by dotted name, iterated in sorted order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    /// Draws every spec in order from `rng`.
    pub fn init<R: Rng + ?Sized>(specs: &[ParamSpec], rng: &mut R) -> Self {
        let mut set = Self::new();
        for s in specs {
            let t = match s.init {
                Init::Zeros => Tensor::zeros(s.shape.clone()),
                Init::Ones => Tensor::full(s.shape.clone(), T::one()),
                Init::TruncNormal(std) => {
                    Tensor::from_fn(s.shape.clone(), |_| T::of(trunc_normal(rng, std)))
                }
            };
            set.insert(s.name.clone(), t);
        }
        set
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> Self {
        Self {
            map: self
                .map
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Overwrites matching entries from `other`; every name in `other` must exist here.
    pub fn update_from(&mut self, other: &Self) -> Result<()> {
        for (k, v) in other.iter() {
            let slot = self
                .map
                .get_mut(k)
                .ok_or_else(|| contract_err!("unknown parameter {k}"))?;
            if slot.shape() != v.shape() {
                return Err(contract_err!(
                    "parameter {k}: shape {:?} vs {:?}",
                    slot.shape(),
                    v.shape()
                ));
            }
            *slot = v.clone();
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self
                .map
                .iter()
                .zip(&other.map)
                .all(|((ka, a), (kb, b))| ka == kb && a.bit_eq(b))
    }

    /// Checks names and shapes against `specs` exactly, listing every offender.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        let mut problems = Vec::new();
        for s in specs {
            match self.map.get(&s.name) {
                None => problems.push(format!("missing {}", s.name)),
                Some(t) if t.shape() != s.shape.as_slice() => problems.push(format!(
                    "{}: shape {:?}, expected {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                )),
                _ => {}
            }
        }
        for k in self.map.keys() {
            if !specs.iter().any(|s| &s.name == k) {
                problems.push(format!("unexpected {k}"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(contract_err!("parameter mismatch: {}", problems.join("; ")))
        }
    }

    /// Places every parameter on `graph`, trainable or frozen.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    graph.leaf(v.clone())
                } else {
                    graph.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters living on a graph, addressed by name.
pub struct Bound<'g, T> {
    vars: HashMap<String, Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    /// Wraps vars that already live on a graph.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var<'g, T>)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| contract_err!("parameter {name} is not bound"))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn scope(&self, prefix: &str) -> Scope<'_, 'g, T> {
        Scope {
            bound: self,
            prefix: prefix.to_string(),
        }
    }

    /// Gradients after backward; parameters the loss never reached get zeros.
    pub fn grads(&self) -> ParamSet<T> {
        let mut set = ParamSet::new();
        for (k, v) in &self.vars {
            let g = v
                .grad()
                .unwrap_or_else(|| Tensor::zeros(v.shape()));
            set.insert(k.clone(), g);
        }
        set
    }
}

/// A name prefix within a [`Bound`] set.
#[derive(Clone)]
pub struct Scope<'a, 'g, T> {
    bound: &'a Bound<'g, T>,
    prefix: String,
}

impl<'a, 'g, T: Real> Scope<'a, 'g, T> {
    pub fn get(&self, name: &str) -> Result<Var<'g, T>> {
        self.bound.get(&format!("{}.{name}", self.prefix))
    }

    pub fn has(&self, name: &str) -> bool {
        self.bound.has(&format!("{}.{name}", self.prefix))
    }

    pub fn sub(&self, name: &str) -> Scope<'a, 'g, T> {
        Scope {
            bound: self.bound,
            prefix: format!("{}.{name}", self.prefix),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }
}
