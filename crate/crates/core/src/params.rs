//! Named parameter maps and their binding onto a [`Graph`].

use std::collections::BTreeMap;
use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Result, SaipError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Ordered `name → tensor` map. Iteration order is lexicographic, which
/// makes every reduction over parameters (optimizer, EMA, checkpoint)
/// deterministic.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.params.get(name).ok_or_else(|| SaipError::Parameter {
            name: name.to_string(),
            reason: "missing".into(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.params.remove(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with `prefix`, keys kept as-is.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::is_finite)
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for ParamStore<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        ParamStore {
            params: iter.into_iter().collect(),
        }
    }
}

/// Binds parameters of one store onto a graph on first use, so a parameter
/// shared by several forward passes appears once and its gradient
/// accumulates.
#[derive(Debug)]
pub struct Binder<'s, T> {
    store: &'s ParamStore<T>,
    trainable: bool,
    bound: HashMap<String, Var>,
}

impl<'s, T: Scalar> Binder<'s, T> {
    pub fn trainable(store: &'s ParamStore<T>) -> Self {
        Binder {
            store,
            trainable: true,
            bound: HashMap::new(),
        }
    }

    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Binder {
            store,
            trainable: false,
            bound: HashMap::new(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains(name)
    }

    /// Panics if `name` is missing; module constructors guarantee presence.
    pub fn get(&mut self, g: &mut Graph<T>, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not initialised"))
            .clone();
        let v = if self.trainable {
            g.param(value)
        } else {
            g.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        v
    }

    /// Gradients for every bound parameter, zero-filled for parameters of the
    /// store that were never touched by this graph.
    pub fn collect_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.store
            .iter()
            .map(|(name, value)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| grads.get(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.rows(), value.cols()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Xavier/Glorot uniform initialisation for a `fan_in × fan_out` weight.
pub fn xavier_uniform<T: Scalar, R: Rng + ?Sized>(
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(fan_in, fan_out, |_, _| T::lit(rng.gen_range(-bound..bound)))
}

/// Truncated normal (±2σ) initialisation, used for tokens and positions.
pub fn trunc_normal<T: Scalar, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| loop {
        // Box-Muller, rejecting draws beyond 2σ.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            break T::lit(z * std);
        }
    })
}

/// Whether decoupled weight decay applies to a parameter: matrices only,
/// never biases, norms, tokens or positional tables.
pub fn applies_weight_decay(name: &str) -> bool {
    name.ends_with(".w")
}
