//! Named trainable parameters, their initialization, and the Adam optimizer.
//!
//! A [`ParamStore`] owns every weight tensor by name in registration order.
//! Each forward pass binds the tensors it uses onto a fresh tape through a
//! [`Binder`]; binding the same name twice returns the same node, so
//! gradients from all samples of a batch accumulate on one node per weight.
//!
//! Values serialize as shape + flat `f64` data. JSON round trips are exact:
//! the shortest-round-trip float encoding restores identical bits.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Grads, NodeId, Tape};

/// Errors from parameter bookkeeping.
#[derive(Debug, Error, PartialEq)]
pub enum ParamError {
    #[error("parameter `{0}` registered twice")]
    DuplicateName(String),
    #[error("unknown parameter `{0}`")]
    UnknownName(String),
    #[error("flat vector has {got} values but the store holds {want}")]
    FlatLengthMismatch { got: usize, want: usize },
}

/// Weight-initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// Normal(0, std).
    Normal { std: f64 },
    /// Normal(0, gain/√fan_in) — keeps activations O(1) through smooth
    /// nonlinearities.
    FanIn { fan_in: usize, gain: f64 },
}

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: ArrayD<f64>,
}

/// All trainable tensors of a model, ordered by registration.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(into = "ParamStoreRepr", from = "ParamStoreRepr")]
pub struct ParamStore {
    entries: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar weights.
    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|p| p.value.len()).sum()
    }

    /// Register a tensor with explicit contents.
    pub fn add(&mut self, name: &str, value: ArrayD<f64>) -> Result<usize, ParamError> {
        if self.index_of(name).is_some() {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        self.entries.push(Param { name: name.to_string(), value });
        Ok(self.entries.len() - 1)
    }

    /// Register and initialize a tensor. Sampling order is row-major, so a
    /// fixed RNG stream yields identical weights every run.
    pub fn init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize, ParamError> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("normal init: bad std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::FanIn { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                let dist = Normal::new(0.0, std).expect("fan-in init: bad std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
        };
        let value = ArrayD::from_shape_vec(IxDyn(shape), data).expect("init: shape/data mismatch");
        self.add(name, value)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].name
    }

    pub fn value(&self, idx: usize) -> &ArrayD<f64> {
        &self.entries[idx].value
    }

    pub fn value_mut(&mut self, idx: usize) -> &mut ArrayD<f64> {
        &mut self.entries[idx].value
    }

    /// Look a tensor up by name; panics on a missing name (a wiring bug, not
    /// a runtime condition).
    pub fn by_name(&self, name: &str) -> &ArrayD<f64> {
        let idx = self
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        &self.entries[idx].value
    }

    /// All weights flattened in registration order (row-major per tensor).
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_values());
        for p in &self.entries {
            out.extend(p.value.iter());
        }
        out
    }

    /// Overwrite all weights from a flat vector in registration order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ParamError> {
        if flat.len() != self.total_values() {
            return Err(ParamError::FlatLengthMismatch {
                got: flat.len(),
                want: self.total_values(),
            });
        }
        let mut off = 0;
        for p in &mut self.entries {
            for v in p.value.iter_mut() {
                *v = flat[off];
                off += 1;
            }
        }
        Ok(())
    }

    /// True if every weight is finite.
    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Serialize, Deserialize, Clone)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize, Clone)]
struct ParamStoreRepr {
    params: Vec<NamedTensor>,
}

impl From<ParamStore> for ParamStoreRepr {
    fn from(s: ParamStore) -> Self {
        ParamStoreRepr {
            params: s
                .entries
                .into_iter()
                .map(|p| NamedTensor {
                    name: p.name,
                    shape: p.value.shape().to_vec(),
                    data: p.value.into_raw_vec_and_offset().0,
                })
                .collect(),
        }
    }
}

impl From<ParamStoreRepr> for ParamStore {
    fn from(r: ParamStoreRepr) -> Self {
        ParamStore {
            entries: r
                .params
                .into_iter()
                .map(|t| Param {
                    name: t.name,
                    value: ArrayD::from_shape_vec(IxDyn(&t.shape), t.data)
                        .expect("checkpoint tensor: shape/data mismatch"),
                })
                .collect(),
        }
    }
}

/// Binds store tensors onto a tape, memoizing by entry so each weight appears
/// as exactly one node per tape.
pub struct Binder {
    trainable: bool,
    bound: Vec<Option<NodeId>>,
}

impl Binder {
    /// `trainable = false` binds weights as constants (inference tapes).
    pub fn new(store: &ParamStore, trainable: bool) -> Self {
        Binder { trainable, bound: vec![None; store.len()] }
    }

    pub fn bind(&mut self, tape: &mut Tape, store: &ParamStore, name: &str) -> NodeId {
        let idx = store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"));
        if let Some(id) = self.bound[idx] {
            return id;
        }
        let v = store.value(idx).clone();
        let id = if self.trainable { tape.param(v) } else { tape.constant(v) };
        self.bound[idx] = Some(id);
        id
    }

    /// Gather per-entry gradients after a backward pass; `None` for weights
    /// that were never bound or never reached.
    pub fn collect_grads(&self, grads: &Grads) -> Vec<Option<ArrayD<f64>>> {
        self.bound
            .iter()
            .map(|slot| slot.and_then(|id| grads.get(id).cloned()))
            .collect()
    }
}

/// Adam with fixed update order; state serializes exactly like parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<NamedTensor>,
    v: Vec<NamedTensor>,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| {
            s.entries
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: vec![0.0; p.value.len()],
                })
                .collect()
        };
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros(store), v: zeros(store) }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Apply one update. `grads[i]` pairs with store entry `i`; entries
    /// without a gradient are left untouched (their moments do not decay).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<ArrayD<f64>>]) {
        assert_eq!(grads.len(), store.len(), "adam: gradient/store entry mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[idx].data;
            let v = &mut self.v[idx].data;
            let p = store.value_mut(idx);
            debug_assert_eq!(g.len(), p.len(), "adam: gradient shape mismatch");
            for ((pv, gv), (mv, vv)) in
                p.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
