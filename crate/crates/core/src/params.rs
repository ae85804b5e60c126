//! Named parameter storage and the per-forward-pass session.
//!
//! Layers register tensors once under hierarchical names and keep only
//! [`ParamId`] handles. A [`Session`] wraps a tape plus the store for one
//! forward (and optional backward) pass: mounting a parameter copies its
//! current value onto the tape exactly once per session, and
//! [`Session::backward`] routes leaf gradients back into the tensors'
//! grad buffers where the optimizer picks them up.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Trainable entries receive gradients and optimizer updates;
    /// buffers (running statistics) are persisted but never optimized.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: &str, mut value: Tensor) -> Result<ParamId> {
        value.set_requires_grad(true);
        self.insert(name, value, true)
    }

    pub fn register_buffer(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name '{name}'")));
        }
        let id = self.entries.len();
        self.entries.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.entries[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.entries
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    /// Number of scalar elements across trainable parameters.
    pub fn trainable_elements(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.value.zero_grad();
        }
    }
}

/// One forward/backward pass: tape + parameters + mode + RNG.
pub struct Session<'t, 'p> {
    tape: &'t Tape,
    params: &'p mut ParamStore,
    rng: Rng,
    training: bool,
    mounted: HashMap<usize, usize>,
}

impl<'t, 'p> Session<'t, 'p> {
    /// `rng` seeds the session's stochastic ops (dropout); pass a fork of
    /// the training stream so evaluation sessions can use any value.
    pub fn new(tape: &'t Tape, params: &'p mut ParamStore, training: bool, rng: Rng) -> Self {
        Session {
            tape,
            params,
            rng,
            training,
            mounted: HashMap::new(),
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn rng(&mut self) -> &mut Rng {
        &mut self.rng
    }

    /// Mounts a parameter onto the tape (at most once per session).
    pub fn param(&mut self, id: ParamId) -> Var<'t> {
        if let Some(&node) = self.mounted.get(&id.0) {
            return Var {
                tape: self.tape,
                id: node,
            };
        }
        let v = self.tape.leaf(self.params.tensor(id));
        self.mounted.insert(id.0, v.id);
        v
    }

    /// Read a buffer (e.g. running statistics).
    pub fn buffer(&self, id: ParamId) -> &Tensor {
        self.params.tensor(id)
    }

    /// Overwrite a buffer's data; only meaningful in training mode.
    pub fn update_buffer(&mut self, id: ParamId, data: &[f64]) {
        debug_assert!(!self.params.get(id).trainable, "buffers only");
        self.params.tensor_mut(id).data_mut().copy_from_slice(data);
    }

    /// Runs backward from `loss` and accumulates gradients of every
    /// mounted trainable parameter into its tensor. Consumes the session:
    /// one backward per forward pass.
    pub fn backward(self, loss: Var<'t>) -> Result<()> {
        self.tape.backward(loss)?;
        for (&pid, &node) in &self.mounted {
            let id = ParamId(pid);
            if !self.params.get(id).trainable {
                continue;
            }
            let var = Var {
                tape: self.tape,
                id: node,
            };
            if let Some(g) = self.tape.grad(var) {
                self.params.tensor_mut(id).accumulate_grad(&g);
            }
        }
        Ok(())
    }
}

/// Standard init for weight matrices: uniform in `±1/sqrt(fan_in)`.
pub fn init_weight(rng: &mut Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(rng, shape, -bound, bound)
}

/// Gradient check over every trainable parameter of a store.
#[derive(Debug, Clone)]
pub struct ParamGradCheck {
    pub max_rel_error: f64,
    pub per_param: Vec<(String, f64)>,
}

/// Verifies session-level gradients against central finite differences.
///
/// `build` assembles the scalar loss for the current parameter values; it
/// runs once analytically and twice per parameter element numerically.
/// Each evaluation gets a session seeded with the same `session_seed`, so
/// stochastic ops replay identically and the loss is a pure function of
/// the parameters.
#[allow(clippy::needless_range_loop)]
pub fn param_grad_check<F>(
    store: &mut ParamStore,
    training: bool,
    session_seed: u64,
    eps: f64,
    build: F,
) -> Result<ParamGradCheck>
where
    F: for<'t, 'p> Fn(&mut Session<'t, 'p>) -> Result<Var<'t>>,
{
    if eps <= 0.0 {
        return Err(Error::Contract(format!("grad_check eps must be > 0, got {eps}")));
    }
    store.zero_grads();
    // analytic pass
    {
        let tape = Tape::new();
        let mut sess = Session::new(&tape, store, training, Rng::new(session_seed));
        let loss = build(&mut sess)?;
        if loss.numel() != 1 {
            return Err(Error::Contract(format!(
                "grad check requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        sess.backward(loss)?;
    }
    let analytic: Vec<(ParamId, String, Vec<f64>)> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| {
            let g = p
                .value
                .grad()
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; p.value.numel()]);
            (id, p.name.clone(), g)
        })
        .collect();
    store.zero_grads();

    let eval = |store: &mut ParamStore| -> Result<f64> {
        let tape = Tape::new();
        let mut sess = Session::new(&tape, store, training, Rng::new(session_seed));
        let loss = build(&mut sess)?;
        Ok(loss.item())
    };

    let mut per_param = Vec::with_capacity(analytic.len());
    let mut max_rel_error = 0.0f64;
    for (id, name, grads) in analytic {
        let mut worst = 0.0f64;
        for ei in 0..grads.len() {
            let orig = store.tensor(id).data()[ei];
            store.tensor_mut(id).data_mut()[ei] = orig + eps;
            let up = eval(store)?;
            store.tensor_mut(id).data_mut()[ei] = orig - eps;
            let down = eval(store)?;
            store.tensor_mut(id).data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = crate::numerics::gradcheck::relative_error(grads[ei], numeric);
            worst = worst.max(err);
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((name, worst));
    }
    Ok(ParamGradCheck {
        max_rel_error,
        per_param,
    })
}
