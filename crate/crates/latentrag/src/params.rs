//! Named parameter storage shared by every trainable component.
//!
//! All model weights — transformer, projectors, both retrieval encoders —
//! live in one [`ParamStore`] under namespaced names, in a fixed
//! registration order.  Frozen components (the reference encoder) register
//! with `trainable = false`: they serialize into checkpoints like everything
//! else but the optimizer never touches them.
//!
//! A [`GraphCtx`] bridges the store and a [`Tape`] for one training step:
//! each parameter is loaded onto the tape as a gradient-tracked leaf at most
//! once, and the accumulated gradients can be read back per parameter after
//! `backward`.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Tape, Tensor};

pub type ParamId = usize;

/// One named weight matrix (vectors are `1 x n`).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub trainable: bool,
}

/// Registry of all parameters, ordered by registration.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn register(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Data(format!("duplicate parameter '{name}'")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "parameter '{name}': {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        let id = self.params.len();
        self.params.push(Param { name: name.to_string(), rows, cols, data, trainable });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Gaussian init with the given standard deviation.
    pub fn register_gaussian(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Result<ParamId> {
        let data = (0..rows * cols).map(|_| kernels::gaussian(rng) * std).collect();
        self.register(name, rows, cols, data, trainable)
    }

    pub fn register_zeros(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        trainable: bool,
    ) -> Result<ParamId> {
        self.register(name, rows, cols, vec![0.0; rows * cols], trainable)
    }

    pub fn register_ones(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        trainable: bool,
    ) -> Result<ParamId> {
        self.register(name, rows, cols, vec![1.0; rows * cols], trainable)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id]
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate()
    }

    /// Ids of all trainable parameters, in registration order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    // ── checkpointing ──────────────────────────────────────────────────────

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        let mut ck = Checkpoint::new(config_hash);
        for p in &self.params {
            ck.insert(&p.name, vec![p.rows, p.cols], p.data.clone())
                .expect("parameter names are unique by construction");
        }
        ck
    }

    /// Load values by name; every store parameter must be present with the
    /// right shape.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for p in &mut self.params {
            let entry = ck
                .get(&p.name)
                .ok_or_else(|| Error::Data(format!("checkpoint is missing '{}'", p.name)))?;
            if entry.shape != [p.rows, p.cols] {
                return Err(Error::Shape(format!(
                    "checkpoint entry '{}' has shape {:?}, expected [{}, {}]",
                    p.name, entry.shape, p.rows, p.cols
                )));
            }
            p.data = entry.data.clone();
        }
        Ok(())
    }
}

// ── graph context ──────────────────────────────────────────────────────────

/// Per-step bridge between a [`ParamStore`] and a [`Tape`].
pub struct GraphCtx {
    pub tape: Tape,
    leaves: RefCell<BTreeMap<ParamId, Tensor>>,
    dropout: f64,
    rng: RefCell<Option<ChaCha8Rng>>,
}

impl GraphCtx {
    /// Evaluation context: no dropout.
    pub fn eval() -> Self {
        GraphCtx {
            tape: Tape::new(),
            leaves: RefCell::new(BTreeMap::new()),
            dropout: 0.0,
            rng: RefCell::new(None),
        }
    }

    /// Evaluation context over an existing tape — used by gradient checks
    /// that need store-backed modules on a tape they control.
    pub fn on_tape(tape: Tape) -> Self {
        GraphCtx {
            tape,
            leaves: RefCell::new(BTreeMap::new()),
            dropout: 0.0,
            rng: RefCell::new(None),
        }
    }

    /// Training context with dropout driven by a seeded stream.
    pub fn train(dropout: f64, rng: ChaCha8Rng) -> Self {
        GraphCtx {
            tape: Tape::new(),
            leaves: RefCell::new(BTreeMap::new()),
            dropout,
            rng: RefCell::new(Some(rng)),
        }
    }

    /// Tape leaf for a parameter, created on first use and shared after.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Result<Tensor> {
        if let Some(t) = self.leaves.borrow().get(&id) {
            return Ok(t.clone());
        }
        let p = store.get(id);
        let leaf = self.tape.leaf(p.rows, p.cols, p.data.clone(), p.trainable)?;
        self.leaves.borrow_mut().insert(id, leaf.clone());
        Ok(leaf)
    }

    /// Apply inverted dropout when this is a training context.
    pub fn maybe_dropout(&self, x: Tensor) -> Result<Tensor> {
        if self.dropout <= 0.0 {
            return Ok(x);
        }
        let mut rng_slot = self.rng.borrow_mut();
        let rng = match rng_slot.as_mut() {
            Some(r) => r,
            None => return Ok(x),
        };
        let keep = 1.0 - self.dropout;
        let (r, c) = x.shape();
        let mask: Vec<f64> = (0..r * c)
            .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
            .collect();
        x.dropout_with_mask(mask)
    }

    /// Gradients accumulated on parameter leaves, in parameter-id order.
    pub fn grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.leaves
            .borrow()
            .iter()
            .filter_map(|(&id, leaf)| leaf.grad().map(|g| (id, g)))
            .collect()
    }
}
