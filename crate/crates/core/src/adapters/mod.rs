//! Low-rank adapters injected at named linear layers, dialect->task stacking,
//! trainability control and merge-to-base.
//!
//! An adapter contributes `s * B * (A * x)` on top of a frozen base weight,
//! with `A ~ Normal(0, init_std^2)` and `B = 0` at creation, so a fresh
//! injection is an exact identity.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::lm::BackendDescriptor;

pub use checkpoint::{load_adapter_set, save_adapter_set};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("layer {layer}: rank {rank} exceeds min(in_dim, out_dim) = {max}")]
    RankTooLarge {
        layer: String,
        rank: usize,
        max: usize,
    },
    #[error("layer {layer} is not a linear layer of this backend")]
    UnknownLayer { layer: String },
    #[error("layer {layer}: checkpoint tensor is {got}, backend expects {expected}")]
    DimMismatch {
        layer: String,
        expected: String,
        got: String,
    },
    #[error("invalid adapter config: {0}")]
    Config(String),
    #[error("stack expects one dialect set and one task set, got {0} twice")]
    KindMismatch(AdapterKind),
    #[error("sequential stacking needs square layers; {layer} is {in_dim}x{out_dim}")]
    SequentialNonSquare {
        layer: String,
        in_dim: usize,
        out_dim: usize,
    },
    #[error("adapter checkpoint io on {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("adapter checkpoint manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] crate::lm::LmError),
}

/// The two adapter roles; the stack always orders dialect before task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AdapterKind {
    Dialect,
    Task,
}

impl AdapterKind {
    pub fn tag(self) -> &'static str {
        match self {
            AdapterKind::Dialect => "dialect",
            AdapterKind::Task => "task",
        }
    }

    pub fn parse(tag: &str) -> Result<Self, AdapterError> {
        match tag {
            "dialect" => Ok(AdapterKind::Dialect),
            "task" => Ok(AdapterKind::Task),
            other => Err(AdapterError::Manifest(format!("unknown set kind {other:?}"))),
        }
    }
}

impl fmt::Display for AdapterKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// Which linear layers a set attaches to; defaults to all of them.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum LayerSelector {
    #[default]
    All,
    Named(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub init_std: f64,
    pub target_layers: LayerSelector,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            rank: 16,
            alpha: 32.0,
            init_std: 0.02,
            target_layers: LayerSelector::All,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.rank == 0 {
            return Err(AdapterError::Config("rank must be >= 1".into()));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(AdapterError::Config("alpha must be > 0".into()));
        }
        if !self.init_std.is_finite() || self.init_std <= 0.0 {
            return Err(AdapterError::Config("init_std must be > 0".into()));
        }
        Ok(())
    }
}

/// One low-rank delta: `A` is rank x in_dim, `B` out_dim x rank. The scaling
/// `alpha / rank` is recomputed on demand rather than stored.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    a: Array2<f64>,
    b: Array2<f64>,
    rank: usize,
    alpha: f64,
    trainable: bool,
}

impl LowRankAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Array2<f64> {
        &mut self.a
    }

    pub fn b_mut(&mut self) -> &mut Array2<f64> {
        &mut self.b
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// The materialized weight delta `s * B * A`, shaped out_dim x in_dim.
    pub fn delta(&self) -> Array2<f64> {
        self.scaling() * self.b.dot(&self.a)
    }

    /// Adapter contribution for a row-major activation batch `x` (T x in).
    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        self.scaling() * x.dot(&self.a.t()).dot(&self.b.t())
    }

    /// dL/dx contribution given the output gradient `g` (T x out).
    pub fn backward_input(&self, g: &Array2<f64>) -> Array2<f64> {
        self.scaling() * g.dot(&self.b).dot(&self.a)
    }

    /// Accumulates dL/dA and dL/dB for the pair (input `x`, output grad `g`).
    pub fn accumulate_grads(
        &self,
        x: &Array2<f64>,
        g: &Array2<f64>,
        da: &mut Array2<f64>,
        db: &mut Array2<f64>,
    ) {
        let s = self.scaling();
        let gb = g.dot(&self.b); // (T, r)
        *da += &(s * &gb.t().dot(x));
        let xa = x.dot(&self.a.t()); // (T, r)
        *db += &(s * &g.t().dot(&xa));
    }
}

/// All adapters of one role, keyed by layer name in backend order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    kind: AdapterKind,
    rank: usize,
    alpha: f64,
    init_std: f64,
    entries: Vec<(String, LowRankAdapter)>,
}

impl AdapterSet {
    /// Creates adapters for every targeted linear layer of the backend:
    /// `A ~ Normal(0, init_std^2)` drawn from a seeded stream in layer order,
    /// `B = 0`.
    pub fn init(
        descriptor: &BackendDescriptor,
        config: &AdapterConfig,
        kind: AdapterKind,
        seed: u64,
    ) -> Result<Self, AdapterError> {
        config.validate()?;
        if let LayerSelector::Named(names) = &config.target_layers {
            for name in names {
                if descriptor.linear(name).is_none() {
                    return Err(AdapterError::UnknownLayer {
                        layer: name.clone(),
                    });
                }
            }
        }
        let selected = |name: &str| match &config.target_layers {
            LayerSelector::All => true,
            LayerSelector::Named(names) => names.iter().any(|n| n == name),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).expect("valid std");
        let mut entries = Vec::new();
        for spec in &descriptor.linear_layers {
            if !selected(&spec.name) {
                continue;
            }
            let max = spec.in_dim.min(spec.out_dim);
            if config.rank > max {
                return Err(AdapterError::RankTooLarge {
                    layer: spec.name.clone(),
                    rank: config.rank,
                    max,
                });
            }
            let a = Array2::from_shape_fn((config.rank, spec.in_dim), |_| normal.sample(&mut rng));
            let b = Array2::zeros((spec.out_dim, config.rank));
            entries.push((
                spec.name.clone(),
                LowRankAdapter {
                    a,
                    b,
                    rank: config.rank,
                    alpha: config.alpha,
                    trainable: false,
                },
            ));
        }
        Ok(AdapterSet {
            kind,
            rank: config.rank,
            alpha: config.alpha,
            init_std: config.init_std,
            entries,
        })
    }

    pub fn kind(&self) -> AdapterKind {
        self.kind
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn init_std(&self) -> f64 {
        self.init_std
    }

    pub fn entries(&self) -> &[(String, LowRankAdapter)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [(String, LowRankAdapter)] {
        &mut self.entries
    }

    pub fn get(&self, layer: &str) -> Option<&LowRankAdapter> {
        self.entries
            .iter()
            .find(|(name, _)| name == layer)
            .map(|(_, a)| a)
    }

    pub fn layer_names(&self) -> Vec<&str> {
        self.entries.iter().map(|(name, _)| name.as_str()).collect()
    }

    /// Whether gradients flow into this set. All entries share the flag.
    pub fn trainable(&self) -> bool {
        self.entries.first().map(|(_, a)| a.trainable).unwrap_or(false)
    }

    pub fn set_trainable(&mut self, flag: bool) {
        for (_, adapter) in &mut self.entries {
            adapter.trainable = flag;
        }
    }

    /// Total trainable parameters: sum over layers of rank * (in + out).
    pub fn param_count(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, a)| a.a.len() + a.b.len())
            .sum()
    }

    /// Flattened copy of every A and B, for bitwise freeze checks.
    pub fn snapshot(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (_, adapter) in &self.entries {
            out.extend(adapter.a.iter().copied());
            out.extend(adapter.b.iter().copied());
        }
        out
    }
}

/// How two co-resident deltas combine on one layer. Additive is the default
/// and the semantics the rest of the pipeline assumes; sequential feeds the
/// task adapter the dialect-adapted layer output and is an experimental mode
/// restricted to square layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StackMode {
    #[default]
    Additive,
    Sequential,
}

/// The dialect-then-task adapter composition. Either slot may be empty.
#[derive(Debug, Clone, Default)]
pub struct AdapterStack {
    dialect: Option<AdapterSet>,
    task: Option<AdapterSet>,
    mode: StackMode,
}

impl AdapterStack {
    pub fn empty() -> Self {
        AdapterStack::default()
    }

    /// Builds the full dialect-then-task stack.
    pub fn stack(dialect: AdapterSet, task: AdapterSet) -> Result<Self, AdapterError> {
        if dialect.kind() != AdapterKind::Dialect {
            return Err(AdapterError::KindMismatch(dialect.kind()));
        }
        if task.kind() != AdapterKind::Task {
            return Err(AdapterError::KindMismatch(task.kind()));
        }
        Ok(AdapterStack {
            dialect: Some(dialect),
            task: Some(task),
            mode: StackMode::Additive,
        })
    }

    pub fn single(set: AdapterSet) -> Self {
        let mut stack = AdapterStack::empty();
        stack.install(set);
        stack
    }

    /// Slots the set by its kind, replacing any set already there.
    pub fn install(&mut self, set: AdapterSet) {
        match set.kind() {
            AdapterKind::Dialect => self.dialect = Some(set),
            AdapterKind::Task => self.task = Some(set),
        }
    }

    pub fn remove(&mut self, kind: AdapterKind) -> Option<AdapterSet> {
        match kind {
            AdapterKind::Dialect => self.dialect.take(),
            AdapterKind::Task => self.task.take(),
        }
    }

    pub fn mode(&self) -> StackMode {
        self.mode
    }

    /// Switches composition semantics. Sequential requires every doubly
    /// occupied layer to be square.
    pub fn set_mode(
        &mut self,
        mode: StackMode,
        descriptor: &BackendDescriptor,
    ) -> Result<(), AdapterError> {
        if mode == StackMode::Sequential {
            if let (Some(dialect), Some(task)) = (&self.dialect, &self.task) {
                for (name, _) in dialect.entries() {
                    if task.get(name).is_none() {
                        continue;
                    }
                    let spec = descriptor
                        .linear(name)
                        .ok_or_else(|| AdapterError::UnknownLayer { layer: name.clone() })?;
                    if spec.in_dim != spec.out_dim {
                        return Err(AdapterError::SequentialNonSquare {
                            layer: name.clone(),
                            in_dim: spec.in_dim,
                            out_dim: spec.out_dim,
                        });
                    }
                }
            }
        }
        self.mode = mode;
        Ok(())
    }

    pub fn dialect(&self) -> Option<&AdapterSet> {
        self.dialect.as_ref()
    }

    pub fn task(&self) -> Option<&AdapterSet> {
        self.task.as_ref()
    }

    pub fn dialect_mut(&mut self) -> Option<&mut AdapterSet> {
        self.dialect.as_mut()
    }

    pub fn task_mut(&mut self) -> Option<&mut AdapterSet> {
        self.task.as_mut()
    }

    pub fn is_empty(&self) -> bool {
        self.dialect.is_none() && self.task.is_none()
    }

    /// The recorded composition order, for checkpoint metadata.
    pub fn order(&self) -> Vec<AdapterKind> {
        let mut order = Vec::new();
        if self.dialect.is_some() {
            order.push(AdapterKind::Dialect);
        }
        if self.task.is_some() {
            order.push(AdapterKind::Task);
        }
        order
    }

    /// Adapters attached to `layer`, in stack order.
    pub fn active_for(&self, layer: &str) -> Vec<(AdapterKind, &LowRankAdapter)> {
        let mut active = Vec::new();
        if let Some(adapter) = self.dialect.as_ref().and_then(|s| s.get(layer)) {
            active.push((AdapterKind::Dialect, adapter));
        }
        if let Some(adapter) = self.task.as_ref().and_then(|s| s.get(layer)) {
            active.push((AdapterKind::Task, adapter));
        }
        active
    }

    /// True when both sets hold an adapter for `layer`.
    pub fn is_stacked_on(&self, layer: &str) -> bool {
        self.dialect.as_ref().is_some_and(|s| s.get(layer).is_some())
            && self.task.as_ref().is_some_and(|s| s.get(layer).is_some())
    }
}

/// Gradient buffers for one adapter set, keyed by layer name.
#[derive(Debug)]
pub struct SetGrads {
    grads: BTreeMap<String, (Array2<f64>, Array2<f64>)>,
}

impl SetGrads {
    fn zeros_for(set: &AdapterSet) -> Self {
        let grads = set
            .entries()
            .iter()
            .map(|(name, adapter)| {
                (
                    name.clone(),
                    (
                        Array2::zeros(adapter.a.dim()),
                        Array2::zeros(adapter.b.dim()),
                    ),
                )
            })
            .collect();
        SetGrads { grads }
    }

    pub fn get(&self, layer: &str) -> Option<(&Array2<f64>, &Array2<f64>)> {
        self.grads.get(layer).map(|(a, b)| (a, b))
    }
}

/// Gradient buffers for every trainable set in a stack. Sets that are frozen
/// (or absent) have no buffers, so no gradient can reach them.
#[derive(Debug)]
pub struct StackGrads {
    dialect: Option<SetGrads>,
    task: Option<SetGrads>,
}

impl StackGrads {
    pub fn for_trainable(stack: &AdapterStack) -> Self {
        let buffers = |set: Option<&AdapterSet>| {
            set.filter(|s| s.trainable()).map(SetGrads::zeros_for)
        };
        StackGrads {
            dialect: buffers(stack.dialect()),
            task: buffers(stack.task()),
        }
    }

    pub fn entry(
        &mut self,
        kind: AdapterKind,
        layer: &str,
    ) -> Option<(&mut Array2<f64>, &mut Array2<f64>)> {
        let set = match kind {
            AdapterKind::Dialect => self.dialect.as_mut(),
            AdapterKind::Task => self.task.as_mut(),
        }?;
        set.grads.get_mut(layer).map(|(a, b)| (&mut *a, &mut *b))
    }

    pub fn set(&self, kind: AdapterKind) -> Option<&SetGrads> {
        match kind {
            AdapterKind::Dialect => self.dialect.as_ref(),
            AdapterKind::Task => self.task.as_ref(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for set in [self.dialect.as_mut(), self.task.as_mut()].into_iter().flatten() {
            for (da, db) in set.grads.values_mut() {
                *da *= factor;
                *db *= factor;
            }
        }
    }

    /// Largest absolute gradient entry, for non-finite and no-op checks.
    pub fn max_abs(&self) -> f64 {
        let mut max: f64 = 0.0;
        for set in [self.dialect.as_ref(), self.task.as_ref()].into_iter().flatten() {
            for (da, db) in set.grads.values() {
                for v in da.iter().chain(db.iter()) {
                    max = max.max(v.abs());
                }
            }
        }
        max
    }

    pub fn is_finite(&self) -> bool {
        for set in [self.dialect.as_ref(), self.task.as_ref()].into_iter().flatten() {
            for (da, db) in set.grads.values() {
                if da.iter().chain(db.iter()).any(|v| !v.is_finite()) {
                    return false;
                }
            }
        }
        true
    }
}
