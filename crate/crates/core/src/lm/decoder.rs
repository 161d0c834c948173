//! The tiny reference decoder: a pre-norm transformer with RMSNorm, causal
//! multi-head attention and a SiLU MLP, computing in f64 for reproducibility.
//!
//! Base weights are seeded once and never trained; all learning happens in
//! low-rank adapters attached to the named linear layers. The backward pass
//! therefore only accumulates gradients for adapter matrices, but still
//! propagates through every operation so adapters at the deepest layers see
//! correct signals.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::adapters::{AdapterStack, LowRankAdapter, StackGrads, StackMode};

use super::tensor_io;
use super::tokenizer::{CharTokenizer, END_ID, MASK_ID};
use super::{Backend, BackendDescriptor, ForwardPass, LinearSpec, LmError, TokenSequence};

const RMS_EPS: f64 = 1e-6;
const BASE_INIT_STD: f64 = 0.02;
const MLP_FACTOR: usize = 4;

/// Shape and seed of a reference decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TinyDecoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl Default for TinyDecoderConfig {
    fn default() -> Self {
        TinyDecoderConfig {
            layers: 2,
            hidden_dim: 32,
            heads: 4,
            vocab_size: CharTokenizer::VOCAB_SIZE,
            context_len: 256,
            seed: 13,
        }
    }
}

impl TinyDecoderConfig {
    pub fn validate(&self) -> Result<(), LmError> {
        if self.layers < 1 {
            return Err(LmError::Config("layers must be >= 1".into()));
        }
        if self.hidden_dim < 8 {
            return Err(LmError::Config("hidden_dim must be >= 8".into()));
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(LmError::Config(format!(
                "heads ({}) must divide hidden_dim ({})",
                self.heads, self.hidden_dim
            )));
        }
        if self.vocab_size < 16 {
            return Err(LmError::Config("vocab_size must be >= 16".into()));
        }
        if self.context_len < 32 {
            return Err(LmError::Config("context_len must be >= 32".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockParams {
    pub norm1_g: Array1<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub norm2_g: Array1<f64>,
    pub w_up: Array2<f64>,
    pub w_down: Array2<f64>,
}

/// Frozen base weights of the reference decoder.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub(crate) tok_emb: Array2<f64>,
    pub(crate) pos_emb: Array2<f64>,
    pub(crate) blocks: Vec<BlockParams>,
    pub(crate) final_norm_g: Array1<f64>,
    pub(crate) head_w: Array2<f64>,
}

struct NormCache {
    x: Array2<f64>,
    inv: Array1<f64>,
}

struct BlockCache {
    norm1: NormCache,
    xn1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    norm2: NormCache,
    xn2: Array2<f64>,
    up: Array2<f64>,
    act: Array2<f64>,
}

/// Activations kept by a forward pass for the matching backward pass.
pub struct ForwardCache {
    selection: ForwardSelection,
    blocks: Vec<BlockCache>,
    final_norm: NormCache,
    hidden: Array2<f64>,
}

/// Which adapters participate in a forward pass: the active stack, or the
/// pristine base with every adapter ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardSelection {
    Active,
    BaseOnly,
}

#[derive(Debug)]
pub struct TinyDecoder {
    config: TinyDecoderConfig,
    descriptor: BackendDescriptor,
    tokenizer: CharTokenizer,
    params: DecoderParams,
    stack: AdapterStack,
}

fn layer_names(layers: usize) -> Vec<(String, usize, usize)> {
    let mut names = Vec::new();
    for i in 0..layers {
        names.push((format!("blocks.{i}.attn.q"), 0, 0));
        names.push((format!("blocks.{i}.attn.k"), 0, 0));
        names.push((format!("blocks.{i}.attn.v"), 0, 0));
        names.push((format!("blocks.{i}.attn.o"), 0, 0));
        names.push((format!("blocks.{i}.mlp.up"), 0, 1));
        names.push((format!("blocks.{i}.mlp.down"), 1, 0));
    }
    names.push(("head".into(), 0, 2));
    names
}

impl TinyDecoder {
    pub fn new(config: TinyDecoderConfig) -> Result<Self, LmError> {
        config.validate()?;
        let params = DecoderParams::init(&config);
        Ok(Self::from_parts(config, params))
    }

    fn from_parts(config: TinyDecoderConfig, params: DecoderParams) -> Self {
        let h = config.hidden_dim;
        let dims = |tag: usize| match tag {
            0 => h,
            1 => MLP_FACTOR * h,
            _ => config.vocab_size,
        };
        let linear_layers = layer_names(config.layers)
            .into_iter()
            .map(|(name, in_tag, out_tag)| LinearSpec {
                name,
                in_dim: dims(in_tag),
                out_dim: dims(out_tag),
            })
            .collect();
        let descriptor = BackendDescriptor {
            vocab_size: config.vocab_size,
            hidden_dim: config.hidden_dim,
            context_len: config.context_len,
            linear_layers,
            mask_token_id: MASK_ID,
            end_token_id: END_ID,
        };
        descriptor.validate().expect("descriptor is consistent");
        TinyDecoder {
            config,
            descriptor,
            tokenizer: CharTokenizer::new(),
            params,
            stack: AdapterStack::empty(),
        }
    }

    pub fn config(&self) -> &TinyDecoderConfig {
        &self.config
    }

    pub fn stack(&self) -> &AdapterStack {
        &self.stack
    }

    pub fn stack_mut(&mut self) -> &mut AdapterStack {
        &mut self.stack
    }

    pub fn set_stack(&mut self, stack: AdapterStack) {
        self.stack = stack;
    }

    pub fn take_stack(&mut self) -> AdapterStack {
        std::mem::replace(&mut self.stack, AdapterStack::empty())
    }

    /// Flattened copy of every base weight, used by freeze-soundness checks.
    pub fn base_snapshot(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let mut push2 = |m: &Array2<f64>| out.extend(m.iter().copied());
        push2(&self.params.tok_emb);
        push2(&self.params.pos_emb);
        for b in &self.params.blocks {
            out.extend(b.norm1_g.iter().copied());
            out.extend(b.wq.iter().copied());
            out.extend(b.wk.iter().copied());
            out.extend(b.wv.iter().copied());
            out.extend(b.wo.iter().copied());
            out.extend(b.norm2_g.iter().copied());
            out.extend(b.w_up.iter().copied());
            out.extend(b.w_down.iter().copied());
        }
        out.extend(self.params.final_norm_g.iter().copied());
        out.extend(self.params.head_w.iter().copied());
        out
    }

    /// Folds every active adapter delta into the base weights and drops the
    /// stack; outputs are preserved up to the accumulated delta itself.
    pub fn merge_adapters(&mut self) {
        let stack = self.take_stack();
        let names: Vec<String> = self
            .descriptor
            .linear_layers
            .iter()
            .map(|l| l.name.clone())
            .collect();
        for name in names {
            if stack.mode() == StackMode::Sequential && stack.is_stacked_on(&name) {
                // sequential composition is y = (I + Dt)(W0 + Dd) x, so the
                // folded weight is W0 + Dd + Dt (W0 + Dd)
                let dd = stack
                    .dialect()
                    .and_then(|set| set.get(&name))
                    .map(LowRankAdapter::delta)
                    .expect("stacked layer");
                let dt = stack
                    .task()
                    .and_then(|set| set.get(&name))
                    .map(LowRankAdapter::delta)
                    .expect("stacked layer");
                let staged = self.base_weight(&name) + &dd;
                let merged_delta = dd + dt.dot(&staged);
                *self.base_weight_mut(&name) += &merged_delta;
                continue;
            }
            let mut delta: Option<Array2<f64>> = None;
            for (_, adapter) in stack.active_for(&name) {
                let d = adapter.delta();
                delta = Some(match delta {
                    Some(acc) => acc + d,
                    None => d,
                });
            }
            if let Some(delta) = delta {
                *self.base_weight_mut(&name) += &delta;
            }
        }
    }

    fn base_weight(&self, name: &str) -> Array2<f64> {
        self.base_weight_ref(name).clone()
    }

    fn base_weight_ref(&self, name: &str) -> &Array2<f64> {
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["head"] => &self.params.head_w,
            ["blocks", i, "attn", which] => {
                let b = &self.params.blocks[i.parse::<usize>().expect("block index")];
                match *which {
                    "q" => &b.wq,
                    "k" => &b.wk,
                    "v" => &b.wv,
                    "o" => &b.wo,
                    other => panic!("unknown attention projection {other}"),
                }
            }
            ["blocks", i, "mlp", which] => {
                let b = &self.params.blocks[i.parse::<usize>().expect("block index")];
                match *which {
                    "up" => &b.w_up,
                    "down" => &b.w_down,
                    other => panic!("unknown mlp projection {other}"),
                }
            }
            _ => panic!("unknown linear layer {name}"),
        }
    }

    fn base_weight_mut(&mut self, name: &str) -> &mut Array2<f64> {
        let parts: Vec<String> = name.split('.').map(str::to_string).collect();
        match parts.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
            ["head"] => &mut self.params.head_w,
            ["blocks", i, "attn", which] => {
                let b = &mut self.params.blocks[i.parse::<usize>().expect("block index")];
                match *which {
                    "q" => &mut b.wq,
                    "k" => &mut b.wk,
                    "v" => &mut b.wv,
                    "o" => &mut b.wo,
                    other => panic!("unknown attention projection {other}"),
                }
            }
            ["blocks", i, "mlp", which] => {
                let b = &mut self.params.blocks[i.parse::<usize>().expect("block index")];
                match *which {
                    "up" => &mut b.w_up,
                    "down" => &mut b.w_down,
                    other => panic!("unknown mlp projection {other}"),
                }
            }
            _ => panic!("unknown linear layer {name}"),
        }
    }

    fn check_tokens(&self, tokens: &TokenSequence) -> Result<(), LmError> {
        if tokens.is_empty() {
            return Err(LmError::EmptyInput);
        }
        if tokens.len() > self.config.context_len {
            return Err(LmError::ContextOverflow {
                len: tokens.len(),
                context_len: self.config.context_len,
            });
        }
        for &id in tokens.ids() {
            if id as usize >= self.config.vocab_size {
                return Err(LmError::TokenOutOfRange {
                    id,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    /// Forward pass with an explicit adapter selection.
    pub fn forward_selected(
        &self,
        tokens: &TokenSequence,
        selection: ForwardSelection,
    ) -> Result<ForwardPass, LmError> {
        let (pass, _) = self.forward_cached(tokens, selection)?;
        Ok(pass)
    }

    /// Mask representation with an explicit adapter selection.
    pub fn mask_representation_selected(
        &self,
        tokens: &TokenSequence,
        selection: ForwardSelection,
    ) -> Result<Array1<f64>, LmError> {
        let positions = tokens.positions_of(self.descriptor.mask_token_id);
        if positions.len() != 1 {
            return Err(LmError::MaskCount {
                count: positions.len(),
            });
        }
        let pass = self.forward_selected(tokens, selection)?;
        Ok(pass.hidden.row(positions[0]).to_owned())
    }

    /// Forward pass that keeps every activation needed by [`Self::backward`].
    pub fn forward_cached(
        &self,
        tokens: &TokenSequence,
        selection: ForwardSelection,
    ) -> Result<(ForwardPass, ForwardCache), LmError> {
        self.check_tokens(tokens)?;
        let t_len = tokens.len();
        let h = self.config.hidden_dim;
        let mut x = Array2::<f64>::zeros((t_len, h));
        for (t, &id) in tokens.ids().iter().enumerate() {
            let row = &self.params.tok_emb.row(id as usize) + &self.params.pos_emb.row(t);
            x.row_mut(t).assign(&row);
        }

        let mut blocks = Vec::with_capacity(self.config.layers);
        for (i, block) in self.params.blocks.iter().enumerate() {
            let (xn1, inv1) = rmsnorm(&x, &block.norm1_g);
            let q = self.apply_linear(&format!("blocks.{i}.attn.q"), &block.wq, &xn1, selection);
            let k = self.apply_linear(&format!("blocks.{i}.attn.k"), &block.wk, &xn1, selection);
            let v = self.apply_linear(&format!("blocks.{i}.attn.v"), &block.wv, &xn1, selection);
            let (ctx, probs) = causal_attention(&q, &k, &v, self.config.heads);
            let attn_out =
                self.apply_linear(&format!("blocks.{i}.attn.o"), &block.wo, &ctx, selection);
            let x2 = &x + &attn_out;

            let (xn2, inv2) = rmsnorm(&x2, &block.norm2_g);
            let up = self.apply_linear(&format!("blocks.{i}.mlp.up"), &block.w_up, &xn2, selection);
            let act = up.mapv(silu);
            let down =
                self.apply_linear(&format!("blocks.{i}.mlp.down"), &block.w_down, &act, selection);
            let x3 = &x2 + &down;

            blocks.push(BlockCache {
                norm1: NormCache { x: x.clone(), inv: inv1 },
                xn1,
                q,
                k,
                v,
                probs,
                ctx,
                norm2: NormCache { x: x2, inv: inv2 },
                xn2,
                up,
                act,
            });
            x = x3;
        }

        let (hidden, inv_f) = rmsnorm(&x, &self.params.final_norm_g);
        let logits = self.apply_linear("head", &self.params.head_w, &hidden, selection);
        let cache = ForwardCache {
            selection,
            blocks,
            final_norm: NormCache { x, inv: inv_f },
            hidden: hidden.clone(),
        };
        Ok((ForwardPass { logits, hidden }, cache))
    }

    /// Reverse pass. `d_logits` and `d_hidden` seed the gradient at the output
    /// head and at the final hidden states respectively; adapter gradients are
    /// accumulated into `grads` for every trainable set entry present there.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: Option<&Array2<f64>>,
        d_hidden: Option<&Array2<f64>>,
        grads: &mut StackGrads,
    ) {
        let t_len = cache.hidden.nrows();
        let h = self.config.hidden_dim;
        let mut d_hn = Array2::<f64>::zeros((t_len, h));
        if let Some(dl) = d_logits {
            d_hn += &self.linear_backward("head", &self.params.head_w, &cache.hidden, dl, cache.selection, grads);
        }
        if let Some(dh) = d_hidden {
            d_hn += dh;
        }
        let mut d_x = rmsnorm_backward(&d_hn, &cache.final_norm, &self.params.final_norm_g);

        for (i, bc) in cache.blocks.iter().enumerate().rev() {
            let block = &self.params.blocks[i];
            // x3 = x2 + down(act)
            let d_act = self.linear_backward(
                &format!("blocks.{i}.mlp.down"),
                &block.w_down,
                &bc.act,
                &d_x,
                cache.selection,
                grads,
            );
            let d_up = &d_act * &bc.up.mapv(silu_grad);
            let d_xn2 = self.linear_backward(
                &format!("blocks.{i}.mlp.up"),
                &block.w_up,
                &bc.xn2,
                &d_up,
                cache.selection,
                grads,
            );
            let d_x2 = &d_x + &rmsnorm_backward(&d_xn2, &bc.norm2, &block.norm2_g);

            // x2 = x + attn_out
            let d_ctx = self.linear_backward(
                &format!("blocks.{i}.attn.o"),
                &block.wo,
                &bc.ctx,
                &d_x2,
                cache.selection,
                grads,
            );
            let (d_q, d_k, d_v) =
                causal_attention_backward(&bc.q, &bc.k, &bc.v, &bc.probs, &d_ctx, self.config.heads);
            let mut d_xn1 = self.linear_backward(
                &format!("blocks.{i}.attn.q"),
                &block.wq,
                &bc.xn1,
                &d_q,
                cache.selection,
                grads,
            );
            d_xn1 += &self.linear_backward(
                &format!("blocks.{i}.attn.k"),
                &block.wk,
                &bc.xn1,
                &d_k,
                cache.selection,
                grads,
            );
            d_xn1 += &self.linear_backward(
                &format!("blocks.{i}.attn.v"),
                &block.wv,
                &bc.xn1,
                &d_v,
                cache.selection,
                grads,
            );
            d_x = d_x2 + rmsnorm_backward(&d_xn1, &bc.norm1, &block.norm1_g);
        }
        // the gradient below the first block has no trainable consumer
        let _ = d_x;
    }

    /// y = x W0^T plus each active adapter's contribution.
    fn apply_linear(
        &self,
        name: &str,
        w0: &Array2<f64>,
        x: &Array2<f64>,
        selection: ForwardSelection,
    ) -> Array2<f64> {
        let mut y = x.dot(&w0.t());
        if selection == ForwardSelection::BaseOnly {
            return y;
        }
        if self.stack.mode() == StackMode::Sequential && self.stack.is_stacked_on(name) {
            let dialect = self.stack.dialect().and_then(|s| s.get(name)).expect("stacked");
            let task = self.stack.task().and_then(|s| s.get(name)).expect("stacked");
            y += &dialect.apply(x);
            let staged = y.clone();
            y += &task.apply(&staged);
            return y;
        }
        for (_, adapter) in self.stack.active_for(name) {
            y += &adapter.apply(x);
        }
        y
    }

    /// dx for a linear layer, accumulating adapter gradients along the way.
    fn linear_backward(
        &self,
        name: &str,
        w0: &Array2<f64>,
        x: &Array2<f64>,
        g: &Array2<f64>,
        selection: ForwardSelection,
        grads: &mut StackGrads,
    ) -> Array2<f64> {
        if selection == ForwardSelection::BaseOnly {
            return g.dot(w0);
        }
        if self.stack.mode() == StackMode::Sequential && self.stack.is_stacked_on(name) {
            let dialect = self.stack.dialect().and_then(|s| s.get(name)).expect("stacked");
            let task = self.stack.task().and_then(|s| s.get(name)).expect("stacked");
            // recompute the staged intermediate h = x W0^T + dialect(x)
            let staged = x.dot(&w0.t()) + dialect.apply(x);
            let mut d_staged = g.clone();
            d_staged += &task.backward_input(g);
            if let Some((da, db)) = grads.entry(crate::adapters::AdapterKind::Task, name) {
                task.accumulate_grads(&staged, g, da, db);
            }
            let mut dx = d_staged.dot(w0);
            dx += &dialect.backward_input(&d_staged);
            if let Some((da, db)) = grads.entry(crate::adapters::AdapterKind::Dialect, name) {
                dialect.accumulate_grads(x, &d_staged, da, db);
            }
            return dx;
        }
        let mut dx = g.dot(w0);
        for (kind, adapter) in self.stack.active_for(name) {
            dx += &adapter.backward_input(g);
            if let Some((da, db)) = grads.entry(kind, name) {
                adapter.accumulate_grads(x, g, da, db);
            }
        }
        dx
    }

    /// Persists config and every base tensor under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), LmError> {
        std::fs::create_dir_all(dir).map_err(|e| LmError::TensorIo {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?;
        let manifest = format!(
            "format = lordd-decoder-v1\nlayers = {}\nhidden_dim = {}\nheads = {}\nvocab_size = {}\ncontext_len = {}\nseed = {}\n",
            self.config.layers,
            self.config.hidden_dim,
            self.config.heads,
            self.config.vocab_size,
            self.config.context_len,
            self.config.seed,
        );
        std::fs::write(dir.join("manifest.txt"), manifest).map_err(|e| LmError::TensorIo {
            path: dir.join("manifest.txt"),
            message: e.to_string(),
        })?;
        let write_m = |name: &str, m: &Array2<f64>| {
            tensor_io::write_matrix(&dir.join(format!("{name}.bin")), m.view())
        };
        write_m("tok_emb", &self.params.tok_emb)?;
        write_m("pos_emb", &self.params.pos_emb)?;
        for (i, b) in self.params.blocks.iter().enumerate() {
            tensor_io::write_vector(&dir.join(format!("blocks.{i}.norm1.g.bin")), b.norm1_g.view())?;
            tensor_io::write_matrix(&dir.join(format!("blocks.{i}.attn.q.w.bin")), b.wq.view())?;
            tensor_io::write_matrix(&dir.join(format!("blocks.{i}.attn.k.w.bin")), b.wk.view())?;
            tensor_io::write_matrix(&dir.join(format!("blocks.{i}.attn.v.w.bin")), b.wv.view())?;
            tensor_io::write_matrix(&dir.join(format!("blocks.{i}.attn.o.w.bin")), b.wo.view())?;
            tensor_io::write_vector(&dir.join(format!("blocks.{i}.norm2.g.bin")), b.norm2_g.view())?;
            tensor_io::write_matrix(&dir.join(format!("blocks.{i}.mlp.up.w.bin")), b.w_up.view())?;
            tensor_io::write_matrix(&dir.join(format!("blocks.{i}.mlp.down.w.bin")), b.w_down.view())?;
        }
        tensor_io::write_vector(&dir.join("final_norm.g.bin"), self.params.final_norm_g.view())?;
        tensor_io::write_matrix(&dir.join("head.w.bin"), self.params.head_w.view())
    }

    /// Restores a decoder persisted with [`Self::save`]. Adapters are not part
    /// of decoder weight directories; the stack starts empty.
    pub fn load(dir: &Path) -> Result<Self, LmError> {
        let manifest_path = dir.join("manifest.txt");
        let body = std::fs::read_to_string(&manifest_path).map_err(|e| LmError::TensorIo {
            path: manifest_path.clone(),
            message: e.to_string(),
        })?;
        let fields: BTreeMap<String, String> = body
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        let get = |key: &str| {
            fields
                .get(key)
                .ok_or_else(|| LmError::Manifest(format!("missing field {key}")))
        };
        if get("format")? != "lordd-decoder-v1" {
            return Err(LmError::Manifest(format!(
                "unsupported format {:?}",
                fields.get("format")
            )));
        }
        let parse = |key: &str| -> Result<usize, LmError> {
            get(key)?
                .parse::<usize>()
                .map_err(|e| LmError::Manifest(format!("field {key}: {e}")))
        };
        let config = TinyDecoderConfig {
            layers: parse("layers")?,
            hidden_dim: parse("hidden_dim")?,
            heads: parse("heads")?,
            vocab_size: parse("vocab_size")?,
            context_len: parse("context_len")?,
            seed: get("seed")?
                .parse::<u64>()
                .map_err(|e| LmError::Manifest(format!("field seed: {e}")))?,
        };
        config.validate()?;
        let read_m = |name: &str| tensor_io::read_matrix(&dir.join(format!("{name}.bin")));
        let read_v = |name: &str| tensor_io::read_vector(&dir.join(format!("{name}.bin")));
        let mut blocks = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            blocks.push(BlockParams {
                norm1_g: read_v(&format!("blocks.{i}.norm1.g"))?,
                wq: read_m(&format!("blocks.{i}.attn.q.w"))?,
                wk: read_m(&format!("blocks.{i}.attn.k.w"))?,
                wv: read_m(&format!("blocks.{i}.attn.v.w"))?,
                wo: read_m(&format!("blocks.{i}.attn.o.w"))?,
                norm2_g: read_v(&format!("blocks.{i}.norm2.g"))?,
                w_up: read_m(&format!("blocks.{i}.mlp.up.w"))?,
                w_down: read_m(&format!("blocks.{i}.mlp.down.w"))?,
            });
        }
        let params = DecoderParams {
            tok_emb: read_m("tok_emb")?,
            pos_emb: read_m("pos_emb")?,
            blocks,
            final_norm_g: read_v("final_norm.g")?,
            head_w: read_m("head.w")?,
        };
        params.check_dims(&config)?;
        Ok(Self::from_parts(config, params))
    }
}

impl Backend for TinyDecoder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.descriptor
    }

    fn tokenize(&self, text: &str) -> Result<TokenSequence, LmError> {
        self.tokenizer.tokenize(text)
    }

    fn detokenize(&self, tokens: &TokenSequence) -> String {
        self.tokenizer.detokenize(tokens)
    }

    fn forward(&self, tokens: &TokenSequence) -> Result<ForwardPass, LmError> {
        self.forward_selected(tokens, ForwardSelection::Active)
    }
}

impl DecoderParams {
    fn init(config: &TinyDecoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, BASE_INIT_STD).expect("valid std");
        let mut matrix = |rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| normal.sample(&mut rng))
        };
        let v = config.vocab_size;
        let h = config.hidden_dim;
        let tok_emb = matrix(v, h);
        let pos_emb = matrix(config.context_len, h);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(BlockParams {
                norm1_g: Array1::ones(h),
                wq: matrix(h, h),
                wk: matrix(h, h),
                wv: matrix(h, h),
                wo: matrix(h, h),
                norm2_g: Array1::ones(h),
                w_up: matrix(MLP_FACTOR * h, h),
                w_down: matrix(h, MLP_FACTOR * h),
            });
        }
        let final_norm_g = Array1::ones(h);
        let head_w = matrix(v, h);
        DecoderParams {
            tok_emb,
            pos_emb,
            blocks,
            final_norm_g,
            head_w,
        }
    }

    fn check_dims(&self, config: &TinyDecoderConfig) -> Result<(), LmError> {
        let h = config.hidden_dim;
        let expect = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(LmError::Manifest(format!("tensor {what} has wrong shape")))
            }
        };
        expect(self.tok_emb.dim() == (config.vocab_size, h), "tok_emb")?;
        expect(self.pos_emb.dim() == (config.context_len, h), "pos_emb")?;
        expect(self.blocks.len() == config.layers, "blocks")?;
        for (i, b) in self.blocks.iter().enumerate() {
            expect(b.norm1_g.len() == h, &format!("blocks.{i}.norm1.g"))?;
            expect(b.wq.dim() == (h, h), &format!("blocks.{i}.attn.q.w"))?;
            expect(b.wk.dim() == (h, h), &format!("blocks.{i}.attn.k.w"))?;
            expect(b.wv.dim() == (h, h), &format!("blocks.{i}.attn.v.w"))?;
            expect(b.wo.dim() == (h, h), &format!("blocks.{i}.attn.o.w"))?;
            expect(b.norm2_g.len() == h, &format!("blocks.{i}.norm2.g"))?;
            expect(b.w_up.dim() == (MLP_FACTOR * h, h), &format!("blocks.{i}.mlp.up.w"))?;
            expect(b.w_down.dim() == (h, MLP_FACTOR * h), &format!("blocks.{i}.mlp.down.w"))?;
        }
        expect(self.final_norm_g.len() == h, "final_norm.g")?;
        expect(self.head_w.dim() == (config.vocab_size, h), "head.w")
    }
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn rmsnorm(x: &Array2<f64>, g: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let h = x.ncols() as f64;
    let mut y = Array2::zeros(x.dim());
    let mut inv = Array1::zeros(x.nrows());
    for (t, row) in x.rows().into_iter().enumerate() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / h;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        inv[t] = r;
        let scaled = row.iter().zip(g.iter()).map(|(&v, &gi)| v * r * gi);
        for (j, val) in scaled.enumerate() {
            y[[t, j]] = val;
        }
    }
    (y, inv)
}

fn rmsnorm_backward(dy: &Array2<f64>, cache: &NormCache, g: &Array1<f64>) -> Array2<f64> {
    let h = cache.x.ncols() as f64;
    let mut dx = Array2::zeros(cache.x.dim());
    for t in 0..cache.x.nrows() {
        let r = cache.inv[t];
        let row_x = cache.x.row(t);
        let row_dy = dy.row(t);
        let dot: f64 = row_dy
            .iter()
            .zip(g.iter())
            .zip(row_x.iter())
            .map(|((&d, &gi), &xi)| d * gi * xi)
            .sum();
        for j in 0..cache.x.ncols() {
            dx[[t, j]] = r * g[j] * row_dy[j] - row_x[j] * r.powi(3) * dot / h;
        }
    }
    dx
}

/// Multi-head causal attention; returns concatenated head outputs plus the
/// per-head attention probabilities for the backward pass.
fn causal_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    heads: usize,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let t_len = q.nrows();
    let h = q.ncols();
    let hd = h / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outputs = Vec::with_capacity(heads);
    let mut probs_all = Vec::with_capacity(heads);
    for head in 0..heads {
        let cols = s![.., head * hd..(head + 1) * hd];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let mut scores = qh.dot(&kh.t());
        scores *= scale;
        let mut probs = Array2::<f64>::zeros((t_len, t_len));
        for i in 0..t_len {
            let visible = scores.slice(s![i, ..=i]);
            let max = visible.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = visible.iter().map(|&s| (s - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for (j, e) in exps.into_iter().enumerate() {
                probs[[i, j]] = e / denom;
            }
        }
        outputs.push(probs.dot(&vh));
        probs_all.push(probs);
    }
    let views: Vec<_> = outputs.iter().map(|o| o.view()).collect();
    let ctx = concatenate(Axis(1), &views).expect("head outputs align");
    (ctx, probs_all)
}

fn causal_attention_backward(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    probs: &[Array2<f64>],
    d_ctx: &Array2<f64>,
    heads: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let h = q.ncols();
    let hd = h / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut d_q = Array2::<f64>::zeros(q.dim());
    let mut d_k = Array2::<f64>::zeros(k.dim());
    let mut d_v = Array2::<f64>::zeros(v.dim());
    for (head, p) in probs.iter().enumerate() {
        let cols = s![.., head * hd..(head + 1) * hd];
        let qh = q.slice(cols);
        let kh = k.slice(cols);
        let vh = v.slice(cols);
        let d_ctx_h = d_ctx.slice(cols);

        let d_p = d_ctx_h.dot(&vh.t());
        let d_vh = p.t().dot(&d_ctx_h);
        // softmax backward, row-wise: dS = P o (dP - sum(dP o P))
        let mut d_s = Array2::<f64>::zeros(p.dim());
        for i in 0..p.nrows() {
            let dot: f64 = d_p.row(i).iter().zip(p.row(i).iter()).map(|(a, b)| a * b).sum();
            for j in 0..p.ncols() {
                d_s[[i, j]] = p[[i, j]] * (d_p[[i, j]] - dot);
            }
        }
        d_s *= scale;
        let d_qh = d_s.dot(&kh);
        let d_kh = d_s.t().dot(&qh);
        d_q.slice_mut(cols).assign(&d_qh);
        d_k.slice_mut(cols).assign(&d_kh);
        d_v.slice_mut(cols).assign(&d_vh);
    }
    (d_q, d_k, d_v)
}
