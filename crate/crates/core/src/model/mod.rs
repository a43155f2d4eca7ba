//! Toy vision-language backbone with one state space memory per layer.
//!
//! Each block computes, for hidden rows `H` and the shared visual code `V`:
//!
//! ```text
//! A1  = H  + MHSA(H)
//! A2  = A1 + SSM(condition(A1, V))
//! out = A2 + W2 · gelu(W1 · A2 + b1) + b2
//! ```
//!
//! Rows are positions, so every projection is applied as `X · W`. The SSM
//! tensors of every layer form the trainable group; the rest of the
//! backbone and the vision stub are frozen unless the freeze mode is
//! [`FreezeMode::Full`].
//!
//! Backbone initialisation (all Gaussian, zero mean): embeddings and
//! attention projections std `1/√d`, `W1` std `1/√d`, `W2` std `1/√(4d)`,
//! biases std 0.02, decoder std `1/√d`. The vision stub is a random partial
//! isometry (orthonormal rows, or orthonormal columns when `d_v > d_raw`).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::linalg;
use crate::rng::SplitMix64;
use crate::ssm::{self, SsmParams};


#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisualMode {
    /// `h'_t = h_t + W_v V` at every position.
    #[default]
    Additive,
    /// `W_v V` is scanned as an extra leading row whose output is dropped.
    Prefix,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Drops the state path: the module output is `D h'_t` only.
    NoStateDynamics,
    /// Drops the `W_v V` conditioning.
    NoVisual,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::None, Ablation::NoStateDynamics, Ablation::NoVisual];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoStateDynamics => "no_state_dynamics",
            Ablation::NoVisual => "no_visual",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezeMode {
    PretrainSsm,
    FinetuneSsm,
    Full,
    Frozen,
}

impl FreezeMode {
    pub fn name(self) -> &'static str {
        match self {
            FreezeMode::PretrainSsm => "pretrain_ssm",
            FreezeMode::FinetuneSsm => "finetune_ssm",
            FreezeMode::Full => "full",
            FreezeMode::Frozen => "frozen",
        }
    }

    fn trains(self, group: ParamGroup) -> bool {
        match self {
            FreezeMode::PretrainSsm | FreezeMode::FinetuneSsm => group == ParamGroup::Memory,
            FreezeMode::Full => true,
            FreezeMode::Frozen => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Memory,
    Vision,
}

fn default_ssm_scale() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LvlmConfig {
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub state_size: usize,
    pub vocab: usize,
    pub d_visual: usize,
    pub d_raw: usize,
    pub max_len: usize,
    #[serde(default)]
    pub visual_mode: VisualMode,
    #[serde(default)]
    pub ablation: Ablation,
    /// Spectral radius of the orthogonal-times-scale initial `A`.
    #[serde(default = "default_ssm_scale")]
    pub ssm_init_scale: f64,
}

impl LvlmConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("state_size", self.state_size),
            ("vocab", self.vocab),
            ("d_visual", self.d_visual),
            ("d_raw", self.d_raw),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.ssm_init_scale > 0.0 && self.ssm_init_scale < ssm::STABILITY_LIMIT) {
            return Err(Error::Config(format!("ssm_init_scale {} must lie in (0, 0.999)", self.ssm_init_scale)));
        }
        Ok(())
    }

    /// Lowercase hex SHA-256 of the compact JSON serialisation.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Names of fields whose values differ, for compatibility errors.
    pub fn diff(&self, other: &LvlmConfig) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serialises");
        let b = serde_json::to_value(other).expect("config serialises");
        let (a, b) = (a.as_object().expect("object"), b.as_object().expect("object"));
        a.keys().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
    }
}

/// Frozen attention and feed-forward weights of one block, plus its memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ssm: SsmParams,
}

const LAYER_TENSORS: usize = 13;
const LAYER_NAMES: [&str; LAYER_TENSORS] = [
    "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2", "ssm.A", "ssm.B", "ssm.C",
    "ssm.D", "ssm.W_v",
];

impl Layer {
    fn tensors(&self) -> [&Tensor; LAYER_TENSORS] {
        let s = &self.ssm;
        [
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2, &s.a, &s.b, &s.c, &s.d,
            &s.w_v,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; LAYER_TENSORS] {
        let s = &mut self.ssm;
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut s.a,
            &mut s.b,
            &mut s.c,
            &mut s.d,
            &mut s.w_v,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LvlmModel {
    config: LvlmConfig,
    pub token_embedding: Tensor,
    pub positional_embedding: Tensor,
    pub layers: Vec<Layer>,
    pub decoder_head: Tensor,
    pub vision_stub: Tensor,
    freeze_mode: FreezeMode,
}

/// Tape handles for every model tensor, in [`LvlmModel::named_tensors`] order.
#[derive(Debug, Clone)]
pub struct ModelVars {
    all: Vec<Var>,
}

impl ModelVars {
    pub fn vars(&self) -> &[Var] {
        &self.all
    }

    pub fn token_embedding(&self) -> Var {
        self.all[0]
    }

    fn positional_embedding(&self) -> Var {
        self.all[1]
    }

    fn layer(&self, l: usize) -> &[Var] {
        &self.all[2 + l * LAYER_TENSORS..2 + (l + 1) * LAYER_TENSORS]
    }

    fn decoder_head(&self) -> Var {
        self.all[self.all.len() - 2]
    }

    fn vision_stub(&self) -> Var {
        self.all[self.all.len() - 1]
    }
}

/// Outputs of one recorded forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Trace {
    /// `[T×vocab]` pre-softmax scores.
    pub logits: Var,
    /// `[T×d]` output of the last layer's memory module, before its residual.
    pub memory: Var,
    /// `[d_v]` visual code.
    pub visual: Var,
}

impl LvlmModel {
    /// Seeded init. The model starts in [`FreezeMode::FinetuneSsm`].
    pub fn new(config: LvlmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let inv = |w: usize| 1.0 / (w as f64).sqrt();
        let rng = |stream: u64| SplitMix64::derive(seed, stream);
        let token_embedding = Tensor::randn(&[config.vocab, d], inv(d), &mut rng(10));
        let positional_embedding = Tensor::randn(&[config.max_len, d], inv(d), &mut rng(11));
        let decoder_head = Tensor::randn(&[d, config.vocab], inv(d), &mut rng(12));
        let vision_stub = linalg::random_isometry(config.d_visual, config.d_raw, &mut rng(13));
        let layers = (0..config.layers)
            .map(|l| {
                let mut r = rng(100 + l as u64);
                Ok(Layer {
                    wq: Tensor::randn(&[d, d], inv(d), &mut r),
                    wk: Tensor::randn(&[d, d], inv(d), &mut r),
                    wv: Tensor::randn(&[d, d], inv(d), &mut r),
                    wo: Tensor::randn(&[d, d], inv(d), &mut r),
                    w1: Tensor::randn(&[d, 4 * d], inv(d), &mut r),
                    b1: Tensor::randn(&[4 * d], 0.02, &mut r),
                    w2: Tensor::randn(&[4 * d, d], inv(4 * d), &mut r),
                    b2: Tensor::randn(&[d], 0.02, &mut r),
                    ssm: ssm::init_stable(
                        SplitMix64::derive(seed, 200 + l as u64).next_u64(),
                        config.state_size,
                        d,
                        config.d_visual,
                        config.ssm_init_scale,
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut model = Self {
            config,
            token_embedding,
            positional_embedding,
            layers,
            decoder_head,
            vision_stub,
            freeze_mode: FreezeMode::FinetuneSsm,
        };
        model.set_freeze_mode(FreezeMode::FinetuneSsm);
        Ok(model)
    }

    /// Rebuilds a model from named tensors, checking every name and shape
    /// against the layout `config` implies.
    pub fn from_named(config: LvlmConfig, tensors: Vec<(String, Tensor)>, mode: FreezeMode) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            model.named_tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != tensors.len() {
            return Err(Error::Format {
                check: format!("tensor count {} (expected {})", tensors.len(), expected.len()),
                offset: 0,
            });
        }
        for ((want, shape), (name, t)) in expected.iter().zip(&tensors) {
            if want != name || shape.as_slice() != t.shape() {
                return Err(Error::Format {
                    check: format!("tensor {name} {:?} (expected {want} {shape:?})", t.shape()),
                    offset: 0,
                });
            }
        }
        for (slot, (_, t)) in model.tensors_mut().into_iter().zip(tensors) {
            *slot = t;
        }
        model.set_freeze_mode(mode);
        Ok(model)
    }

    pub fn config(&self) -> &LvlmConfig {
        &self.config
    }

    /// Changes the ablation switch. Weights are untouched.
    pub fn set_ablation(&mut self, ablation: Ablation) {
        self.config.ablation = ablation;
    }

    pub fn freeze_mode(&self) -> FreezeMode {
        self.freeze_mode
    }

    pub fn set_freeze_mode(&mut self, mode: FreezeMode) {
        self.freeze_mode = mode;
        let groups = self.groups();
        for (t, g) in self.tensors_mut().into_iter().zip(groups) {
            t.requires_grad = mode.trains(g);
            t.zero_grad();
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("positional_embedding".to_string(), &self.positional_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("decoder_head".to_string(), &self.decoder_head));
        out.push(("vision_stub".to_string(), &self.vision_stub));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.positional_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.decoder_head);
        out.push(&mut self.vision_stub);
        out
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        let mut out = vec![ParamGroup::Backbone; 2];
        for _ in 0..self.config.layers {
            out.extend(std::iter::repeat_n(ParamGroup::Backbone, 8));
            out.extend(std::iter::repeat_n(ParamGroup::Memory, 5));
        }
        out.push(ParamGroup::Backbone);
        out.push(ParamGroup::Vision);
        out
    }

    /// Per-tensor trainability, in [`Self::named_tensors`] order.
    pub fn freeze_mask(&self) -> Vec<(String, bool)> {
        self.named_tensors().into_iter().map(|(n, t)| (n, t.requires_grad)).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.named_tensors().iter().filter(|(_, t)| t.requires_grad).map(|(_, t)| t.numel()).sum()
    }

    pub fn trainable_ratio(&self) -> f64 {
        self.trainable_count() as f64 / self.param_count() as f64
    }

    /// Rescales any layer's `A` whose spectral radius estimate reached the
    /// stability limit. Returns `(layer, estimate)` for each rescale.
    pub fn enforce_stability(&mut self) -> Vec<(usize, f64)> {
        self.layers
            .iter_mut()
            .enumerate()
            .filter_map(|(l, layer)| ssm::enforce_stability(&mut layer.ssm).map(|rho| (l, rho)))
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            all: self.named_tensors().into_iter().map(|(_, t)| tape.leaf(t)).collect(),
        }
    }

    /// Adds gradients from `grads` into every trainable tensor. Trainable
    /// tensors the loss does not reach receive zeros.
    pub fn accumulate(&mut self, vars: &ModelVars, grads: &Gradients) -> Result<()> {
        for (t, &v) in self.tensors_mut().into_iter().zip(vars.vars()) {
            if !t.requires_grad {
                continue;
            }
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; t.numel()];
                    t.accumulate_grad(&zeros)?
                }
            }
        }
        Ok(())
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::contract("token sequence is empty"));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::contract(format!(
                "sequence length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab) {
            return Err(Error::Index { what: "vocabulary", index: bad, bound: self.config.vocab });
        }
        Ok(())
    }

    fn check_hidden(&self, h: &Tensor) -> Result<()> {
        if h.shape().len() != 2 || h.cols() != self.config.d_model {
            return Err(Error::dim("hidden", h.shape(), &[h.rows(), self.config.d_model]));
        }
        if h.rows() > self.config.max_len {
            return Err(Error::contract(format!("sequence length {} exceeds max_len {}", h.rows(), self.config.max_len)));
        }
        Ok(())
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.config.layers {
            return Err(Error::Index { what: "layer", index: layer, bound: self.config.layers });
        }
        Ok(())
    }

    /// `[d_v]` vision stub output. Recorded on the tape so full mode can
    /// train the stub.
    fn trace_vision(&self, tape: &mut Tape, vars: &ModelVars, raw: Var) -> Result<Var> {
        let n = tape.shape(raw).iter().product::<usize>();
        if n != self.config.d_raw || tape.shape(raw).len() != 1 {
            return Err(Error::dim("vision_encode", tape.shape(raw), &[self.config.d_raw]));
        }
        let col = tape.reshape(raw, &[n, 1])?;
        let v = tape.matmul(vars.vision_stub(), col)?;
        tape.reshape(v, &[self.config.d_visual])
    }

    fn trace_mhsa(&self, tape: &mut Tape, lv: &[Var], h: Var) -> Result<Var> {
        let (d, heads) = (self.config.d_model, self.config.n_heads);
        let dh = d / heads;
        let q = tape.matmul(h, lv[0])?;
        let k = tape.matmul(h, lv[1])?;
        let v = tape.matmul(h, lv[2])?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qh = tape.slice_cols(q, i * dh, dh)?;
            let kh = tape.slice_cols(k, i * dh, dh)?;
            let vh = tape.slice_cols(v, i * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let p = tape.causal_softmax(scores)?;
            outs.push(tape.matmul(p, vh)?);
        }
        let cat = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let o = tape.matmul(cat, lv[3])?;
        tape.add(h, o)
    }

    /// Memory module output `Y` (before the residual) for input rows `a1`.
    fn trace_memory(&self, tape: &mut Tape, lv: &[Var], a1: Var, visual: Var) -> Result<Var> {
        let (a, b, c, dd, w_v) = (lv[8], lv[9], lv[10], lv[11], lv[12]);
        let ablation = self.config.ablation;
        let use_visual = ablation != Ablation::NoVisual;
        let prefix = use_visual && self.config.visual_mode == VisualMode::Prefix;
        let input = if use_visual {
            let col = tape.reshape(visual, &[self.config.d_visual, 1])?;
            let bias = tape.matmul(w_v, col)?;
            match self.config.visual_mode {
                VisualMode::Additive => {
                    let bias = tape.reshape(bias, &[self.config.d_model])?;
                    tape.add(a1, bias)?
                }
                VisualMode::Prefix => {
                    let row = tape.reshape(bias, &[1, self.config.d_model])?;
                    tape.concat_rows(&[row, a1])?
                }
            }
        } else {
            a1
        };
        let y = if ablation == Ablation::NoStateDynamics {
            let dt = tape.transpose(dd)?;
            tape.matmul(input, dt)?
        } else {
            tape.ssm_scan(a, b, c, dd, input)?
        };
        if prefix {
            let t = tape.shape(y)[0];
            tape.slice_rows(y, 1, t - 1)
        } else {
            Ok(y)
        }
    }

    fn trace_ffn(&self, tape: &mut Tape, lv: &[Var], a2: Var) -> Result<Var> {
        let z = tape.matmul(a2, lv[4])?;
        let z = tape.add(z, lv[5])?;
        let g = tape.gelu(z)?;
        let f = tape.matmul(g, lv[6])?;
        let f = tape.add(f, lv[7])?;
        tape.add(a2, f)
    }

    /// Returns the block output and the memory output.
    fn trace_block(&self, tape: &mut Tape, lv: &[Var], h: Var, visual: Var, memory: bool) -> Result<(Var, Option<Var>)> {
        let a1 = self.trace_mhsa(tape, lv, h)?;
        let (a2, y) = if memory {
            let y = self.trace_memory(tape, lv, a1, visual)?;
            (tape.add(a1, y)?, Some(y))
        } else {
            (a1, None)
        };
        Ok((self.trace_ffn(tape, lv, a2)?, y))
    }

    fn trace_impl(&self, tape: &mut Tape, vars: &ModelVars, tokens: &[usize], raw: &Tensor, memory: bool) -> Result<(Var, Option<Var>, Var)> {
        self.check_tokens(tokens)?;
        let raw = tape.constant(raw);
        let visual = self.trace_vision(tape, vars, raw)?;
        let e = tape.gather_rows(vars.token_embedding(), tokens)?;
        let p = tape.slice_rows(vars.positional_embedding(), 0, tokens.len())?;
        let mut h = tape.add(e, p)?;
        let mut last = None;
        for l in 0..self.config.layers {
            let (out, y) = self.trace_block(tape, vars.layer(l), h, visual, memory)?;
            h = out;
            last = y;
        }
        let logits = tape.matmul(h, vars.decoder_head())?;
        Ok((logits, last, visual))
    }

    /// Records a full forward pass for `tokens` on `tape`.
    pub fn trace(&self, tape: &mut Tape, vars: &ModelVars, tokens: &[usize], raw: &Tensor) -> Result<Trace> {
        let (logits, memory, visual) = self.trace_impl(tape, vars, tokens, raw, true)?;
        Ok(Trace { logits, memory: memory.expect("at least one layer"), visual })
    }

    pub fn vision_encode(&self, raw: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let raw = tape.constant(raw);
        let v = self.trace_vision(&mut tape, &vars, raw)?;
        Ok(tape.value(v))
    }

    /// `H + MHSA(H)` for one layer.
    pub fn mhsa_forward(&self, layer: usize, h: &Tensor) -> Result<Tensor> {
        self.check_layer(layer)?;
        self.check_hidden(h)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let hv = tape.constant(h);
        let out = self.trace_mhsa(&mut tape, vars.layer(layer), hv)?;
        Ok(tape.value(out))
    }

    /// `H + FFN(H)` for one layer.
    pub fn ffn_forward(&self, layer: usize, h: &Tensor) -> Result<Tensor> {
        self.check_layer(layer)?;
        self.check_hidden(h)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let hv = tape.constant(h);
        let out = self.trace_ffn(&mut tape, vars.layer(layer), hv)?;
        Ok(tape.value(out))
    }

    /// One full block: attention, memory, feed-forward, each with residual.
    pub fn block_forward(&self, layer: usize, h: &Tensor, visual: &Tensor) -> Result<Tensor> {
        self.check_layer(layer)?;
        self.check_hidden(h)?;
        if visual.numel() != self.config.d_visual || visual.shape().len() != 1 {
            return Err(Error::dim("block_forward", visual.shape(), &[self.config.d_visual]));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let hv = tape.constant(h);
        let vv = tape.constant(visual);
        let (out, _) = self.trace_block(&mut tape, vars.layer(layer), hv, vv, true)?;
        Ok(tape.value(out))
    }

    /// Per-position next-token probabilities `[T×vocab]`.
    pub fn forward(&self, tokens: &[usize], raw: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let tr = self.trace(&mut tape, &vars, tokens, raw)?;
        let p = tape.softmax(tr.logits)?;
        Ok(tape.value(p))
    }

    /// The same network with every memory module removed.
    pub fn forward_without_memory(&self, tokens: &[usize], raw: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let (logits, _, _) = self.trace_impl(&mut tape, &vars, tokens, raw, false)?;
        let p = tape.softmax(logits)?;
        Ok(tape.value(p))
    }

    /// Last layer's memory output `[T×d]`.
    pub fn memory_output(&self, tokens: &[usize], raw: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let tr = self.trace(&mut tape, &vars, tokens, raw)?;
        Ok(tape.value(tr.memory))
    }

    /// Argmax of each output row, lowest index on ties.
    pub fn predict(&self, tokens: &[usize], raw: &Tensor) -> Result<Vec<usize>> {
        let p = self.forward(tokens, raw)?;
        Ok((0..p.rows()).map(|r| argmax(p.row(r))).collect())
    }

    /// Greedy continuation of `prompt` by `steps` tokens, returning only the
    /// generated tokens.
    pub fn greedy_decode(&self, prompt: &[usize], raw: &Tensor, steps: usize) -> Result<Vec<usize>> {
        if prompt.len() + steps > self.config.max_len + 1 {
            return Err(Error::contract(format!(
                "prompt of {} plus {steps} steps exceeds max_len {}",
                prompt.len(),
                self.config.max_len
            )));
        }
        let mut seq = prompt.to_vec();
        for _ in 0..steps {
            let p = self.forward(&seq, raw)?;
            seq.push(argmax(p.row(p.rows() - 1)));
        }
        Ok(seq.split_off(prompt.len()))
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}
