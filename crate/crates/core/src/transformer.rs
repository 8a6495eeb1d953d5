//! Small pre-layer-norm encoder–decoder transformer whose second FFN
//! projection (the one after the ReLU) can be HyperGrid gated, or whose
//! ReLU output can be OutGate gated.
//!
//! Gates in layer `i` are conditioned on the first row of that layer's
//! input. In encoder layer 0 this is the embedded task prefix token alone,
//! so the first layer's gate cannot see any other token.
//!
//! The gated HyperGrid matrix is the post-ReLU projection
//! `W₂[d_ff×d_model]`: grid rows partition its `d_ff` fan-in and grid
//! columns its `d_model` fan-out. Hypernetwork maps read `d_model`-wide
//! conditioning vectors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypergrid::{param_cost, HyperGridLayer, ProjectionDims, Variant};
use crate::outgate::{OutGateLayer, OutGateMode};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tasks::{vocab, Example};
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateKind {
    None,
    HyperGrid {
        variant: Variant,
        d_r: usize,
        d_c: usize,
        /// Gate width of variant `L`; `None` means the full fan-out.
        n: Option<usize>,
    },
    OutGate(OutGateMode),
}

impl GateKind {
    pub fn label(&self) -> String {
        match self {
            GateKind::None => "None".into(),
            GateKind::HyperGrid { variant, .. } => variant.to_string(),
            GateKind::OutGate(mode) => mode.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    pub kind: GateKind,
    pub encoder: bool,
    pub decoder: bool,
}

impl GateConfig {
    pub fn none() -> Self {
        Self::both(GateKind::None)
    }

    pub fn both(kind: GateKind) -> Self {
        Self {
            kind,
            encoder: true,
            decoder: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub max_len: usize,
    pub gate: GateConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk(GateConfig::none())
    }
}

impl ModelConfig {
    /// The default desk-scale geometry.
    pub fn desk(gate: GateConfig) -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            d_ff: 256,
            heads: 2,
            layers_enc: 2,
            layers_dec: 2,
            max_len: 32,
            gate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("model.vocab_size", self.vocab_size),
            ("model.d_model", self.d_model),
            ("model.d_ff", self.d_ff),
            ("model.heads", self.heads),
            ("model.max_len", self.max_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(
                "model.heads",
                format!("{} does not divide d_model = {}", self.heads, self.d_model),
            ));
        }
        if self.d_ff < self.d_model {
            return Err(Error::config(
                "model.d_ff",
                format!("{} must be at least d_model = {}", self.d_ff, self.d_model),
            ));
        }
        if self.vocab_size < vocab::DIGIT_BASE + 2 {
            return Err(Error::config(
                "model.vocab_size",
                format!("must be at least {}", vocab::DIGIT_BASE + 2),
            ));
        }
        match self.gate.kind {
            GateKind::None => {}
            GateKind::HyperGrid { d_r, d_c, n, .. } => {
                let check = |field: &str, part: usize, whole: usize, what: &str| {
                    if part == 0 || part > whole || whole % part != 0 {
                        Err(Error::config(
                            field,
                            format!("{part} must divide the gated matrix {what} = {whole}"),
                        ))
                    } else {
                        Ok(())
                    }
                };
                check("gate.d_r", d_r, self.d_ff, "fan-in (d_ff)")?;
                check("gate.d_c", d_c, self.d_model, "fan-out (d_model)")?;
                if let Some(n) = n {
                    check("gate.n", n, self.d_model, "fan-out (d_model)")?;
                }
            }
            GateKind::OutGate(mode) => {
                let n = mode.gate_width(self.d_ff);
                if n == 0 || self.d_ff % n != 0 {
                    return Err(Error::config("gate.n", format!("{n} must divide d_ff = {}", self.d_ff)));
                }
            }
        }
        Ok(())
    }

    /// Geometry of the HyperGrid-gated `W₂`, if HyperGrid gating is on.
    pub fn gated_dims(&self) -> Option<(Variant, ProjectionDims)> {
        match self.gate.kind {
            GateKind::HyperGrid { variant, d_r, d_c, n } => {
                let mut dims = ProjectionDims {
                    fan_in: self.d_ff,
                    fan_out: self.d_model,
                    grid_rows: d_r,
                    grid_cols: d_c,
                    gate_width: None,
                    cond_dim: self.d_model,
                };
                if variant == Variant::L {
                    dims.gate_width = n;
                }
                Some((variant, dims))
            }
            _ => None,
        }
    }

    /// Parameter count of the same geometry without any gate.
    pub fn base_param_count(&self) -> usize {
        let (v, d, f) = (self.vocab_size, self.d_model, self.d_ff);
        let norm = 2 * d;
        let attn = 4 * d * d;
        let ffn = d * f + f + f * d + d;
        let enc = 2 * norm + attn + ffn;
        let dec = 3 * norm + 2 * attn + ffn;
        v * d + self.max_len * d + self.layers_enc * enc + self.layers_dec * dec + 2 * norm + d * v
    }

    pub fn gated_layer_count(&self) -> usize {
        if matches!(self.gate.kind, GateKind::None) {
            return 0;
        }
        let enc = if self.gate.encoder { self.layers_enc } else { 0 };
        let dec = if self.gate.decoder { self.layers_dec } else { 0 };
        enc + dec
    }

    /// Parameters added to each gated layer.
    pub fn gate_cost_per_layer(&self) -> usize {
        match self.gate.kind {
            GateKind::None => 0,
            GateKind::HyperGrid { .. } => {
                let (variant, dims) = self.gated_dims().expect("hypergrid");
                param_cost(variant, &dims)
            }
            GateKind::OutGate(mode) => self.d_model * mode.gate_width(self.d_ff),
        }
    }
}

#[derive(Debug, Clone)]
struct Attention {
    query: ParamId,
    key: ParamId,
    value: ParamId,
    output: ParamId,
}

#[derive(Debug, Clone)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
enum FfnGate {
    None,
    HyperGrid(HyperGridLayer),
    OutGate(OutGateLayer),
}

#[derive(Debug, Clone)]
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    gate: FfnGate,
}

#[derive(Debug, Clone)]
struct EncoderBlock {
    norm_attn: Norm,
    attn: Attention,
    norm_ffn: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    norm_self: Norm,
    self_attn: Attention,
    norm_cross: Norm,
    cross_attn: Attention,
    norm_ffn: Norm,
    ffn: Ffn,
}

/// Which transformer layer a block belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Encoder(usize),
    Decoder(usize),
}

/// Mean loss and gradients (store order) over a batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub loss: f64,
    pub tokens: usize,
    pub grads: Vec<Vec<f64>>,
}

/// Anything that can greedily map an input sequence to an output sequence.
pub trait Seq2Seq {
    fn greedy_decode(&self, input: &[usize], max_steps: usize) -> Result<Vec<usize>>;
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    config: ModelConfig,
    params: ParamStore,
    embed: ParamId,
    positions: ParamId,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    enc_norm: Norm,
    dec_norm: Norm,
    output: ParamId,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    config: ModelConfig,
}

impl Builder<'_> {
    fn linear(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let std = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::randn(&[fan_in, fan_out], std, &mut self.rng);
        self.store.add(name, t)
    }

    fn norm(&mut self, prefix: &str) -> Result<Norm> {
        let d = self.config.d_model;
        Ok(Norm {
            gain: self.store.add(format!("{prefix}.gain"), Tensor::filled(&[d], 1.0))?,
            bias: self.store.add(format!("{prefix}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    fn attention(&mut self, prefix: &str) -> Result<Attention> {
        let d = self.config.d_model;
        Ok(Attention {
            query: self.linear(format!("{prefix}.query"), d, d)?,
            key: self.linear(format!("{prefix}.key"), d, d)?,
            value: self.linear(format!("{prefix}.value"), d, d)?,
            output: self.linear(format!("{prefix}.output"), d, d)?,
        })
    }

    fn ffn(&mut self, prefix: &str, layer_index: usize, gated: bool) -> Result<Ffn> {
        let ModelConfig { d_model, d_ff, .. } = self.config;
        let w1 = self.linear(format!("{prefix}.w1"), d_model, d_ff)?;
        let b1 = self.store.add(format!("{prefix}.b1"), Tensor::zeros(&[d_ff]))?;
        let w2 = self.linear(format!("{prefix}.w2"), d_ff, d_model)?;
        let b2 = self.store.add(format!("{prefix}.b2"), Tensor::zeros(&[d_model]))?;
        let gate = match (gated, self.config.gate.kind) {
            (false, _) | (_, GateKind::None) => FfnGate::None,
            (true, GateKind::HyperGrid { .. }) => {
                let (variant, dims) = self.config.gated_dims().expect("hypergrid");
                FfnGate::HyperGrid(HyperGridLayer::with_host(
                    self.store,
                    w2,
                    b2,
                    &format!("hypergrid.{layer_index}"),
                    variant,
                    dims,
                    &mut self.rng,
                )?)
            }
            (true, GateKind::OutGate(mode)) => FfnGate::OutGate(OutGateLayer::with_host(
                self.store,
                w1,
                b1,
                &format!("outgate.{layer_index}"),
                mode,
                d_model,
                &mut self.rng,
            )?),
        };
        Ok(Ffn { w1, b1, w2, b2, gate })
    }
}

impl TransformerModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut b = Builder {
            store: &mut params,
            rng: ChaCha8Rng::seed_from_u64(seed),
            config,
        };
        let d = config.d_model;
        let embed = b.store.add("embed.tokens", Tensor::randn(&[config.vocab_size, d], 1.0, &mut b.rng))?;
        let positions = b.store.add("embed.positions", Tensor::randn(&[config.max_len, d], 1.0, &mut b.rng))?;
        let mut encoder = Vec::with_capacity(config.layers_enc);
        for i in 0..config.layers_enc {
            let p = format!("encoder.{i}");
            encoder.push(EncoderBlock {
                norm_attn: b.norm(&format!("{p}.norm_attn"))?,
                attn: b.attention(&format!("{p}.attn"))?,
                norm_ffn: b.norm(&format!("{p}.norm_ffn"))?,
                ffn: b.ffn(&format!("{p}.ffn"), i, config.gate.encoder)?,
            });
        }
        let mut decoder = Vec::with_capacity(config.layers_dec);
        for i in 0..config.layers_dec {
            let p = format!("decoder.{i}");
            decoder.push(DecoderBlock {
                norm_self: b.norm(&format!("{p}.norm_self"))?,
                self_attn: b.attention(&format!("{p}.self_attn"))?,
                norm_cross: b.norm(&format!("{p}.norm_cross"))?,
                cross_attn: b.attention(&format!("{p}.cross_attn"))?,
                norm_ffn: b.norm(&format!("{p}.norm_ffn"))?,
                ffn: b.ffn(&format!("{p}.ffn"), config.layers_enc + i, config.gate.decoder)?,
            });
        }
        let enc_norm = b.norm("encoder.final_norm")?;
        let dec_norm = b.norm("decoder.final_norm")?;
        let output = b.linear("output.projection".into(), d, config.vocab_size)?;
        Ok(Self {
            config,
            params,
            embed,
            positions,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn output_projection(&self) -> ParamId {
        self.output
    }

    fn ffns(&self) -> impl Iterator<Item = &Ffn> {
        self.encoder
            .iter()
            .map(|b| &b.ffn)
            .chain(self.decoder.iter().map(|b| &b.ffn))
    }

    /// Hypernetwork / output-gate parameters of every gated layer.
    pub fn gate_params(&self) -> Vec<ParamId> {
        self.ffns()
            .flat_map(|f| match &f.gate {
                FfnGate::None => Vec::new(),
                FfnGate::HyperGrid(h) => h.hyper_params(),
                FfnGate::OutGate(o) => vec![o.gate_map()],
            })
            .collect()
    }

    pub fn added_param_count(&self) -> usize {
        self.gate_params().iter().map(|&id| self.params.get(id).len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Test hook: forces every HyperGrid gate entry to a constant.
    pub fn set_gate_override(&mut self, value: Option<f64>) {
        let blocks = self
            .encoder
            .iter_mut()
            .map(|b| &mut b.ffn)
            .chain(self.decoder.iter_mut().map(|b| &mut b.ffn));
        for ffn in blocks {
            if let FfnGate::HyperGrid(h) = &mut ffn.gate {
                h.set_gate_override(value);
            }
        }
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max_len: self.config.max_len,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::UnknownToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn embed(&self, tape: &mut Tape, params: &Bound, tokens: &[usize]) -> Result<Var> {
        self.check_tokens(tokens)?;
        let tok = tape.gather_rows(params.var(self.embed), tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = tape.gather_rows(params.var(self.positions), &positions)?;
        Ok(tape.add(tok, pos)?)
    }

    fn norm(&self, tape: &mut Tape, params: &Bound, norm: &Norm, x: Var) -> Result<Var> {
        Ok(tape.layer_norm(x, params.var(norm.gain), params.var(norm.bias), LN_EPS)?)
    }

    fn attend(
        &self,
        tape: &mut Tape,
        params: &Bound,
        attn: &Attention,
        queries: Var,
        memory: Var,
        causal: bool,
    ) -> Result<Var> {
        let q = tape.matmul(queries, params.var(attn.query))?;
        let k = tape.matmul(memory, params.var(attn.key))?;
        let v = tape.matmul(memory, params.var(attn.value))?;
        let heads = self.config.heads;
        let head_dim = self.config.d_model / heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                let start = h * head_dim;
                (
                    tape.slice_cols(q, start, head_dim)?,
                    tape.slice_cols(k, start, head_dim)?,
                    tape.slice_cols(v, start, head_dim)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let probs = tape.softmax_rows(scores, causal)?;
            outs.push(tape.matmul(probs, vh)?);
        }
        let merged = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok(tape.matmul(merged, params.var(attn.output))?)
    }

    fn ffn(&self, block: Block) -> &Ffn {
        match block {
            Block::Encoder(i) => &self.encoder[i].ffn,
            Block::Decoder(i) => &self.decoder[i].ffn,
        }
    }

    fn ffn_norm(&self, block: Block) -> &Norm {
        match block {
            Block::Encoder(i) => &self.encoder[i].norm_ffn,
            Block::Decoder(i) => &self.decoder[i].norm_ffn,
        }
    }

    /// FFN-1 → ReLU → FFN-2 on already-normalized input, with whichever
    /// gate the block carries. `cond` is the gate conditioning vector.
    pub fn ffn_branch(&self, tape: &mut Tape, params: &Bound, block: Block, x: Var, cond: Var) -> Result<Var> {
        self.ffn_branch_probed(tape, params, block, x, cond, &mut None)
    }

    fn ffn_branch_probed(
        &self,
        tape: &mut Tape,
        params: &Bound,
        block: Block,
        x: Var,
        cond: Var,
        probe: &mut Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let ffn = self.ffn(block);
        let rows = tape.value(x).dims2("ffn")?.0;
        let hidden = match &ffn.gate {
            FfnGate::OutGate(og) => {
                if let Some(p) = probe.as_deref_mut() {
                    let g = og.gate(tape, params, cond)?;
                    p.push(tape.value(g).clone());
                }
                og.forward_conditioned(tape, params, x, cond)?
            }
            _ => {
                let h = tape.matmul(x, params.var(ffn.w1))?;
                let b1 = tape.broadcast_rows(params.var(ffn.b1), rows)?;
                let h = tape.add(h, b1)?;
                tape.relu(h)
            }
        };
        match &ffn.gate {
            FfnGate::HyperGrid(hg) => {
                if let Some(p) = probe.as_deref_mut() {
                    let g = hg.gate(tape, params, cond)?;
                    p.push(tape.value(g).clone());
                }
                hg.forward_conditioned(tape, params, hidden, cond)
            }
            _ => {
                let y = tape.matmul(hidden, params.var(ffn.w2))?;
                let b2 = tape.broadcast_rows(params.var(ffn.b2), rows)?;
                Ok(tape.add(y, b2)?)
            }
        }
    }

    /// Pre-norm FFN sub-block with its residual: `x + ffn(norm(x))`.
    pub fn ffn_block(&self, tape: &mut Tape, params: &Bound, block: Block, x: Var, cond: Var) -> Result<Var> {
        let normed = self.norm(tape, params, self.ffn_norm(block), x)?;
        let y = self.ffn_branch(tape, params, block, normed, cond)?;
        Ok(tape.add(x, y)?)
    }

    /// Contextual encodings `ℓ×d_model` of `tokens` (token 0 is the prefix).
    pub fn encode(&self, tape: &mut Tape, params: &Bound, tokens: &[usize]) -> Result<Var> {
        self.encode_probed(tape, params, tokens, &mut None)
    }

    fn encode_probed(
        &self,
        tape: &mut Tape,
        params: &Bound,
        tokens: &[usize],
        probe: &mut Option<&mut Vec<Tensor>>,
    ) -> Result<Var> {
        let mut x = self.embed(tape, params, tokens)?;
        for (i, block) in self.encoder.iter().enumerate() {
            let cond = tape.select_row(x, 0)?;
            let normed = self.norm(tape, params, &block.norm_attn, x)?;
            let a = self.attend(tape, params, &block.attn, normed, normed, false)?;
            x = tape.add(x, a)?;
            let normed = self.norm(tape, params, &block.norm_ffn, x)?;
            let f = self.ffn_branch_probed(tape, params, Block::Encoder(i), normed, cond, probe)?;
            x = tape.add(x, f)?;
        }
        self.norm(tape, params, &self.enc_norm, x)
    }

    /// Next-token logits `ℓ×vocab` for every position of `dec_input`.
    pub fn decode(&self, tape: &mut Tape, params: &Bound, memory: Var, dec_input: &[usize]) -> Result<Var> {
        let mut x = self.embed(tape, params, dec_input)?;
        for (i, block) in self.decoder.iter().enumerate() {
            let cond = tape.select_row(x, 0)?;
            let normed = self.norm(tape, params, &block.norm_self, x)?;
            let a = self.attend(tape, params, &block.self_attn, normed, normed, true)?;
            x = tape.add(x, a)?;
            let normed = self.norm(tape, params, &block.norm_cross, x)?;
            let c = self.attend(tape, params, &block.cross_attn, normed, memory, false)?;
            x = tape.add(x, c)?;
            let normed = self.norm(tape, params, &block.norm_ffn, x)?;
            let f = self.ffn_branch(tape, params, Block::Decoder(i), normed, cond)?;
            x = tape.add(x, f)?;
        }
        let x = self.norm(tape, params, &self.dec_norm, x)?;
        Ok(tape.matmul(x, params.var(self.output))?)
    }

    /// Logits for the token following `prefix` (which must start with BOS).
    pub fn decode_step(&self, tape: &mut Tape, params: &Bound, memory: Var, prefix: &[usize]) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::Invalid("decode_step needs at least the start token".into()));
        }
        let logits = self.decode(tape, params, memory, prefix)?;
        Ok(tape.select_row(logits, prefix.len() - 1)?)
    }

    /// Per-layer encoder gate values for one input (post-sigmoid grids, or
    /// gate vectors for OutGate). Empty when the encoder is ungated.
    pub fn encoder_gates(&self, tokens: &[usize]) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let mut gates = Vec::new();
        self.encode_probed(&mut tape, &params, tokens, &mut Some(&mut gates))?;
        Ok(gates)
    }

    /// Summed teacher-forced cross-entropy of one example and its token count.
    pub fn example_loss(&self, tape: &mut Tape, params: &Bound, example: &Example) -> Result<(Var, usize)> {
        let memory = self.encode(tape, params, &example.input)?;
        let mut dec_input = Vec::with_capacity(example.target.len() + 1);
        dec_input.push(vocab::BOS);
        dec_input.extend_from_slice(&example.target);
        let mut labels = example.target.clone();
        labels.push(vocab::EOS);
        let logits = self.decode(tape, params, memory, &dec_input)?;
        Ok((tape.cross_entropy(logits, &labels)?, labels.len()))
    }

    /// Mean per-token loss of a batch, forward only.
    pub fn batch_loss(&self, batch: &[Example]) -> Result<f64> {
        let mut total = 0.0;
        let mut tokens = 0;
        for ex in batch {
            let mut tape = Tape::new();
            let params = self.params.bind(&mut tape, false);
            let (loss, n) = self.example_loss(&mut tape, &params, ex)?;
            total += tape.value(loss).item();
            tokens += n;
        }
        Ok(total / tokens.max(1) as f64)
    }

    /// Summed loss, token count and summed gradients of `batch`, built on a
    /// single tape on the calling thread.
    fn summed_gradients(&self, batch: &[Example]) -> Result<(f64, usize, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, true);
        let mut total = None;
        let mut tokens = 0;
        for ex in batch {
            let (loss, n) = self.example_loss(&mut tape, &params, ex)?;
            total = Some(match total {
                None => loss,
                Some(t) => tape.add(t, loss)?,
            });
            tokens += n;
        }
        let total = total.ok_or_else(|| Error::Invalid("empty batch".into()))?;
        tape.backward(total)?;
        Ok((tape.value(total).item(), tokens, params.grads(&tape)))
    }

    /// Mean per-token loss and its gradients (store order) over `batch`,
    /// computed on the calling thread.
    pub fn batch_gradients(&self, batch: &[Example]) -> Result<BatchGradients> {
        let (loss, tokens, mut grads) = self.summed_gradients(batch)?;
        let inv = 1.0 / tokens as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        Ok(BatchGradients {
            loss: loss * inv,
            tokens,
            grads,
        })
    }

    /// Same quantity as [`Self::batch_gradients`], with the batch split into
    /// consecutive chunks of `chunk` examples that are differentiated in
    /// parallel and reduced in chunk order. The result depends on `chunk`
    /// but not on the number of threads.
    pub fn batch_gradients_chunked(&self, batch: &[Example], chunk: usize) -> Result<BatchGradients> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let parts: Vec<Result<(f64, usize, Vec<Vec<f64>>)>> = batch
            .par_chunks(chunk.max(1))
            .map(|c| self.summed_gradients(c))
            .collect();
        let mut loss = 0.0;
        let mut tokens = 0;
        let mut grads: Option<Vec<Vec<f64>>> = None;
        for part in parts {
            let (l, n, g) = part?;
            loss += l;
            tokens += n;
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, p) in acc.iter_mut().zip(&g) {
                        a.iter_mut().zip(p).for_each(|(a, p)| *a += p);
                    }
                }
            }
        }
        let mut grads = grads.expect("nonempty batch");
        let inv = 1.0 / tokens as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        Ok(BatchGradients {
            loss: loss * inv,
            tokens,
            grads,
        })
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl Seq2Seq for TransformerModel {
    /// Greedy argmax decoding until EOS or `max_steps` tokens.
    fn greedy_decode(&self, input: &[usize], max_steps: usize) -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, false);
        let memory = self.encode(&mut tape, &params, input)?;
        let mut prefix = vec![vocab::BOS];
        let limit = max_steps.min(self.config.max_len.saturating_sub(1));
        while prefix.len() <= limit {
            let logits = self.decode_step(&mut tape, &params, memory, &prefix)?;
            let next = argmax(tape.value(logits).data());
            if next == vocab::EOS {
                break;
            }
            prefix.push(next);
        }
        prefix.remove(0);
        Ok(prefix)
    }
}
