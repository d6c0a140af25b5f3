//! Post-norm Transformer encoder and decoder layers built on the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, Initializer, ParamStore};

const LN_EPS: f64 = 1e-6;

/// Layer geometry shared by encoder and decoder stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub d_model: usize,
    pub d_emb: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub layers_enc: usize,
    pub layers_dec_stage: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_emb: 64,
            heads: 4,
            d_ff: 128,
            layers_enc: 2,
            layers_dec_stage: 1,
            dropout: 0.1,
            max_len: 128,
        }
    }
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("d_emb", self.d_emb),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("max_len", self.max_len),
            ("layers_dec_stage", self.layers_dec_stage),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.d_emb != self.d_model {
            return Err(Error::Config(format!(
                "d_emb {} must equal d_model {}",
                self.d_emb, self.d_model
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::Config(format!("d_model {} must be even", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskKind {
    Padding,
    Causal,
    Combined,
}

/// Boolean `[queries × keys]` matrix; `true` means attention is allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    kind: MaskKind,
    queries: usize,
    keys: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    /// Every query may attend to every non-pad key.
    pub fn padding(queries: usize, key_valid: &[bool]) -> Self {
        let keys = key_valid.len();
        let allowed = (0..queries).flat_map(|_| key_valid.iter().copied()).collect();
        Self {
            kind: MaskKind::Padding,
            queries,
            keys,
            allowed,
        }
    }

    /// `allowed[i][j] == (j <= i)`.
    pub fn causal(n: usize) -> Self {
        let allowed = (0..n).flat_map(|i| (0..n).map(move |j| j <= i)).collect();
        Self {
            kind: MaskKind::Causal,
            queries: n,
            keys: n,
            allowed,
        }
    }

    /// Causal and key padding together.
    pub fn combined(key_valid: &[bool]) -> Self {
        let n = key_valid.len();
        let allowed = (0..n)
            .flat_map(|i| (0..n).map(move |j| j <= i && key_valid[j]))
            .collect();
        Self {
            kind: MaskKind::Combined,
            queries: n,
            keys: n,
            allowed,
        }
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.queries, self.keys)
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.keys + key]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(max_len: usize, d_model: usize) -> Result<Tensor> {
    if d_model == 0 || !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "positional encoding needs an even width, got {d_model}"
        )));
    }
    if max_len == 0 {
        return Err(Error::Config("positional encoding needs max_len >= 1".into()));
    }
    let mut data = vec![0.0; max_len * d_model];
    for pos in 0..max_len {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = angle.sin();
            data[pos * d_model + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, d_model], data)
}

/// Everything a layer needs during one forward pass.
pub struct Ctx<'a, 'p> {
    pub tape: &'a mut Tape<'p>,
    pub params: &'a Bound<'p>,
    pub cfg: &'a LayerConfig,
    pub pe: &'a Tensor,
    dropout: Option<&'a mut ChaCha8Rng>,
}

impl<'a, 'p> Ctx<'a, 'p> {
    pub fn new(
        tape: &'a mut Tape<'p>,
        params: &'a Bound<'p>,
        cfg: &'a LayerConfig,
        pe: &'a Tensor,
    ) -> Self {
        Self {
            tape,
            params,
            cfg,
            pe,
            dropout: None,
        }
    }

    /// Enables dropout at `cfg.dropout`, drawing masks from `rng`.
    pub fn with_dropout(mut self, rng: &'a mut ChaCha8Rng) -> Self {
        self.dropout = Some(rng);
        self
    }

    pub fn p(&self, name: &str) -> Result<Var> {
        self.params.var(name)
    }

    /// `x · W + b` with parameters `{prefix}.w` / `{prefix}.b`; the bias is
    /// optional.
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.w"))?;
        let y = self.tape.matmul(x, w)?;
        let bias = format!("{prefix}.b");
        if self.params.has(&bias) {
            let b = self.p(&bias)?;
            self.tape.add_row(y, b)
        } else {
            Ok(y)
        }
    }

    pub fn layer_norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gain = self.p(&format!("{prefix}.gain"))?;
        let bias = self.p(&format!("{prefix}.bias"))?;
        self.tape.layer_norm(x, gain, bias, LN_EPS)
    }

    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let rate = self.cfg.dropout;
        let Some(rng) = self.dropout.as_deref_mut() else {
            return Ok(x);
        };
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self
            .tape
            .constant(Tensor::new(self.tape.shape(x).to_vec(), mask)?);
        self.tape.mul(x, mask)
    }

    /// Adds the first `n` rows of the positional table.
    pub fn add_positions(&mut self, x: Var) -> Result<Var> {
        let (n, d) = match self.tape.shape(x) {
            [n, d] => (*n, *d),
            s => return Err(Error::Dimension(format!("expected [n×d], got {s:?}"))),
        };
        if n > self.pe.shape()[0] {
            return Err(Error::Contract(format!(
                "sequence of {n} exceeds max_len {}",
                self.pe.shape()[0]
            )));
        }
        let pe = Tensor::new(vec![n, d], self.pe.data()[..n * d].to_vec())?;
        let pe = self.tape.constant(pe);
        self.tape.add(x, pe)
    }
}

/// Scaled dot-product attention over `heads` heads with `1/sqrt(d/heads)`
/// scaling. Parameters: `{prefix}.q.{w,b}`, `{prefix}.k.w`, `{prefix}.v.{w,b}`,
/// `{prefix}.o.{w,b}`. The key projection carries no bias since a key bias
/// only shifts every score in a row by the same amount.
pub fn multi_head_attention(
    ctx: &mut Ctx<'_, '_>,
    query: Var,
    memory: Var,
    mask: &AttentionMask,
    prefix: &str,
) -> Result<Var> {
    let nq = ctx.tape.shape(query)[0];
    let nk = ctx.tape.shape(memory)[0];
    if mask.dims() != (nq, nk) {
        return Err(Error::Dimension(format!(
            "mask {:?} for {nq} queries and {nk} keys",
            mask.dims()
        )));
    }
    let q = ctx.linear(query, &format!("{prefix}.q"))?;
    let k = ctx.linear(memory, &format!("{prefix}.k"))?;
    let v = ctx.linear(memory, &format!("{prefix}.v"))?;
    let dh = ctx.cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(ctx.cfg.heads);
    for h in 0..ctx.cfg.heads {
        let qh = ctx.tape.slice_cols(q, h * dh, dh)?;
        let kh = ctx.tape.slice_cols(k, h * dh, dh)?;
        let vh = ctx.tape.slice_cols(v, h * dh, dh)?;
        let scores = ctx.tape.matmul_nt(qh, kh)?;
        let scores = ctx.tape.scale(scores, scale)?;
        let weights = ctx.tape.masked_softmax(scores, mask.as_slice())?;
        heads.push(ctx.tape.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        ctx.tape.concat_cols(&heads)?
    };
    ctx.linear(merged, &format!("{prefix}.o"))
}

fn feed_forward(ctx: &mut Ctx<'_, '_>, x: Var, prefix: &str) -> Result<Var> {
    let h = ctx.linear(x, &format!("{prefix}.ff1"))?;
    let h = ctx.tape.relu(h)?;
    ctx.linear(h, &format!("{prefix}.ff2"))
}

fn residual_norm(ctx: &mut Ctx<'_, '_>, x: Var, sub: Var, norm: &str) -> Result<Var> {
    let sub = ctx.dropout(sub)?;
    let sum = ctx.tape.add(x, sub)?;
    ctx.layer_norm(sum, norm)
}

/// Contextual encoding `H` of token embeddings `[n×d]`: positions are added,
/// then `layers_enc` self-attention layers run with pad keys masked out.
pub fn encoder_forward(
    ctx: &mut Ctx<'_, '_>,
    embeddings: Var,
    key_valid: &[bool],
    prefix: &str,
) -> Result<Var> {
    let n = ctx.tape.shape(embeddings)[0];
    if n != key_valid.len() {
        return Err(Error::Dimension(format!(
            "{n} embeddings but {} mask entries",
            key_valid.len()
        )));
    }
    if n > ctx.cfg.max_len {
        return Err(Error::Contract(format!(
            "input of {n} tokens exceeds max_len {}",
            ctx.cfg.max_len
        )));
    }
    let mut x = ctx.add_positions(embeddings)?;
    x = ctx.dropout(x)?;
    let mask = AttentionMask::padding(n, key_valid);
    for l in 0..ctx.cfg.layers_enc {
        let lp = format!("{prefix}.layer{l}");
        let attn = multi_head_attention(ctx, x, x, &mask, &format!("{lp}.self_attn"))?;
        x = residual_norm(ctx, x, attn, &format!("{lp}.norm1"))?;
        let ff = feed_forward(ctx, x, &lp)?;
        x = residual_norm(ctx, x, ff, &format!("{lp}.norm2"))?;
    }
    Ok(x)
}

/// One decoder stage: `layers_dec_stage` layers of causal self-attention over
/// `target`, cross-attention over `memory` and a position-wise FFN, each
/// followed by residual + LayerNorm. `self_mask` must be causal or combined.
pub fn decoder_stage_forward(
    ctx: &mut Ctx<'_, '_>,
    memory: Var,
    memory_valid: &[bool],
    target: Var,
    self_mask: &AttentionMask,
    prefix: &str,
) -> Result<Var> {
    if self_mask.kind() == MaskKind::Padding {
        return Err(Error::Contract(
            "decoder self-attention requires a causal mask".into(),
        ));
    }
    let m = ctx.tape.shape(target)[0];
    let n = ctx.tape.shape(memory)[0];
    if self_mask.dims() != (m, m) {
        return Err(Error::Dimension(format!(
            "self mask {:?} for a target of {m}",
            self_mask.dims()
        )));
    }
    if memory_valid.len() != n {
        return Err(Error::Dimension(format!(
            "memory of {n} rows with {} mask entries",
            memory_valid.len()
        )));
    }
    let cross_mask = AttentionMask::padding(m, memory_valid);
    let mut x = target;
    for l in 0..ctx.cfg.layers_dec_stage {
        let lp = format!("{prefix}.layer{l}");
        let attn = multi_head_attention(ctx, x, x, self_mask, &format!("{lp}.self_attn"))?;
        x = residual_norm(ctx, x, attn, &format!("{lp}.norm1"))?;
        let cross = multi_head_attention(ctx, x, memory, &cross_mask, &format!("{lp}.cross_attn"))?;
        x = residual_norm(ctx, x, cross, &format!("{lp}.norm2"))?;
        let ff = feed_forward(ctx, x, &lp)?;
        x = residual_norm(ctx, x, ff, &format!("{lp}.norm3"))?;
    }
    Ok(x)
}

pub fn init_linear(
    store: &mut ParamStore,
    init: &mut Initializer<'_>,
    prefix: &str,
    rows: usize,
    cols: usize,
    bias: bool,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), init.xavier(rows, cols))?;
    if bias {
        store.insert(format!("{prefix}.b"), init.zeros(cols))?;
    }
    Ok(())
}

fn init_attention(
    store: &mut ParamStore,
    init: &mut Initializer<'_>,
    prefix: &str,
    d: usize,
) -> Result<()> {
    init_linear(store, init, &format!("{prefix}.q"), d, d, true)?;
    init_linear(store, init, &format!("{prefix}.k"), d, d, false)?;
    init_linear(store, init, &format!("{prefix}.v"), d, d, true)?;
    init_linear(store, init, &format!("{prefix}.o"), d, d, true)
}

fn init_norm(store: &mut ParamStore, init: &mut Initializer<'_>, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), init.ones(d))?;
    store.insert(format!("{prefix}.bias"), init.zeros(d))
}

fn init_ffn(store: &mut ParamStore, init: &mut Initializer<'_>, prefix: &str, cfg: &LayerConfig) -> Result<()> {
    init_linear(store, init, &format!("{prefix}.ff1"), cfg.d_model, cfg.d_ff, true)?;
    init_linear(store, init, &format!("{prefix}.ff2"), cfg.d_ff, cfg.d_model, true)
}

pub fn init_encoder(
    store: &mut ParamStore,
    init: &mut Initializer<'_>,
    cfg: &LayerConfig,
    prefix: &str,
) -> Result<()> {
    for l in 0..cfg.layers_enc {
        let lp = format!("{prefix}.layer{l}");
        init_attention(store, init, &format!("{lp}.self_attn"), cfg.d_model)?;
        init_norm(store, init, &format!("{lp}.norm1"), cfg.d_model)?;
        init_ffn(store, init, &lp, cfg)?;
        init_norm(store, init, &format!("{lp}.norm2"), cfg.d_model)?;
    }
    Ok(())
}

pub fn init_decoder_stage(
    store: &mut ParamStore,
    init: &mut Initializer<'_>,
    cfg: &LayerConfig,
    prefix: &str,
) -> Result<()> {
    for l in 0..cfg.layers_dec_stage {
        let lp = format!("{prefix}.layer{l}");
        init_attention(store, init, &format!("{lp}.self_attn"), cfg.d_model)?;
        init_norm(store, init, &format!("{lp}.norm1"), cfg.d_model)?;
        init_attention(store, init, &format!("{lp}.cross_attn"), cfg.d_model)?;
        init_norm(store, init, &format!("{lp}.norm2"), cfg.d_model)?;
        init_ffn(store, init, &lp, cfg)?;
        init_norm(store, init, &format!("{lp}.norm3"), cfg.d_model)?;
    }
    Ok(())
}
