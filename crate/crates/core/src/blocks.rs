//! Transformer building blocks: multi-head attention, feed-forward nets,
//! and pre-norm residual stacks.
//!
//! Sequences are [tokens, d] matrices. Blocks normalize before each sublayer
//! ("add & norm" ahead of both the attention and the FFN), so the residual
//! path is untouched input. Attention masks are per-key boolean vectors;
//! `false` removes a key by pushing its score to -1e30, which underflows to
//! an exactly-zero weight.

use crate::error::{Error, Result};
use crate::params::{FwdCtx, ParamSet};
use crate::tape::Var;
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const MASK_OFF: f64 = -1e30;

/// Extents shared by a stack of blocks.
#[derive(Debug, Clone, Copy)]
pub struct StackCfg {
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
}

// ── Primitive layers ────────────────────────────────────────────────────

/// x @ W + b with parameters `{prefix}.w` / `{prefix}.b`.
pub fn linear(ctx: &FwdCtx, prefix: &str, x: &Var) -> Result<Var> {
    let w = ctx.p(&format!("{prefix}.w"))?;
    let b = ctx.p(&format!("{prefix}.b"))?;
    x.matmul(&w)?.add_row(&b)
}

pub fn register_linear(params: &mut ParamSet, prefix: &str, d_in: usize, d_out: usize, seed: u64) {
    params.add_matrix(&format!("{prefix}.w"), d_in, d_out, seed);
    params.add_zeros(&format!("{prefix}.b"), vec![d_out]);
}

/// Two-layer feed-forward with a relu between, parameters under `{prefix}`.
pub fn ffn(ctx: &FwdCtx, prefix: &str, x: &Var) -> Result<Var> {
    let h = linear(ctx, &format!("{prefix}.in"), x)?.relu();
    linear(ctx, &format!("{prefix}.out"), &h)
}

pub fn register_ffn(params: &mut ParamSet, prefix: &str, d: usize, hidden: usize, seed: u64) {
    register_linear(params, &format!("{prefix}.in"), d, hidden, seed);
    register_linear(params, &format!("{prefix}.out"), hidden, d, seed);
}

/// Layer norm with learnable scale/shift `{prefix}.gamma` / `{prefix}.beta`.
pub fn layer_norm(ctx: &FwdCtx, prefix: &str, x: &Var) -> Result<Var> {
    let gamma = ctx.p(&format!("{prefix}.gamma"))?;
    let beta = ctx.p(&format!("{prefix}.beta"))?;
    x.layer_norm(&gamma, &beta, LN_EPS)
}

pub fn register_layer_norm(params: &mut ParamSet, prefix: &str, d: usize) {
    params.add_ones(&format!("{prefix}.gamma"), vec![d]);
    params.add_zeros(&format!("{prefix}.beta"), vec![d]);
}

/// Scaled dot-product multi-head attention.
///
/// `q_in` is [Lq, d], `kv_in` is [Lk, d]; the result is [Lq, d]. Scores scale
/// by 1/sqrt(d/heads). `mask`, when given, has one entry per key; `false`
/// excludes that key from every query. Attention-weight dropout fires at
/// `dropout` in train mode.
pub fn mha(
    ctx: &FwdCtx,
    prefix: &str,
    q_in: &Var,
    kv_in: &Var,
    heads: usize,
    mask: Option<&[bool]>,
    dropout: f64,
) -> Result<Var> {
    let d = q_in.shape()[1];
    if d % heads != 0 {
        return Err(Error::Shape(format!("model width {d} not divisible by {heads} heads")));
    }
    if let Some(m) = mask {
        if m.len() != kv_in.shape()[0] {
            return Err(Error::Shape(format!(
                "mask covers {} keys, memory has {}",
                m.len(),
                kv_in.shape()[0]
            )));
        }
    }
    let dk = d / heads;
    let q = linear(ctx, &format!("{prefix}.q"), q_in)?;
    let k = linear(ctx, &format!("{prefix}.k"), kv_in)?;
    let v = linear(ctx, &format!("{prefix}.v"), kv_in)?;

    let mask_row = mask.map(|m| {
        let data: Vec<f64> = m.iter().map(|&keep| if keep { 0.0 } else { MASK_OFF }).collect();
        q_in.tape().leaf(Tensor::vector(data))
    });

    let mut mixed = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = q.slice_cols(h * dk, (h + 1) * dk)?;
        let kh = k.slice_cols(h * dk, (h + 1) * dk)?;
        let vh = v.slice_cols(h * dk, (h + 1) * dk)?;
        let mut scores = qh.matmul(&kh.transpose()?)?.scale(1.0 / (dk as f64).sqrt());
        if let Some(row) = &mask_row {
            scores = scores.add_row(row)?;
        }
        let weights = scores.softmax_rows();
        let weights = ctx.dropout(&weights, dropout, &format!("{prefix}.h{h}.weights"));
        mixed.push(weights.matmul(&vh)?);
    }
    let merged = Var::concat_cols(&mixed)?;
    linear(ctx, &format!("{prefix}.o"), &merged)
}

pub fn register_mha(params: &mut ParamSet, prefix: &str, d: usize, seed: u64) {
    for part in ["q", "k", "v", "o"] {
        register_linear(params, &format!("{prefix}.{part}"), d, d, seed);
    }
}

// ── Residual stacks ─────────────────────────────────────────────────────

/// Stack of pre-norm self-attention blocks:
/// x += drop(MHA(LN(x))); x += drop(FFN(LN(x))).
#[derive(Debug, Clone)]
pub struct SelfAttentionStack {
    prefix: String,
    cfg: StackCfg,
}

impl SelfAttentionStack {
    pub fn register(params: &mut ParamSet, prefix: &str, cfg: StackCfg, seed: u64) -> Self {
        for i in 0..cfg.layers {
            let p = format!("{prefix}.l{i}");
            register_layer_norm(params, &format!("{p}.ln1"), cfg.d);
            register_mha(params, &format!("{p}.attn"), cfg.d, seed);
            register_layer_norm(params, &format!("{p}.ln2"), cfg.d);
            register_ffn(params, &format!("{p}.ffn"), cfg.d, cfg.ffn_hidden, seed);
        }
        SelfAttentionStack { prefix: prefix.to_string(), cfg }
    }

    /// Rebuilds the handle over an already-registered layout.
    pub fn attach(prefix: &str, cfg: StackCfg) -> Self {
        SelfAttentionStack { prefix: prefix.to_string(), cfg }
    }

    pub fn forward(&self, ctx: &FwdCtx, x: &Var, mask: Option<&[bool]>) -> Result<Var> {
        let mut x = x.clone();
        for i in 0..self.cfg.layers {
            let p = format!("{}.l{i}", self.prefix);
            let normed = layer_norm(ctx, &format!("{p}.ln1"), &x)?;
            let attended = mha(ctx, &format!("{p}.attn"), &normed, &normed, self.cfg.heads, mask, self.cfg.dropout)?;
            let attended = ctx.dropout(&attended, self.cfg.dropout, &format!("{p}.attn.out"));
            x = x.add(&attended)?;
            let normed = layer_norm(ctx, &format!("{p}.ln2"), &x)?;
            let fed = ffn(ctx, &format!("{p}.ffn"), &normed)?;
            let fed = ctx.dropout(&fed, self.cfg.dropout, &format!("{p}.ffn.out"));
            x = x.add(&fed)?;
        }
        Ok(x)
    }
}

/// Stack of pre-norm cross-attention blocks. Queries evolve; memory is
/// read-only key/value material shared by every layer.
#[derive(Debug, Clone)]
pub struct CrossAttentionStack {
    prefix: String,
    cfg: StackCfg,
}

impl CrossAttentionStack {
    pub fn register(params: &mut ParamSet, prefix: &str, cfg: StackCfg, seed: u64) -> Self {
        for i in 0..cfg.layers {
            let p = format!("{prefix}.l{i}");
            register_layer_norm(params, &format!("{p}.ln1"), cfg.d);
            register_mha(params, &format!("{p}.attn"), cfg.d, seed);
            register_layer_norm(params, &format!("{p}.ln2"), cfg.d);
            register_ffn(params, &format!("{p}.ffn"), cfg.d, cfg.ffn_hidden, seed);
        }
        CrossAttentionStack { prefix: prefix.to_string(), cfg }
    }

    pub fn attach(prefix: &str, cfg: StackCfg) -> Self {
        CrossAttentionStack { prefix: prefix.to_string(), cfg }
    }

    pub fn forward(&self, ctx: &FwdCtx, q: &Var, memory: &Var, mask: Option<&[bool]>) -> Result<Var> {
        let mut x = q.clone();
        for i in 0..self.cfg.layers {
            let p = format!("{}.l{i}", self.prefix);
            let normed = layer_norm(ctx, &format!("{p}.ln1"), &x)?;
            let attended = mha(ctx, &format!("{p}.attn"), &normed, memory, self.cfg.heads, mask, self.cfg.dropout)?;
            let attended = ctx.dropout(&attended, self.cfg.dropout, &format!("{p}.attn.out"));
            x = x.add(&attended)?;
            let normed = layer_norm(ctx, &format!("{p}.ln2"), &x)?;
            let fed = ffn(ctx, &format!("{p}.ffn"), &normed)?;
            let fed = ctx.dropout(&fed, self.cfg.dropout, &format!("{p}.ffn.out"));
            x = x.add(&fed)?;
        }
        Ok(x)
    }
}
