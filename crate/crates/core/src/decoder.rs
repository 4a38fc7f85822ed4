//! Decoder: message passing over the encoded frame and its support set,
//! alternating noun and verb refinement, then the prediction heads.
//!
//! Each iteration computes one message per entity with a self-attention
//! layer whose noun tokens carry their role embedding in place of a
//! positional code. Noun features update from the aggregated verb messages
//! of the support frames; the verb feature updates from the aggregated
//! noun messages of its own image only. In alternate mode (the default)
//! the two steps run sequentially and the query's messages are recomputed
//! between them; the non-alternate ablation instead wires the verb to the
//! support verb messages and each noun to its sibling noun messages, both
//! from one message computation. Support frames contribute messages but
//! are never themselves refined. Every iteration owns its parameters.
//!
//! Aggregation sorts its operands canonically before a left-to-right
//! reduction, so any permutation of the support set yields bit-identical
//! results.

use crate::blocks;
use crate::dataset::RoleId;
use crate::encoder::{role_query_rows, EncodedFrame};
use crate::error::{Error, Result};
use crate::params::{FwdCtx, ParamSet};
use crate::retrieval::{FeatureIndex, SupportSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Sum,
    Max,
    /// Sum scaled by the operand count.
    Mean,
    /// Σ_k σ(W_g p_k) ⊙ tanh(W_v p_k): a gated readout that keeps the
    /// permutation invariance a sequential gated update would lose.
    Gated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefineOrder {
    NounFirst,
    VerbFirst,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderCfg {
    pub d: usize,
    pub heads: usize,
    /// Refinement iterations T; 0 bypasses the decoder entirely.
    pub iterations: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    pub aggregation: Aggregation,
    pub order: RefineOrder,
    pub alternate: bool,
    /// Must match the encoder's role embedding width.
    pub role_embed_dim: usize,
}

impl DecoderCfg {
    pub fn register(&self, params: &mut ParamSet, seed: u64) {
        for t in 0..self.iterations {
            let p = format!("decoder.l{t}");
            blocks::register_mha(params, &format!("{p}.msg"), self.d, seed);
            for target in ["noun", "verb"] {
                if self.aggregation == Aggregation::Gated {
                    blocks::register_linear(params, &format!("{p}.{target}.agg.gate"), self.d, self.d, seed);
                    blocks::register_linear(params, &format!("{p}.{target}.agg.value"), self.d, self.d, seed);
                }
                blocks::register_layer_norm(params, &format!("{p}.{target}.ln1"), self.d);
                blocks::register_ffn(params, &format!("{p}.{target}.ffn"), self.d, self.ffn_hidden, seed);
                blocks::register_layer_norm(params, &format!("{p}.{target}.ln2"), self.d);
            }
        }
    }
}

// ── State and supports ──────────────────────────────────────────────────

/// Query-frame features at one iteration; shapes never change across t.
#[derive(Clone)]
pub struct RefinementState {
    pub iteration: usize,
    /// [1 × d]
    pub verb_feature: Var,
    /// [m × d]
    pub role_features: Var,
    pub role_types: Vec<RoleId>,
}

impl RefinementState {
    /// Initial state from detached encoder output, as constants.
    pub fn from_frame(tape: &Tape, frame: &EncodedFrame) -> Result<RefinementState> {
        let m = frame.role_features.len();
        let d = frame.verb_feature.len();
        let mut flat = Vec::with_capacity(m * d);
        for f in &frame.role_features {
            flat.extend_from_slice(f);
        }
        Ok(RefinementState {
            iteration: 0,
            verb_feature: tape.leaf(Tensor::row(frame.verb_feature.clone())),
            role_features: tape.leaf(Tensor::new(vec![m, d], flat)?),
            role_types: frame.role_types.clone(),
        })
    }
}

/// A support frame's constant features on the tape.
#[derive(Clone)]
pub struct SupportFrame {
    /// [1 × d]
    pub verb_feature: Var,
    /// [m_s × d]
    pub role_features: Var,
    pub role_types: Vec<RoleId>,
}

impl SupportFrame {
    pub fn from_index(tape: &Tape, index: &FeatureIndex, set: &SupportSet) -> Result<Vec<SupportFrame>> {
        set.items
            .iter()
            .map(|item| {
                let e = index.entry(item.pos);
                let d = e.verb_feature.len();
                let mut flat = Vec::with_capacity(e.role_features.len() * d);
                for f in &e.role_features {
                    flat.extend_from_slice(f);
                }
                Ok(SupportFrame {
                    verb_feature: tape.leaf(Tensor::row(e.verb_feature.clone())),
                    role_features: tape.leaf(Tensor::new(vec![e.role_features.len(), d], flat)?),
                    role_types: e.role_types.clone(),
                })
            })
            .collect()
    }
}

// ── Messages ────────────────────────────────────────────────────────────

/// One message per entity of a frame.
#[derive(Clone)]
pub struct MessageBundle {
    /// [1 × d]
    pub verb: Var,
    /// [m × d]
    pub roles: Var,
}

/// Self-attention over [h_v, r_1⊕h_1, …, r_m⊕h_m] with iteration t's
/// parameters. The verb token enters bare; each noun token carries its
/// role embedding.
pub fn compute_messages(
    ctx: &FwdCtx,
    cfg: &DecoderCfg,
    t: usize,
    verb_feature: &Var,
    role_features: &Var,
    role_types: &[RoleId],
) -> Result<MessageBundle> {
    if role_types.is_empty() {
        return Err(Error::Input("message computation needs at least one role".into()));
    }
    if role_features.shape()[0] != role_types.len() {
        return Err(Error::Shape(format!(
            "{} role features for {} role types",
            role_features.shape()[0],
            role_types.len()
        )));
    }
    let embeds = role_query_rows(ctx, cfg.d, cfg.role_embed_dim, role_types)?;
    let nouns = role_features.add(&embeds)?;
    let x = Var::concat_rows(&[verb_feature.clone(), nouns])?;
    let y = blocks::mha(ctx, &format!("decoder.l{t}.msg"), &x, &x, cfg.heads, None, cfg.dropout)?;
    let n = y.shape()[0];
    Ok(MessageBundle { verb: y.slice_rows(0, 1)?, roles: y.slice_rows(1, n)? })
}

// ── Aggregation ─────────────────────────────────────────────────────────

/// Canonical operand order: values compared lexicographically. Identical
/// values are interchangeable, so the sort makes every aggregation a
/// fixed-order reduction regardless of how the caller ordered the list.
fn canonical_order(messages: &[Var]) -> Vec<Var> {
    let mut keyed: Vec<(Vec<f64>, Var)> =
        messages.iter().map(|m| (m.value().data().to_vec(), m.clone())).collect();
    keyed.sort_by(|a, b| {
        for (x, y) in a.0.iter().zip(&b.0) {
            match x.total_cmp(y) {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    keyed.into_iter().map(|(_, v)| v).collect()
}

/// Permutation-invariant combination of [1 × d] messages under iteration
/// t's parameters for the given refine target ("noun" or "verb").
pub fn aggregate(
    ctx: &FwdCtx,
    cfg: &DecoderCfg,
    t: usize,
    target: &str,
    messages: &[Var],
) -> Result<Var> {
    if messages.is_empty() {
        return Err(Error::Aggregation("no messages to aggregate".into()));
    }
    let ordered = canonical_order(messages);
    match cfg.aggregation {
        Aggregation::Sum => {
            let mut acc = ordered[0].clone();
            for m in &ordered[1..] {
                acc = acc.add(m)?;
            }
            Ok(acc)
        }
        Aggregation::Max => {
            let mut acc = ordered[0].clone();
            for m in &ordered[1..] {
                acc = acc.emax(m)?;
            }
            Ok(acc)
        }
        Aggregation::Mean => {
            let mut acc = ordered[0].clone();
            for m in &ordered[1..] {
                acc = acc.add(m)?;
            }
            Ok(acc.scale(1.0 / ordered.len() as f64))
        }
        Aggregation::Gated => {
            let prefix = format!("decoder.l{t}.{target}.agg");
            let mut acc: Option<Var> = None;
            for m in &ordered {
                let gate = blocks::linear(ctx, &format!("{prefix}.gate"), m)?.sigmoid();
                let value = blocks::linear(ctx, &format!("{prefix}.value"), m)?.tanh();
                let term = gate.mul(&value)?;
                acc = Some(match acc {
                    None => term,
                    Some(a) => a.add(&term)?,
                });
            }
            Ok(acc.expect("nonempty"))
        }
    }
}

// ── Refinement sublayers ────────────────────────────────────────────────

/// q = LN(h + p); h' = LN(q + FFN(q)), rows independent. `messages` is
/// either [1 × d] (broadcast) or [m × d] (one message per row).
fn refine(ctx: &FwdCtx, prefix: &str, features: &Var, messages: &Var) -> Result<Var> {
    let mixed = if messages.shape()[0] == features.shape()[0] {
        features.add(messages)?
    } else {
        features.add_row(messages)?
    };
    let q = blocks::layer_norm(ctx, &format!("{prefix}.ln1"), &mixed)?;
    let fed = blocks::ffn(ctx, &format!("{prefix}.ffn"), &q)?;
    blocks::layer_norm(ctx, &format!("{prefix}.ln2"), &q.add(&fed)?)
}

/// Noun update from one aggregated support-verb message shared by every
/// role slot.
pub fn refine_nouns(ctx: &FwdCtx, cfg: &DecoderCfg, t: usize, state: &RefinementState, p_v_all: &Var) -> Result<Var> {
    let _ = cfg;
    refine(ctx, &format!("decoder.l{t}.noun"), &state.role_features, p_v_all)
}

/// Verb update from the aggregated own-noun message.
pub fn refine_verb(ctx: &FwdCtx, cfg: &DecoderCfg, t: usize, state: &RefinementState, p_n_all: &Var) -> Result<Var> {
    let _ = cfg;
    refine(ctx, &format!("decoder.l{t}.verb"), &state.verb_feature, p_n_all)
}

// ── The decode loop ─────────────────────────────────────────────────────

/// Rows of a [m × d] Var as m [1 × d] Vars.
fn split_rows(x: &Var) -> Result<Vec<Var>> {
    (0..x.shape()[0]).map(|i| x.slice_rows(i, i + 1)).collect()
}

/// Support verb messages under iteration t's parameters. Support noun
/// messages are computed by the same attention but never consumed: only
/// the verb row leaves this function.
fn support_verb_messages(ctx: &FwdCtx, cfg: &DecoderCfg, t: usize, supports: &[SupportFrame]) -> Result<Vec<Var>> {
    supports
        .iter()
        .map(|s| Ok(compute_messages(ctx, cfg, t, &s.verb_feature, &s.role_features, &s.role_types)?.verb))
        .collect()
}

/// Runs T refinement iterations and returns every state along the way:
/// index 0 is the input, index T the final state. With an empty support
/// set the query's own verb message stands in for the missing support
/// messages (logged once per decode).
pub fn decode_steps(
    ctx: &FwdCtx,
    cfg: &DecoderCfg,
    state: RefinementState,
    supports: &[SupportFrame],
) -> Result<Vec<RefinementState>> {
    if supports.is_empty() && cfg.iterations > 0 {
        log::warn!("empty support set: refining nouns from the query's own verb message");
    }
    let mut states = Vec::with_capacity(cfg.iterations + 1);
    states.push(state);
    for t in 0..cfg.iterations {
        let prev = states.last().expect("seeded with the input state").clone();
        let next = if cfg.alternate {
            decode_iteration_alternate(ctx, cfg, t, prev, supports)?
        } else {
            decode_iteration_simultaneous(ctx, cfg, t, prev, supports)?
        };
        states.push(next);
    }
    Ok(states)
}

/// Final state of `decode_steps`.
pub fn decode(
    ctx: &FwdCtx,
    cfg: &DecoderCfg,
    state: RefinementState,
    supports: &[SupportFrame],
) -> Result<RefinementState> {
    Ok(decode_steps(ctx, cfg, state, supports)?.pop().expect("never empty"))
}

fn noun_message(ctx: &FwdCtx, cfg: &DecoderCfg, t: usize, state: &RefinementState, supports: &[SupportFrame]) -> Result<Var> {
    let verb_msgs = if supports.is_empty() {
        let own = compute_messages(ctx, cfg, t, &state.verb_feature, &state.role_features, &state.role_types)?;
        vec![own.verb]
    } else {
        support_verb_messages(ctx, cfg, t, supports)?
    };
    aggregate(ctx, cfg, t, "noun", &verb_msgs)
}

fn decode_iteration_alternate(
    ctx: &FwdCtx,
    cfg: &DecoderCfg,
    t: usize,
    state: RefinementState,
    supports: &[SupportFrame],
) -> Result<RefinementState> {
    let (verb_feature, role_features) = match cfg.order {
        RefineOrder::NounFirst => {
            let p_v_all = noun_message(ctx, cfg, t, &state, supports)?;
            let nouns = refine_nouns(ctx, cfg, t, &state, &p_v_all)?;
            // messages recomputed from the refined nouns before the verb moves
            let refreshed =
                compute_messages(ctx, cfg, t, &state.verb_feature, &nouns, &state.role_types)?;
            let p_n_all = aggregate(ctx, cfg, t, "verb", &split_rows(&refreshed.roles)?)?;
            let verb = refine_verb(ctx, cfg, t, &state, &p_n_all)?;
            (verb, nouns)
        }
        RefineOrder::VerbFirst => {
            let own = compute_messages(ctx, cfg, t, &state.verb_feature, &state.role_features, &state.role_types)?;
            let p_n_all = aggregate(ctx, cfg, t, "verb", &split_rows(&own.roles)?)?;
            let verb = refine_verb(ctx, cfg, t, &state, &p_n_all)?;
            let p_v_all = noun_message(ctx, cfg, t, &state, supports)?;
            let nouns = refine_nouns(ctx, cfg, t, &state, &p_v_all)?;
            (verb, nouns)
        }
    };
    Ok(RefinementState { iteration: t + 1, verb_feature, role_features, role_types: state.role_types })
}

/// The non-alternate ablation: verb from support verb messages, each noun
/// from its sibling noun messages (its own when the frame has one role),
/// all from one message computation.
fn decode_iteration_simultaneous(
    ctx: &FwdCtx,
    cfg: &DecoderCfg,
    t: usize,
    state: RefinementState,
    supports: &[SupportFrame],
) -> Result<RefinementState> {
    let own = compute_messages(ctx, cfg, t, &state.verb_feature, &state.role_features, &state.role_types)?;
    let own_roles = split_rows(&own.roles)?;

    let verb_msgs = if supports.is_empty() {
        vec![own.verb.clone()]
    } else {
        support_verb_messages(ctx, cfg, t, supports)?
    };
    let p_for_verb = aggregate(ctx, cfg, t, "verb", &verb_msgs)?;
    let verb = refine_verb(ctx, cfg, t, &state, &p_for_verb)?;

    let m = own_roles.len();
    let mut per_slot = Vec::with_capacity(m);
    for i in 0..m {
        let siblings: Vec<Var> = if m == 1 {
            vec![own_roles[0].clone()]
        } else {
            own_roles.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v.clone()).collect()
        };
        per_slot.push(aggregate(ctx, cfg, t, "noun", &siblings)?);
    }
    let noun_messages = Var::concat_rows(&per_slot)?;
    let nouns = refine(ctx, &format!("decoder.l{t}.noun"), &state.role_features, &noun_messages)?;

    Ok(RefinementState { iteration: t + 1, verb_feature: verb, role_features: nouns, role_types: state.role_types })
}

// ── Prediction heads ────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct HeadsCfg {
    pub d: usize,
    /// Hidden width of the verb and noun MLPs.
    pub hidden: usize,
    /// Hidden width of the three-layer box regressor.
    pub box_hidden: usize,
    pub verb_count: usize,
    /// Noun classes including the empty filler.
    pub noun_count: usize,
}

impl HeadsCfg {
    pub fn register(&self, params: &mut ParamSet, seed: u64) {
        blocks::register_linear(params, "heads.verb.in", self.d, self.hidden, seed);
        blocks::register_linear(params, "heads.verb.out", self.hidden, self.verb_count, seed);
        blocks::register_linear(params, "heads.noun.in", self.d, self.hidden, seed);
        blocks::register_linear(params, "heads.noun.out", self.hidden, self.noun_count, seed);
        blocks::register_linear(params, "heads.box.l0", self.d, self.box_hidden, seed);
        blocks::register_linear(params, "heads.box.l1", self.box_hidden, self.box_hidden, seed);
        blocks::register_linear(params, "heads.box.l2", self.box_hidden, 4, seed);
        blocks::register_linear(params, "heads.presence", self.d, 1, seed);
    }
}

/// Head outputs still on the tape; rows align with the state's role order.
#[derive(Clone)]
pub struct HeadOutputs {
    /// [1 × |V|]
    pub verb_logits: Var,
    /// [m × noun classes]
    pub noun_logits: Var,
    /// [m × 4] (cx, cy, w, h), sigmoid-bounded.
    pub boxes: Var,
    /// [m × 1]
    pub presence_logits: Var,
}

/// `dropout` fires on the hidden activations of each head in train mode.
pub fn predict_heads(ctx: &FwdCtx, state: &RefinementState, dropout: f64) -> Result<HeadOutputs> {
    let verb_hidden = blocks::linear(ctx, "heads.verb.in", &state.verb_feature)?.relu();
    let verb_hidden = ctx.dropout(&verb_hidden, dropout, "heads.verb.drop");
    let verb_logits = blocks::linear(ctx, "heads.verb.out", &verb_hidden)?;
    let noun_hidden = blocks::linear(ctx, "heads.noun.in", &state.role_features)?.relu();
    let noun_hidden = ctx.dropout(&noun_hidden, dropout, "heads.noun.drop");
    let noun_logits = blocks::linear(ctx, "heads.noun.out", &noun_hidden)?;
    let b0 = blocks::linear(ctx, "heads.box.l0", &state.role_features)?.relu();
    let b1 = blocks::linear(ctx, "heads.box.l1", &b0)?.relu();
    let b1 = ctx.dropout(&b1, dropout, "heads.box.drop");
    let boxes = blocks::linear(ctx, "heads.box.l2", &b1)?.sigmoid();
    let presence_logits = blocks::linear(ctx, "heads.presence", &state.role_features)?;
    Ok(HeadOutputs { verb_logits, noun_logits, boxes, presence_logits })
}

/// Detached per-frame prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct RolePrediction {
    pub role: RoleId,
    pub noun_logits: Vec<f64>,
    /// Normalized (cx, cy, w, h) in [0, 1].
    pub bbox: [f64; 4],
    pub presence_logit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub verb_logits: Vec<f64>,
    pub roles: Vec<RolePrediction>,
}

impl FramePrediction {
    pub fn detach(heads: &HeadOutputs, role_types: &[RoleId]) -> FramePrediction {
        let nouns = heads.noun_logits.value();
        let boxes = heads.boxes.value();
        let presence = heads.presence_logits.value();
        let roles = role_types
            .iter()
            .enumerate()
            .map(|(i, &role)| RolePrediction {
                role,
                noun_logits: nouns.row_slice(i).to_vec(),
                bbox: boxes.row_slice(i).try_into().expect("4 box coordinates"),
                presence_logit: presence.at2(i, 0),
            })
            .collect();
        FramePrediction { verb_logits: heads.verb_logits.value().data().to_vec(), roles }
    }
}
