//! Encoder: turns an image into a provisional verb and one feature per
//! semantic role, postponing the final verb decision.
//!
//! Stage one runs self-attention over a learned verb token plus patch
//! tokens, yielding the attended verb feature e_v (which a linear head
//! classifies into the pseudo verb) and attended image features E_img.
//! Stage two fetches the pseudo verb's role embeddings and cross-attends
//! [e_v, r_1..r_m] against E_img plus positions, yielding the frame
//! features the decoder refines.
//!
//! Parameters split into two namespaces: `encoder.frontend.*` (everything
//! up to and including stage one and the pseudo-verb head) and
//! `encoder.roles.*` (role embeddings and the cross-attention stack).
//! Decoder training freezes the frontend prefix and feeds stage-one
//! outputs back in as constants, so gradients reach the role stage only.

use std::io::Read;
use std::path::Path;

use crate::blocks::{self, CrossAttentionStack, SelfAttentionStack, StackCfg};
use crate::dataset::{Lexicon, RoleId, VerbId};
use crate::error::{Error, Result};
use crate::params::{FwdCtx, ParamSet};
use crate::raster::GrayImage;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct EncoderCfg {
    /// Model width.
    pub d: usize,
    pub heads: usize,
    /// Layers per attention stack.
    pub layers: usize,
    pub ffn_hidden: usize,
    pub dropout: f64,
    /// Feed-forward width and dropout of the role cross-attention stack,
    /// which the full-scale schedule sets apart from the frontend's.
    pub ffn_roles: usize,
    pub dropout_roles: f64,
    /// Side of the square, non-overlapping patches.
    pub patch_stride: usize,
    /// Largest patch grid side the positional table covers.
    pub grid_max: usize,
    /// Channels out of the feature extractor (and into the token
    /// projection); external feature maps must match it.
    pub feature_channels: usize,
    /// Role embedding width; a learned projection maps it to `d` when
    /// they differ.
    pub role_embed_dim: usize,
}

impl EncoderCfg {
    pub fn stack(&self) -> StackCfg {
        StackCfg {
            d: self.d,
            heads: self.heads,
            layers: self.layers,
            ffn_hidden: self.ffn_hidden,
            dropout: self.dropout,
        }
    }

    pub fn roles_stack(&self) -> StackCfg {
        StackCfg { ffn_hidden: self.ffn_roles, dropout: self.dropout_roles, ..self.stack() }
    }

    /// Registers every encoder parameter.
    pub fn register(&self, params: &mut ParamSet, role_count: usize, verb_count: usize, seed: u64) {
        let patch_in = self.patch_stride * self.patch_stride;
        blocks::register_linear(params, "encoder.frontend.patch", patch_in, self.feature_channels, seed);
        blocks::register_linear(params, "encoder.frontend.token", self.feature_channels, self.d, seed);
        params.add_table("encoder.frontend.pos", self.grid_max * self.grid_max, self.d, 0.02, seed);
        params.add_table("encoder.frontend.verb_token", 1, self.d, 0.02, seed);
        SelfAttentionStack::register(params, "encoder.frontend.stack", self.stack(), seed);
        blocks::register_linear(params, "encoder.frontend.verb_cls", self.d, verb_count, seed);
        params.add_table("encoder.roles.embed", role_count, self.role_embed_dim, 0.02, seed);
        if self.role_embed_dim != self.d {
            blocks::register_linear(params, "encoder.roles.proj", self.role_embed_dim, self.d, seed);
        }
        CrossAttentionStack::register(params, "encoder.roles.stack", self.roles_stack(), seed);
    }
}

/// Parameter prefix frozen while the decoder trains.
pub const FRONTEND_PREFIX: &str = "encoder.frontend.";

// ── Feature extraction ──────────────────────────────────────────────────

/// Extractor output still on the tape: one token per grid cell, row-major.
#[derive(Clone)]
pub struct FeatureVar {
    /// [grid_h·grid_w × channels]
    pub tokens: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

/// Flattens non-overlapping stride×stride tiles into rows, row-major over
/// the grid, pixels row-major inside each tile.
pub fn patch_rows(img: &GrayImage, stride: usize) -> Result<Tensor> {
    if stride == 0 || img.width() % stride != 0 || img.height() % stride != 0 {
        return Err(Error::Input(format!(
            "image {}x{} not divisible into {stride}x{stride} patches",
            img.width(),
            img.height()
        )));
    }
    let (gw, gh) = (img.width() / stride, img.height() / stride);
    let mut data = Vec::with_capacity(gw * gh * stride * stride);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..stride {
                for px in 0..stride {
                    data.push(img.get(gx * stride + px, gy * stride + py));
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, stride * stride], data)
}

/// The default extractor: patch flattening plus a learned projection to
/// the feature width. Deterministic per (parameters, image).
pub fn extract_features(ctx: &FwdCtx, cfg: &EncoderCfg, img: &GrayImage) -> Result<FeatureVar> {
    let patches = patch_rows(img, cfg.patch_stride)?;
    let grid_h = img.height() / cfg.patch_stride;
    let grid_w = img.width() / cfg.patch_stride;
    let x = ctx.tape.leaf(patches);
    let tokens = blocks::linear(ctx, "encoder.frontend.patch", &x)?;
    Ok(FeatureVar { tokens, grid_h, grid_w })
}

/// Detached c×h×w feature map; the on-disk interchange form that lets a
/// real backbone replace the patch extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    /// values[(c·height + y)·width + x]
    values: Vec<f64>,
}

const FMAP_MAGIC: &[u8; 8] = b"GSRFMAP1";

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, values: Vec<f64>) -> Result<FeatureMap> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Input(format!("feature map extents {channels}x{height}x{width} must be positive")));
        }
        if values.len() != channels * height * width {
            return Err(Error::Input(format!(
                "feature map carries {} values, extents say {}",
                values.len(),
                channels * height * width
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Input("non-finite feature map value".into()));
        }
        Ok(FeatureMap { channels, height, width, values })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Token rows [h·w × c], row-major over the grid: the layout the
    /// encoder consumes.
    pub fn to_token_rows(&self) -> Tensor {
        let (c, h, w) = (self.channels, self.height, self.width);
        let mut data = Vec::with_capacity(c * h * w);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    data.push(self.values[(ch * h + y) * w + x]);
                }
            }
        }
        Tensor::new(vec![h * w, c], data).expect("sized by construction")
    }

    pub fn from_token_rows(rows: &Tensor, grid_h: usize, grid_w: usize) -> Result<FeatureMap> {
        if rows.rows() != grid_h * grid_w {
            return Err(Error::Shape(format!("{} token rows for a {grid_h}x{grid_w} grid", rows.rows())));
        }
        let c = rows.cols();
        let mut values = vec![0.0; c * grid_h * grid_w];
        for y in 0..grid_h {
            for x in 0..grid_w {
                let row = rows.row_slice(y * grid_w + x);
                for (ch, &v) in row.iter().enumerate() {
                    values[(ch * grid_h + y) * grid_w + x] = v;
                }
            }
        }
        FeatureMap::new(c, grid_h, grid_w, values)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(32 + self.values.len() * 8);
        out.extend_from_slice(FMAP_MAGIC);
        for extent in [self.channels, self.height, self.width] {
            out.extend_from_slice(&(extent as u64).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<FeatureMap> {
        let mut file = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let fail = |m: &str| Error::Input(format!("{}: {m}", path.display()));
        if bytes.len() < 32 || &bytes[..8] != FMAP_MAGIC {
            return Err(fail("not a feature map file"));
        }
        let mut extents = [0usize; 3];
        for (i, e) in extents.iter_mut().enumerate() {
            let off = 8 + i * 8;
            *e = u64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes")) as usize;
        }
        let [c, h, w] = extents;
        let need = c.checked_mul(h).and_then(|p| p.checked_mul(w)).ok_or_else(|| fail("extent overflow"))?;
        if bytes.len() != 32 + need * 8 {
            return Err(fail("truncated or oversized payload"));
        }
        let values: Vec<f64> = bytes[32..]
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
            .collect();
        FeatureMap::new(c, h, w, values)
    }
}

// ── Tokenization ────────────────────────────────────────────────────────

/// Positional rows for a grid_h×grid_w grid: the top-left block of the
/// positional table, so a rescaled image reuses the positions it overlaps.
pub fn positional_rows(ctx: &FwdCtx, cfg: &EncoderCfg, grid_h: usize, grid_w: usize) -> Result<Var> {
    if grid_h == 0 || grid_w == 0 || grid_h > cfg.grid_max || grid_w > cfg.grid_max {
        return Err(Error::Input(format!(
            "patch grid {grid_h}x{grid_w} outside the positional table ({} max per side)",
            cfg.grid_max
        )));
    }
    let mut ids = Vec::with_capacity(grid_h * grid_w);
    for y in 0..grid_h {
        for x in 0..grid_w {
            ids.push(y * cfg.grid_max + x);
        }
    }
    ctx.p("encoder.frontend.pos")?.select_rows(&ids)
}

/// Projects feature tokens to model width (the 1×1 convolution) and adds
/// positional rows.
pub fn tokenize(ctx: &FwdCtx, cfg: &EncoderCfg, features: &FeatureVar) -> Result<Var> {
    if features.tokens.shape()[1] != cfg.feature_channels {
        return Err(Error::Shape(format!(
            "feature tokens are {}-wide, configuration says {}",
            features.tokens.shape()[1],
            cfg.feature_channels
        )));
    }
    let x = blocks::linear(ctx, "encoder.frontend.token", &features.tokens)?;
    let pos = positional_rows(ctx, cfg, features.grid_h, features.grid_w)?;
    x.add(&pos)
}

// ── Stage one: verb ─────────────────────────────────────────────────────

/// Self-attention over [verb token, patch tokens]; returns (e_v [1×d],
/// E_img [hw×d]).
pub fn encode_verb(ctx: &FwdCtx, cfg: &EncoderCfg, tokens: &Var) -> Result<(Var, Var)> {
    if tokens.shape()[0] == 0 {
        return Err(Error::Input("no patch tokens".into()));
    }
    let verb_token = ctx.p("encoder.frontend.verb_token")?;
    let x = Var::concat_rows(&[verb_token, tokens.clone()])?;
    let stack = SelfAttentionStack::attach("encoder.frontend.stack", cfg.stack());
    let y = stack.forward(ctx, &x, None)?;
    let n = y.shape()[0];
    Ok((y.slice_rows(0, 1)?, y.slice_rows(1, n)?))
}

pub fn verb_logits(ctx: &FwdCtx, ev: &Var) -> Result<Var> {
    blocks::linear(ctx, "encoder.frontend.verb_cls", ev)
}

/// Argmax with ties broken toward the lowest verb id.
pub fn argmax_verb(logits: &[f64]) -> VerbId {
    let mut best = 0usize;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    VerbId(best as u32)
}

/// Ids of the k highest logits, descending, ties toward lower id.
pub fn topk_verbs(logits: &[f64], k: usize) -> Vec<VerbId> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.into_iter().take(k).map(|i| VerbId(i as u32)).collect()
}

// ── Stage two: roles ────────────────────────────────────────────────────

/// Role-stage outputs still on the tape.
#[derive(Clone)]
pub struct RoleEncoding {
    /// h_v: the verb feature after attending the image through its roles.
    pub verb_feature: Var,
    /// [m × d], ordered per the conditioning verb's lexicon entry.
    pub role_features: Var,
    pub role_types: Vec<RoleId>,
}

/// Embeds the given role types at model width `d` (via the learned
/// projection when the table is narrower). Shared with the decoder, whose
/// messages add the same embeddings to noun tokens.
pub fn role_query_rows(ctx: &FwdCtx, d: usize, role_embed_dim: usize, role_types: &[RoleId]) -> Result<Var> {
    let ids: Vec<usize> = role_types.iter().map(|r| r.idx()).collect();
    let rows = ctx.p("encoder.roles.embed")?.select_rows(&ids)?;
    if role_embed_dim != d {
        blocks::linear(ctx, "encoder.roles.proj", &rows)
    } else {
        Ok(rows)
    }
}

/// Cross-attention with queries [e_v, r_1..r_m] against E_img ⊕ positions.
/// Each query row is processed independently of the others, so swapping two
/// role queries swaps exactly the corresponding outputs.
pub fn encode_role_queries(
    ctx: &FwdCtx,
    cfg: &EncoderCfg,
    ev: &Var,
    img: &Var,
    pos: &Var,
    role_types: &[RoleId],
) -> Result<RoleEncoding> {
    if role_types.is_empty() {
        return Err(Error::Input("a frame needs at least one role".into()));
    }
    let embeds = role_query_rows(ctx, cfg.d, cfg.role_embed_dim, role_types)?;
    let queries = Var::concat_rows(&[ev.clone(), embeds])?;
    let memory = img.add(pos)?;
    let stack = CrossAttentionStack::attach("encoder.roles.stack", cfg.roles_stack());
    let y = stack.forward(ctx, &queries, &memory, None)?;
    let n = y.shape()[0];
    Ok(RoleEncoding {
        verb_feature: y.slice_rows(0, 1)?,
        role_features: y.slice_rows(1, n)?,
        role_types: role_types.to_vec(),
    })
}

/// Role stage conditioned on a verb: fetches its lexicon role set.
pub fn encode_roles(
    ctx: &FwdCtx,
    cfg: &EncoderCfg,
    ev: &Var,
    img: &Var,
    pos: &Var,
    verb: VerbId,
    lexicon: &Lexicon,
) -> Result<RoleEncoding> {
    if verb.idx() >= lexicon.verb_count() {
        return Err(Error::Lexicon(format!("verb id {verb} outside the {}-verb lexicon", lexicon.verb_count())));
    }
    encode_role_queries(ctx, cfg, ev, img, pos, lexicon.roles_of(verb))
}

// ── Detached frame ──────────────────────────────────────────────────────

/// Everything downstream consumers need, off the tape: retrieval indexes
/// these, and a decode conditioned on another verb restarts from `ev` and
/// `image_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedFrame {
    pub pseudo_verb: VerbId,
    pub verb_logits: Vec<f64>,
    /// e_v: stage-one verb feature, the role-stage query seed.
    pub ev: Vec<f64>,
    /// h_v: role-stage verb feature.
    pub verb_feature: Vec<f64>,
    /// m role features, ordered per `role_types`.
    pub role_features: Vec<Vec<f64>>,
    pub role_types: Vec<RoleId>,
    /// E_img token rows [hw × d].
    pub image_features: Tensor,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl EncodedFrame {
    pub fn detach(
        pseudo_verb: VerbId,
        logits: &Var,
        ev: &Var,
        img: &Var,
        roles: &RoleEncoding,
        grid_h: usize,
        grid_w: usize,
    ) -> EncodedFrame {
        let feats = roles.role_features.value();
        EncodedFrame {
            pseudo_verb,
            verb_logits: logits.value().data().to_vec(),
            ev: ev.value().data().to_vec(),
            verb_feature: roles.verb_feature.value().data().to_vec(),
            role_features: (0..feats.rows()).map(|i| feats.row_slice(i).to_vec()).collect(),
            role_types: roles.role_types.clone(),
            image_features: img.value(),
            grid_h,
            grid_w,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SynthSpec};
    use crate::tape::{grad_check, Tape};

    fn toy_cfg() -> EncoderCfg {
        EncoderCfg {
            d: 8,
            heads: 2,
            layers: 1,
            ffn_hidden: 16,
            dropout: 0.0,
            ffn_roles: 16,
            dropout_roles: 0.0,
            patch_stride: 8,
            grid_max: 2,
            feature_channels: 8,
            role_embed_dim: 8,
        }
    }

    fn toy_setup() -> (EncoderCfg, ParamSet, Lexicon) {
        let cfg = toy_cfg();
        let ds = generate(&SynthSpec {
            verbs: 3,
            arities: vec![1, 3, 2],
            images_per_verb: 1,
            image_size: 16,
            ..SynthSpec::default()
        })
        .unwrap();
        let mut params = ParamSet::new();
        cfg.register(&mut params, ds.lexicon.role_count(), ds.lexicon.verb_count(), 11);
        (cfg, params, ds.lexicon)
    }

    fn gradient_image() -> GrayImage {
        let mut img = GrayImage::new(16, 16);
        for y in 0..16 {
            for x in 0..16 {
                img.set(x, y, (x + 16 * y) as f64 / 256.0);
            }
        }
        img
    }

    #[test]
    fn patching_arithmetic_matches_grid() {
        let img = GrayImage::new(32, 32);
        let rows = patch_rows(&img, 8).unwrap();
        assert_eq!(rows.rows(), 16);
        assert_eq!(rows.cols(), 64);
        assert!(patch_rows(&img, 5).is_err());
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_features() {
        let (cfg, params, _) = toy_setup();
        let ctx = FwdCtx::eval(&params);
        let fv = extract_features(&ctx, &cfg, &GrayImage::new(16, 16)).unwrap();
        assert!(fv.tokens.value().data().iter().all(|&v| v == 0.0));
        let map = FeatureMap::from_token_rows(&fv.tokens.value(), fv.grid_h, fv.grid_w).unwrap();
        assert!(map.to_token_rows().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn extraction_replays_bit_identically() {
        let img = gradient_image();
        let run = || {
            let (cfg, params, _) = toy_setup();
            let ctx = FwdCtx::eval(&params);
            extract_features(&ctx, &cfg, &img).unwrap().tokens.value()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn single_patch_change_moves_a_single_token() {
        let (cfg, params, _) = toy_setup();
        let ctx = FwdCtx::eval(&params);
        let img_a = gradient_image();
        let mut img_b = img_a.clone();
        img_b.set(9, 2, 0.9); // inside patch (1, 0) of the 2x2 grid
        let ta = tokenize(&ctx, &cfg, &extract_features(&ctx, &cfg, &img_a).unwrap()).unwrap().value();
        let tb = tokenize(&ctx, &cfg, &extract_features(&ctx, &cfg, &img_b).unwrap()).unwrap().value();
        for row in 0..4 {
            let same = ta.row_slice(row) == tb.row_slice(row);
            assert_eq!(same, row != 1, "token {row}");
        }
    }

    #[test]
    fn feature_map_file_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fmap");
        let values: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let map = FeatureMap::new(4, 3, 2, values).unwrap();
        map.write(&path).unwrap();
        assert_eq!(FeatureMap::read(&path).unwrap(), map);

        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(FeatureMap::read(&path).is_err());
        assert!(FeatureMap::new(4, 3, 2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn verb_stage_shapes_and_token_count() {
        let (cfg, params, _) = toy_setup();
        let ctx = FwdCtx::eval(&params);
        let tokens = tokenize(&ctx, &cfg, &extract_features(&ctx, &cfg, &gradient_image()).unwrap()).unwrap();
        let (ev, img) = encode_verb(&ctx, &cfg, &tokens).unwrap();
        assert_eq!(ev.shape(), vec![1, 8]);
        assert_eq!(img.shape(), vec![4, 8]);
    }

    /// Moving patches together with their positional rows permutes E_img
    /// and leaves e_v numerically unchanged (summation order shifts, so
    /// the tolerance is ulp-level rather than bitwise).
    #[test]
    fn verb_feature_ignores_joint_spatial_permutation() {
        let (cfg, params, _) = toy_setup();
        let ctx = FwdCtx::eval(&params);
        let fv = extract_features(&ctx, &cfg, &gradient_image()).unwrap();
        let tokens = tokenize(&ctx, &cfg, &fv).unwrap();
        let perm = [2usize, 0, 3, 1];
        let shuffled = tokens.select_rows(&perm).unwrap();
        let (ev_a, _) = encode_verb(&ctx, &cfg, &tokens).unwrap();
        let (ev_b, _) = encode_verb(&ctx, &cfg, &shuffled).unwrap();
        let (va, vb) = (ev_a.value(), ev_b.value());
        for (a, b) in va.data().iter().zip(vb.data()) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    /// A probe loss on e_v must see gradient from every patch token.
    #[test]
    fn every_patch_token_reaches_the_verb_feature() {
        let (cfg, params, _) = toy_setup();
        let tape = Tape::new();
        let ctx = FwdCtx::on_tape(tape.clone(), &params);
        let fv = extract_features(&ctx, &cfg, &gradient_image()).unwrap();
        let tokens = tokenize(&ctx, &cfg, &fv).unwrap();
        let (ev, _) = encode_verb(&ctx, &cfg, &tokens).unwrap();
        tape.backward(&ev.sum_all()).unwrap();
        let g = tape.grad(&fv.tokens).expect("patch tokens reached");
        for row in 0..g.rows() {
            let norm: f64 = g.row_slice(row).iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "token {row} disconnected");
        }
    }

    #[test]
    fn pseudo_verb_argmax_and_ties() {
        assert_eq!(argmax_verb(&[0.1, 2.0, -1.0]), VerbId(1));
        assert_eq!(argmax_verb(&[1.0, 1.0, 0.0]), VerbId(0));
        let shifted: Vec<f64> = [0.1, 2.0, -1.0].iter().map(|v| v + 7.5).collect();
        assert_eq!(argmax_verb(&shifted), VerbId(1));
        assert_eq!(topk_verbs(&[0.3, 0.3, 0.9], 2), vec![VerbId(2), VerbId(0)]);
    }

    #[test]
    fn role_count_follows_the_lexicon() {
        let (cfg, params, lexicon) = toy_setup();
        let ctx = FwdCtx::eval(&params);
        let fv = extract_features(&ctx, &cfg, &gradient_image()).unwrap();
        let tokens = tokenize(&ctx, &cfg, &fv).unwrap();
        let (ev, img) = encode_verb(&ctx, &cfg, &tokens).unwrap();
        let pos = positional_rows(&ctx, &cfg, fv.grid_h, fv.grid_w).unwrap();
        let three_roles = (0..lexicon.verb_count() as u32)
            .map(VerbId)
            .find(|&v| lexicon.arity(v) == 3)
            .unwrap();
        let enc = encode_roles(&ctx, &cfg, &ev, &img, &pos, three_roles, &lexicon).unwrap();
        assert_eq!(enc.role_features.shape(), vec![3, 8]);
        assert_eq!(enc.role_types, lexicon.roles_of(three_roles));
        assert!(encode_roles(&ctx, &cfg, &ev, &img, &pos, VerbId(99), &lexicon).is_err());
    }

    #[test]
    fn distinct_role_types_give_distinct_features() {
        let (cfg, params, _) = toy_setup();
        let ctx = FwdCtx::eval(&params);
        let fv = extract_features(&ctx, &cfg, &gradient_image()).unwrap();
        let tokens = tokenize(&ctx, &cfg, &fv).unwrap();
        let (ev, img) = encode_verb(&ctx, &cfg, &tokens).unwrap();
        let pos = positional_rows(&ctx, &cfg, fv.grid_h, fv.grid_w).unwrap();
        let enc = encode_role_queries(&ctx, &cfg, &ev, &img, &pos, &[RoleId(0), RoleId(1)]).unwrap();
        let v = enc.role_features.value();
        assert_ne!(v.row_slice(0), v.row_slice(1));
    }

    /// Queries attend the memory independently, so swapping two role
    /// queries swaps exactly those two output rows, bit for bit.
    #[test]
    fn swapping_role_queries_swaps_outputs_exactly() {
        let (cfg, params, _) = toy_setup();
        let ctx = FwdCtx::eval(&params);
        let fv = extract_features(&ctx, &cfg, &gradient_image()).unwrap();
        let tokens = tokenize(&ctx, &cfg, &fv).unwrap();
        let (ev, img) = encode_verb(&ctx, &cfg, &tokens).unwrap();
        let pos = positional_rows(&ctx, &cfg, fv.grid_h, fv.grid_w).unwrap();
        let ab = encode_role_queries(&ctx, &cfg, &ev, &img, &pos, &[RoleId(0), RoleId(2), RoleId(1)]).unwrap();
        let ba = encode_role_queries(&ctx, &cfg, &ev, &img, &pos, &[RoleId(1), RoleId(2), RoleId(0)]).unwrap();
        let a = ab.role_features.value();
        let b = ba.role_features.value();
        assert_eq!(a.row_slice(0), b.row_slice(2));
        assert_eq!(a.row_slice(1), b.row_slice(1));
        assert_eq!(a.row_slice(2), b.row_slice(0));
        assert_eq!(ab.verb_feature.value().data(), ba.verb_feature.value().data());
    }

    /// End-to-end: feature tokens → tokenize → both stages → scalar probe.
    #[test]
    fn both_stages_pass_grad_check_end_to_end() {
        let (cfg, params, _) = toy_setup();
        let x0 = {
            let mut rng = crate::rng::CounterRng::keyed(&[5, 5]);
            Tensor::from_fn(vec![4, 8], |_| rng.uniform(-0.5, 0.5))
        };
        let err = grad_check(
            |tape, x| {
                let ctx = FwdCtx::on_tape(tape.clone(), &params);
                let fv = FeatureVar { tokens: x.clone(), grid_h: 2, grid_w: 2 };
                let tokens = tokenize(&ctx, &cfg, &fv)?;
                let (ev, img) = encode_verb(&ctx, &cfg, &tokens)?;
                let pos = positional_rows(&ctx, &cfg, 2, 2)?;
                let enc = encode_role_queries(&ctx, &cfg, &ev, &img, &pos, &[RoleId(0), RoleId(1)])?;
                let probe = enc.verb_feature.sum_all().add(&enc.role_features.mean_all())?;
                verb_logits(&ctx, &ev)?.mean_all().add(&probe)
            },
            &x0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn full_encode_replays_bit_identically_across_param_rebuilds() {
        let img = gradient_image();
        let run = || {
            let (cfg, params, lexicon) = toy_setup();
            let ctx = FwdCtx::eval(&params);
            let fv = extract_features(&ctx, &cfg, &img).unwrap();
            let tokens = tokenize(&ctx, &cfg, &fv).unwrap();
            let (ev, eimg) = encode_verb(&ctx, &cfg, &tokens).unwrap();
            let logits = verb_logits(&ctx, &ev).unwrap();
            let pseudo = argmax_verb(&logits.value().data());
            let pos = positional_rows(&ctx, &cfg, fv.grid_h, fv.grid_w).unwrap();
            let enc = encode_roles(&ctx, &cfg, &ev, &eimg, &pos, pseudo, &lexicon).unwrap();
            EncodedFrame::detach(pseudo, &logits, &ev, &eimg, &enc, fv.grid_h, fv.grid_w)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn oversized_grid_is_rejected() {
        let (cfg, params, _) = toy_setup();
        let ctx = FwdCtx::eval(&params);
        assert!(positional_rows(&ctx, &cfg, 3, 2).is_err());
    }
}
