//! One parameter set behind the whole pipeline: encoder, retrieval
//! index, refinement decoder, prediction heads. Owns checkpoint
//! round-trips and the encode entry points everything else builds on.

use std::path::Path;

use crate::config::RunConfig;
use crate::dataset::{Dataset, ImageRecord, Lexicon, VerbId};
use crate::encoder::{self, EncodedFrame, RoleEncoding};
use crate::error::{Error, Result};
use crate::params::{FwdCtx, ParamSet};
use crate::raster::GrayImage;
use crate::retrieval::{FeatureIndex, IndexEntry};
use crate::tape::Var;
use crate::tensor::Tensor;

pub struct Model {
    pub cfg: RunConfig,
    pub lexicon: Lexicon,
    pub params: ParamSet,
}

/// Stage-one outputs still on the tape.
pub struct StageOne {
    /// e_v [1 × d]
    pub ev: Var,
    /// E_img [hw × d]
    pub image: Var,
    /// [1 × |V|]
    pub logits: Var,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Model {
    /// Fresh parameters for the configured architecture.
    pub fn new(cfg: &RunConfig, lexicon: &Lexicon) -> Result<Model> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        cfg.encoder_cfg().register(&mut params, lexicon.role_count(), lexicon.verb_count(), cfg.seed);
        cfg.decoder_cfg().register(&mut params, cfg.seed);
        cfg.heads_cfg(lexicon.verb_count(), lexicon.noun_count()).register(&mut params, cfg.seed);
        Ok(Model { cfg: cfg.clone(), lexicon: lexicon.clone(), params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    /// Loads a checkpoint and verifies it matches the configured
    /// architecture name-for-name and shape-for-shape.
    pub fn load(cfg: &RunConfig, lexicon: &Lexicon, path: &Path) -> Result<Model> {
        let fresh = Model::new(cfg, lexicon)?;
        let params = ParamSet::load(path)?;
        params.expect_layout(&fresh.params.layout())?;
        Ok(Model { params, ..fresh })
    }

    /// Patch pipeline through the verb classifier.
    pub fn stage_one(&self, ctx: &FwdCtx, img: &GrayImage) -> Result<StageOne> {
        let cfg = self.cfg.encoder_cfg();
        let fv = encoder::extract_features(ctx, &cfg, img)?;
        let (grid_h, grid_w) = (fv.grid_h, fv.grid_w);
        let tokens = encoder::tokenize(ctx, &cfg, &fv)?;
        let (ev, image) = encoder::encode_verb(ctx, &cfg, &tokens)?;
        let logits = encoder::verb_logits(ctx, &ev)?;
        Ok(StageOne { ev, image, logits, grid_h, grid_w })
    }

    /// Full encode with the verb decision postponed: roles keyed by the
    /// classifier's own argmax (the pseudo verb).
    pub fn encode(&self, ctx: &FwdCtx, img: &GrayImage) -> Result<EncodedFrame> {
        let s = self.stage_one(ctx, img)?;
        let pseudo = encoder::argmax_verb(s.logits.value().data());
        self.finish_encode(ctx, s, pseudo)
    }

    /// Full encode with the role stage keyed by a caller-chosen verb
    /// (ground truth at index-build and teacher-forcing time).
    pub fn encode_conditioned(&self, ctx: &FwdCtx, img: &GrayImage, verb: VerbId) -> Result<EncodedFrame> {
        let s = self.stage_one(ctx, img)?;
        self.finish_encode(ctx, s, verb)
    }

    fn finish_encode(&self, ctx: &FwdCtx, s: StageOne, verb: VerbId) -> Result<EncodedFrame> {
        let cfg = self.cfg.encoder_cfg();
        let pos = encoder::positional_rows(ctx, &cfg, s.grid_h, s.grid_w)?;
        let roles = encoder::encode_roles(ctx, &cfg, &s.ev, &s.image, &pos, verb, &self.lexicon)?;
        Ok(EncodedFrame::detach(verb, &s.logits, &s.ev, &s.image, &roles, s.grid_h, s.grid_w))
    }

    /// Re-runs only the role stage from a frame's cached stage-one
    /// features, conditioned on `verb`. e_v and E_img enter as constants;
    /// gradients can still reach the role-stage weights.
    pub fn role_stage(&self, ctx: &FwdCtx, frame: &EncodedFrame, verb: VerbId) -> Result<RoleEncoding> {
        let cfg = self.cfg.encoder_cfg();
        let ev = ctx.tape.leaf(Tensor::row(frame.ev.clone()));
        let image = ctx.tape.leaf(frame.image_features.clone());
        let pos = encoder::positional_rows(ctx, &cfg, frame.grid_h, frame.grid_w)?;
        encoder::encode_roles(ctx, &cfg, &ev, &image, &pos, verb, &self.lexicon)
    }
}

pub fn record_image(rec: &ImageRecord) -> Result<&GrayImage> {
    rec.image
        .as_ref()
        .ok_or_else(|| Error::Input(format!("record {} has no pixel data", rec.name)))
}

/// Encodes every record under its ground-truth verb and files the
/// role-stage features. Entry ids are record positions, so a training
/// query can exclude itself by position.
pub fn build_index(model: &Model, dataset: &Dataset) -> Result<FeatureIndex> {
    let mut index = FeatureIndex::new(model.cfg.model.d);
    for (pos, rec) in dataset.records.iter().enumerate() {
        let ctx = FwdCtx::eval(&model.params);
        let frame = model.encode_conditioned(&ctx, record_image(rec)?, rec.frame.verb)?;
        index.insert(IndexEntry {
            id: pos as u64,
            verb: rec.frame.verb,
            role_types: frame.role_types,
            role_features: frame.role_features,
            verb_feature: frame.verb_feature,
        })?;
    }
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SynthSpec};
    use crate::decoder::{self, RefinementState, SupportFrame};
    use crate::retrieval::{topk_support, QueryFeatures};
    use tempfile::tempdir;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.model.d = 8;
        cfg.model.heads = 2;
        cfg.model.encoder_layers = 1;
        cfg.model.decoder_iterations = 1;
        cfg.model.ffn_encoder = 16;
        cfg.model.ffn_roles = 16;
        cfg.model.ffn_decoder = 16;
        cfg.model.head_hidden = 16;
        cfg.model.box_hidden = 8;
        cfg.model.role_embed_dim = 8;
        cfg.model.feature_channels = 8;
        cfg.model.grid_max = 4;
        cfg.retrieval.k = 2;
        cfg
    }

    fn tiny_dataset() -> Dataset {
        generate(&SynthSpec {
            verbs: 3,
            arities: vec![1, 2, 3],
            images_per_verb: 2,
            image_size: 16,
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn encode_shapes_and_pseudo_conditioning() {
        let ds = tiny_dataset();
        let model = Model::new(&tiny_cfg(), &ds.lexicon).unwrap();
        let ctx = FwdCtx::eval(&model.params);
        let img = record_image(&ds.records[0]).unwrap();
        let frame = model.encode(&ctx, img).unwrap();
        assert_eq!(frame.verb_logits.len(), ds.lexicon.verb_count());
        assert_eq!(frame.role_types, ds.lexicon.roles_of(frame.pseudo_verb));
        assert_eq!(frame.role_features.len(), frame.role_types.len());
        assert_eq!(frame.ev.len(), 8);
        assert_eq!(frame.image_features.rows(), frame.grid_h * frame.grid_w);
    }

    #[test]
    fn conditioned_encode_follows_the_given_verb_not_the_classifier() {
        let ds = tiny_dataset();
        let model = Model::new(&tiny_cfg(), &ds.lexicon).unwrap();
        let img = record_image(&ds.records[0]).unwrap();
        for v in 0..ds.lexicon.verb_count() as u32 {
            let ctx = FwdCtx::eval(&model.params);
            let frame = model.encode_conditioned(&ctx, img, VerbId(v)).unwrap();
            assert_eq!(frame.pseudo_verb, VerbId(v));
            assert_eq!(frame.role_types, ds.lexicon.roles_of(VerbId(v)));
        }
    }

    /// role_stage from cached features must reproduce the full encode's
    /// role features bitwise: same weights, same inputs, same graph.
    #[test]
    fn role_stage_from_cache_matches_full_encode_bitwise() {
        let ds = tiny_dataset();
        let model = Model::new(&tiny_cfg(), &ds.lexicon).unwrap();
        let img = record_image(&ds.records[1]).unwrap();
        let ctx = FwdCtx::eval(&model.params);
        let frame = model.encode(&ctx, img).unwrap();

        let ctx2 = FwdCtx::eval(&model.params);
        let roles = model.role_stage(&ctx2, &frame, frame.pseudo_verb).unwrap();
        let feats = roles.role_features.value();
        for (i, cached) in frame.role_features.iter().enumerate() {
            assert_eq!(feats.row_slice(i), cached.as_slice());
        }
        assert_eq!(roles.verb_feature.value().data(), frame.verb_feature.as_slice());
    }

    #[test]
    fn index_covers_the_dataset_with_gt_verbs() {
        let ds = tiny_dataset();
        let model = Model::new(&tiny_cfg(), &ds.lexicon).unwrap();
        let index = build_index(&model, &ds).unwrap();
        assert_eq!(index.len(), ds.records.len());
        for (pos, rec) in ds.records.iter().enumerate() {
            let e = index.entry(pos);
            assert_eq!(e.id, pos as u64);
            assert_eq!(e.verb, rec.frame.verb);
            assert_eq!(e.role_types, ds.lexicon.roles_of(rec.frame.verb));
        }
    }

    /// Checkpoint round-trip is bitwise, and a mismatched architecture is
    /// refused instead of silently reinterpreted.
    #[test]
    fn checkpoint_roundtrip_and_layout_guard() {
        let ds = tiny_dataset();
        let cfg = tiny_cfg();
        let model = Model::new(&cfg, &ds.lexicon).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        model.save(&path).unwrap();

        let loaded = Model::load(&cfg, &ds.lexicon, &path).unwrap();
        assert_eq!(loaded.params.len(), model.params.len());
        for (name, p) in model.params.iter() {
            assert_eq!(loaded.params.value(name).unwrap(), &p.value, "{name}");
        }

        let mut wider = cfg.clone();
        wider.model.head_hidden = 32;
        assert!(Model::load(&wider, &ds.lexicon, &path).is_err());
    }

    /// The pieces compose: encode, retrieve, decode, predict.
    #[test]
    fn end_to_end_decode_from_index() {
        let ds = tiny_dataset();
        let cfg = tiny_cfg();
        let model = Model::new(&cfg, &ds.lexicon).unwrap();
        let index = build_index(&model, &ds).unwrap();

        let ctx = FwdCtx::eval(&model.params);
        let frame = model.encode(&ctx, record_image(&ds.records[0]).unwrap()).unwrap();
        let set = topk_support(
            QueryFeatures::from(&frame),
            &index,
            cfg.retrieval.k,
            Some(0),
            cfg.retrieval.mode.into(),
        )
        .unwrap();
        assert!(!set.is_empty());
        assert!(set.items.iter().all(|i| i.id != 0), "query's own entry excluded");

        let supports = SupportFrame::from_index(&ctx.tape, &index, &set).unwrap();
        let state = RefinementState::from_frame(&ctx.tape, &frame).unwrap();
        let dcfg = cfg.decoder_cfg();
        let out = decoder::decode(&ctx, &dcfg, state, &supports).unwrap();
        let heads = decoder::predict_heads(&ctx, &out, 0.0).unwrap();
        let pred = decoder::FramePrediction::detach(&heads, &out.role_types);
        assert_eq!(pred.verb_logits.len(), ds.lexicon.verb_count());
        assert_eq!(pred.roles.len(), frame.role_types.len());
        for r in &pred.roles {
            assert_eq!(r.noun_logits.len(), ds.lexicon.noun_count());
            assert!(r.bbox.iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }
}
