//! Two-phase optimization. Phase one trains the patch pipeline and verb
//! classifier alone. Phase two freezes that frontend, builds the support
//! index from it, then trains the role stage, decoder, and heads with
//! teacher-forced verbs over cached stage-one features.

use std::collections::BTreeMap;
use std::path::Path;

use crate::config::RunConfig;
use crate::dataset::{flip_record, scale_record, Dataset, ImageRecord};
use crate::decoder::{self, RefinementState, SupportFrame};
use crate::encoder::{EncodedFrame, FRONTEND_PREFIX};
use crate::error::{Error, Result};
use crate::model::{build_index, record_image, Model};
use crate::objectives::{self, BatchItem, FrameTarget, LossTerms};
use crate::params::FwdCtx;
use crate::retrieval::{topk_support, FeatureIndex, QueryFeatures};
use crate::rng::{hash_name, CounterRng};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Momentum SGD; velocities keyed by parameter name.
struct Sgd {
    momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    fn new(momentum: f64) -> Sgd {
        Sgd { momentum, velocity: BTreeMap::new() }
    }

    fn step(&mut self, model: &mut Model, grads: &[(String, Tensor)], lr: f64) -> Result<()> {
        for (name, g) in grads {
            let v = self.velocity.entry(name.clone()).or_insert_with(|| vec![0.0; g.data().len()]);
            let p = model.params.value(name)?;
            let mut data = p.data().to_vec();
            for ((x, vel), grad) in data.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vel = self.momentum * *vel + grad;
                *x -= lr * *vel;
            }
            let shape = p.shape().to_vec();
            model.params.set_value(name, Tensor::new(shape, data)?)?;
        }
        Ok(())
    }
}

/// Half-cosine decay from `base` toward zero across `total` steps.
fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    base * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos())
}

pub struct TrainOutcome {
    pub model: Model,
    /// Support index built from the frozen frontend between the phases.
    pub index: FeatureIndex,
    /// Every emitted log line, in order, timestamp-free.
    pub log: Vec<String>,
    /// Mean per-frame loss by epoch.
    pub encoder_epoch_loss: Vec<f64>,
    pub decoder_epoch_loss: Vec<f64>,
    /// Phase two left everything under the frozen prefix bitwise intact.
    pub frontend_untouched: bool,
}

/// Phase-one augmentation: keyed by (seed, record, epoch) so a rerun
/// draws the same variants.
fn augmented(cfg: &RunConfig, rec: &ImageRecord, epoch: u64, idx: u64) -> ImageRecord {
    let mut rng = CounterRng::keyed(&[cfg.seed, hash_name("augment.phase1"), epoch, idx]);
    let mut out = rec.clone();
    if cfg.train.flip_augment && rng.bernoulli(0.5) {
        out = flip_record(&out);
    }
    if cfg.train.scale_augment {
        match rng.below(3) {
            0 => {}
            1 => out = scale_record(&out, 3, 4),
            _ => out = scale_record(&out, 5, 4),
        }
    }
    out
}

fn shuffled(n: usize, seed: u64, site: &str, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    CounterRng::keyed(&[seed, hash_name(site), epoch]).shuffle(&mut order);
    order
}

/// Trains both phases from scratch. When `ckpt_dir` is given and
/// `checkpoint_every` is nonzero, intermediate checkpoints land there as
/// `checkpoint-p{phase}-e{epoch}.ckpt`.
pub fn train(cfg: &RunConfig, dataset: &Dataset, ckpt_dir: Option<&Path>) -> Result<TrainOutcome> {
    if dataset.records.is_empty() {
        return Err(Error::Input("training needs at least one record".into()));
    }
    let mut model = Model::new(cfg, &dataset.lexicon)?;
    let weights = cfg.loss_weights();
    let n = dataset.records.len();
    let batch = cfg.train.batch.max(1);
    let steps_per_epoch = n.div_ceil(batch) as u64;
    let mut log_lines = Vec::new();
    let mut emit = |line: String| {
        log::info!("{line}");
        log_lines.push(line);
    };

    // ── Phase one: frontend ─────────────────────────────────────────────
    let mut sgd = Sgd::new(cfg.train.momentum);
    let p1_total = cfg.train.encoder_epochs as u64 * steps_per_epoch;
    let mut step: u64 = 0;
    let mut encoder_epoch_loss = Vec::with_capacity(cfg.train.encoder_epochs);
    for epoch in 0..cfg.train.encoder_epochs {
        let order = shuffled(n, cfg.seed, "shuffle.phase1", epoch as u64);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(batch) {
            let lr = cosine_lr(cfg.train.lr_encoder, step, p1_total);
            let (breakdown, grads) = {
                let ctx = FwdCtx::train(&model.params, &[], cfg.seed, step);
                let mut ce: Option<Var> = None;
                for &idx in chunk {
                    let rec = augmented(cfg, &dataset.records[idx], epoch as u64, idx as u64);
                    let s = model.stage_one(&ctx, record_image(&rec)?)?;
                    let term = objectives::smoothed_ce(
                        &s.logits,
                        rec.frame.verb.idx(),
                        cfg.loss.verb_smoothing,
                    )?;
                    ce = Some(match ce {
                        None => term,
                        Some(acc) => acc.add(&term)?,
                    });
                }
                let terms = LossTerms::encoder_only(ce.expect("nonempty chunk"), &weights);
                ctx.tape.backward(&terms.total)?;
                (terms.breakdown(), ctx.grads())
            };
            sgd.step(&mut model, &grads, lr)?;
            emit(format!("phase=1 epoch={epoch} step={step} {breakdown} lr={lr:.6}"));
            epoch_sum += breakdown.total;
            step += 1;
        }
        encoder_epoch_loss.push(epoch_sum / n as f64);
        if let Some(dir) = ckpt_dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 {
                model.save(&dir.join(format!("checkpoint-p1-e{epoch}.ckpt")))?;
            }
        }
    }

    // ── Between phases: index and stage-one caches ──────────────────────
    let index = build_index(&model, dataset)?;
    emit(format!("index built: {} entries, width {}", index.len(), index.width()));

    // Per record: the pseudo-verb encode plus, under flip augmentation,
    // its mirrored twin. Targets travel with their variant so boxes stay
    // aligned with the pixels the features came from.
    let mut cache: Vec<Vec<(EncodedFrame, FrameTarget)>> = Vec::with_capacity(n);
    for rec in &dataset.records {
        let mut variants = Vec::with_capacity(2);
        let ctx = FwdCtx::eval(&model.params);
        variants.push((model.encode(&ctx, record_image(rec)?)?, FrameTarget::from_record(rec)));
        if cfg.train.flip_augment {
            let flipped = flip_record(rec);
            let ctx = FwdCtx::eval(&model.params);
            variants
                .push((model.encode(&ctx, record_image(&flipped)?)?, FrameTarget::from_record(&flipped)));
        }
        cache.push(variants);
    }

    let frontend_before: Vec<(String, Tensor)> = model
        .params
        .iter()
        .filter(|(name, _)| name.starts_with(FRONTEND_PREFIX))
        .map(|(name, p)| (name.clone(), p.value.clone()))
        .collect();

    // ── Phase two: role stage, decoder, heads ───────────────────────────
    let dcfg = cfg.decoder_cfg();
    let mode = cfg.retrieval.mode.into();
    let mut sgd2 = Sgd::new(cfg.train.momentum);
    let p2_total = cfg.train.decoder_epochs as u64 * steps_per_epoch;
    let mut step2: u64 = 0;
    let mut decoder_epoch_loss = Vec::with_capacity(cfg.train.decoder_epochs);
    for epoch in 0..cfg.train.decoder_epochs {
        let order = shuffled(n, cfg.seed, "shuffle.phase2", epoch as u64);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(batch) {
            let lr = cosine_lr(cfg.train.lr_decoder, step2, p2_total);
            let (breakdown, grads) = {
                // step offset keeps dropout masks distinct from phase one
                let ctx = FwdCtx::train(&model.params, &[FRONTEND_PREFIX], cfg.seed, step + step2);
                let mut items = Vec::with_capacity(chunk.len());
                for &idx in chunk {
                    let variants = &cache[idx];
                    let variant = if variants.len() > 1 {
                        let mut rng = CounterRng::keyed(&[
                            cfg.seed,
                            hash_name("flip.phase2"),
                            epoch as u64,
                            idx as u64,
                        ]);
                        usize::from(rng.bernoulli(0.5))
                    } else {
                        0
                    };
                    let (cached, target) = &variants[variant];
                    let set = topk_support(
                        QueryFeatures::from(cached),
                        &index,
                        cfg.retrieval.k,
                        Some(idx as u64),
                        mode,
                    )?;
                    let supports = SupportFrame::from_index(&ctx.tape, &index, &set)?;
                    let roles = model.role_stage(&ctx, cached, target.verb)?;
                    let state = RefinementState {
                        iteration: 0,
                        verb_feature: roles.verb_feature,
                        role_features: roles.role_features,
                        role_types: roles.role_types,
                    };
                    let states = decoder::decode_steps(&ctx, &dcfg, state, &supports)?;
                    let heads = decoder::predict_heads(
                        &ctx,
                        states.last().expect("never empty"),
                        cfg.model.dropout_heads,
                    )?;
                    let mut verb_rows = Vec::new();
                    if cfg.train.aux_verb_loss {
                        for s in &states[1..states.len().saturating_sub(1)] {
                            let aux = decoder::predict_heads(&ctx, s, cfg.model.dropout_heads)?;
                            verb_rows.push(aux.verb_logits);
                        }
                    }
                    verb_rows.push(heads.verb_logits.clone());
                    items.push(BatchItem {
                        verb_logits: verb_rows,
                        gt_verb: target.verb,
                        noun_logits: heads.noun_logits,
                        boxes: heads.boxes,
                        presence_logits: heads.presence_logits,
                        slots: target.roles.iter().cloned().map(Some).collect(),
                    });
                }
                let terms = objectives::batch_loss(
                    &items,
                    &weights,
                    cfg.loss.verb_smoothing,
                    cfg.loss.noun_smoothing,
                )?;
                ctx.tape.backward(&terms.total)?;
                (terms.breakdown(), ctx.grads())
            };
            sgd2.step(&mut model, &grads, lr)?;
            emit(format!("phase=2 epoch={epoch} step={step2} {breakdown} lr={lr:.6}"));
            epoch_sum += breakdown.total;
            step2 += 1;
        }
        decoder_epoch_loss.push(epoch_sum / n as f64);
        if let Some(dir) = ckpt_dir {
            let every = cfg.train.checkpoint_every;
            if every > 0 && (epoch + 1) % every == 0 {
                model.save(&dir.join(format!("checkpoint-p2-e{epoch}.ckpt")))?;
            }
        }
    }

    let frontend_untouched = frontend_before
        .iter()
        .all(|(name, before)| model.params.value(name).map(|now| now == before).unwrap_or(false));
    Ok(TrainOutcome {
        model,
        index,
        log: log_lines,
        encoder_epoch_loss,
        decoder_epoch_loss,
        frontend_untouched,
    })
}
