//! Training losses: label-smoothed cross-entropy for the verb decisions,
//! per-annotator noun classification, L1 and generalized-IoU box
//! regression, and a presence term for roles without a ground box.
//!
//! Losses are built per real role slot; padded slots are skipped before
//! any graph node exists, so they contribute exact zeros to both the loss
//! and every gradient.

use crate::dataset::{ImageRecord, NounId, RoleId, VerbId, ANNOTATORS};
use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::Tensor;

// ── Targets ─────────────────────────────────────────────────────────────

/// Supervision for one role slot. The box, when present, is normalized
/// (cx, cy, w, h) to match the regression head.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleTarget {
    pub role: RoleId,
    pub nouns: [NounId; ANNOTATORS],
    pub bbox: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameTarget {
    pub verb: VerbId,
    pub roles: Vec<RoleTarget>,
}

impl FrameTarget {
    pub fn from_record(record: &ImageRecord) -> FrameTarget {
        let (w, h) = (record.width as f64, record.height as f64);
        FrameTarget {
            verb: record.frame.verb,
            roles: record
                .frame
                .roles
                .iter()
                .map(|r| RoleTarget {
                    role: r.role,
                    nouns: r.nouns,
                    bbox: r.bbox.as_ref().map(|b| b.normalized_cxcywh(w, h)),
                })
                .collect(),
        }
    }
}

// ── Elementary losses ───────────────────────────────────────────────────

/// Cross-entropy of a [1 × C] logit row against the ε-smoothed one-hot
/// target (1−ε on the label plus ε/C everywhere). At ε = 0 this is plain
/// cross-entropy; uniform logits cost ln C for any ε.
pub fn smoothed_ce(logits: &Var, target: usize, smoothing: f64) -> Result<Var> {
    let classes = logits.shape()[1];
    if logits.shape()[0] != 1 {
        return Err(Error::Shape(format!("expected one logit row, got {}", logits.shape()[0])));
    }
    if target >= classes {
        return Err(Error::Input(format!("label {target} out of range for {classes} classes")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Input(format!("smoothing {smoothing} outside [0, 1)")));
    }
    let mut q = vec![smoothing / classes as f64; classes];
    q[target] += 1.0 - smoothing;
    let q = logits.tape().leaf(Tensor::row(q));
    Ok(logits.log_softmax_rows().mul(&q)?.sum_all().neg())
}

/// Sum of absolute coordinate errors between a [1 × 4] predicted box and
/// its target, both in normalized (cx, cy, w, h).
pub fn l1_loss(pred: &Var, gt: &[f64; 4]) -> Result<Var> {
    let target = pred.tape().leaf(Tensor::row(gt.to_vec()));
    Ok(pred.sub(&target)?.abs().sum_all())
}

/// Corner coordinates (x1, y1, x2, y2) of a [1 × 4] (cx, cy, w, h) box,
/// each as a [1 × 1] node.
fn corners(b: &Var) -> Result<[Var; 4]> {
    let cx = b.slice_cols(0, 1)?;
    let cy = b.slice_cols(1, 2)?;
    let half_w = b.slice_cols(2, 3)?.scale(0.5);
    let half_h = b.slice_cols(3, 4)?.scale(0.5);
    Ok([cx.sub(&half_w)?, cy.sub(&half_h)?, cx.add(&half_w)?, cy.add(&half_h)?])
}

/// IoU and hull penalty of the generalized IoU, still on the tape.
/// Zero-area unions and hulls take their limit values (0) rather than
/// dividing by zero; those branches carry no gradient.
fn giou_terms(pred: &Var, gt: &[f64; 4]) -> Result<(Var, Var)> {
    let tape = pred.tape();
    let scalar = |v: f64| tape.leaf(Tensor::row(vec![v]));
    let [px1, py1, px2, py2] = corners(pred)?;
    let (gx1, gy1) = (gt[0] - gt[2] * 0.5, gt[1] - gt[3] * 0.5);
    let (gx2, gy2) = (gt[0] + gt[2] * 0.5, gt[1] + gt[3] * 0.5);

    let zero = scalar(0.0);
    let iw = px2.emin(&scalar(gx2))?.sub(&px1.emax(&scalar(gx1))?)?.emax(&zero)?;
    let ih = py2.emin(&scalar(gy2))?.sub(&py1.emax(&scalar(gy1))?)?.emax(&zero)?;
    let inter = iw.mul(&ih)?;

    let pred_area = px2.sub(&px1)?.mul(&py2.sub(&py1)?)?;
    let gt_area = (gx2 - gx1) * (gy2 - gy1);
    let union = pred_area.add(&scalar(gt_area))?.sub(&inter)?;

    let hull_w = px2.emax(&scalar(gx2))?.sub(&px1.emin(&scalar(gx1))?)?;
    let hull_h = py2.emax(&scalar(gy2))?.sub(&py1.emin(&scalar(gy1))?)?;
    let hull = hull_w.mul(&hull_h)?;

    let iou = if union.value().at2(0, 0) == 0.0 { zero.clone() } else { inter.div(&union)? };
    let penalty =
        if hull.value().at2(0, 0) == 0.0 { zero } else { hull.sub(&union)?.div(&hull)? };
    Ok((iou, penalty))
}

/// 1 − GIoU where GIoU = IoU − |hull \ union| / |hull|; ranges over
/// [0, 2] and is exactly 0 for a box against itself.
pub fn giou_loss(pred: &Var, gt: &[f64; 4]) -> Result<Var> {
    if gt[2] < 0.0 || gt[3] < 0.0 {
        return Err(Error::Input(format!("target box has negative extent: {gt:?}")));
    }
    let (iou, penalty) = giou_terms(pred, gt)?;
    let tape = pred.tape();
    Ok(tape.leaf(Tensor::row(vec![1.0])).sub(&iou)?.add(&penalty)?.sum_all())
}

/// Binary cross-entropy on a [1 × 1] logit: softplus(x) − t·x, the
/// numerically stable with-logits form.
pub fn presence_bce(logit: &Var, target: f64) -> Result<Var> {
    if target != 0.0 && target != 1.0 {
        return Err(Error::Input(format!("presence target {target} is not 0 or 1")));
    }
    Ok(logit.softplus().sub(&logit.scale(target))?.sum_all())
}

// ── Per-slot and batch losses ───────────────────────────────────────────

/// Unweighted loss parts of one real role slot.
pub struct SlotLoss {
    pub noun_ce: Var,
    pub box_l1: Option<Var>,
    pub box_giou: Option<Var>,
    pub presence: Var,
}

/// Losses for one role slot: one smoothed CE per annotator (the empty
/// filler is a class), box terms only when the target has a box, and a
/// presence term pushed toward whether it does.
pub fn noun_role_loss(
    noun_logits: &Var,
    box_pred: &Var,
    presence_logit: &Var,
    pred_role: RoleId,
    gt: &RoleTarget,
    smoothing: f64,
) -> Result<SlotLoss> {
    if pred_role != gt.role {
        return Err(Error::Input(format!(
            "prediction for role {} scored against role {}",
            pred_role.idx(),
            gt.role.idx()
        )));
    }
    let mut noun_ce: Option<Var> = None;
    for noun in gt.nouns {
        let term = smoothed_ce(noun_logits, noun.idx(), smoothing)?;
        noun_ce = Some(match noun_ce {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    let noun_ce = noun_ce.expect("annotator count is fixed and positive");

    let (box_l1, box_giou, presence_target) = match &gt.bbox {
        Some(b) => (Some(l1_loss(box_pred, b)?), Some(giou_loss(box_pred, b)?), 1.0),
        None => (None, None, 0.0),
    };
    let presence = presence_bce(presence_logit, presence_target)?;
    Ok(SlotLoss { noun_ce, box_l1, box_giou, presence })
}

// ── Batch assembly ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub verb_ce: f64,
    pub noun_ce: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub presence: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { verb_ce: 1.0, noun_ce: 1.0, box_l1: 5.0, box_giou: 2.0, presence: 1.0 }
    }
}

/// One frame's predictions with aligned supervision. `slots` rows line up
/// with the prediction rows; `None` marks padding, which never enters the
/// loss graph.
pub struct BatchItem {
    /// Supervised verb logit rows, one per supervised refinement
    /// iteration; usually just the final one. Empty while training the
    /// encoder alone.
    pub verb_logits: Vec<Var>,
    pub gt_verb: VerbId,
    /// [slots × C]
    pub noun_logits: Var,
    /// [slots × 4]
    pub boxes: Var,
    /// [slots × 1]
    pub presence_logits: Var,
    pub slots: Vec<Option<RoleTarget>>,
}

/// Weighted scalar loss parts, still on the tape. `total` is the training
/// objective.
pub struct LossTerms {
    pub verb_encoder: Var,
    pub verb_decoder: Var,
    pub noun_ce: Var,
    pub box_l1: Var,
    pub box_giou: Var,
    pub presence_bce: Var,
    pub total: Var,
}

/// Detached per-part values for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub verb_encoder: f64,
    pub verb_decoder: f64,
    pub noun_ce: f64,
    pub box_l1: f64,
    pub box_giou: f64,
    pub presence_bce: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn breakdown(&self) -> LossBreakdown {
        let get = |v: &Var| v.value().data()[0];
        LossBreakdown {
            verb_encoder: get(&self.verb_encoder),
            verb_decoder: get(&self.verb_decoder),
            noun_ce: get(&self.noun_ce),
            box_l1: get(&self.box_l1),
            box_giou: get(&self.box_giou),
            presence_bce: get(&self.presence_bce),
            total: get(&self.total),
        }
    }

    /// Encoder-phase objective: just the weighted verb cross-entropy.
    pub fn encoder_only(verb_ce: Var, weights: &LossWeights) -> LossTerms {
        let tape = verb_ce.tape();
        let zero = || tape.leaf(Tensor::scalar(0.0));
        let weighted = verb_ce.scale(weights.verb_ce);
        LossTerms {
            verb_encoder: weighted.clone(),
            verb_decoder: zero(),
            noun_ce: zero(),
            box_l1: zero(),
            box_giou: zero(),
            presence_bce: zero(),
            total: weighted,
        }
    }
}

impl std::fmt::Display for LossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "verb_e={:.6} verb_d={:.6} noun={:.6} l1={:.6} giou={:.6} presence={:.6} total={:.6}",
            self.verb_encoder,
            self.verb_decoder,
            self.noun_ce,
            self.box_l1,
            self.box_giou,
            self.presence_bce,
            self.total
        )
    }
}

fn accumulate(acc: &mut Option<Var>, term: Var) -> Result<()> {
    *acc = Some(match acc.take() {
        None => term,
        Some(a) => a.add(&term)?,
    });
    Ok(())
}

/// Sums losses over a batch of frames. The reduction is a plain sum, so
/// a padded batch equals the sum of its unpadded per-frame losses.
pub fn batch_loss(
    items: &[BatchItem],
    weights: &LossWeights,
    verb_smoothing: f64,
    noun_smoothing: f64,
) -> Result<LossTerms> {
    let first = items.first().ok_or_else(|| Error::Input("empty loss batch".into()))?;
    let tape = first.noun_logits.tape();
    let zero = || tape.leaf(Tensor::scalar(0.0));

    let mut verb_decoder: Option<Var> = None;
    let mut noun_ce: Option<Var> = None;
    let mut box_l1: Option<Var> = None;
    let mut box_giou: Option<Var> = None;
    let mut presence: Option<Var> = None;

    for item in items {
        let slot_count = item.noun_logits.shape()[0];
        if item.slots.len() != slot_count
            || item.boxes.shape()[0] != slot_count
            || item.presence_logits.shape()[0] != slot_count
        {
            return Err(Error::Shape(format!(
                "slot rows disagree: {} targets, {} noun rows, {} box rows, {} presence rows",
                item.slots.len(),
                slot_count,
                item.boxes.shape()[0],
                item.presence_logits.shape()[0]
            )));
        }
        for logits in &item.verb_logits {
            accumulate(
                &mut verb_decoder,
                smoothed_ce(logits, item.gt_verb.idx(), verb_smoothing)?,
            )?;
        }
        for (i, slot) in item.slots.iter().enumerate() {
            let Some(gt) = slot else { continue };
            let noun_row = item.noun_logits.slice_rows(i, i + 1)?;
            let box_row = item.boxes.slice_rows(i, i + 1)?;
            let presence_row = item.presence_logits.slice_rows(i, i + 1)?;
            let parts = noun_role_loss(&noun_row, &box_row, &presence_row, gt.role, gt, noun_smoothing)?;
            accumulate(&mut noun_ce, parts.noun_ce)?;
            if let Some(t) = parts.box_l1 {
                accumulate(&mut box_l1, t)?;
            }
            if let Some(t) = parts.box_giou {
                accumulate(&mut box_giou, t)?;
            }
            accumulate(&mut presence, parts.presence)?;
        }
    }

    let weigh = |acc: Option<Var>, w: f64| acc.map(|v| v.scale(w)).unwrap_or_else(zero);
    let verb_decoder = weigh(verb_decoder, weights.verb_ce);
    let noun_ce = weigh(noun_ce, weights.noun_ce);
    let box_l1 = weigh(box_l1, weights.box_l1);
    let box_giou = weigh(box_giou, weights.box_giou);
    let presence_bce = weigh(presence, weights.presence);
    let total = verb_decoder
        .add(&noun_ce)?
        .add(&box_l1)?
        .add(&box_giou)?
        .add(&presence_bce)?;
    Ok(LossTerms {
        verb_encoder: zero(),
        verb_decoder,
        noun_ce,
        box_l1,
        box_giou,
        presence_bce,
        total,
    })
}
