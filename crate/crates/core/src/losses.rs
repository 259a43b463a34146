//! Training losses with closed-form gradients w.r.t. the prediction outputs.
//!
//! The total loss is the sum of seven components. Ground-truth supervision
//! uses the standard regression (L1 + GIoU) and sigmoid focal losses. The
//! four teacher/pseudo components down-weight noisy generated labels:
//!
//! ```text
//! Lr_z   = (1/|lz|) Σ_{i∈lz} Ŝ_i · [‖b_i − b̂_i‖₁ + 1 − GIoU(b_i, b̂_i)]
//! Lbs_z  = Σ_{i∈lz} sf(bs_i, Ŝ_i)                / max(ε, Σ_{i∈lz} ‖bs_i‖₁)
//! Lcls_z = Σ_{i∈lz} Σ_ch sf(cls_i[ch], t_i[ch])  / max(ε, Σ_{i∈lz} ‖cls_i‖₁)
//! Lcls_p = Σ_{i∈lp} Σ_ch sf(cls_i[ch], t_i[ch])  / max(ε, Σ_{i∈lp} ‖cls_i‖₁)
//! ```
//!
//! where `sf` is the sigmoid focal loss generalized to soft targets, the
//! teacher targets put the label confidence Ŝ on the unknown channel (zeros
//! elsewhere), and the pseudo targets put the prediction's own box score
//! there. Targets that are themselves prediction outputs (the pseudo case)
//! are differentiated through, so the reported gradients match finite
//! differences of the loss as a function of the raw prediction vector.

use serde::{Deserialize, Serialize};

use crate::geometry;
use crate::matching::{Assignment, Prediction};
use crate::teacher::{Label, LabelClass};

/// Probability clamp keeping `ln` finite inside the focal loss.
const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal: FocalParams,
    /// Floor for the teacher/pseudo denominators, which can vanish early in
    /// training.
    pub denom_eps: f64,
    /// Background supervision (zero targets) for unmatched, non-pseudo
    /// predictions. Off in strict paper mode.
    pub negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { focal: FocalParams::default(), denom_eps: 1e-8, negatives: true }
    }
}

/// Sigmoid focal loss with a soft target `t ∈ [0, 1]`:
/// `−[α·t·(1−p)^γ·ln p + (1−α)·(1−t)·p^γ·ln(1−p)]`.
pub fn focal(p: f64, t: f64, params: FocalParams) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let FocalParams { alpha, gamma } = params;
    -(alpha * t * (1.0 - p).powf(gamma) * p.ln()
        + (1.0 - alpha) * (1.0 - t) * p.powf(gamma) * (1.0 - p).ln())
}

/// `∂focal/∂p` (zero where the probability clamp is active).
pub fn focal_grad_p(p: f64, t: f64, params: FocalParams) -> f64 {
    if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
        return 0.0;
    }
    let FocalParams { alpha, gamma } = params;
    let pos = alpha * t * (-gamma * (1.0 - p).powf(gamma - 1.0) * p.ln() + (1.0 - p).powf(gamma) / p);
    let neg = (1.0 - alpha)
        * (1.0 - t)
        * (gamma * p.powf(gamma - 1.0) * (1.0 - p).ln() - p.powf(gamma) / (1.0 - p));
    -(pos + neg)
}

/// `∂focal/∂t` for prediction-dependent soft targets.
pub fn focal_grad_t(p: f64, t: f64, params: FocalParams) -> f64 {
    let _ = t;
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let FocalParams { alpha, gamma } = params;
    -(alpha * (1.0 - p).powf(gamma) * p.ln() - (1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln())
}

/// Gradient of the loss w.r.t. one prediction's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredGrad {
    pub bbox: [f64; 4],
    pub box_score: f64,
    pub class_scores: Vec<f64>,
}

impl PredGrad {
    fn zeros(channels: usize) -> Self {
        Self { bbox: [0.0; 4], box_score: 0.0, class_scores: vec![0.0; channels] }
    }
}

/// Scalar components of the training loss plus per-prediction gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub regression: f64,
    pub box_score: f64,
    pub classification: f64,
    pub teacher_regression: f64,
    pub teacher_box_score: f64,
    pub teacher_classification: f64,
    pub pseudo_classification: f64,
    pub total: f64,
    #[serde(skip)]
    pub grads: Vec<PredGrad>,
}

impl LossReport {
    fn new(n_preds: usize, channels: usize) -> Self {
        Self {
            regression: 0.0,
            box_score: 0.0,
            classification: 0.0,
            teacher_regression: 0.0,
            teacher_box_score: 0.0,
            teacher_classification: 0.0,
            pseudo_classification: 0.0,
            total: 0.0,
            grads: (0..n_preds).map(|_| PredGrad::zeros(channels)).collect(),
        }
    }

    pub fn components(&self) -> [f64; 7] {
        [
            self.regression,
            self.box_score,
            self.classification,
            self.teacher_regression,
            self.teacher_box_score,
            self.teacher_classification,
            self.pseudo_classification,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.grads.iter().all(|g| {
                g.bbox.iter().all(|v| v.is_finite())
                    && g.box_score.is_finite()
                    && g.class_scores.iter().all(|v| v.is_finite())
            })
    }
}

fn channels_of(predictions: &[Prediction]) -> usize {
    predictions.first().map(|p| p.class_scores.len()).unwrap_or(1)
}

/// Ground-truth losses: regression over GT-matched predictions, box-score
/// and classification focal losses over GT-matched positives (plus zero
/// targets on background when negatives are on). All three are normalized by
/// the GT match count, floored at one.
pub fn gt_losses(
    assignment: &Assignment,
    labels: &[Label],
    predictions: &[Prediction],
    cfg: &LossConfig,
) -> LossReport {
    let channels = channels_of(predictions);
    let mut report = LossReport::new(predictions.len(), channels);
    let norm = (assignment.gt_matched.len() as f64).max(1.0);

    for &(label_idx, pred_idx) in &assignment.pairs {
        let label = &labels[label_idx];
        if label.class == LabelClass::Unknown {
            continue;
        }
        let LabelClass::Known(class_id) = label.class else { unreachable!() };
        let pred = &predictions[pred_idx];
        let grad = &mut report.grads[pred_idx];

        // Regression: L1 + GIoU loss.
        report.regression +=
            (geometry::l1_box_loss(&pred.bbox, &label.bbox) + geometry::giou_loss(&pred.bbox, &label.bbox)) / norm;
        let (l1_g, _) = geometry::l1_box_grad(&pred.bbox, &label.bbox);
        let (giou_g, _) = geometry::giou_loss_grad(&pred.bbox, &label.bbox);
        for k in 0..4 {
            grad.bbox[k] += (l1_g[k] + giou_g[k]) / norm;
        }

        // Box score: positive target.
        report.box_score += focal(pred.box_score, 1.0, cfg.focal) / norm;
        grad.box_score += focal_grad_p(pred.box_score, 1.0, cfg.focal) / norm;

        // Classification: one-hot target on the label's channel.
        for ch in 0..channels {
            let t = if ch == class_id { 1.0 } else { 0.0 };
            report.classification += focal(pred.class_scores[ch], t, cfg.focal) / norm;
            grad.class_scores[ch] += focal_grad_p(pred.class_scores[ch], t, cfg.focal) / norm;
        }
    }

    if cfg.negatives {
        for &pred_idx in &assignment.background() {
            let pred = &predictions[pred_idx];
            let grad = &mut report.grads[pred_idx];
            report.box_score += focal(pred.box_score, 0.0, cfg.focal) / norm;
            grad.box_score += focal_grad_p(pred.box_score, 0.0, cfg.focal) / norm;
            for ch in 0..channels {
                report.classification += focal(pred.class_scores[ch], 0.0, cfg.focal) / norm;
                grad.class_scores[ch] += focal_grad_p(pred.class_scores[ch], 0.0, cfg.focal) / norm;
            }
        }
    }

    report.total = report.components().iter().sum();
    report
}

/// The four down-weight components for teacher-matched and pseudo
/// predictions. Empty index sets contribute exact zeros and no gradients.
pub fn down_weight_losses(
    assignment: &Assignment,
    labels: &[Label],
    predictions: &[Prediction],
    cfg: &LossConfig,
) -> LossReport {
    let channels = channels_of(predictions);
    let unknown_channel = channels - 1;
    let mut report = LossReport::new(predictions.len(), channels);

    let teacher_pairs: Vec<(usize, usize)> = assignment
        .pairs
        .iter()
        .copied()
        .filter(|&(l, _)| labels[l].class == LabelClass::Unknown)
        .collect();

    if !teacher_pairs.is_empty() {
        // Teacher regression, scaled per pair by the label confidence.
        let count = teacher_pairs.len() as f64;
        for &(label_idx, pred_idx) in &teacher_pairs {
            let label = &labels[label_idx];
            let pred = &predictions[pred_idx];
            let conf = label.confidence;
            report.teacher_regression += conf
                * (geometry::l1_box_loss(&pred.bbox, &label.bbox)
                    + geometry::giou_loss(&pred.bbox, &label.bbox))
                / count;
            let (l1_g, _) = geometry::l1_box_grad(&pred.bbox, &label.bbox);
            let (giou_g, _) = geometry::giou_loss_grad(&pred.bbox, &label.bbox);
            for k in 0..4 {
                report.grads[pred_idx].bbox[k] += conf * (l1_g[k] + giou_g[k]) / count;
            }
        }

        // Teacher box score, normalized by the L1 mass of the matched scores.
        let bs_mass: f64 = teacher_pairs.iter().map(|&(_, p)| predictions[p].box_score.abs()).sum();
        let den = bs_mass.max(cfg.denom_eps);
        let den_active = bs_mass > cfg.denom_eps;
        let num: f64 = teacher_pairs
            .iter()
            .map(|&(l, p)| focal(predictions[p].box_score, labels[l].confidence, cfg.focal))
            .sum();
        report.teacher_box_score = num / den;
        for &(label_idx, pred_idx) in &teacher_pairs {
            let pred = &predictions[pred_idx];
            let mut g = focal_grad_p(pred.box_score, labels[label_idx].confidence, cfg.focal) / den;
            if den_active {
                g -= num / (den * den) * pred.box_score.signum();
            }
            report.grads[pred_idx].box_score += g;
        }

        // Teacher classification: soft target Ŝ on the unknown channel.
        let cls_mass: f64 = teacher_pairs
            .iter()
            .map(|&(_, p)| predictions[p].class_scores.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        let den = cls_mass.max(cfg.denom_eps);
        let den_active = cls_mass > cfg.denom_eps;
        let mut num = 0.0;
        for &(label_idx, pred_idx) in &teacher_pairs {
            let pred = &predictions[pred_idx];
            for ch in 0..channels {
                let t = if ch == unknown_channel { labels[label_idx].confidence } else { 0.0 };
                num += focal(pred.class_scores[ch], t, cfg.focal);
            }
        }
        report.teacher_classification = num / den;
        for &(label_idx, pred_idx) in &teacher_pairs {
            let pred = &predictions[pred_idx];
            for ch in 0..channels {
                let t = if ch == unknown_channel { labels[label_idx].confidence } else { 0.0 };
                let mut g = focal_grad_p(pred.class_scores[ch], t, cfg.focal) / den;
                if den_active {
                    g -= num / (den * den) * pred.class_scores[ch].signum();
                }
                report.grads[pred_idx].class_scores[ch] += g;
            }
        }
    }

    if !assignment.pseudo.is_empty() {
        // Pseudo classification: soft target bs_i on the unknown channel.
        // The target is the prediction's own box score, so the box score
        // picks up a gradient through the target.
        let cls_mass: f64 = assignment
            .pseudo
            .iter()
            .map(|&p| predictions[p].class_scores.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        let den = cls_mass.max(cfg.denom_eps);
        let den_active = cls_mass > cfg.denom_eps;
        let mut num = 0.0;
        for &pred_idx in &assignment.pseudo {
            let pred = &predictions[pred_idx];
            for ch in 0..channels {
                let t = if ch == unknown_channel { pred.box_score } else { 0.0 };
                num += focal(pred.class_scores[ch], t, cfg.focal);
            }
        }
        report.pseudo_classification = num / den;
        for &pred_idx in &assignment.pseudo {
            let pred = &predictions[pred_idx];
            for ch in 0..channels {
                let t = if ch == unknown_channel { pred.box_score } else { 0.0 };
                let mut g = focal_grad_p(pred.class_scores[ch], t, cfg.focal) / den;
                if den_active {
                    g -= num / (den * den) * pred.class_scores[ch].signum();
                }
                report.grads[pred_idx].class_scores[ch] += g;
            }
            report.grads[pred_idx].box_score +=
                focal_grad_t(pred.class_scores[unknown_channel], pred.box_score, cfg.focal) / den;
        }
    }

    report.total = report.components().iter().sum();
    report
}

/// Total training loss: the seven components summed, gradients accumulated.
pub fn total_loss(
    assignment: &Assignment,
    labels: &[Label],
    predictions: &[Prediction],
    cfg: &LossConfig,
) -> LossReport {
    let mut report = gt_losses(assignment, labels, predictions, cfg);
    let dw = down_weight_losses(assignment, labels, predictions, cfg);
    report.teacher_regression = dw.teacher_regression;
    report.teacher_box_score = dw.teacher_box_score;
    report.teacher_classification = dw.teacher_classification;
    report.pseudo_classification = dw.pseudo_classification;
    for (g, d) in report.grads.iter_mut().zip(&dw.grads) {
        for k in 0..4 {
            g.bbox[k] += d.bbox[k];
        }
        g.box_score += d.box_score;
        for (a, b) in g.class_scores.iter_mut().zip(&d.class_scores) {
            *a += *b;
        }
    }
    report.total = report.components().iter().sum();
    report
}
