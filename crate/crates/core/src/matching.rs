//! Confidence-augmented bipartite matching between labels and predictions,
//! plus Topk pseudo-label selection from the unmatched box scores.
//!
//! The pair cost combines the regression distance (L1 + GIoU loss) with the
//! prediction's class score on the label's channel and the label confidence:
//!
//! ```text
//! cost = λ_l1·‖b − b̂‖₁ + λ_giou·(1 − GIoU(b, b̂)) − cls[ĉ] − Ŝ
//! ```
//!
//! The confidence term is constant per label row, so it cannot change the
//! optimal pairing under mandatory full matching; it is kept because that is
//! the cost as defined.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::teacher::{Label, LabelClass, LabelSource};

/// One query's output triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub bbox: BBox,
    /// Foreground-ness score from the dedicated head, in `[0, 1]`.
    pub box_score: f64,
    /// Per-channel class scores (independent sigmoids); the last channel is
    /// the unknown class.
    pub class_scores: Vec<f64>,
}

impl Prediction {
    /// Channel index read for a label of the given class. Known classes use
    /// their dense id; teacher labels read the trailing unknown channel.
    pub fn channel_for(class: LabelClass, unknown_channel: usize) -> usize {
        match class {
            LabelClass::Known(id) => id,
            LabelClass::Unknown => unknown_channel,
        }
    }
}

/// Matching coefficients for the regression part of the pair cost.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MatchWeights {
    pub lambda_l1: f64,
    pub lambda_giou: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self { lambda_l1: 1.0, lambda_giou: 1.0 }
    }
}

/// Result of matching one image's labels against its predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(label_index, prediction_index)` pairs, one per label.
    pub pairs: Vec<(usize, usize)>,
    /// Prediction indices matched to ground-truth labels.
    pub gt_matched: Vec<usize>,
    /// Prediction indices matched to teacher labels.
    pub teacher_matched: Vec<usize>,
    /// Pseudo-label prediction indices (filled by [`select_pseudo`]).
    pub pseudo: Vec<usize>,
    /// All prediction indices not matched to any label (pseudo included).
    pub unmatched: Vec<usize>,
}

impl Assignment {
    /// Label index matched to a prediction, if any.
    pub fn label_for(&self, pred_index: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, p)| p == pred_index).map(|&(l, _)| l)
    }

    /// Unmatched predictions that were not selected as pseudo-labels.
    pub fn background(&self) -> Vec<usize> {
        self.unmatched.iter().copied().filter(|i| !self.pseudo.contains(i)).collect()
    }
}

/// Pair-wise matching cost between one label and one prediction.
pub fn pair_cost(
    label: &Label,
    pred: &Prediction,
    weights: MatchWeights,
    unknown_channel: usize,
) -> f64 {
    let channel = Prediction::channel_for(label.class, unknown_channel);
    weights.lambda_l1 * geometry::l1_box_loss(&pred.bbox, &label.bbox)
        + weights.lambda_giou * geometry::giou_loss(&pred.bbox, &label.bbox)
        - pred.class_scores[channel]
        - label.confidence
}

/// Minimum-cost assignment of every row to a distinct column (`rows ≤ cols`).
///
/// Shortest-augmenting-path formulation with potentials, O(rows·cols²).
/// Returns `pairs[r] = c` for each row in order.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let rows = cost.len();
    if rows == 0 {
        return Ok(Vec::new());
    }
    let cols = cost[0].len();
    if rows > cols {
        return Err(Error::Validation(format!(
            "assignment needs rows ≤ cols, got {rows} labels for {cols} predictions"
        )));
    }
    if cost.iter().any(|r| r.len() != cols || r.iter().any(|c| !c.is_finite())) {
        return Err(Error::Numeric("cost matrix must be rectangular and finite".into()));
    }

    // 1-indexed with a virtual column 0 hosting the row being inserted.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut matched_row = vec![0usize; cols + 1]; // column → row (0 = free)
    let mut path = vec![0usize; cols + 1];

    for row in 1..=rows {
        matched_row[0] = row;
        let mut j0 = 0usize;
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    path[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        // Augment along the alternating path back to the virtual column.
        while j0 != 0 {
            let j1 = path[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
        }
    }

    let mut pairs = vec![usize::MAX; rows];
    for j in 1..=cols {
        if matched_row[j] != 0 {
            pairs[matched_row[j] - 1] = j - 1;
        }
    }
    Ok(pairs)
}

/// Builds the full cost matrix, runs the optimal assignment, and splits the
/// matched prediction indices by label source. Pseudo-labels start empty.
pub fn assign(
    labels: &[Label],
    predictions: &[Prediction],
    weights: MatchWeights,
    unknown_channel: usize,
) -> Result<Assignment> {
    if labels.len() > predictions.len() {
        return Err(Error::Validation(format!(
            "{} labels exceed {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let cost: Vec<Vec<f64>> = labels
        .iter()
        .map(|l| predictions.iter().map(|p| pair_cost(l, p, weights, unknown_channel)).collect())
        .collect();
    let row_to_col = hungarian(&cost)?;

    let mut pairs = Vec::with_capacity(labels.len());
    let mut gt_matched = Vec::new();
    let mut teacher_matched = Vec::new();
    let mut is_matched = vec![false; predictions.len()];
    for (label_idx, &pred_idx) in row_to_col.iter().enumerate() {
        pairs.push((label_idx, pred_idx));
        is_matched[pred_idx] = true;
        match labels[label_idx].source {
            LabelSource::GroundTruth => gt_matched.push(pred_idx),
            LabelSource::Teacher => teacher_matched.push(pred_idx),
        }
    }
    let unmatched = (0..predictions.len()).filter(|&i| !is_matched[i]).collect();
    Ok(Assignment { pairs, gt_matched, teacher_matched, pseudo: Vec::new(), unmatched })
}

/// Fills the pseudo-label set: the `k` unmatched predictions with the
/// highest box scores (ties broken by lower index).
pub fn select_pseudo(mut assignment: Assignment, predictions: &[Prediction], k: usize) -> Assignment {
    let mut candidates: Vec<usize> = assignment.unmatched.clone();
    candidates.sort_by(|&a, &b| {
        predictions[b]
            .box_score
            .partial_cmp(&predictions[a].box_score)
            .unwrap()
            .then(a.cmp(&b))
    });
    candidates.truncate(k);
    candidates.sort_unstable();
    assignment.pseudo = candidates;
    assignment
}
