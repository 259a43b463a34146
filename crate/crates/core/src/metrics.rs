//! Open-world evaluation: per-class AP and mAP over the known classes,
//! unknown recall, wilderness impact, and absolute open-set error.
//!
//! All matching is greedy in score order at a single IoU threshold (0.5 by
//! default), each ground-truth box usable once. Classes with no ground truth
//! have undefined AP and are excluded from means rather than counted as 0.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detector::Detection;
use crate::geometry::{self, BBox};
use crate::protocol::TaskState;
use crate::teacher::LabelClass;

/// One evaluation ground-truth box. `known` reflects the episode's class
/// partition; unknown ground truth comes from future-task annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGt {
    pub category: usize,
    pub known: bool,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalImage {
    pub gts: Vec<EvalGt>,
    pub dets: Vec<Detection>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalSet {
    pub images: Vec<EvalImage>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub iou_threshold: f64,
    /// Recall operating point for wilderness impact.
    pub wi_recall_level: f64,
    /// 11-point interpolated AP instead of the continuous envelope area.
    pub eleven_point_ap: bool,
    /// Optional score floor restricting which detections count for A-OSE.
    pub aose_score_floor: Option<f64>,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            wi_recall_level: 0.8,
            eleven_point_ap: false,
            aose_score_floor: None,
        }
    }
}

/// Per-class AP outcome, with the raw PR points for plotting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    /// `None` when the class has no ground truth in the set.
    pub ap: Option<f64>,
    pub true_positives: usize,
    pub false_positives: usize,
    pub missed: usize,
    /// `(recall, precision)` after each detection, score-descending.
    pub pr_curve: Vec<(f64, f64)>,
}

// Detections of one class pooled over the set, score-descending with
// deterministic tie-breaks, each matched greedily against that class's GT.
fn match_class_detections(
    eval: &EvalSet,
    class_id: usize,
    iou_thr: f64,
) -> (Vec<bool>, usize) {
    let mut dets: Vec<(usize, usize, f64)> = Vec::new();
    for (img_idx, image) in eval.images.iter().enumerate() {
        for (det_idx, det) in image.dets.iter().enumerate() {
            if det.class == LabelClass::Known(class_id) {
                dets.push((img_idx, det_idx, det.score));
            }
        }
    }
    dets.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });

    let n_gt: usize = eval
        .images
        .iter()
        .map(|im| im.gts.iter().filter(|g| g.category == class_id).count())
        .sum();

    let mut gt_used: Vec<Vec<bool>> =
        eval.images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let mut hits = Vec::with_capacity(dets.len());
    for &(img_idx, det_idx, _) in &dets {
        let image = &eval.images[img_idx];
        let det_box = &image.dets[det_idx].bbox;
        let mut best: Option<(usize, f64)> = None;
        for (gt_idx, gt) in image.gts.iter().enumerate() {
            if gt.category != class_id || gt_used[img_idx][gt_idx] {
                continue;
            }
            let overlap = geometry::iou(det_box, &gt.bbox);
            if overlap >= iou_thr && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gt_idx, overlap));
            }
        }
        match best {
            Some((gt_idx, _)) => {
                gt_used[img_idx][gt_idx] = true;
                hits.push(true);
            }
            None => hits.push(false),
        }
    }
    (hits, n_gt)
}

/// Average precision for one known class. `None` when the class has no
/// ground truth.
pub fn average_precision(eval: &EvalSet, class_id: usize, cfg: &MetricsConfig) -> Option<ClassMetrics> {
    let (hits, n_gt) = match_class_detections(eval, class_id, cfg.iou_threshold);
    let mut tp = 0usize;
    let mut pr_curve = Vec::with_capacity(hits.len());
    for (rank, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        if n_gt > 0 {
            pr_curve.push((tp as f64 / n_gt as f64, tp as f64 / (rank + 1) as f64));
        }
    }
    if n_gt == 0 {
        return None;
    }

    // Monotone precision envelope from the right.
    let mut envelope: Vec<f64> = pr_curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }

    let ap = if cfg.eleven_point_ap {
        let mut sum = 0.0;
        for step in 0..=10 {
            let level = step as f64 / 10.0;
            let best = pr_curve
                .iter()
                .zip(&envelope)
                .filter(|(&(r, _), _)| r >= level - 1e-12)
                .map(|(_, &e)| e)
                .fold(0.0, f64::max);
            sum += best;
        }
        sum / 11.0
    } else {
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for (i, &(r, _)) in pr_curve.iter().enumerate() {
            if r > prev_recall {
                area += (r - prev_recall) * envelope[i];
                prev_recall = r;
            }
        }
        area
    };

    Some(ClassMetrics {
        class_id,
        ap: Some(ap),
        true_positives: tp,
        false_positives: hits.len() - tp,
        missed: n_gt - tp,
        pr_curve,
    })
}

/// Per-category unknown retrieval counts: `category → (matched, total)`.
///
/// Unknown-labeled detections are matched greedily (score order, per image)
/// against all unknown ground truth; the counts are then split by category,
/// so a filtered recall never double-books a detection.
pub fn unknown_recall_by_category(
    eval: &EvalSet,
    cfg: &MetricsConfig,
) -> BTreeMap<usize, (usize, usize)> {
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for image in &eval.images {
        for gt in image.gts.iter().filter(|g| !g.known) {
            counts.entry(gt.category).or_insert((0, 0)).1 += 1;
        }
        let mut dets: Vec<&Detection> =
            image.dets.iter().filter(|d| d.class == LabelClass::Unknown).collect();
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut used = vec![false; image.gts.len()];
        for det in dets {
            let mut best: Option<(usize, f64)> = None;
            for (gt_idx, gt) in image.gts.iter().enumerate() {
                if gt.known || used[gt_idx] {
                    continue;
                }
                let overlap = geometry::iou(&det.bbox, &gt.bbox);
                if overlap >= cfg.iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((gt_idx, overlap));
                }
            }
            if let Some((gt_idx, _)) = best {
                used[gt_idx] = true;
                counts.get_mut(&image.gts[gt_idx].category).unwrap().0 += 1;
            }
        }
    }
    counts
}

/// Fraction of unknown ground-truth instances retrieved by unknown-labeled
/// detections, optionally restricted to the given categories. `None` when
/// there is no unknown ground truth to retrieve.
pub fn u_recall(
    eval: &EvalSet,
    cfg: &MetricsConfig,
    categories: Option<&BTreeSet<usize>>,
) -> Option<f64> {
    let counts = unknown_recall_by_category(eval, cfg);
    let (mut matched, mut total) = (0usize, 0usize);
    for (cat, &(m, t)) in &counts {
        if categories.is_none_or(|set| set.contains(cat)) {
            matched += m;
            total += t;
        }
    }
    (total > 0).then(|| matched as f64 / total as f64)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WiReport {
    pub wilderness_impact: f64,
    /// Precision of known-class detections with unknown hits discounted.
    pub precision_known: f64,
    /// Precision with unknown hits counted as false positives.
    pub precision_mixed: f64,
    pub achieved_recall: f64,
    /// False when the requested recall level was unreachable and the metric
    /// was taken at the maximum achieved recall instead.
    pub reached_level: bool,
}

/// Wilderness impact `P_K / P_{K∪U} − 1` at the operating point reaching the
/// configured recall. `None` when there are no known-class detections.
pub fn wilderness_impact(eval: &EvalSet, cfg: &MetricsConfig) -> Option<WiReport> {
    #[derive(Clone, Copy, PartialEq)]
    enum Kind {
        TruePositive,
        FalsePositive,
        UnknownHit,
    }

    let mut dets: Vec<(usize, usize, f64)> = Vec::new();
    for (img_idx, image) in eval.images.iter().enumerate() {
        for (det_idx, det) in image.dets.iter().enumerate() {
            if matches!(det.class, LabelClass::Known(_)) {
                dets.push((img_idx, det_idx, det.score));
            }
        }
    }
    if dets.is_empty() {
        return None;
    }
    dets.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    });

    let total_known_gt: usize =
        eval.images.iter().map(|im| im.gts.iter().filter(|g| g.known).count()).sum();
    let mut gt_used: Vec<Vec<bool>> =
        eval.images.iter().map(|im| vec![false; im.gts.len()]).collect();

    let mut kinds = Vec::with_capacity(dets.len());
    for &(img_idx, det_idx, _) in &dets {
        let image = &eval.images[img_idx];
        let det = &image.dets[det_idx];
        let LabelClass::Known(class_id) = det.class else { unreachable!() };
        let mut best: Option<(usize, f64)> = None;
        for (gt_idx, gt) in image.gts.iter().enumerate() {
            if !gt.known || gt.category != class_id || gt_used[img_idx][gt_idx] {
                continue;
            }
            let overlap = geometry::iou(&det.bbox, &gt.bbox);
            if overlap >= cfg.iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gt_idx, overlap));
            }
        }
        if let Some((gt_idx, _)) = best {
            gt_used[img_idx][gt_idx] = true;
            kinds.push(Kind::TruePositive);
            continue;
        }
        let on_unknown = image.gts.iter().any(|g| {
            !g.known && geometry::iou(&det.bbox, &g.bbox) >= cfg.iou_threshold
        });
        kinds.push(if on_unknown { Kind::UnknownHit } else { Kind::FalsePositive });
    }

    // Smallest prefix reaching the recall level, else the full list.
    let mut tp = 0usize;
    let mut cut = kinds.len();
    let mut reached = false;
    for (i, kind) in kinds.iter().enumerate() {
        if *kind == Kind::TruePositive {
            tp += 1;
            if total_known_gt > 0 && tp as f64 / total_known_gt as f64 >= cfg.wi_recall_level {
                cut = i + 1;
                reached = true;
                break;
            }
        }
    }

    let prefix = &kinds[..cut];
    let tp = prefix.iter().filter(|k| **k == Kind::TruePositive).count() as f64;
    let fp = prefix.iter().filter(|k| **k == Kind::FalsePositive).count() as f64;
    let unknown_hits = prefix.iter().filter(|k| **k == Kind::UnknownHit).count() as f64;
    let precision_known = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let precision_mixed =
        if tp + fp + unknown_hits > 0.0 { tp / (tp + fp + unknown_hits) } else { 0.0 };
    let wilderness_impact =
        if precision_mixed > 0.0 { precision_known / precision_mixed - 1.0 } else { 0.0 };
    Some(WiReport {
        wilderness_impact,
        precision_known,
        precision_mixed,
        achieved_recall: if total_known_gt > 0 { tp / total_known_gt as f64 } else { 0.0 },
        reached_level: reached,
    })
}

/// Absolute open-set error: unknown ground-truth boxes whose best-overlapping
/// surviving detection carries a known class label.
pub fn a_ose(eval: &EvalSet, cfg: &MetricsConfig) -> usize {
    let mut count = 0;
    for image in &eval.images {
        for gt in image.gts.iter().filter(|g| !g.known) {
            let mut best: Option<(&Detection, f64)> = None;
            for det in &image.dets {
                if cfg.aose_score_floor.is_some_and(|floor| det.score < floor) {
                    continue;
                }
                let overlap = geometry::iou(&det.bbox, &gt.bbox);
                if overlap < cfg.iou_threshold {
                    continue;
                }
                let better = match best {
                    None => true,
                    Some((b, bo)) => {
                        overlap > bo || (overlap == bo && det.score > b.score)
                    }
                };
                if better {
                    best = Some((det, overlap));
                }
            }
            if let Some((det, _)) = best {
                if matches!(det.class, LabelClass::Known(_)) {
                    count += 1;
                }
            }
        }
    }
    count
}

/// Full evaluation bundle in Previously/Current/Both layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub map_previously: Option<f64>,
    pub map_current: Option<f64>,
    pub map_both: Option<f64>,
    pub u_recall: Option<f64>,
    /// Unknown category → (retrieved, total).
    pub unknown_by_category: BTreeMap<usize, (usize, usize)>,
    pub wilderness: Option<WiReport>,
    pub a_ose: usize,
}

fn mean_ap(per_class: &[ClassMetrics], ids: &BTreeSet<usize>) -> Option<f64> {
    let values: Vec<f64> = per_class
        .iter()
        .filter(|c| ids.contains(&c.class_id))
        .filter_map(|c| c.ap)
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Evaluates the set against one episode's class partition.
pub fn evaluate(eval: &EvalSet, state: &TaskState, cfg: &MetricsConfig) -> MetricsReport {
    let per_class: Vec<ClassMetrics> = state
        .known_ids
        .iter()
        .filter_map(|&class_id| average_precision(eval, class_id, cfg))
        .collect();
    MetricsReport {
        map_previously: mean_ap(&per_class, &state.previously_known_ids),
        map_current: mean_ap(&per_class, &state.current_task_ids),
        map_both: mean_ap(&per_class, &state.known_ids),
        u_recall: u_recall(eval, cfg, None),
        unknown_by_category: unknown_recall_by_category(eval, cfg),
        wilderness: wilderness_impact(eval, cfg),
        a_ose: a_ose(eval, cfg),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(category: usize, known: bool, cx: f64, cy: f64) -> EvalGt {
        EvalGt { category, known, bbox: BBox::new(cx, cy, 0.1, 0.1) }
    }

    fn det_known(class: usize, score: f64, cx: f64, cy: f64) -> Detection {
        Detection { class: LabelClass::Known(class), score, bbox: BBox::new(cx, cy, 0.1, 0.1) }
    }

    fn det_unknown(score: f64, cx: f64, cy: f64) -> Detection {
        Detection { class: LabelClass::Unknown, score, bbox: BBox::new(cx, cy, 0.1, 0.1) }
    }

    fn cfg() -> MetricsConfig {
        MetricsConfig::default()
    }

    #[test]
    fn exact_detection_has_unit_ap() {
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(0, true, 0.3, 0.3)],
                dets: vec![det_known(0, 0.9, 0.3, 0.3)],
            }],
        };
        let m = average_precision(&eval, 0, &cfg()).unwrap();
        assert_eq!(m.ap, Some(1.0));
        assert_eq!((m.true_positives, m.false_positives, m.missed), (1, 0, 0));
    }

    #[test]
    fn disjoint_detection_has_zero_ap() {
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(0, true, 0.2, 0.2)],
                dets: vec![det_known(0, 0.9, 0.8, 0.8)],
            }],
        };
        assert_eq!(average_precision(&eval, 0, &cfg()).unwrap().ap, Some(0.0));
    }

    #[test]
    fn ap_without_ground_truth_is_undefined() {
        let eval = EvalSet {
            images: vec![EvalImage { gts: vec![], dets: vec![det_known(0, 0.9, 0.5, 0.5)] }],
        };
        assert!(average_precision(&eval, 0, &cfg()).is_none());
    }

    #[test]
    fn three_gt_four_detections_hand_traced_ap() {
        // Ranks: hit, miss, hit, hit → AP = 1/3·1 + 1/3·(3/4) + 1/3·(3/4) = 5/6.
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(0, true, 0.2, 0.2), gt(0, true, 0.5, 0.5), gt(0, true, 0.8, 0.8)],
                dets: vec![
                    det_known(0, 0.9, 0.2, 0.2),
                    det_known(0, 0.8, 0.35, 0.65),
                    det_known(0, 0.7, 0.5, 0.5),
                    det_known(0, 0.6, 0.8, 0.8),
                ],
            }],
        };
        let m = average_precision(&eval, 0, &cfg()).unwrap();
        assert!((m.ap.unwrap() - 5.0 / 6.0).abs() < 1e-12);
        // The 11-point variant of the same scene: levels 0…1/3 see precision
        // 1, the rest see 3/4 → (4·1 + 7·0.75)/11.
        let eleven = MetricsConfig { eleven_point_ap: true, ..cfg() };
        let m11 = average_precision(&eval, 0, &eleven).unwrap();
        assert!((m11.ap.unwrap() - (4.0 + 7.0 * 0.75) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_detections_count_as_false_positives() {
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(0, true, 0.3, 0.3)],
                dets: vec![det_known(0, 0.9, 0.3, 0.3), det_known(0, 0.8, 0.3, 0.3)],
            }],
        };
        let m = average_precision(&eval, 0, &cfg()).unwrap();
        assert_eq!((m.true_positives, m.false_positives), (1, 1));
        assert_eq!(m.ap, Some(1.0));
    }

    #[test]
    fn full_unknown_coverage_has_unit_recall() {
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(8, false, 0.3, 0.3), gt(9, false, 0.7, 0.7)],
                dets: vec![det_unknown(0.9, 0.3, 0.3), det_unknown(0.8, 0.7, 0.7)],
            }],
        };
        assert_eq!(u_recall(&eval, &cfg(), None), Some(1.0));
    }

    #[test]
    fn no_unknown_detections_zero_recall() {
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(8, false, 0.3, 0.3)],
                dets: vec![det_known(0, 0.9, 0.3, 0.3)],
            }],
        };
        assert_eq!(u_recall(&eval, &cfg(), None), Some(0.0));
    }

    #[test]
    fn no_unknown_ground_truth_is_undefined() {
        let eval = EvalSet {
            images: vec![EvalImage { gts: vec![gt(0, true, 0.3, 0.3)], dets: vec![] }],
        };
        assert_eq!(u_recall(&eval, &cfg(), None), None);
    }

    #[test]
    fn three_of_five_unknowns_recalled() {
        let spots = [(0.1, 0.1), (0.3, 0.3), (0.5, 0.5), (0.7, 0.7), (0.9, 0.9)];
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: spots.iter().map(|&(x, y)| gt(8, false, x, y)).collect(),
                dets: spots[..3].iter().map(|&(x, y)| det_unknown(0.8, x, y)).collect(),
            }],
        };
        assert_eq!(u_recall(&eval, &cfg(), None), Some(0.6));
    }

    #[test]
    fn recall_filter_by_category() {
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(8, false, 0.3, 0.3), gt(11, false, 0.7, 0.7)],
                dets: vec![det_unknown(0.9, 0.3, 0.3)],
            }],
        };
        let held_out = BTreeSet::from([11]);
        assert_eq!(u_recall(&eval, &cfg(), Some(&held_out)), Some(0.0));
        let covered = BTreeSet::from([8]);
        assert_eq!(u_recall(&eval, &cfg(), Some(&covered)), Some(1.0));
    }

    #[test]
    fn wi_is_zero_without_unknown_overlap() {
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(0, true, 0.3, 0.3), gt(8, false, 0.7, 0.7)],
                dets: vec![det_known(0, 0.9, 0.3, 0.3)],
            }],
        };
        let wi = wilderness_impact(&eval, &cfg()).unwrap();
        assert_eq!(wi.wilderness_impact, 0.0);
        assert_eq!(wi.precision_known, wi.precision_mixed);
    }

    #[test]
    fn wi_hand_scenario_half() {
        // Walk at recall 0.8: TP, unknown hit, TP → P_K = 1, P_KU = 2/3.
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(0, true, 0.2, 0.2), gt(0, true, 0.8, 0.8), gt(9, false, 0.5, 0.5)],
                dets: vec![
                    det_known(0, 0.9, 0.2, 0.2),
                    det_known(0, 0.8, 0.5, 0.5),
                    det_known(0, 0.7, 0.8, 0.8),
                ],
            }],
        };
        let wi = wilderness_impact(&eval, &cfg()).unwrap();
        assert!(wi.reached_level);
        assert!((wi.wilderness_impact - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wi_flags_unreachable_recall_level() {
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(0, true, 0.2, 0.2), gt(0, true, 0.8, 0.8)],
                dets: vec![det_known(0, 0.9, 0.2, 0.2)],
            }],
        };
        let wi = wilderness_impact(&eval, &cfg()).unwrap();
        assert!(!wi.reached_level);
        assert_eq!(wi.achieved_recall, 0.5);
    }

    #[test]
    fn wi_nonnegative_on_random_scenes() {
        use rand::Rng;
        let mut rng = crate::rng::stream(103, "metrics-wi");
        for _ in 0..100 {
            let mut gts = Vec::new();
            let mut dets = Vec::new();
            for _ in 0..rng.random_range(1..=4) {
                gts.push(gt(rng.random_range(0..2), true, rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)));
            }
            for _ in 0..rng.random_range(0..=2) {
                gts.push(gt(8, false, rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)));
            }
            for _ in 0..rng.random_range(1..=6) {
                dets.push(det_known(
                    rng.random_range(0..2),
                    rng.random_range(0.1..1.0),
                    rng.random_range(0.1..0.9),
                    rng.random_range(0.1..0.9),
                ));
            }
            let eval = EvalSet { images: vec![EvalImage { gts, dets }] };
            if let Some(wi) = wilderness_impact(&eval, &cfg()) {
                assert!(wi.wilderness_impact >= 0.0);
            }
        }
    }

    #[test]
    fn aose_zero_without_known_detections() {
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(8, false, 0.3, 0.3)],
                dets: vec![det_unknown(0.9, 0.3, 0.3)],
            }],
        };
        assert_eq!(a_ose(&eval, &cfg()), 0);
    }

    #[test]
    fn aose_counts_known_detection_on_unknown_gt() {
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(8, false, 0.3, 0.3)],
                dets: vec![det_known(1, 0.9, 0.3, 0.3)],
            }],
        };
        assert_eq!(a_ose(&eval, &cfg()), 1);
    }

    #[test]
    fn aose_six_box_hand_scenario() {
        // u1's best overlap is a known det (+1); u2's best is unknown (0);
        // u3 has no overlap (0). The known GT and its detection are inert.
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![
                    gt(0, true, 0.15, 0.15),
                    gt(8, false, 0.4, 0.4),
                    gt(9, false, 0.65, 0.65),
                    gt(10, false, 0.9, 0.1),
                ],
                dets: vec![
                    det_known(0, 0.95, 0.15, 0.15),
                    det_known(1, 0.8, 0.4, 0.4),
                    det_unknown(0.7, 0.65, 0.65),
                ],
            }],
        };
        assert_eq!(a_ose(&eval, &cfg()), 1);
    }

    #[test]
    fn adding_detections_never_decreases_recall_nor_breaks_ap_bound() {
        use rand::Rng;
        let mut rng = crate::rng::stream(107, "metrics-mono");
        for _ in 0..50 {
            let mut images = vec![EvalImage {
                gts: (0..rng.random_range(1..=4))
                    .map(|_| gt(0, true, rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)))
                    .collect(),
                dets: (0..rng.random_range(0..=4))
                    .map(|_| {
                        det_known(0, rng.random_range(0.1..1.0), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9))
                    })
                    .collect(),
            }];
            let before = average_precision(&EvalSet { images: images.clone() }, 0, &cfg()).unwrap();
            images[0].dets.push(det_known(
                0,
                rng.random_range(0.1..1.0),
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
            ));
            let after = average_precision(&EvalSet { images }, 0, &cfg()).unwrap();
            assert!(after.true_positives >= before.true_positives);
            assert!(after.ap.unwrap() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn adding_unknown_detections_never_decreases_u_recall() {
        use rand::Rng;
        let mut rng = crate::rng::stream(109, "metrics-urecall-mono");
        for _ in 0..50 {
            let gts: Vec<EvalGt> = (0..rng.random_range(1..=4))
                .map(|_| gt(8, false, rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)))
                .collect();
            let mut dets: Vec<Detection> = (0..rng.random_range(0..=3))
                .map(|_| det_unknown(rng.random_range(0.1..1.0), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)))
                .collect();
            let before =
                u_recall(&EvalSet { images: vec![EvalImage { gts: gts.clone(), dets: dets.clone() }] }, &cfg(), None)
                    .unwrap();
            dets.push(det_unknown(rng.random_range(0.1..1.0), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)));
            let after =
                u_recall(&EvalSet { images: vec![EvalImage { gts, dets }] }, &cfg(), None).unwrap();
            assert!(after >= before - 1e-12);
        }
    }

    #[test]
    fn evaluate_groups_previously_current_both() {
        use std::collections::BTreeSet;
        // Two tasks: classes {0} then {1}; perfect detector for 0, silent on 1.
        let state = TaskState::new(2, BTreeSet::from([0]), BTreeSet::from([1]));
        let eval = EvalSet {
            images: vec![EvalImage {
                gts: vec![gt(0, true, 0.3, 0.3), gt(1, true, 0.7, 0.7), gt(2, false, 0.5, 0.1)],
                dets: vec![det_known(0, 0.9, 0.3, 0.3)],
            }],
        };
        let report = evaluate(&eval, &state, &cfg());
        assert_eq!(report.map_previously, Some(1.0));
        assert_eq!(report.map_current, Some(0.0));
        assert_eq!(report.map_both, Some(0.5));
        assert_eq!(report.u_recall, Some(0.0));
        assert_eq!(report.a_ose, 0);
    }
}
