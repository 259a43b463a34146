//! Teacher label ingestion: load detections dumped by a grounded
//! vision-language model, suppress duplicates, align them to the annotation
//! label space, drop currently-known categories, and merge the survivors
//! with ground truth into one supervision set per image.
//!
//! The teacher's identification confidence survives the whole pipeline: it
//! becomes the label confidence that later down-weights training losses.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, BBox};
use crate::protocol::{Annotation, ClassRegistry, TaskState};

/// One raw teacher detection, already normalized to the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherDetection {
    pub image_id: u64,
    /// Name in the teacher's vocabulary (not necessarily a registry name).
    pub category: String,
    pub bbox: BBox,
    pub score: f64,
}

/// Class slot of a supervision label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelClass {
    Known(usize),
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    Teacher,
}

/// A supervision target: class, box, confidence, provenance.
///
/// Ground-truth labels always carry confidence 1 and a known class; teacher
/// labels are always relabeled unknown and keep the teacher's score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub class: LabelClass,
    pub bbox: BBox,
    pub confidence: f64,
    pub source: LabelSource,
}

impl Label {
    pub fn ground_truth(class_id: usize, bbox: BBox) -> Self {
        Self {
            class: LabelClass::Known(class_id),
            bbox,
            confidence: 1.0,
            source: LabelSource::GroundTruth,
        }
    }

    pub fn teacher(bbox: BBox, score: f64) -> Self {
        Self { class: LabelClass::Unknown, bbox, confidence: score, source: LabelSource::Teacher }
    }
}

#[derive(Deserialize)]
struct TeacherRecord {
    image_id: u64,
    category: String,
    bbox: [f64; 4],
    score: f64,
}

/// Reads a teacher dump (JSONL, one detection per line; boxes in absolute
/// pixels) and groups it per image, score-descending.
///
/// Records with a score outside `(0, 1]`, an unknown image id, or a box that
/// clamps to zero area are rejected with a warning; a malformed line is an
/// error carrying its line number.
pub fn load_teacher(
    path: &Path,
    image_dims: &BTreeMap<u64, (u32, u32)>,
) -> Result<BTreeMap<u64, Vec<TeacherDetection>>> {
    let text = fs::read_to_string(path)?;
    let mut grouped: BTreeMap<u64, Vec<TeacherDetection>> = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: TeacherRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        if !(record.score > 0.0 && record.score <= 1.0) {
            log::warn!(
                "{}:{}: rejecting teacher detection with score {}",
                path.display(),
                idx + 1,
                record.score
            );
            continue;
        }
        let Some(&(iw, ih)) = image_dims.get(&record.image_id) else {
            log::warn!(
                "{}:{}: rejecting teacher detection for unknown image {}",
                path.display(),
                idx + 1,
                record.image_id
            );
            continue;
        };
        let [x, y, w, h] = record.bbox;
        let Some(bbox) = BBox::from_absolute_xywh(x, y, w, h, iw as f64, ih as f64) else {
            log::warn!(
                "{}:{}: rejecting teacher box with zero clamped area",
                path.display(),
                idx + 1
            );
            continue;
        };
        grouped.entry(record.image_id).or_default().push(TeacherDetection {
            image_id: record.image_id,
            category: record.category,
            bbox,
            score: record.score,
        });
    }
    for dets in grouped.values_mut() {
        dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    }
    Ok(grouped)
}

/// Knobs for [`align`].
#[derive(Debug, Clone)]
pub struct AlignOptions {
    /// Teacher detections below this score are dropped before anything else.
    pub score_floor: f64,
    pub nms_threshold: f64,
    /// Geometric guard against synonym drift: survivors overlapping a
    /// ground-truth box at or above this IoU are dropped. `None` switches the
    /// guard off (name-based exclusion only).
    pub gt_suppress_threshold: Option<f64>,
    /// Teacher-vocabulary name → registry name.
    pub synonyms: HashMap<String, String>,
}

impl Default for AlignOptions {
    fn default() -> Self {
        Self {
            score_floor: 0.3,
            nms_threshold: 0.5,
            gt_suppress_threshold: Some(0.5),
            synonyms: HashMap::new(),
        }
    }
}

fn resolve_name(category: &str, opts: &AlignOptions) -> String {
    let lower = category.to_lowercase();
    opts.synonyms.get(&lower).cloned().unwrap_or(lower)
}

/// Aligns the teacher detections of one image to the label space.
///
/// Pipeline: score floor → NMS → drop currently-known category names →
/// relabel survivors unknown keeping the score as confidence → drop
/// survivors lying on a ground-truth box (when the guard is on).
pub fn align_image(
    dets: &[TeacherDetection],
    registry: &ClassRegistry,
    state: &TaskState,
    gt: &[Annotation],
    opts: &AlignOptions,
) -> Vec<Label> {
    let floored: Vec<&TeacherDetection> =
        dets.iter().filter(|d| d.score >= opts.score_floor).collect();

    let scored: Vec<(BBox, f64)> = floored.iter().map(|d| (d.bbox, d.score)).collect();
    let kept = geometry::nms(&scored, opts.nms_threshold);

    let mut labels = Vec::new();
    for idx in kept {
        let det = floored[idx];
        let name = resolve_name(&det.category, opts);
        if registry.id(&name).is_some_and(|id| state.is_known(id)) {
            continue;
        }
        if let Some(thr) = opts.gt_suppress_threshold {
            if gt.iter().any(|a| geometry::iou(&a.bbox, &det.bbox) >= thr) {
                continue;
            }
        }
        labels.push(Label::teacher(det.bbox, det.score));
    }
    labels
}

/// Runs [`align_image`] over a whole dataset worth of teacher detections.
pub fn align(
    dets: &BTreeMap<u64, Vec<TeacherDetection>>,
    registry: &ClassRegistry,
    state: &TaskState,
    gt: &BTreeMap<u64, Vec<Annotation>>,
    opts: &AlignOptions,
) -> BTreeMap<u64, Vec<Label>> {
    dets.iter()
        .map(|(&image_id, image_dets)| {
            let image_gt = gt.get(&image_id).map(Vec::as_slice).unwrap_or(&[]);
            (image_id, align_image(image_dets, registry, state, image_gt, opts))
        })
        .collect()
}

/// Merges ground truth and aligned teacher labels for one image: ground
/// truth first (confidence 1), teacher labels after, both in input order.
pub fn merge(gt: &[Annotation], teacher_labels: &[Label]) -> Vec<Label> {
    let mut out: Vec<Label> = gt.iter().map(|a| Label::ground_truth(a.class_id, a.bbox)).collect();
    out.extend(teacher_labels.iter().cloned());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::io::Write;

    fn state_known2() -> TaskState {
        TaskState::new(1, BTreeSet::new(), BTreeSet::from([0, 1]))
    }

    fn registry() -> ClassRegistry {
        ClassRegistry::from_names(["cat", "dog", "bus", "sofa"]).unwrap()
    }

    fn dims() -> BTreeMap<u64, (u32, u32)> {
        BTreeMap::from([(1, (100, 100)), (2, (200, 100))])
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn empty_dump_loads_empty() {
        let f = write_temp("");
        assert!(load_teacher(f.path(), &dims()).unwrap().is_empty());
    }

    #[test]
    fn same_image_lines_group_and_sort() {
        let f = write_temp(concat!(
            r#"{"image_id":1,"category":"hat","bbox":[10,10,20,20],"score":0.4}"#,
            "\n",
            r#"{"image_id":1,"category":"shoe","bbox":[50,50,20,20],"score":0.9}"#,
            "\n",
        ));
        let grouped = load_teacher(f.path(), &dims()).unwrap();
        assert_eq!(grouped.len(), 1);
        let dets = &grouped[&1];
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].category, "shoe");
        assert!(dets[0].score >= dets[1].score);
    }

    #[test]
    fn out_of_range_score_is_rejected() {
        let f = write_temp(concat!(
            r#"{"image_id":1,"category":"hat","bbox":[10,10,20,20],"score":1.3}"#,
            "\n",
        ));
        let grouped = load_teacher(f.path(), &dims()).unwrap();
        assert!(grouped.is_empty());
    }

    #[test]
    fn malformed_line_reports_number() {
        let f = write_temp(concat!(
            r#"{"image_id":1,"category":"hat","bbox":[10,10,20,20],"score":0.5}"#,
            "\n",
            "not json\n",
        ));
        match load_teacher(f.path(), &dims()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    fn det(category: &str, bbox: BBox, score: f64) -> TeacherDetection {
        TeacherDetection { image_id: 1, category: category.into(), bbox, score }
    }

    #[test]
    fn known_category_names_are_excluded() {
        let dets = vec![
            det("cat", BBox::new(0.3, 0.3, 0.2, 0.2), 0.9),
            det("Dog", BBox::new(0.7, 0.7, 0.2, 0.2), 0.8),
        ];
        let labels =
            align_image(&dets, &registry(), &state_known2(), &[], &AlignOptions::default());
        assert!(labels.is_empty());
    }

    #[test]
    fn novel_name_passes_through_with_confidence() {
        let dets = vec![det("hat", BBox::new(0.3, 0.3, 0.2, 0.2), 0.8)];
        let labels =
            align_image(&dets, &registry(), &state_known2(), &[], &AlignOptions::default());
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].class, LabelClass::Unknown);
        assert_eq!(labels[0].confidence, 0.8);
        assert_eq!(labels[0].source, LabelSource::Teacher);
    }

    #[test]
    fn registry_name_not_yet_known_passes() {
        // "bus" is in the registry but not known at task 1: keep as unknown.
        let dets = vec![det("bus", BBox::new(0.3, 0.3, 0.2, 0.2), 0.8)];
        let labels =
            align_image(&dets, &registry(), &state_known2(), &[], &AlignOptions::default());
        assert_eq!(labels.len(), 1);
    }

    #[test]
    fn synonym_map_reaches_known_exclusion() {
        let mut opts = AlignOptions::default();
        opts.synonyms.insert("kitty".into(), "cat".into());
        let dets = vec![det("kitty", BBox::new(0.3, 0.3, 0.2, 0.2), 0.8)];
        let labels = align_image(&dets, &registry(), &state_known2(), &[], &opts);
        assert!(labels.is_empty());
    }

    #[test]
    fn gt_overlap_suppression_drops_detection() {
        let gt_box = BBox::new(0.3, 0.3, 0.2, 0.2);
        let near = BBox::new(0.305, 0.3, 0.2, 0.2);
        assert!(geometry::iou(&gt_box, &near) >= 0.9);
        let dets = vec![det("hat", near, 0.8)];
        let gt = vec![Annotation { class_id: 0, bbox: gt_box }];
        let labels =
            align_image(&dets, &registry(), &state_known2(), &gt, &AlignOptions::default());
        assert!(labels.is_empty());
        // The guard can be switched off for strict name-only exclusion.
        let opts = AlignOptions { gt_suppress_threshold: None, ..AlignOptions::default() };
        let labels = align_image(&dets, &registry(), &state_known2(), &gt, &opts);
        assert_eq!(labels.len(), 1);
    }

    #[test]
    fn below_floor_and_nms_duplicates_removed() {
        let b = BBox::new(0.3, 0.3, 0.2, 0.2);
        let dets = vec![
            det("hat", b, 0.9),
            det("shoe", b, 0.8),                            // suppressed by NMS
            det("bag", BBox::new(0.7, 0.7, 0.2, 0.2), 0.1), // below floor
        ];
        let labels =
            align_image(&dets, &registry(), &state_known2(), &[], &AlignOptions::default());
        assert_eq!(labels.len(), 1);
        assert_eq!(labels[0].confidence, 0.9);
    }

    #[test]
    fn teacher_survivors_are_nms_consistent() {
        use rand::Rng;
        let mut rng = crate::rng::stream(31, "teacher-nms");
        for _ in 0..100 {
            let n = rng.random_range(1..=8);
            let dets: Vec<TeacherDetection> = (0..n)
                .map(|i| {
                    det(
                        if i % 2 == 0 { "hat" } else { "shoe" },
                        BBox::new(
                            rng.random_range(0.2..0.8),
                            rng.random_range(0.2..0.8),
                            rng.random_range(0.05..0.3),
                            rng.random_range(0.05..0.3),
                        ),
                        rng.random_range(0.35..1.0),
                    )
                })
                .collect();
            let opts = AlignOptions::default();
            let labels = align_image(&dets, &registry(), &state_known2(), &[], &opts);
            for (i, a) in labels.iter().enumerate() {
                assert_eq!(a.class, LabelClass::Unknown);
                for b in &labels[i + 1..] {
                    assert!(geometry::iou(&a.bbox, &b.bbox) < opts.nms_threshold);
                }
            }
        }
    }

    #[test]
    fn merge_orders_gt_first() {
        let gt = vec![
            Annotation { class_id: 0, bbox: BBox::new(0.3, 0.3, 0.2, 0.2) },
            Annotation { class_id: 1, bbox: BBox::new(0.6, 0.6, 0.2, 0.2) },
        ];
        let teacher = vec![Label::teacher(BBox::new(0.8, 0.2, 0.1, 0.1), 0.7)];
        let merged = merge(&gt, &teacher);
        assert_eq!(merged.len(), 3);
        assert_eq!(merged[0].source, LabelSource::GroundTruth);
        assert_eq!(merged[0].confidence, 1.0);
        assert_eq!(merged[1].source, LabelSource::GroundTruth);
        assert_eq!(merged[2].source, LabelSource::Teacher);
    }

    #[test]
    fn merge_of_nothing_is_empty() {
        assert!(merge(&[], &[]).is_empty());
    }

    #[test]
    fn merge_count_is_sum_of_inputs() {
        use rand::Rng;
        let mut rng = crate::rng::stream(37, "teacher-merge");
        for _ in 0..100 {
            let ng = rng.random_range(0..5);
            let nt = rng.random_range(0..5);
            let gt: Vec<Annotation> = (0..ng)
                .map(|_| Annotation { class_id: 0, bbox: BBox::new(0.5, 0.5, 0.2, 0.2) })
                .collect();
            let teacher: Vec<Label> =
                (0..nt).map(|_| Label::teacher(BBox::new(0.5, 0.5, 0.2, 0.2), 0.5)).collect();
            assert_eq!(merge(&gt, &teacher).len(), ng + nt);
        }
    }
}
