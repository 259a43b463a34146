//! Seeded synthetic scene generator and teacher oracle.
//!
//! Scenes are token sets, not pixels: every object contributes one feature
//! token carrying its box coordinates, an objectness component, and a noised
//! category archetype; clutter tokens carry boxes but no objectness. This is
//! exactly the input shape the toy detector consumes, and it gives the
//! benchmark full ground truth for unknown objects, so unknown recall has a
//! true denominator.
//!
//! Token layout (feature dimension `D ≥ 6`):
//!
//! ```text
//! [cx, cy, w, h, objectness, signature...]
//! ```
//!
//! The teacher oracle stands in for a grounded vision-language model dump:
//! it emits unknown-category objects inside its vocabulary with a given
//! recall, jittered boxes, and a confidence correlated with the jitter it
//! applied. Categories outside the vocabulary are never emitted, which makes
//! "evolving beyond the teacher" measurable.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::protocol::{Annotation, ClassRegistry};
use crate::rng;
use crate::teacher::TeacherDetection;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub known_categories: usize,
    pub unknown_categories: usize,
    /// Category ids the teacher can name (its text prompt list).
    pub teacher_vocabulary: Vec<usize>,
    /// Token feature dimension; must match the detector dimension.
    pub feature_dim: usize,
    pub objects_per_scene: (usize, usize),
    pub clutter_per_scene: (usize, usize),
    /// Noise added to the objectness/signature part of each token.
    pub noise_sigma: f64,
    /// Probability the teacher emits a vocabulary-covered unknown object.
    pub teacher_recall: f64,
    pub teacher_box_jitter: f64,
    pub teacher_score_mean: f64,
    pub teacher_score_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Default desk-scale benchmark: 8 known categories, 4 unknown of which
    /// 3 are inside the teacher vocabulary and one is held out.
    pub fn benchmark(seed: u64) -> Self {
        Self {
            known_categories: 8,
            unknown_categories: 4,
            teacher_vocabulary: vec![8, 9, 10],
            feature_dim: 32,
            objects_per_scene: (2, 5),
            clutter_per_scene: (3, 6),
            noise_sigma: 0.05,
            teacher_recall: 0.9,
            teacher_box_jitter: 0.01,
            teacher_score_mean: 0.8,
            teacher_score_sigma: 0.1,
            seed,
        }
    }

    pub fn total_categories(&self) -> usize {
        self.known_categories + self.unknown_categories
    }

    pub fn category_name(id: usize) -> String {
        format!("cat{id:02}")
    }

    /// Registry over all synthetic categories, in id order.
    pub fn registry(&self) -> ClassRegistry {
        ClassRegistry::from_names((0..self.total_categories()).map(Self::category_name))
            .expect("generated names are unique")
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 6 {
            return Err(Error::Validation("feature_dim must be at least 6".into()));
        }
        if !(0.0..=1.0).contains(&self.teacher_recall) {
            return Err(Error::Validation("teacher_recall must be in [0, 1]".into()));
        }
        let total = self.total_categories();
        if let Some(&bad) = self.teacher_vocabulary.iter().find(|&&id| id >= total) {
            return Err(Error::Validation(format!(
                "teacher vocabulary id {bad} outside the {total} categories"
            )));
        }
        if self.objects_per_scene.0 > self.objects_per_scene.1
            || self.clutter_per_scene.0 > self.clutter_per_scene.1
        {
            return Err(Error::Validation("scene count ranges must be min ≤ max".into()));
        }
        Ok(())
    }

    /// Identity part of a category token: `[objectness, signature...]`, the
    /// signature being a seeded fixed-norm vector per category. Magnitudes
    /// are sized so attention logits separate within a short training run.
    pub fn archetype(&self, category: usize) -> Vec<f64> {
        const OBJECTNESS: f64 = 2.0;
        const SIGNATURE_NORM: f64 = 2.0;
        let sig_dim = self.feature_dim - 5;
        let mut rng = rng::stream_indexed(self.seed, "archetypes", category as u64);
        let mut sig: Vec<f64> = (0..sig_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = sig.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in &mut sig {
            *v *= SIGNATURE_NORM / norm;
        }
        let mut out = vec![OBJECTNESS];
        out.extend(sig);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: usize,
    pub bbox: BBox,
}

/// One synthetic scene: feature tokens plus the full object list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub tokens: Array2<f64>,
    pub objects: Vec<SceneObject>,
}

impl Scene {
    /// Annotations restricted to the given known set (what an episode's
    /// training labels would contain).
    pub fn known_annotations(&self, known: &BTreeSet<usize>) -> Vec<Annotation> {
        self.objects
            .iter()
            .filter(|o| known.contains(&o.category))
            .map(|o| Annotation { class_id: o.category, bbox: o.bbox })
            .collect()
    }

    /// Annotations for classes in `classes` only (e.g. the current task).
    pub fn annotations_for_classes(&self, classes: &BTreeSet<usize>) -> Vec<Annotation> {
        self.known_annotations(classes)
    }
}

/// Gain on the box-coordinate part of every token. Position must compete
/// with the category signature inside one pooled vector; without the gain
/// the regression head decodes box sizes an order of magnitude more slowly.
const BOX_CHANNEL_SCALE: f64 = 3.0;

fn random_bbox(rng: &mut impl Rng) -> BBox {
    BBox::new(
        rng.random_range(0.15..0.85),
        rng.random_range(0.15..0.85),
        rng.random_range(0.08..0.3),
        rng.random_range(0.08..0.3),
    )
}

// Objects keep their centers apart so each token is attributable to one
// attention target; clutter is unconstrained.
fn random_separated_bbox(rng: &mut impl Rng, placed: &[BBox]) -> BBox {
    for _ in 0..40 {
        let candidate = random_bbox(rng);
        let clear = placed.iter().all(|b| {
            let dx = b.cx - candidate.cx;
            let dy = b.cy - candidate.cy;
            (dx * dx + dy * dy).sqrt() >= 0.22
        });
        if clear {
            return candidate;
        }
    }
    random_bbox(rng)
}

fn write_box_channels(tokens: &mut Array2<f64>, row: usize, bbox: &BBox) {
    tokens[[row, 0]] = bbox.cx * BOX_CHANNEL_SCALE;
    tokens[[row, 1]] = bbox.cy * BOX_CHANNEL_SCALE;
    tokens[[row, 2]] = bbox.w * BOX_CHANNEL_SCALE;
    tokens[[row, 3]] = bbox.h * BOX_CHANNEL_SCALE;
}

/// Generates `n_scenes` scenes deterministically. Each scene draws from its
/// own derived stream, so scenes are independent of generation order; the
/// `split` tag ("train", "eval", ...) keeps corpora disjoint under one seed.
pub fn generate(config: &SynthConfig, n_scenes: usize, split: &str) -> Result<Vec<Scene>> {
    config.validate()?;
    let stream_name = format!("corpus-{split}");
    let dim = config.feature_dim;
    let total = config.total_categories();
    let mut scenes = Vec::with_capacity(n_scenes);
    for idx in 0..n_scenes {
        let mut rng = rng::stream_indexed(config.seed, &stream_name, idx as u64);
        let noise = Normal::new(0.0, config.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
        let n_objects = rng.random_range(config.objects_per_scene.0..=config.objects_per_scene.1);
        let n_clutter = rng.random_range(config.clutter_per_scene.0..=config.clutter_per_scene.1);

        let mut objects: Vec<SceneObject> = Vec::with_capacity(n_objects);
        let mut tokens = Array2::zeros(((n_objects + n_clutter).max(1), dim));
        for t in 0..n_objects {
            let category = rng.random_range(0..total);
            let placed: Vec<BBox> = objects.iter().map(|o| o.bbox).collect();
            let bbox = random_separated_bbox(&mut rng, &placed);
            let identity = config.archetype(category);
            write_box_channels(&mut tokens, t, &bbox);
            for (k, &v) in identity.iter().enumerate() {
                let n = if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                tokens[[t, 4 + k]] = v + n;
            }
            objects.push(SceneObject { category, bbox });
        }
        for c in 0..n_clutter {
            let row = n_objects + c;
            let bbox = random_bbox(&mut rng);
            write_box_channels(&mut tokens, row, &bbox);
            for k in 0..dim - 4 {
                let n = if config.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                tokens[[row, 4 + k]] = n;
            }
        }
        scenes.push(Scene { id: idx as u64, tokens, objects });
    }
    Ok(scenes)
}

/// Simulated assistant: emits vocabulary-covered objects that are unknown at
/// the current episode, with recall, box jitter, and a confidence score that
/// degrades with the jitter actually applied.
pub fn teacher_oracle(
    scene: &Scene,
    config: &SynthConfig,
    known: &BTreeSet<usize>,
) -> Vec<TeacherDetection> {
    let mut rng = rng::stream_indexed(config.seed, "teacher-oracle", scene.id);
    let jitter = Normal::new(0.0, config.teacher_box_jitter.max(f64::MIN_POSITIVE)).unwrap();
    let score_noise = Normal::new(0.0, config.teacher_score_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let mut out = Vec::new();
    for object in &scene.objects {
        if !config.teacher_vocabulary.contains(&object.category) || known.contains(&object.category)
        {
            continue;
        }
        if rng.random_range(0.0..1.0) >= config.teacher_recall {
            continue;
        }
        let b = object.bbox;
        let mut offsets = [0.0f64; 4];
        if config.teacher_box_jitter > 0.0 {
            for o in &mut offsets {
                *o = jitter.sample(&mut rng);
            }
        }
        let bbox = BBox::new(
            (b.cx + offsets[0]).clamp(0.0, 1.0),
            (b.cy + offsets[1]).clamp(0.0, 1.0),
            (b.w + offsets[2]).clamp(0.02, 1.0),
            (b.h + offsets[3]).clamp(0.02, 1.0),
        );
        let jitter_mass: f64 = offsets.iter().map(|o| o.abs()).sum();
        let noise = if config.teacher_score_sigma > 0.0 { score_noise.sample(&mut rng) } else { 0.0 };
        let score = (config.teacher_score_mean - 2.0 * jitter_mass + noise).clamp(0.05, 0.99);
        out.push(TeacherDetection {
            image_id: scene.id,
            category: SynthConfig::category_name(object.category),
            bbox,
            score,
        });
    }
    out
}

/// Writes a corpus as JSONL, one scene per line.
pub fn dump_corpus(scenes: &[Scene], path: &Path) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for scene in scenes {
        serde_json::to_writer(&mut file, scene)?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a corpus written by [`dump_corpus`].
pub fn load_corpus(path: &Path) -> Result<Vec<Scene>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut scenes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        scenes.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(scenes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> SynthConfig {
        SynthConfig::benchmark(1234)
    }

    #[test]
    fn zero_objects_gives_clutter_only_scene() {
        let mut cfg = config();
        cfg.objects_per_scene = (0, 0);
        let scenes = generate(&cfg, 3, "train").unwrap();
        for s in &scenes {
            assert!(s.objects.is_empty());
            assert!(s.tokens.nrows() >= cfg.clutter_per_scene.0);
        }
    }

    #[test]
    fn zero_noise_tokens_equal_archetypes() {
        let mut cfg = config();
        cfg.noise_sigma = 0.0;
        let scenes = generate(&cfg, 5, "train").unwrap();
        for s in &scenes {
            for (t, o) in s.objects.iter().enumerate() {
                let identity = cfg.archetype(o.category);
                for (k, &v) in identity.iter().enumerate() {
                    assert_eq!(s.tokens[[t, 4 + k]], v);
                }
                assert_eq!(s.tokens[[t, 0]], o.bbox.cx * BOX_CHANNEL_SCALE);
            }
        }
    }

    #[test]
    fn same_seed_reproduces_corpus_bit_exactly() {
        let a = generate(&config(), 10, "train").unwrap();
        let b = generate(&config(), 10, "train").unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.tokens, y.tokens);
            assert_eq!(x.objects, y.objects);
        }
        // Splits draw from distinct streams.
        let c = generate(&config(), 10, "eval").unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x.tokens != y.tokens));
    }

    #[test]
    fn full_recall_zero_jitter_oracle_matches_covered_unknowns() {
        let mut cfg = config();
        cfg.teacher_recall = 1.0;
        cfg.teacher_box_jitter = 0.0;
        cfg.teacher_score_sigma = 0.0;
        let scenes = generate(&cfg, 10, "train").unwrap();
        let known: BTreeSet<usize> = (0..cfg.known_categories).collect();
        for s in &scenes {
            let dets = teacher_oracle(s, &cfg, &known);
            let covered: Vec<&SceneObject> = s
                .objects
                .iter()
                .filter(|o| cfg.teacher_vocabulary.contains(&o.category))
                .collect();
            assert_eq!(dets.len(), covered.len());
            for (d, o) in dets.iter().zip(covered) {
                assert_eq!(d.bbox, o.bbox);
                assert_eq!(d.category, SynthConfig::category_name(o.category));
            }
        }
    }

    #[test]
    fn zero_recall_oracle_is_silent() {
        let mut cfg = config();
        cfg.teacher_recall = 0.0;
        let scenes = generate(&cfg, 10, "train").unwrap();
        let known: BTreeSet<usize> = (0..cfg.known_categories).collect();
        for s in &scenes {
            assert!(teacher_oracle(s, &cfg, &known).is_empty());
        }
    }

    #[test]
    fn held_out_category_never_emitted() {
        let cfg = config(); // category 11 is outside the vocabulary
        let mut cfg_full = cfg.clone();
        cfg_full.teacher_recall = 1.0;
        let scenes = generate(&cfg_full, 50, "train").unwrap();
        let known: BTreeSet<usize> = (0..cfg.known_categories).collect();
        let held_out = SynthConfig::category_name(11);
        let mut saw_held_out_object = false;
        for s in &scenes {
            saw_held_out_object |= s.objects.iter().any(|o| o.category == 11);
            for d in teacher_oracle(s, &cfg_full, &known) {
                assert_ne!(d.category, held_out);
            }
        }
        assert!(saw_held_out_object, "corpus should contain held-out objects");
    }

    #[test]
    fn known_categories_are_not_emitted() {
        let mut cfg = config();
        cfg.teacher_vocabulary = vec![0, 8]; // one known, one unknown
        cfg.teacher_recall = 1.0;
        let scenes = generate(&cfg, 20, "train").unwrap();
        let known: BTreeSet<usize> = (0..cfg.known_categories).collect();
        for s in &scenes {
            for d in teacher_oracle(s, &cfg, &known) {
                assert_eq!(d.category, SynthConfig::category_name(8));
            }
        }
    }

    #[test]
    fn corpus_round_trips_through_jsonl() {
        let scenes = generate(&config(), 5, "train").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        dump_corpus(&scenes, &path).unwrap();
        let loaded = load_corpus(&path).unwrap();
        assert_eq!(scenes.len(), loaded.len());
        for (a, b) in scenes.iter().zip(&loaded) {
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.objects, b.objects);
        }
    }

    #[test]
    fn vocabulary_outside_categories_rejected() {
        let mut cfg = config();
        cfg.teacher_vocabulary = vec![40];
        assert!(generate(&cfg, 1, "train").is_err());
    }
}
