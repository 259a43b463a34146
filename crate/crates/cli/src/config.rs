//! Run configuration: one JSON file drives every command; the single seed
//! feeds all named random streams, so a config plus a seed pins a run
//! byte-for-byte.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use owf_core::detector::Optimizer;
use owf_core::losses::{FocalParams, LossConfig};
use owf_core::matching::MatchWeights;
use owf_core::metrics::MetricsConfig;
use owf_core::protocol::{ClassRegistry, SplitConfig, TaskGroup};
use owf_core::synth::SynthConfig;
use owf_core::teacher::AlignOptions;
use owf_core::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Disables the non-paper guards (ground-truth overlap suppression and
    /// background negative targets) in one switch.
    #[serde(default)]
    pub strict_paper: bool,
    /// External data files; only required by `align`.
    #[serde(default)]
    pub paths: DataPaths,
    /// Which task's known set drives the align exclusion (1-based).
    #[serde(default = "default_align_task")]
    pub align_task: usize,
    /// Reject annotation files whose category names are missing from the
    /// split registry (off: drop them with a warning).
    #[serde(default = "default_true")]
    pub strict_categories: bool,
    #[serde(default)]
    pub matching: MatchWeights,
    #[serde(default)]
    pub loss: LossSection,
    #[serde(default = "default_pseudo_k")]
    pub pseudo_k: usize,
    #[serde(default)]
    pub teacher: TeacherSection,
    #[serde(default)]
    pub detector: DetectorSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub synth: SynthSection,
    /// Episode class groups over the synthetic registry; categories not
    /// listed stay unknown for the whole run. Empty means one episode with
    /// every known synthetic category.
    #[serde(default)]
    pub tasks: Vec<Vec<String>>,
    #[serde(default = "default_exemplar_quota")]
    pub exemplar_quota: usize,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default = "default_inference_floor")]
    pub inference_score_floor: f64,
    /// Exemplar-replay finetuning after each episode advance.
    #[serde(default = "default_true")]
    pub replay: bool,
    /// How many evaluation scenes get an SVG box overlay (0 = none).
    #[serde(default)]
    pub overlay_scenes: usize,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_align_task() -> usize {
    1
}

fn default_pseudo_k() -> usize {
    5
}

fn default_exemplar_quota() -> usize {
    20
}

fn default_inference_floor() -> f64 {
    0.25
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub annotations: Option<PathBuf>,
    pub teacher_dump: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub synonyms: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub gamma: f64,
    pub denom_eps: f64,
    pub negatives: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        let LossConfig { focal, denom_eps, negatives } = LossConfig::default();
        Self { alpha: focal.alpha, gamma: focal.gamma, denom_eps, negatives }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSection {
    /// Feed teacher labels into training at all.
    pub enabled: bool,
    pub score_floor: f64,
    pub nms_threshold: f64,
    pub gt_suppress_threshold: Option<f64>,
}

impl Default for TeacherSection {
    fn default() -> Self {
        let opts = AlignOptions::default();
        Self {
            enabled: true,
            score_floor: opts.score_floor,
            nms_threshold: opts.nms_threshold,
            gt_suppress_threshold: opts.gt_suppress_threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSection {
    pub queries: usize,
    pub dim: usize,
    pub ff_dim: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self { queries: 16, dim: 32, ff_dim: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub epochs: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub rule: Optimizer,
    pub grad_clip: Option<f64>,
    pub finetune_epochs: usize,
    pub finetune_learning_rate: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 3e-3,
            rule: Optimizer::default(),
            grad_clip: Some(5.0),
            finetune_epochs: 10,
            finetune_learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub known_categories: usize,
    pub unknown_categories: usize,
    pub teacher_vocabulary: Vec<usize>,
    pub objects_per_scene: (usize, usize),
    pub clutter_per_scene: (usize, usize),
    pub noise_sigma: f64,
    pub teacher_recall: f64,
    pub teacher_box_jitter: f64,
    pub teacher_score_mean: f64,
    pub teacher_score_sigma: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let base = SynthConfig::benchmark(0);
        Self {
            known_categories: base.known_categories,
            unknown_categories: base.unknown_categories,
            teacher_vocabulary: base.teacher_vocabulary,
            objects_per_scene: base.objects_per_scene,
            clutter_per_scene: base.clutter_per_scene,
            noise_sigma: base.noise_sigma,
            teacher_recall: base.teacher_recall,
            teacher_box_jitter: base.teacher_box_jitter,
            teacher_score_mean: base.teacher_score_mean,
            teacher_score_sigma: base.teacher_score_sigma,
            train_scenes: 200,
            eval_scenes: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    pub iou_threshold: f64,
    pub wi_recall_level: f64,
    pub eleven_point_ap: bool,
    pub aose_score_floor: Option<f64>,
}

impl Default for MetricsSection {
    fn default() -> Self {
        let base = MetricsConfig::default();
        Self {
            iou_threshold: base.iou_threshold,
            wi_recall_level: base.wi_recall_level,
            eleven_point_ap: base.eleven_point_ap,
            aose_score_floor: base.aose_score_floor,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Built-in defaults at a given seed (the seeded synthetic benchmark).
    pub fn default_with_seed(seed: u64) -> Self {
        let text = format!("{{\"seed\": {seed}}}");
        serde_json::from_str(&text).expect("defaults fill every field")
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            known_categories: self.synth.known_categories,
            unknown_categories: self.synth.unknown_categories,
            teacher_vocabulary: self.synth.teacher_vocabulary.clone(),
            feature_dim: self.detector.dim,
            objects_per_scene: self.synth.objects_per_scene,
            clutter_per_scene: self.synth.clutter_per_scene,
            noise_sigma: self.synth.noise_sigma,
            teacher_recall: self.synth.teacher_recall,
            teacher_box_jitter: self.synth.teacher_box_jitter,
            teacher_score_mean: self.synth.teacher_score_mean,
            teacher_score_sigma: self.synth.teacher_score_sigma,
            seed: self.seed,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            focal: FocalParams { alpha: self.loss.alpha, gamma: self.loss.gamma },
            denom_eps: self.loss.denom_eps,
            negatives: self.loss.negatives && !self.strict_paper,
        }
    }

    pub fn align_options(&self) -> AlignOptions {
        AlignOptions {
            score_floor: self.teacher.score_floor,
            nms_threshold: self.teacher.nms_threshold,
            gt_suppress_threshold: if self.strict_paper {
                None
            } else {
                self.teacher.gt_suppress_threshold
            },
            synonyms: Default::default(),
        }
    }

    pub fn metrics_config(&self) -> MetricsConfig {
        MetricsConfig {
            iou_threshold: self.metrics.iou_threshold,
            wi_recall_level: self.metrics.wi_recall_level,
            eleven_point_ap: self.metrics.eleven_point_ap,
            aose_score_floor: self.metrics.aose_score_floor,
        }
    }

    /// The episode groups over the synthetic registry, plus one trailing
    /// "future" group holding every category not listed, so that the split
    /// covers the registry and the leftovers stay unknown throughout.
    pub fn effective_split(&self) -> Result<SplitConfig> {
        let synth = self.synth_config();
        synth.validate()?;
        let registry = synth.registry();
        let episode_groups: Vec<Vec<String>> = if self.tasks.is_empty() {
            vec![(0..synth.known_categories).map(SynthConfig::category_name).collect()]
        } else {
            self.tasks.clone()
        };
        let mut listed: BTreeSet<String> = BTreeSet::new();
        for group in &episode_groups {
            for name in group {
                if registry.id(name).is_none() {
                    return Err(Error::Validation(format!(
                        "task class '{name}' is not a synthetic category"
                    )));
                }
                if !listed.insert(name.clone()) {
                    return Err(Error::Validation(format!(
                        "task class '{name}' listed twice"
                    )));
                }
            }
        }
        let mut tasks: Vec<TaskGroup> = episode_groups
            .into_iter()
            .enumerate()
            .map(|(i, classes)| TaskGroup { name: format!("task{}", i + 1), classes })
            .collect();
        let rest: Vec<String> = registry
            .names()
            .iter()
            .filter(|n| !listed.contains(*n))
            .cloned()
            .collect();
        if !rest.is_empty() {
            tasks.push(TaskGroup { name: "future".to_string(), classes: rest });
        }
        Ok(SplitConfig { tasks })
    }

    /// Number of episodes actually trained (the trailing "future" group is
    /// never trained).
    pub fn trained_episodes(&self) -> usize {
        if self.tasks.is_empty() {
            1
        } else {
            self.tasks.len()
        }
    }

    pub fn registry(&self) -> ClassRegistry {
        self.synth_config().registry()
    }

    pub fn validate_for_align(&self) -> Result<()> {
        for (what, path) in [
            ("annotations", &self.paths.annotations),
            ("teacher_dump", &self.paths.teacher_dump),
            ("split", &self.paths.split),
        ] {
            match path {
                None => {
                    return Err(Error::Validation(format!("align requires paths.{what}")));
                }
                Some(p) if !p.exists() => {
                    return Err(Error::Validation(format!(
                        "paths.{what} does not exist: {}",
                        p.display()
                    )));
                }
                _ => {}
            }
        }
        if let Some(p) = &self.paths.synonyms {
            if !p.exists() {
                return Err(Error::Validation(format!(
                    "paths.synonyms does not exist: {}",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seed": 7}"#).unwrap();
        assert_eq!(cfg.pseudo_k, 5);
        assert_eq!(cfg.exemplar_quota, 20);
        assert!(cfg.teacher.enabled);
        assert!(!cfg.strict_paper);
        assert_eq!(cfg.detector.dim, 32);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 7, "typo_field": 1}"#).is_err());
    }

    #[test]
    fn missing_seed_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{}"#).is_err());
    }

    #[test]
    fn strict_paper_disables_guards() {
        let mut cfg = RunConfig::default_with_seed(7);
        cfg.strict_paper = true;
        assert!(!cfg.loss_config().negatives);
        assert!(cfg.align_options().gt_suppress_threshold.is_none());
    }

    #[test]
    fn effective_split_appends_future_group() {
        let cfg = RunConfig::default_with_seed(7);
        let split = cfg.effective_split().unwrap();
        // 8 known in one episode group, 4 future categories.
        assert_eq!(split.tasks.len(), 2);
        assert_eq!(split.tasks[0].classes.len(), 8);
        assert_eq!(split.tasks[1].classes.len(), 4);
        assert_eq!(split.tasks[1].name, "future");
        let registry = cfg.registry();
        let states = owf_core::protocol::build_task_state(&split, &registry).unwrap();
        assert_eq!(states[0].unknown_ids(&registry).len(), 4);
    }

    #[test]
    fn two_episode_split() {
        let mut cfg = RunConfig::default_with_seed(7);
        cfg.tasks = vec![
            (0..4).map(SynthConfig::category_name).collect(),
            (4..8).map(SynthConfig::category_name).collect(),
        ];
        let split = cfg.effective_split().unwrap();
        assert_eq!(split.tasks.len(), 3);
        assert_eq!(cfg.trained_episodes(), 2);
    }

    #[test]
    fn duplicate_task_classes_rejected() {
        let mut cfg = RunConfig::default_with_seed(7);
        cfg.tasks = vec![vec!["cat00".into()], vec!["cat00".into()]];
        assert!(cfg.effective_split().is_err());
    }
}
