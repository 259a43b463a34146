//! Benchmark and episode orchestration on the synthetic corpus: label
//! generation (ground truth + teacher oracle through the align pipeline),
//! training variants, evaluation set construction, and the multi-episode
//! loop with exemplar-replay finetuning.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use owf_core::detector::{
    self, DetectorConfig, DetectorParams, EpochStats, TrainOutput, TrainSchedule, TrainingScene,
};
use owf_core::metrics::{self, EvalGt, EvalImage, EvalSet, MetricsReport};
use owf_core::protocol::{
    self, Annotation, ClassRegistry, Dataset, DatasetImage, TaskState,
};
use owf_core::synth::{self, Scene, SynthConfig};
use owf_core::teacher::{self, Label};
use owf_core::Result;

use crate::config::RunConfig;

/// Which supervision sources feed training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub teacher: bool,
    pub pseudo_k: usize,
}

impl Variant {
    /// Teacher assistance plus pseudo-labeling, as configured.
    pub fn full(cfg: &RunConfig) -> Self {
        Self { teacher: cfg.teacher.enabled, pseudo_k: cfg.pseudo_k }
    }

    /// Closed-world baseline: ground truth only.
    pub fn baseline() -> Self {
        Self { teacher: false, pseudo_k: 0 }
    }
}

pub fn train_schedule(cfg: &RunConfig, variant: Variant) -> TrainSchedule {
    TrainSchedule {
        epochs: cfg.optimizer.epochs,
        learning_rate: cfg.optimizer.learning_rate,
        optimizer: cfg.optimizer.rule,
        grad_clip: cfg.optimizer.grad_clip,
        pseudo_k: variant.pseudo_k,
        match_weights: cfg.matching,
        loss: cfg.loss_config(),
        seed: cfg.seed,
    }
}

pub fn detector_config(cfg: &RunConfig, known_classes: usize) -> DetectorConfig {
    DetectorConfig {
        queries: cfg.detector.queries,
        dim: cfg.detector.dim,
        ff_dim: cfg.detector.ff_dim,
        known_classes,
        seed: cfg.seed,
    }
}

/// Builds training scenes for one episode: ground truth restricted to the
/// classes being labeled, optionally merged with the teacher oracle's output
/// run through the real align pipeline (NMS, known-name exclusion, overlap
/// guard).
pub fn label_scenes(
    scenes: &[Scene],
    cfg: &RunConfig,
    synth_cfg: &SynthConfig,
    registry: &ClassRegistry,
    state: &TaskState,
    label_classes: &BTreeSet<usize>,
    teacher_on: bool,
) -> Vec<TrainingScene> {
    let align_opts = cfg.align_options();
    scenes
        .iter()
        .map(|scene| {
            let gt = scene.annotations_for_classes(label_classes);
            let teacher_labels = if teacher_on {
                let dets = synth::teacher_oracle(scene, synth_cfg, &state.known_ids);
                teacher::align_image(&dets, registry, state, &gt, &align_opts)
            } else {
                Vec::new()
            };
            TrainingScene { tokens: scene.tokens.clone(), labels: teacher::merge(&gt, &teacher_labels) }
        })
        .collect()
}

/// Runs inference over evaluation scenes and flags ground truth by the
/// episode's known set.
pub fn build_eval_set(
    params: &DetectorParams,
    scenes: &[Scene],
    state: &TaskState,
    score_floor: f64,
) -> Result<EvalSet> {
    let mut images = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let dets = detector::infer(params, &scene.tokens, score_floor)?;
        let gts = scene
            .objects
            .iter()
            .map(|o| EvalGt {
                category: o.category,
                known: state.is_known(o.category),
                bbox: o.bbox,
            })
            .collect();
        images.push(EvalImage { gts, dets });
    }
    Ok(EvalSet { images })
}

/// One single-episode benchmark run.
pub struct BenchmarkRun {
    pub params: DetectorParams,
    pub log: Vec<EpochStats>,
    pub diverged: Option<String>,
    pub eval_set: EvalSet,
    pub report: MetricsReport,
    pub state: TaskState,
}

/// Trains the first episode under the given variant and evaluates it.
pub fn run_benchmark(cfg: &RunConfig, variant: Variant) -> Result<BenchmarkRun> {
    let synth_cfg = cfg.synth_config();
    let registry = cfg.registry();
    let split = cfg.effective_split()?;
    let states = protocol::build_task_state(&split, &registry)?;
    let state = states[0].clone();

    let train_scenes = synth::generate(&synth_cfg, cfg.synth.train_scenes, "train-ep1")?;
    let labeled = label_scenes(
        &train_scenes,
        cfg,
        &synth_cfg,
        &registry,
        &state,
        &state.known_ids,
        variant.teacher,
    );
    let params = DetectorParams::init(detector_config(cfg, state.known_ids.len()));
    let schedule = train_schedule(cfg, variant);
    let TrainOutput { params, log, diverged } = detector::train(params, &labeled, &schedule)?;

    if let Some(first) = labeled.first() {
        if let Ok(ratio) = detector::identification_dilution(&params, first, &schedule) {
            log::debug!("identification gradient dilution at localization params: {ratio:.3e}");
        }
    }

    let eval_scenes = synth::generate(&synth_cfg, cfg.synth.eval_scenes, "eval")?;
    let eval_set = build_eval_set(&params, &eval_scenes, &state, cfg.inference_score_floor)?;
    let report = metrics::evaluate(&eval_set, &state, &cfg.metrics_config());
    Ok(BenchmarkRun { params, log, diverged, eval_set, report, state })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode: usize,
    pub known_classes: usize,
    pub report: MetricsReport,
}

pub struct PipelineRun {
    pub outcomes: Vec<EpisodeOutcome>,
    pub params: DetectorParams,
    pub diverged: Option<String>,
}

// Dataset view over stored exemplar scenes so the balanced selection policy
// applies unchanged.
fn exemplar_dataset(scenes: &BTreeMap<u64, (Scene, Vec<Annotation>)>) -> Dataset {
    let images = scenes
        .keys()
        .map(|&id| DatasetImage { id, width: 1000, height: 1000, file_name: format!("scene-{id}") })
        .collect();
    let annotations = scenes.iter().map(|(&id, (_, anns))| (id, anns.clone())).collect();
    Dataset { split: "exemplars".into(), images, annotations }
}

/// The full open-world loop: per episode generate data, label (ground truth
/// plus teacher through align), train, store balanced exemplars, finetune on
/// the replay store (from the second episode on, when enabled), evaluate.
pub fn run_pipeline(cfg: &RunConfig, replay: bool) -> Result<PipelineRun> {
    let synth_cfg = cfg.synth_config();
    let registry = cfg.registry();
    let split = cfg.effective_split()?;
    let states = protocol::build_task_state(&split, &registry)?;
    let episodes = cfg.trained_episodes();

    let eval_scenes = synth::generate(&synth_cfg, cfg.synth.eval_scenes, "eval")?;

    let mut params: Option<DetectorParams> = None;
    let mut exemplar_scenes: BTreeMap<u64, (Scene, Vec<Annotation>)> = BTreeMap::new();
    let mut exemplar_store: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    let mut outcomes = Vec::with_capacity(episodes);
    let mut diverged = None;

    for (t, state) in states.iter().take(episodes).enumerate() {
        let episode = t + 1;
        let mut current_params = match params.take() {
            None => DetectorParams::init(detector_config(cfg, state.known_ids.len())),
            Some(p) => p.grow_classes(state.current_task_ids.len()),
        };

        // Fresh scenes for this episode; ids offset so replay stores from
        // different episodes never collide.
        let mut train_scenes =
            synth::generate(&synth_cfg, cfg.synth.train_scenes, &format!("train-ep{episode}"))?;
        for scene in &mut train_scenes {
            scene.id += (t as u64) << 32;
        }

        // Episode data labels only the classes introduced at this episode.
        let labeled = label_scenes(
            &train_scenes,
            cfg,
            &synth_cfg,
            &registry,
            state,
            &state.current_task_ids,
            cfg.teacher.enabled,
        );
        let schedule = train_schedule(cfg, Variant::full(cfg));
        let out = detector::train(current_params, &labeled, &schedule)?;
        current_params = out.params;
        if out.diverged.is_some() {
            diverged = out.diverged;
        }

        // Store a balanced exemplar set for the classes just learned.
        for scene in &train_scenes {
            let anns = scene.annotations_for_classes(&state.current_task_ids);
            if !anns.is_empty() {
                exemplar_scenes.insert(scene.id, (scene.clone(), anns));
            }
        }
        let selection_state = TaskState::new(episode, BTreeSet::new(), state.current_task_ids.clone());
        let selected = protocol::select_exemplars(
            &exemplar_dataset(&exemplar_scenes),
            &selection_state,
            cfg.exemplar_quota,
            cfg.seed,
        );
        exemplar_store.extend(selected);

        if replay && t > 0 {
            let replay_ids = protocol::exemplar_image_ids(&exemplar_store);
            let replay_scenes: Vec<TrainingScene> = replay_ids
                .iter()
                .filter_map(|id| exemplar_scenes.get(id))
                .map(|(scene, anns)| TrainingScene {
                    tokens: scene.tokens.clone(),
                    labels: anns.iter().map(|a| Label::ground_truth(a.class_id, a.bbox)).collect(),
                })
                .collect();
            let finetune_schedule = TrainSchedule {
                epochs: cfg.optimizer.finetune_epochs,
                learning_rate: cfg.optimizer.finetune_learning_rate,
                seed: cfg.seed ^ 0x6669_6e65,
                ..train_schedule(cfg, Variant::full(cfg))
            };
            let out = detector::train(current_params, &replay_scenes, &finetune_schedule)?;
            current_params = out.params;
            if out.diverged.is_some() {
                diverged = out.diverged;
            }
        }

        let eval_set = build_eval_set(&current_params, &eval_scenes, state, cfg.inference_score_floor)?;
        let report = metrics::evaluate(&eval_set, state, &cfg.metrics_config());
        outcomes.push(EpisodeOutcome { episode, known_classes: state.known_ids.len(), report });
        params = Some(current_params);
    }

    Ok(PipelineRun { outcomes, params: params.expect("at least one episode"), diverged })
}
