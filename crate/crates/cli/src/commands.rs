//! The four commands behind the `owf` binary. Every command is a pure
//! function of its [`RunConfig`]: outputs are byte-identical across re-runs,
//! with wall-clock metadata quarantined in a separate `metadata.json`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use owf_core::detector::{self, Detection, DetectorParams, TrainOutput};
use owf_core::metrics::{self, EvalSet};
use owf_core::protocol::{self, ClassRegistry, SplitConfig, TaskState};
use owf_core::report;
use owf_core::synth;
use owf_core::teacher::{self, Label};
use owf_core::{Error, Result};

use crate::config::RunConfig;
use crate::overlay;
use crate::pipeline::{self, Variant};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_metadata(out_dir: &Path, command: &str) -> Result<()> {
    let metadata = json!({
        "command": command,
        "finished_unix_ms": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
        "version": env!("CARGO_PKG_VERSION"),
    });
    write_json(&out_dir.join("metadata.json"), &metadata)
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(cfg.out_dir.clone())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AlignSummary {
    pub images: usize,
    pub ground_truth_labels: usize,
    pub teacher_raw: usize,
    pub teacher_aligned: usize,
    pub merged_labels: usize,
}

#[derive(Serialize, Deserialize)]
struct LabelLine {
    image_id: u64,
    labels: Vec<Label>,
}

/// Ingests annotations and a teacher dump, runs the align pipeline, and
/// writes one merged label line per image plus a count summary.
pub fn cmd_align(cfg: &RunConfig) -> Result<AlignSummary> {
    cfg.validate_for_align()?;
    let out_dir = ensure_out_dir(cfg)?;
    let split = SplitConfig::from_file(cfg.paths.split.as_deref().expect("validated"))?;
    let registry = ClassRegistry::from_split(&split)?;
    let states = protocol::build_task_state(&split, &registry)?;
    let state = states.get(cfg.align_task.wrapping_sub(1)).ok_or_else(|| {
        Error::Validation(format!(
            "align_task {} out of range ({} tasks)",
            cfg.align_task,
            states.len()
        ))
    })?;

    let dataset = protocol::load_annotations(
        cfg.paths.annotations.as_deref().expect("validated"),
        &registry,
        "train",
        cfg.strict_categories,
    )?;

    let mut align_opts = cfg.align_options();
    if let Some(path) = &cfg.paths.synonyms {
        let text = fs::read_to_string(path)?;
        let map: HashMap<String, String> = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        align_opts.synonyms = map;
    }

    let teacher_dets =
        teacher::load_teacher(cfg.paths.teacher_dump.as_deref().expect("validated"), &dataset.image_dims())?;
    let teacher_raw: usize = teacher_dets.values().map(Vec::len).sum();
    let aligned = teacher::align(&teacher_dets, &registry, state, &dataset.annotations, &align_opts);

    let mut file = fs::File::create(out_dir.join("labels.jsonl"))?;
    let mut summary = AlignSummary {
        images: dataset.images.len(),
        ground_truth_labels: 0,
        teacher_raw,
        teacher_aligned: 0,
        merged_labels: 0,
    };
    for image in &dataset.images {
        let gt = dataset.annotations_for(image.id);
        let teacher_labels = aligned.get(&image.id).map(Vec::as_slice).unwrap_or(&[]);
        let merged = teacher::merge(gt, teacher_labels);
        summary.ground_truth_labels += gt.len();
        summary.teacher_aligned += teacher_labels.len();
        summary.merged_labels += merged.len();
        serde_json::to_writer(&mut file, &LabelLine { image_id: image.id, labels: merged })?;
        file.write_all(b"\n")?;
    }
    write_json(&out_dir.join("align_summary.json"), &summary)?;
    write_metadata(&out_dir, "align")?;
    Ok(summary)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub diverged: Option<String>,
    pub checkpoint: PathBuf,
}

/// Trains on the seeded synthetic benchmark and writes the checkpoint plus
/// a per-epoch loss log.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let out_dir = ensure_out_dir(cfg)?;
    let synth_cfg = cfg.synth_config();
    let registry = cfg.registry();
    let split = cfg.effective_split()?;
    let states = protocol::build_task_state(&split, &registry)?;
    let state = &states[0];

    let train_scenes = synth::generate(&synth_cfg, cfg.synth.train_scenes, "train-ep1")?;
    let variant = Variant::full(cfg);
    let labeled = pipeline::label_scenes(
        &train_scenes,
        cfg,
        &synth_cfg,
        &registry,
        state,
        &state.known_ids,
        variant.teacher,
    );
    let params = DetectorParams::init(pipeline::detector_config(cfg, state.known_ids.len()));
    let schedule = pipeline::train_schedule(cfg, variant);
    let TrainOutput { params, log, diverged } = detector::train(params, &labeled, &schedule)?;

    let checkpoint = out_dir.join("checkpoint.json");
    params.save(&checkpoint)?;
    write_json(&out_dir.join("loss_log.json"), &log)?;
    write_metadata(&out_dir, "train")?;
    Ok(TrainSummary {
        epochs: log.len(),
        final_loss: log.last().map(|e| e.mean_total),
        diverged,
        checkpoint,
    })
}

#[derive(Serialize, Deserialize)]
struct DetectionLine {
    image_id: u64,
    detections: Vec<Detection>,
}

fn load_detection_fixture(path: &Path) -> Result<BTreeMap<u64, Vec<Detection>>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: DetectionLine = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.insert(record.image_id, record.detections);
    }
    Ok(out)
}

fn state_for_known_count(states: &[TaskState], known: usize) -> Result<TaskState> {
    states
        .iter()
        .find(|s| s.known_ids.len() == known)
        .cloned()
        .ok_or_else(|| {
            Error::Validation(format!("no task state has {known} known classes"))
        })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub map_both: Option<f64>,
    pub u_recall: Option<f64>,
    pub a_ose: usize,
}

/// Evaluates a checkpoint (or a precomputed detections file) on the
/// synthetic evaluation split and writes the report in all formats.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    detections: Option<&Path>,
) -> Result<EvalSummary> {
    let out_dir = ensure_out_dir(cfg)?;
    let synth_cfg = cfg.synth_config();
    let registry = cfg.registry();
    let split = cfg.effective_split()?;
    let states = protocol::build_task_state(&split, &registry)?;
    let eval_scenes = synth::generate(&synth_cfg, cfg.synth.eval_scenes, "eval")?;

    let (eval_set, state) = match (checkpoint, detections) {
        (Some(path), None) => {
            let params = DetectorParams::load(path)?;
            let state = state_for_known_count(&states, params.config.known_classes)?;
            let set =
                pipeline::build_eval_set(&params, &eval_scenes, &state, cfg.inference_score_floor)?;
            (set, state)
        }
        (None, Some(path)) => {
            let fixture = load_detection_fixture(path)?;
            let state = states[cfg.trained_episodes() - 1].clone();
            let images = eval_scenes
                .iter()
                .map(|scene| metrics::EvalImage {
                    gts: scene
                        .objects
                        .iter()
                        .map(|o| metrics::EvalGt {
                            category: o.category,
                            known: state.is_known(o.category),
                            bbox: o.bbox,
                        })
                        .collect(),
                    dets: fixture.get(&scene.id).cloned().unwrap_or_default(),
                })
                .collect();
            (EvalSet { images }, state)
        }
        _ => {
            return Err(Error::Validation(
                "eval needs exactly one of --checkpoint or --detections".into(),
            ))
        }
    };

    let report = metrics::evaluate(&eval_set, &state, &cfg.metrics_config());
    write_json(&out_dir.join("report.json"), &report)?;
    fs::write(out_dir.join("report.txt"), report::render_text(&report, &registry, &state))?;
    fs::write(out_dir.join("report.csv"), report::render_csv(&report, &registry))?;
    fs::write(out_dir.join("pr_curves.svg"), report::render_pr_svg(&report, &registry))?;
    if cfg.overlay_scenes > 0 {
        let overlay_dir = out_dir.join("overlays");
        fs::create_dir_all(&overlay_dir)?;
        for (i, image) in eval_set.images.iter().take(cfg.overlay_scenes).enumerate() {
            fs::write(
                overlay_dir.join(format!("scene_{i:03}.svg")),
                overlay::render_overlay(image, &registry),
            )?;
        }
    }
    write_metadata(&out_dir, "eval")?;
    Ok(EvalSummary { map_both: report.map_both, u_recall: report.u_recall, a_ose: report.a_ose })
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub episodes: Vec<pipeline::EpisodeOutcome>,
    pub diverged: Option<String>,
    /// Previously-known mAP at the final episode, with and without replay,
    /// when the run spans more than one episode and replay is on.
    pub replay_comparison: Option<ReplayComparison>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReplayComparison {
    pub with_replay_previous_map: Option<f64>,
    pub without_replay_previous_map: Option<f64>,
}

/// Runs the full multi-episode protocol; with replay enabled and at least
/// two episodes it also runs the no-replay ablation for comparison.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<PipelineSummary> {
    let out_dir = ensure_out_dir(cfg)?;
    let registry = cfg.registry();
    let split = cfg.effective_split()?;
    let states = protocol::build_task_state(&split, &registry)?;

    let run = pipeline::run_pipeline(cfg, cfg.replay)?;
    for outcome in &run.outcomes {
        let dir = out_dir.join(format!("episode_{}", outcome.episode));
        fs::create_dir_all(&dir)?;
        let state = &states[outcome.episode - 1];
        write_json(&dir.join("report.json"), &outcome.report)?;
        fs::write(dir.join("report.txt"), report::render_text(&outcome.report, &registry, state))?;
        fs::write(dir.join("report.csv"), report::render_csv(&outcome.report, &registry))?;
    }
    run.params.save(&out_dir.join("checkpoint.json"))?;

    let replay_comparison = if cfg.replay && run.outcomes.len() > 1 {
        let ablation = pipeline::run_pipeline(cfg, false)?;
        let comparison = ReplayComparison {
            with_replay_previous_map: run.outcomes.last().and_then(|o| o.report.map_previously),
            without_replay_previous_map: ablation
                .outcomes
                .last()
                .and_then(|o| o.report.map_previously),
        };
        write_json(&out_dir.join("replay_comparison.json"), &comparison)?;
        Some(comparison)
    } else {
        None
    };

    let summary = PipelineSummary { episodes: run.outcomes, diverged: run.diverged, replay_comparison };
    write_json(&out_dir.join("pipeline_summary.json"), &summary)?;
    write_metadata(&out_dir, "pipeline")?;
    Ok(summary)
}
