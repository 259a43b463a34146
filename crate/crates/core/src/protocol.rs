//! Open-world episode bookkeeping: class registries, known/unknown partition
//! per task, incremental updates, and exemplar-replay selection.
//!
//! Class ids are re-indexed densely per run from the split configuration;
//! annotation files carry category *names* across the boundary, which keeps
//! the engine decoupled from sparse upstream id spaces.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::rng;

/// Dense, ordered class-id ↔ name table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRegistry {
    names: Vec<String>,
}

impl ClassRegistry {
    pub fn from_names<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.clone()) {
                return Err(Error::Validation(format!("duplicate class name '{n}'")));
            }
        }
        Ok(Self { names })
    }

    /// Registry induced by a split config: ids are dense in task order, so
    /// the classes known at any episode always form a prefix `0..k`.
    pub fn from_split(split: &SplitConfig) -> Result<Self> {
        Self::from_names(split.tasks.iter().flat_map(|t| t.classes.iter().cloned()))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> Option<&str> {
        self.names.get(id).map(|s| s.as_str())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One episode's view of the class universe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    /// 1-based episode index.
    pub episode: usize,
    pub known_ids: BTreeSet<usize>,
    pub previously_known_ids: BTreeSet<usize>,
    pub current_task_ids: BTreeSet<usize>,
    /// Per-class replay store: class id → image ids holding it.
    pub exemplar_store: BTreeMap<usize, Vec<u64>>,
}

impl TaskState {
    pub fn new(episode: usize, previously: BTreeSet<usize>, current: BTreeSet<usize>) -> Self {
        let known_ids = previously.union(&current).copied().collect();
        Self {
            episode,
            known_ids,
            previously_known_ids: previously,
            current_task_ids: current,
            exemplar_store: BTreeMap::new(),
        }
    }

    pub fn is_known(&self, class_id: usize) -> bool {
        self.known_ids.contains(&class_id)
    }

    /// Classification channel reserved for the unknown class: the one after
    /// all known channels.
    pub fn unknown_channel(&self) -> usize {
        self.known_ids.len()
    }

    /// Unknown ids with respect to a registry of all classes.
    pub fn unknown_ids(&self, registry: &ClassRegistry) -> BTreeSet<usize> {
        (0..registry.len()).filter(|id| !self.is_known(*id)).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetImage {
    pub id: u64,
    pub width: u32,
    pub height: u32,
    pub file_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

/// Validated in-memory dataset: images plus per-image annotations with
/// normalized boxes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset {
    pub split: String,
    pub images: Vec<DatasetImage>,
    pub annotations: BTreeMap<u64, Vec<Annotation>>,
}

impl Dataset {
    pub fn annotations_for(&self, image_id: u64) -> &[Annotation] {
        self.annotations.get(&image_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn image_dims(&self) -> BTreeMap<u64, (u32, u32)> {
        self.images.iter().map(|im| (im.id, (im.width, im.height))).collect()
    }

    pub fn total_annotations(&self) -> usize {
        self.annotations.values().map(Vec::len).sum()
    }
}

// COCO-style wire format (subset).
#[derive(Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Deserialize)]
struct CocoImage {
    id: u64,
    width: u32,
    height: u32,
    #[serde(default)]
    file_name: String,
}

#[derive(Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

/// Loads a COCO-style annotation file, resolving category names against the
/// registry and normalizing boxes.
///
/// In strict mode a category name missing from the registry rejects the file;
/// otherwise such annotations are dropped with a warning. Out-of-bounds boxes
/// are clamped; boxes with no area left are dropped with a warning.
pub fn load_annotations(
    path: &Path,
    registry: &ClassRegistry,
    split: &str,
    strict: bool,
) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let file: CocoFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;

    let mut dims: HashMap<u64, (f64, f64)> = HashMap::new();
    for im in &file.images {
        if dims.insert(im.id, (im.width as f64, im.height as f64)).is_some() {
            return Err(Error::Validation(format!("duplicate image id {}", im.id)));
        }
    }

    let cat_names: HashMap<u64, &str> =
        file.categories.iter().map(|c| (c.id, c.name.as_str())).collect();

    let mut unresolved: BTreeSet<String> = BTreeSet::new();
    let mut seen_ann_ids = HashSet::new();
    let mut annotations: BTreeMap<u64, Vec<Annotation>> = BTreeMap::new();
    for ann in &file.annotations {
        if !seen_ann_ids.insert(ann.id) {
            return Err(Error::Validation(format!("duplicate annotation id {}", ann.id)));
        }
        let &(iw, ih) = dims.get(&ann.image_id).ok_or_else(|| {
            Error::Validation(format!(
                "annotation {} references missing image {}",
                ann.id, ann.image_id
            ))
        })?;
        let name = cat_names.get(&ann.category_id).copied().ok_or_else(|| {
            Error::Validation(format!(
                "annotation {} references missing category {}",
                ann.id, ann.category_id
            ))
        })?;
        let class_id = match registry.id(name) {
            Some(id) => id,
            None => {
                unresolved.insert(name.to_string());
                continue;
            }
        };
        let [x, y, w, h] = ann.bbox;
        match BBox::from_absolute_xywh(x, y, w, h, iw, ih) {
            Some(bbox) => {
                annotations.entry(ann.image_id).or_default().push(Annotation { class_id, bbox })
            }
            None => log::warn!(
                "dropping annotation {}: zero area after clamping to {}x{}",
                ann.id,
                iw,
                ih
            ),
        }
    }

    if strict && !unresolved.is_empty() {
        let list: Vec<String> = unresolved.into_iter().collect();
        return Err(Error::Validation(format!(
            "unknown categories in {}: {}",
            path.display(),
            list.join(", ")
        )));
    }
    if !unresolved.is_empty() {
        log::warn!("skipped categories not in registry: {:?}", unresolved);
    }

    Ok(Dataset {
        split: split.to_string(),
        images: file
            .images
            .into_iter()
            .map(|im| DatasetImage {
                id: im.id,
                width: im.width,
                height: im.height,
                file_name: im.file_name,
            })
            .collect(),
        annotations,
    })
}

/// Split configuration: ordered task groups of class names.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitConfig {
    pub tasks: Vec<TaskGroup>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskGroup {
    pub name: String,
    pub classes: Vec<String>,
}

impl SplitConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Expands a split config into one [`TaskState`] per task.
///
/// Groups must be disjoint and together cover the registry exactly.
pub fn build_task_state(split: &SplitConfig, registry: &ClassRegistry) -> Result<Vec<TaskState>> {
    let mut covered: BTreeSet<usize> = BTreeSet::new();
    let mut states = Vec::with_capacity(split.tasks.len());
    for (t, group) in split.tasks.iter().enumerate() {
        let mut current = BTreeSet::new();
        for name in &group.classes {
            let id = registry.id(name).ok_or_else(|| {
                Error::Validation(format!("task '{}' lists unknown class '{name}'", group.name))
            })?;
            if covered.contains(&id) || !current.insert(id) {
                return Err(Error::Validation(format!(
                    "class '{name}' appears in more than one task group"
                )));
            }
        }
        let previously = covered.clone();
        covered.extend(current.iter().copied());
        states.push(TaskState::new(t + 1, previously, current));
    }
    if covered.len() != registry.len() {
        let missing: Vec<&str> = (0..registry.len())
            .filter(|id| !covered.contains(id))
            .filter_map(|id| registry.name(id))
            .collect();
        return Err(Error::Validation(format!(
            "split does not cover the registry; missing: {}",
            missing.join(", ")
        )));
    }
    Ok(states)
}

/// Moves to the next episode: the given ids switch from unknown to known.
pub fn advance_episode(state: &TaskState, newly_labeled: &BTreeSet<usize>) -> Result<TaskState> {
    for id in newly_labeled {
        if state.is_known(*id) {
            return Err(Error::Validation(format!(
                "class {id} is already known at episode {}",
                state.episode
            )));
        }
    }
    let mut next =
        TaskState::new(state.episode + 1, state.known_ids.clone(), newly_labeled.clone());
    next.exemplar_store = state.exemplar_store.clone();
    Ok(next)
}

/// Balanced exemplar selection for replay finetuning.
///
/// For every known class: candidate images are shuffled by the seeded
/// "exemplars" stream, stable-sorted by total instance count (images with
/// fewer co-occurring objects first), and the first `quota` are stored.
pub fn select_exemplars(
    dataset: &Dataset,
    state: &TaskState,
    per_class_quota: usize,
    seed: u64,
) -> BTreeMap<usize, Vec<u64>> {
    assert!(per_class_quota >= 1, "exemplar quota must be at least 1");
    let mut rng = rng::stream(seed, "exemplars");
    let instance_count: BTreeMap<u64, usize> = dataset
        .images
        .iter()
        .map(|im| (im.id, dataset.annotations_for(im.id).len()))
        .collect();

    let mut store = BTreeMap::new();
    for &class_id in &state.known_ids {
        let mut candidates: Vec<u64> = dataset
            .images
            .iter()
            .filter(|im| dataset.annotations_for(im.id).iter().any(|a| a.class_id == class_id))
            .map(|im| im.id)
            .collect();
        if candidates.is_empty() {
            log::warn!("class {class_id} has no instances; no exemplars stored");
            continue;
        }
        candidates.shuffle(&mut rng);
        candidates.sort_by_key(|id| instance_count[id]);
        candidates.truncate(per_class_quota);
        store.insert(class_id, candidates);
    }
    store
}

/// Union of all stored exemplar image ids.
pub fn exemplar_image_ids(store: &BTreeMap<usize, Vec<u64>>) -> BTreeSet<u64> {
    store.values().flatten().copied().collect()
}
