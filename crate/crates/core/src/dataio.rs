//! Dataset manifest, annotation file format, stratified train/validation
//! split and training-item enumeration.
//!
//! The manifest is one JSON document with `categories`, `images` and
//! `annotations` arrays keyed by integer ids. Category 1 is a mitotic figure,
//! category 2 a hard negative. Optional per-annotation `bbox` is
//! `[x0, y0, x1, y1]`; optional `mask_path` points (relative to the manifest)
//! at an 8-bit grayscale mask centred on the annotation centroid.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::patch_origin;
use crate::imageio;
use crate::types::{BoundingBox, Frame, Label, MitosisAnnotation, Point, ScannerDomain, SoftMask};

pub const MITOSIS_CATEGORY: u64 = 1;
pub const HARD_NEGATIVE_CATEGORY: u64 = 2;
const MITOSIS_NAME: &str = "mitotic figure";
const HARD_NEGATIVE_NAME: &str = "hard negative";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CategoryDoc {
    id: u64,
    name: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ImageDoc {
    id: u64,
    slide_id: String,
    file_name: String,
    scanner: ScannerDomain,
    width: usize,
    height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    microns_per_pixel: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct AnnotationDoc {
    id: u64,
    image_id: u64,
    category_id: u64,
    centroid: [f64; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_path: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ManifestDoc {
    #[serde(default)]
    categories: Vec<CategoryDoc>,
    images: Vec<ImageDoc>,
    annotations: Vec<AnnotationDoc>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestAnnotation {
    pub id: u64,
    pub centroid: Point,
    pub label: Label,
    pub bbox: Option<BoundingBox>,
    pub mask_path: Option<String>,
}

impl ManifestAnnotation {
    pub fn to_annotation(&self) -> MitosisAnnotation {
        MitosisAnnotation { id: self.id, centroid: self.centroid, label: self.label, bbox: self.bbox, mask: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlideRecord {
    pub image_id: u64,
    pub slide_id: String,
    pub domain: ScannerDomain,
    /// As written in the manifest; relative paths resolve against the manifest root.
    pub image_path: String,
    pub width: usize,
    pub height: usize,
    pub microns_per_pixel: Option<f64>,
    pub annotations: Vec<ManifestAnnotation>,
}

impl SlideRecord {
    pub fn mitosis_count(&self) -> usize {
        self.annotations.iter().filter(|a| a.label == Label::Mitosis).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths are resolved against; not serialised.
    pub root: PathBuf,
    pub slides: Vec<SlideRecord>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let mut m = Self::from_json_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = self.to_json_string()?;
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: ManifestDoc = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        Self::from_doc(doc)
    }

    fn from_doc(doc: ManifestDoc) -> Result<Self> {
        let mut labels: HashMap<u64, Label> = HashMap::new();
        if doc.categories.is_empty() {
            labels.insert(MITOSIS_CATEGORY, Label::Mitosis);
            labels.insert(HARD_NEGATIVE_CATEGORY, Label::HardNegative);
        }
        for c in &doc.categories {
            let label = match c.name.as_str() {
                MITOSIS_NAME => Label::Mitosis,
                HARD_NEGATIVE_NAME => Label::HardNegative,
                other => {
                    return Err(Error::Schema(format!("unknown label {other:?} in category record {}", c.id)));
                }
            };
            labels.insert(c.id, label);
        }

        let mut slides = Vec::with_capacity(doc.images.len());
        let mut by_image: HashMap<u64, usize> = HashMap::new();
        let mut slide_ids = HashSet::new();
        for img in doc.images {
            if !slide_ids.insert(img.slide_id.clone()) {
                return Err(Error::Validation(format!("duplicate slide_id {}", img.slide_id)));
            }
            if img.width == 0 || img.height == 0 {
                return Err(Error::Validation(format!("slide {} has empty extent", img.slide_id)));
            }
            if by_image.insert(img.id, slides.len()).is_some() {
                return Err(Error::Validation(format!("duplicate image id {}", img.id)));
            }
            slides.push(SlideRecord {
                image_id: img.id,
                slide_id: img.slide_id,
                domain: img.scanner,
                image_path: img.file_name,
                width: img.width,
                height: img.height,
                microns_per_pixel: img.microns_per_pixel,
                annotations: Vec::new(),
            });
        }

        let mut ann_ids = HashSet::new();
        for a in doc.annotations {
            let label = *labels.get(&a.category_id).ok_or_else(|| {
                Error::Schema(format!("annotation {} has unknown category_id {}", a.id, a.category_id))
            })?;
            let &slot = by_image
                .get(&a.image_id)
                .ok_or_else(|| Error::Validation(format!("annotation {} references missing image {}", a.id, a.image_id)))?;
            if !ann_ids.insert(a.id) {
                return Err(Error::Validation(format!("duplicate annotation id {}", a.id)));
            }
            let slide = &mut slides[slot];
            let bbox = a.bbox.map(BoundingBox::from_array).transpose()?;
            let ann = ManifestAnnotation {
                id: a.id,
                centroid: Point::new(a.centroid[0], a.centroid[1]),
                label,
                bbox,
                mask_path: a.mask_path,
            };
            ann.to_annotation()
                .validate(slide.width, slide.height)
                .map_err(|e| Error::Validation(format!("slide {}: {e}", slide.slide_id)))?;
            slide.annotations.push(ann);
        }
        for s in &slides {
            if !s.domain.annotated() && !s.annotations.is_empty() {
                return Err(Error::Validation(format!(
                    "slide {} from unannotated scanner {} carries annotations",
                    s.slide_id, s.domain
                )));
            }
        }
        Ok(Self { root: PathBuf::new(), slides })
    }

    fn to_doc(&self) -> ManifestDoc {
        let categories = vec![
            CategoryDoc { id: MITOSIS_CATEGORY, name: MITOSIS_NAME.into() },
            CategoryDoc { id: HARD_NEGATIVE_CATEGORY, name: HARD_NEGATIVE_NAME.into() },
        ];
        let images = self
            .slides
            .iter()
            .map(|s| ImageDoc {
                id: s.image_id,
                slide_id: s.slide_id.clone(),
                file_name: s.image_path.clone(),
                scanner: s.domain.clone(),
                width: s.width,
                height: s.height,
                microns_per_pixel: s.microns_per_pixel,
            })
            .collect();
        let mut annotations: Vec<AnnotationDoc> = self
            .slides
            .iter()
            .flat_map(|s| {
                s.annotations.iter().map(move |a| AnnotationDoc {
                    id: a.id,
                    image_id: s.image_id,
                    category_id: match a.label {
                        Label::Mitosis => MITOSIS_CATEGORY,
                        Label::HardNegative => HARD_NEGATIVE_CATEGORY,
                    },
                    centroid: [a.centroid.x, a.centroid.y],
                    bbox: a.bbox.map(|b| b.to_array()),
                    mask_path: a.mask_path.clone(),
                })
            })
            .collect();
        annotations.sort_by_key(|a| a.id);
        ManifestDoc { categories, images, annotations }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_doc())?)
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideRecord> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    pub fn slide_mut(&mut self, slide_id: &str) -> Option<&mut SlideRecord> {
        self.slides.iter_mut().find(|s| s.slide_id == slide_id)
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        let p = Path::new(relative);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn per_domain_counts(&self) -> BTreeMap<ScannerDomain, usize> {
        let mut counts = BTreeMap::new();
        for s in &self.slides {
            *counts.entry(s.domain.clone()).or_insert(0) += 1;
        }
        counts
    }

    pub fn domains(&self) -> Vec<ScannerDomain> {
        self.per_domain_counts().into_keys().collect()
    }

    pub fn next_annotation_id(&self) -> u64 {
        self.slides.iter().flat_map(|s| s.annotations.iter().map(|a| a.id)).max().unwrap_or(0) + 1
    }
}

/// Source of decoded frames for manifest slides.
pub trait FrameSource: Send + Sync {
    fn load_frame(&self, manifest: &DatasetManifest, slide: &SlideRecord) -> Result<Arc<Frame>>;
}

/// Reads frames (and annotation masks) from disk on every request.
#[derive(Clone, Debug, Default)]
pub struct DiskFrames;

impl FrameSource for DiskFrames {
    fn load_frame(&self, manifest: &DatasetManifest, slide: &SlideRecord) -> Result<Arc<Frame>> {
        let path = manifest.resolve(&slide.image_path);
        let pixels = imageio::read_rgb(&path)?;
        let (h, w, _) = pixels.dim();
        if (w, h) != (slide.width, slide.height) {
            return Err(Error::Validation(format!(
                "slide {}: image {} is {w}x{h}, manifest says {}x{}",
                slide.slide_id,
                path.display(),
                slide.width,
                slide.height
            )));
        }
        let mut annotations = Vec::with_capacity(slide.annotations.len());
        for a in &slide.annotations {
            let mut ann = a.to_annotation();
            if let Some(mp) = &a.mask_path {
                let values = imageio::gray_to_mask(&imageio::read_gray(&manifest.resolve(mp))?);
                let (mh, mw) = values.dim();
                if mh != mw {
                    return Err(Error::Shape(format!("mask {mp} is not square")));
                }
                ann.mask = Some(SoftMask { origin: patch_origin(&a.centroid, mw), values });
            }
            annotations.push(ann);
        }
        let mut frame = Frame::new(slide.slide_id.clone(), slide.domain.clone(), pixels)?.with_annotations(annotations)?;
        frame.microns_per_pixel = slide.microns_per_pixel;
        Ok(Arc::new(frame))
    }
}

/// Pre-decoded frames keyed by slide id.
#[derive(Clone, Debug, Default)]
pub struct MemoryFrames {
    pub frames: HashMap<String, Arc<Frame>>,
}

impl MemoryFrames {
    pub fn new(frames: impl IntoIterator<Item = Frame>) -> Self {
        Self { frames: frames.into_iter().map(|f| (f.slide_id.clone(), Arc::new(f))).collect() }
    }
}

impl FrameSource for MemoryFrames {
    fn load_frame(&self, manifest: &DatasetManifest, slide: &SlideRecord) -> Result<Arc<Frame>> {
        let frame = self
            .frames
            .get(&slide.slide_id)
            .ok_or_else(|| Error::Validation(format!("no frame for slide {}", slide.slide_id)))?;
        // Annotations follow the manifest, which bootstrap may have updated.
        let mut f = Frame::clone(frame);
        f.annotations = slide.annotations.iter().map(ManifestAnnotation::to_annotation).collect();
        let _ = manifest;
        Ok(Arc::new(f))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
}

impl SplitAssignment {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading split {}", path.display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(format!("writing split {}", path.display()), e))
    }

    pub fn contains(&self, subset: Subset, slide_id: &str) -> bool {
        match subset {
            Subset::Train => self.train.contains(slide_id),
            Subset::Val => self.val.contains(slide_id),
        }
    }

    /// Every slide in the manifest goes to train except the given validation ids.
    pub fn with_val(manifest: &DatasetManifest, val: impl IntoIterator<Item = String>) -> Self {
        let val: BTreeSet<String> = val.into_iter().collect();
        let train = manifest.slides.iter().map(|s| s.slide_id.clone()).filter(|s| !val.contains(s)).collect();
        Self { train, val }
    }
}

/// Indices into `0..n` at evenly spaced quantiles: `floor(j (n-1) / (k-1))`.
pub fn quantile_indices(n: usize, k: usize) -> Vec<usize> {
    match k {
        0 => Vec::new(),
        1 => vec![(n - 1) / 2],
        _ => (0..k).map(|j| j * (n - 1) / (k - 1)).collect(),
    }
}

/// Per annotated scanner, sorts slides by mitosis count (ties broken by a
/// seeded random key) and sends the slides at evenly spaced quantiles of that
/// ordering to validation. Unannotated scanners go entirely to train.
pub fn stratified_split(manifest: &DatasetManifest, val_per_scanner: usize, seed: u64) -> Result<SplitAssignment> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_domain: BTreeMap<ScannerDomain, Vec<&SlideRecord>> = BTreeMap::new();
    for s in &manifest.slides {
        by_domain.entry(s.domain.clone()).or_default().push(s);
    }
    let mut split = SplitAssignment::default();
    for (domain, slides) in by_domain {
        if !domain.annotated() {
            split.train.extend(slides.iter().map(|s| s.slide_id.clone()));
            continue;
        }
        if slides.len() < val_per_scanner {
            return Err(Error::InvalidArgument(format!(
                "scanner {domain} has {} slides, fewer than the {val_per_scanner} validation slides requested",
                slides.len()
            )));
        }
        let mut keyed: Vec<(usize, u64, &SlideRecord)> =
            slides.iter().map(|s| (s.mitosis_count(), rng.random::<u64>(), *s)).collect();
        keyed.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let picks: BTreeSet<usize> = quantile_indices(keyed.len(), val_per_scanner).into_iter().collect();
        for (i, (_, _, s)) in keyed.into_iter().enumerate() {
            if picks.contains(&i) {
                split.val.insert(s.slide_id.clone());
            } else {
                split.train.insert(s.slide_id.clone());
            }
        }
    }
    Ok(split)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Detector,
    Classifier,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    Train,
    Val,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorItem {
    pub slide_id: String,
    pub boxes: Vec<BoundingBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierItem {
    pub slide_id: String,
    pub annotation_id: u64,
    pub center: Point,
    pub label: Label,
}

impl ClassifierItem {
    pub fn target(&self) -> u8 {
        self.label.as_target()
    }
}

/// Materialised item list; workers take disjoint shards by index.
#[derive(Clone, Debug, PartialEq)]
pub struct Items<T>(pub Vec<T>);

impl<T> Items<T> {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.0.iter()
    }

    /// Items `i` with `i % workers == worker`.
    pub fn shard(&self, worker: usize, workers: usize) -> impl Iterator<Item = &T> {
        assert!(workers > 0 && worker < workers);
        self.0.iter().skip(worker).step_by(workers)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainingItems {
    Detector(Items<DetectorItem>),
    Classifier(Items<ClassifierItem>),
}

pub fn iterate_training_items(manifest: &DatasetManifest, split: &SplitAssignment, subset: Subset, stage: Stage) -> Result<TrainingItems> {
    Ok(match stage {
        Stage::Detector => TrainingItems::Detector(detector_items(manifest, split, subset)?),
        Stage::Classifier => TrainingItems::Classifier(classifier_items(manifest, split, subset)),
    })
}

/// Slides with at least one mitosis; every mitosis must already carry a box.
pub fn detector_items(manifest: &DatasetManifest, split: &SplitAssignment, subset: Subset) -> Result<Items<DetectorItem>> {
    let mut items = Vec::new();
    for s in &manifest.slides {
        if !split.contains(subset, &s.slide_id) || !s.domain.annotated() {
            continue;
        }
        let mut boxes = Vec::new();
        for a in s.annotations.iter().filter(|a| a.label == Label::Mitosis) {
            let b = a.bbox.ok_or_else(|| {
                Error::Validation(format!(
                    "slide {} annotation {} has no box; run bootstrap-masks first",
                    s.slide_id, a.id
                ))
            })?;
            boxes.push(b);
        }
        if !boxes.is_empty() {
            items.push(DetectorItem { slide_id: s.slide_id.clone(), boxes });
        }
    }
    Ok(Items(items))
}

/// Provided positives and hard negatives only.
pub fn classifier_items(manifest: &DatasetManifest, split: &SplitAssignment, subset: Subset) -> Items<ClassifierItem> {
    let items = manifest
        .slides
        .iter()
        .filter(|s| split.contains(subset, &s.slide_id) && s.domain.annotated())
        .flat_map(|s| {
            s.annotations.iter().map(|a| ClassifierItem {
                slide_id: s.slide_id.clone(),
                annotation_id: a.id,
                center: a.centroid,
                label: a.label,
            })
        })
        .collect();
    Items(items)
}

/// Loads each distinct slide once, in parallel.
pub fn load_frames(manifest: &DatasetManifest, frames: &dyn FrameSource, ids: impl IntoIterator<Item = String>) -> Result<HashMap<String, Arc<Frame>>> {
    let mut ids: Vec<String> = ids.into_iter().collect();
    ids.sort();
    ids.dedup();
    let loaded: Vec<Result<(String, Arc<Frame>)>> = ids
        .par_iter()
        .map(|id| {
            let slide = manifest.slide(id).ok_or_else(|| Error::Validation(format!("unknown slide {id}")))?;
            Ok((id.clone(), frames.load_frame(manifest, slide)?))
        })
        .collect();
    loaded.into_iter().collect()
}
