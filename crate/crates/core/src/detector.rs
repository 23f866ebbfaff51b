//! Candidate-proposal stage: backbone contract, positive-patch sampling,
//! warmup and plateau schedules, the training loop with partial freezing,
//! and tiled inference with centroid deduplication.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{random_dihedral, random_shear};
use crate::bootstrap::{component_box, connected_components};
use crate::checkpoint::{self, FORMAT_VERSION};
use crate::dataio::{detector_items, load_frames, DatasetManifest, FrameSource, SplitAssignment, Subset};
use crate::domaingan::{random_domain_transfer, DomainTransformSet};
use crate::error::{Error, Result};
use crate::eval::{pr_curve_pooled, SlidePoints};
use crate::geometry::{extract_region, tile_frame};
use crate::nn::optim::{Optimizer, Sgd, SgdConfig};
use crate::nn::ParamStore;
use crate::pixelnet::{pixel_features, PixelNet, PixelNetDoc, PixelNetSpec};
use crate::train::{warmup_lr, FocalParams, PlateauScheduler};
use crate::types::{BoundingBox, Detection, Frame, Label};

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub score: f64,
}

/// Proposal network contract. Parameters are grouped into named blocks,
/// ordered from input to output, so training can freeze by block.
pub trait DetectorBackbone: Send + Sync {
    /// Proposals sorted by descending score, boxes inside the raster.
    fn propose(&self, raster: &Array3<u8>) -> Vec<Proposal>;
    fn blocks(&self) -> Vec<String>;
}

pub trait TrainableDetector: DetectorBackbone + Clone {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// One update on a patch with its mitosis boxes; returns the loss.
    fn train_step(&mut self, patch: &Array3<u8>, boxes: &[BoundingBox], opt: &mut dyn Optimizer, lr: f64, trainable: &dyn Fn(&str) -> bool) -> f64;
    fn save(&self, path: &Path) -> Result<()>;
}

/// Per-pixel mitosis heatmap; proposals are connected components of the
/// thresholded map scored by their peak probability.
#[derive(Clone, Debug)]
pub struct TinyPixelDetector {
    pub net: PixelNet,
    pub pixel_threshold: f32,
    pub min_area: usize,
    pub focal: FocalParams,
    /// Background pixels per object pixel kept in each training step.
    pub negative_ratio: usize,
}

#[derive(Serialize, Deserialize)]
struct TinyPixelDoc {
    net: PixelNetDoc,
    pixel_threshold: f32,
    min_area: usize,
    focal: FocalParams,
    #[serde(default = "default_negative_ratio")]
    negative_ratio: usize,
}

fn default_negative_ratio() -> usize {
    3
}

pub const PRETRAINED_DETECTOR_FILE: &str = "detector_pretrained.json";

impl TinyPixelDetector {
    pub fn new(hidden: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { net: PixelNet::new(PixelNetSpec { hidden }, &mut rng), pixel_threshold: 0.5, min_area: 4, focal: FocalParams::default(), negative_ratio: 3 }
    }

    /// Loads `detector_pretrained.json` from `cache_dir` when present,
    /// otherwise initialises randomly.
    pub fn pretrained_or_new(cache_dir: Option<&Path>, hidden: Vec<usize>, seed: u64) -> Result<Self> {
        if let Some(path) = cache_dir.map(|d| d.join(PRETRAINED_DETECTOR_FILE)).filter(|p| p.is_file()) {
            log::info!("loading pretrained detector weights from {}", path.display());
            return Self::load(&path);
        }
        log::warn!("no pretrained detector weights found; starting from random initialisation");
        Ok(Self::new(hidden, seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: TinyPixelDoc = checkpoint::load_json(path)?;
        let net = PixelNet::from_doc(&doc.net).map_err(|e| Error::Incompatible { path: path.to_path_buf(), reason: e.to_string() })?;
        Ok(Self { net, pixel_threshold: doc.pixel_threshold, min_area: doc.min_area, focal: doc.focal, negative_ratio: doc.negative_ratio })
    }

    pub fn heatmap(&self, raster: &Array3<u8>) -> Array2<f32> {
        self.net.predict(raster)
    }
}

/// 1 inside the ellipse inscribed in any box, 0 elsewhere; row-major.
pub fn box_targets(h: usize, w: usize, boxes: &[BoundingBox]) -> Vec<u8> {
    let mut t = vec![0u8; h * w];
    for b in boxes {
        let c = b.center();
        let (rx, ry) = (b.width() / 2.0, b.height() / 2.0);
        let (y0, y1) = (b.y0.floor().max(0.0) as usize, (b.y1.ceil() as usize).min(h));
        let (x0, x1) = (b.x0.floor().max(0.0) as usize, (b.x1.ceil() as usize).min(w));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = ((x as f64 + 0.5 - c.x) / rx, (y as f64 + 0.5 - c.y) / ry);
                if dx * dx + dy * dy <= 1.0 {
                    t[y * w + x] = 1;
                }
            }
        }
    }
    t
}

/// Every object pixel plus an evenly strided subset of background pixels,
/// `ratio` per object pixel (at least `64 * ratio`). `ratio == 0` keeps all.
pub fn balanced_rows(targets: &[u8], ratio: usize) -> Vec<usize> {
    let pos = targets.iter().filter(|&&t| t == 1).count();
    let neg = targets.len() - pos;
    let want = ratio.saturating_mul(pos.max(64));
    if ratio == 0 || want >= neg {
        return (0..targets.len()).collect();
    }
    let stride = neg as f64 / want as f64;
    let mut next = stride / 2.0;
    let mut seen = 0usize;
    let mut rows = Vec::with_capacity(pos + want);
    for (i, &t) in targets.iter().enumerate() {
        if t == 1 {
            rows.push(i);
        } else {
            if seen as f64 >= next.floor() {
                rows.push(i);
                next += stride;
            }
            seen += 1;
        }
    }
    rows
}

impl DetectorBackbone for TinyPixelDetector {
    fn propose(&self, raster: &Array3<u8>) -> Vec<Proposal> {
        let heat = self.heatmap(raster);
        let mut out: Vec<Proposal> = connected_components(&heat, self.pixel_threshold)
            .into_iter()
            .filter(|c| c.len() >= self.min_area)
            .map(|c| {
                let score = c.iter().map(|&(r, k)| heat[[r, k]]).fold(0.0f32, f32::max);
                Proposal { bbox: component_box(&c).expect("non-empty"), score: f64::from(score) }
            })
            .collect();
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out
    }

    fn blocks(&self) -> Vec<String> {
        self.net.blocks()
    }
}

impl TrainableDetector for TinyPixelDetector {
    fn params(&self) -> &ParamStore {
        &self.net.mlp.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.net.mlp.store
    }

    fn train_step(&mut self, patch: &Array3<u8>, boxes: &[BoundingBox], opt: &mut dyn Optimizer, lr: f64, trainable: &dyn Fn(&str) -> bool) -> f64 {
        let (h, w, _) = patch.dim();
        let targets = box_targets(h, w, boxes);
        let rows = balanced_rows(&targets, self.negative_ratio);
        let feats = pixel_features(patch).select(ndarray::Axis(0), &rows);
        let sub: Vec<u8> = rows.iter().map(|&r| targets[r]).collect();
        let focal = self.focal;
        self.net.train_step(&feats, &sub, focal, opt, lr, trainable)
    }

    fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_json(
            path,
            &TinyPixelDoc {
                net: self.net.to_doc(),
                pixel_threshold: self.pixel_threshold,
                min_area: self.min_area,
                focal: self.focal,
                negative_ratio: self.negative_ratio,
            },
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositivePatch {
    /// Frame coordinates of the patch's top-left pixel.
    pub origin: (i64, i64),
    pub pixels: Array3<u8>,
    /// Mitosis boxes intersecting the patch, in patch coordinates, clipped.
    pub boxes: Vec<BoundingBox>,
}

/// Integer origins along one axis that keep `[lo, hi)` inside a window of
/// `size`, preferring windows that stay inside `[0, len)`.
pub fn origin_interval(lo: f64, hi: f64, size: usize, len: usize) -> Option<(i64, i64)> {
    let size_i = size as i64;
    let len_i = len as i64;
    let a = (hi.ceil() as i64 - size_i).max((len_i - size_i).min(0));
    let b = (lo.floor() as i64).min((len_i - size_i).max(0));
    (a <= b).then_some((a, b))
}

/// Square patch guaranteed to contain one complete, randomly chosen mitosis
/// box. Areas beyond the frame are filled by reflection.
pub fn sample_positive_patch<R: Rng + ?Sized>(frame: &Frame, rng: &mut R, size: usize) -> Result<PositivePatch> {
    let boxes: Vec<BoundingBox> = frame.mitoses().filter_map(|a| a.bbox).collect();
    if boxes.is_empty() {
        return Err(Error::InvalidArgument(format!("slide {} has no mitosis boxes", frame.slide_id)));
    }
    let chosen = boxes[rng.random_range(0..boxes.len())];
    let pick = |lo: f64, hi: f64, len: usize, rng: &mut R| match origin_interval(lo, hi, size, len) {
        Some((a, b)) => rng.random_range(a..=b),
        None => ((lo + hi) / 2.0).floor() as i64 - (size / 2) as i64,
    };
    let ox = pick(chosen.x0, chosen.x1, frame.width(), rng);
    let oy = pick(chosen.y0, chosen.y1, frame.height(), rng);
    let window = BoundingBox { x0: ox as f64, y0: oy as f64, x1: (ox + size as i64) as f64, y1: (oy + size as i64) as f64 };
    let in_patch = boxes
        .iter()
        .filter_map(|b| b.intersect(&window))
        .map(|b| b.translate(-(ox as f64), -(oy as f64)))
        .collect();
    Ok(PositivePatch { origin: (ox, oy), pixels: extract_region(&frame.pixels, ox, oy, size, size), boxes: in_patch })
}

/// Greedy suppression: visit by descending score (stable) and keep a
/// detection unless a kept one lies within `radius` of its centroid.
pub fn dedup_detections(mut dets: Vec<Detection>, radius: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score().total_cmp(&a.score()));
    let mut kept: Vec<Detection> = Vec::with_capacity(dets.len());
    for d in dets {
        if kept.iter().all(|k| k.centroid.distance(&d.centroid) > radius) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceParams {
    pub tile: usize,
    pub overlap: usize,
    pub min_score: f64,
    pub dedup_radius: f64,
}

impl Default for InferenceParams {
    fn default() -> Self {
        Self { tile: 3000, overlap: 128, min_score: 0.05, dedup_radius: 15.0 }
    }
}

/// Tiles the frame, proposes per tile, maps boxes to frame coordinates,
/// drops low scores and deduplicates across tile overlaps.
pub fn detect_candidates(backbone: &dyn DetectorBackbone, frame: &Frame, p: &InferenceParams) -> Result<Vec<Detection>> {
    let tiles = tile_frame(frame, p.tile, p.overlap)?;
    let per_tile: Vec<Vec<Detection>> = tiles
        .par_iter()
        .map(|t| {
            backbone
                .propose(&t.pixels)
                .into_iter()
                .filter(|pr| pr.score >= p.min_score)
                .map(|pr| Detection::candidate(pr.bbox.translate(t.x as f64, t.y as f64), pr.score))
                .collect()
        })
        .collect();
    Ok(dedup_detections(per_tile.into_iter().flatten().collect(), p.dedup_radius))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorTrainConfig {
    pub patch_size: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub unfrozen_blocks: usize,
    pub max_epochs: usize,
    pub max_shear: f64,
    pub hidden: Vec<usize>,
    pub focal: FocalParams,
    pub inference: InferenceParams,
    pub seed: u64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        Self {
            patch_size: 3000,
            batch_size: 1,
            lr0: 0.002,
            momentum: 0.9,
            weight_decay: 0.0,
            plateau_factor: 2.0,
            plateau_patience: 5,
            unfrozen_blocks: 2,
            max_epochs: 200,
            max_shear: 0.2,
            hidden: vec![16, 16, 8],
            focal: FocalParams::default(),
            inference: InferenceParams::default(),
            seed: 0,
        }
    }
}

impl DetectorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Err(Error::Config { field: format!("detector.{field}"), message: message.into() });
        if !(self.lr0 > 0.0) {
            return bad("lr0", "must be > 0");
        }
        if !(self.plateau_factor > 1.0) {
            return bad("plateau_factor", "must be > 1");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience", "must be >= 1");
        }
        if self.patch_size == 0 {
            return bad("patch_size", "must be > 0");
        }
        if self.batch_size != 1 {
            return bad("batch_size", "only batch size 1 is supported");
        }
        if !(0.0..0.9).contains(&self.max_shear) {
            return bad("max_shear", "must be in [0, 0.9)");
        }
        if self.inference.tile == 0 || self.inference.overlap >= self.inference.tile {
            return bad("inference.overlap", "need tile > overlap >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_pr_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorMeta {
    pub format_version: u32,
    pub kind: String,
    pub epoch: usize,
    pub val_pr_auc: f64,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, Default)]
pub struct DetectorTrainOptions {
    /// Best checkpoint goes to `detector.json` + `detector.meta.json`, and
    /// per-epoch metrics to `metrics.csv`.
    pub out_dir: Option<PathBuf>,
    pub config_hash: Option<String>,
    /// Stop after this many epochs (for smoke runs); `None` runs to `max_epochs`.
    pub epoch_limit: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct DetectorTrainReport<T> {
    pub best: T,
    /// State after the final epoch.
    pub last: T,
    pub best_epoch: usize,
    pub best_pr_auc: f64,
    pub baseline_pr_auc: f64,
    pub history: Vec<DetectorEpoch>,
}

pub fn validation_pr_auc(det: &dyn DetectorBackbone, frames: &[Arc<Frame>], p: &InferenceParams) -> Result<f64> {
    let slides: Vec<Result<SlidePoints>> = frames
        .iter()
        .map(|f| {
            let dets = detect_candidates(det, f, p)?;
            Ok(SlidePoints {
                preds: dets.iter().map(|d| (d.centroid, d.detector_score)).collect(),
                gts: f.mitoses().map(|a| a.centroid).collect(),
            })
        })
        .collect();
    let slides: Vec<SlidePoints> = slides.into_iter().collect::<Result<_>>()?;
    Ok(pr_curve_pooled(&slides, p.dedup_radius).auc)
}

/// Builds the augmented training sample for one item: positive patch,
/// optional domain transfer, shear and dihedral symmetry.
fn prepare_sample(frame: &Frame, tset: Option<&DomainTransformSet>, cfg: &DetectorTrainConfig, rng: &mut ChaCha8Rng) -> Result<(Array3<u8>, Vec<BoundingBox>)> {
    let patch = sample_positive_patch(frame, rng, cfg.patch_size)?;
    let mut pixels = patch.pixels;
    if let Some(t) = tset {
        pixels = random_domain_transfer(&pixels, &frame.domain, t, rng)?.1;
    }
    let size = cfg.patch_size;
    let shear = random_shear(size, size, cfg.max_shear, rng)?;
    let mut boxes: Vec<BoundingBox> = patch.boxes.iter().filter_map(|b| shear.map_box(b, size, size)).collect();
    if !shear.is_identity() {
        pixels = crate::geometry::to_u8(&shear.apply(&crate::geometry::to_f32(&pixels)));
    }
    let (t, out) = random_dihedral(&pixels, rng)?;
    boxes = boxes.iter().map(|b| t.map_box(b, size, size)).collect();
    Ok((out, boxes))
}

/// The last `n` blocks of the backbone, which are the only ones updated.
pub fn unfrozen_blocks(blocks: &[String], n: usize) -> Vec<String> {
    blocks[blocks.len().saturating_sub(n)..].to_vec()
}

/// Trains the detector with only its last `unfrozen_blocks` blocks updated:
/// linear warmup over the first epoch, then a plateau schedule driven by the
/// validation PR-AUC, keeping the best-scoring epoch.
pub fn train_detector<T: TrainableDetector>(
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    frames: &dyn FrameSource,
    cfg: &DetectorTrainConfig,
    tset: Option<&DomainTransformSet>,
    mut det: T,
    opts: &DetectorTrainOptions,
) -> Result<DetectorTrainReport<T>> {
    cfg.validate()?;
    if tset.is_none() {
        log::warn!("no domain transform set given; training without scanner-domain augmentation");
    }
    let items = detector_items(manifest, split, Subset::Train)?;
    if items.is_empty() {
        return Err(Error::InvalidArgument("no training slides with mitosis boxes".into()));
    }
    let val_ids: Vec<String> = manifest
        .slides
        .iter()
        .filter(|s| split.val.contains(&s.slide_id) && s.domain.annotated())
        .map(|s| s.slide_id.clone())
        .collect();
    let train_frames = load_frames(manifest, frames, items.iter().map(|i| i.slide_id.clone()))?;
    let val_frames: Vec<Arc<Frame>> = {
        let m = load_frames(manifest, frames, val_ids.iter().cloned())?;
        val_ids.iter().map(|id| m[id].clone()).collect()
    };
    if val_frames.is_empty() {
        log::warn!("no validation slides; validation PR-AUC is reported as 0");
    }
    for f in train_frames.values() {
        if f.annotations.iter().any(|a| a.label == Label::Mitosis && a.bbox.is_none()) {
            return Err(Error::Validation(format!("slide {} has mitoses without boxes; run bootstrap-masks first", f.slide_id)));
        }
    }

    let unfrozen = unfrozen_blocks(&det.blocks(), cfg.unfrozen_blocks);
    let trainable = |b: &str| unfrozen.iter().any(|u| u == b);
    let mut opt = Sgd::new(SgdConfig { momentum: cfg.momentum, weight_decay: cfg.weight_decay });

    let baseline = if val_frames.is_empty() { 0.0 } else { validation_pr_auc(&det, &val_frames, &cfg.inference)? };
    let mut sched = PlateauScheduler::new(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience, baseline);
    let mut best = (det.clone(), 0usize, baseline);
    let mut history = Vec::new();
    let epochs = opts.epoch_limit.map_or(cfg.max_epochs, |l| l.min(cfg.max_epochs));
    let chunk = rayon::current_num_threads().max(1);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    for epoch in 1..=epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut step = 0usize;
        for batch in order.chunks(chunk) {
            let samples: Vec<Result<(Array3<u8>, Vec<BoundingBox>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(((epoch as u64) << 32) | idx as u64);
                    prepare_sample(&train_frames[&items.0[idx].slide_id], tset, cfg, &mut rng)
                })
                .collect();
            for sample in samples {
                let (patch, boxes) = sample?;
                let lr = if epoch == 1 { warmup_lr(step, items.len(), sched.current_lr) } else { sched.current_lr };
                let loss = det.train_step(&patch, &boxes, &mut opt, lr, &trainable);
                if !loss.is_finite() || !det.params().all_finite() {
                    log::error!("detector training diverged at epoch {epoch}, step {step}");
                    return Err(Error::Diverged { epoch, step });
                }
                loss_sum += loss;
                step += 1;
            }
        }
        let lr_used = sched.current_lr;
        let val = if val_frames.is_empty() { 0.0 } else { validation_pr_auc(&det, &val_frames, &cfg.inference)? };
        sched.step(val);
        let record = DetectorEpoch { epoch, lr: lr_used, train_loss: loss_sum / step.max(1) as f64, val_pr_auc: val };
        log::info!("detector epoch {epoch}: loss {:.5} val PR-AUC {:.4} lr {:.2e}", record.train_loss, val, lr_used);
        if val > best.2 || best.1 == 0 {
            best = (det.clone(), epoch, val);
            if let Some(dir) = &opts.out_dir {
                det.save(&dir.join("detector.json"))?;
                let meta = DetectorMeta {
                    format_version: FORMAT_VERSION,
                    kind: "tiny_pixel".into(),
                    epoch,
                    val_pr_auc: val,
                    config_hash: opts.config_hash.clone(),
                };
                checkpoint::save_json(&dir.join("detector.meta.json"), &meta)?;
            }
        }
        if let Some(dir) = &opts.out_dir {
            checkpoint::append_csv(
                &dir.join("metrics.csv"),
                "epoch,lr,train_loss,val_pr_auc",
                &format!("{},{},{},{}", epoch, lr_used, record.train_loss, val),
            )?;
        }
        history.push(record);
    }
    Ok(DetectorTrainReport { last: det, best: best.0, best_epoch: best.1, best_pr_auc: best.2, baseline_pr_auc: baseline, history })
}

/// Loads a detector checkpoint after checking its sidecar.
pub fn load_detector(path: &Path) -> Result<TinyPixelDetector> {
    let meta_path = path.with_file_name(format!(
        "{}.meta.json",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("detector")
    ));
    if meta_path.is_file() {
        let meta: DetectorMeta = checkpoint::load_json(&meta_path)?;
        checkpoint::check_version(&meta_path, meta.format_version)?;
        if meta.kind != "tiny_pixel" {
            return Err(Error::Incompatible { path: meta_path, reason: format!("unsupported detector kind {}", meta.kind) });
        }
    }
    TinyPixelDetector::load(path)
}
