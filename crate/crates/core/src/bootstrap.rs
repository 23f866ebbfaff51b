//! Mask and box bootstrapping: train a segmenter on a small seed set of
//! hand-drawn masks, run it with eight-fold dihedral test-time augmentation
//! around every other known mitosis, and turn the averaged masks into boxes.
//! Cases that do not yield a clean component go to a work list for manual
//! completion.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetManifest, FrameSource};
use crate::error::{Error, Result};
use crate::geometry::{extract_region, extract_region_2d, patch_origin, DihedralTransform};
use crate::imageio;
use crate::nn::optim::{Adam, AdamConfig};
use crate::pixelnet::{pixel_features, PixelNet, PixelNetSpec};
use crate::train::FocalParams;
use crate::types::{BoundingBox, Label, Point};

/// Per-pixel foreground probabilities for a square RGB patch.
pub trait PixelSegmenter: Send + Sync {
    fn segment(&self, patch: &Array3<u8>) -> Result<Array2<f32>>;
}

/// Builds a segmenter from seed examples.
pub trait SegmenterFactory {
    fn train(&self, seeds: &[SeedExample]) -> Result<Box<dyn PixelSegmenter>>;
}

#[derive(Clone, Debug)]
pub struct SeedExample {
    pub patch: Array3<u8>,
    pub mask: Array2<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedMask {
    pub slide_id: String,
    pub annotation_id: u64,
    /// Square binary mask centred on the annotation centroid.
    pub mask: Array2<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedMaskSet {
    pub entries: Vec<SeedMask>,
}

/// Splits `{slide_id}_{annotation_id}.png` at the last underscore.
pub fn parse_mask_name(path: &Path) -> Option<(String, u64)> {
    let stem = path.file_stem()?.to_str()?;
    let (slide, ann) = stem.rsplit_once('_')?;
    Some((slide.to_string(), ann.parse().ok()?))
}

impl SeedMaskSet {
    /// Reads every `{slide_id}_{annotation_id}.png` in `dir`, binarised at 0.5.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for path in imageio::list_images(dir)? {
            let Some((slide_id, annotation_id)) = parse_mask_name(&path) else {
                log::warn!("ignoring seed mask with unexpected name {}", path.display());
                continue;
            };
            let mask = imageio::gray_to_mask(&imageio::read_gray(&path)?).mapv(|v| f32::from(u8::from(v >= 0.5)));
            entries.push(SeedMask { slide_id, annotation_id, mask });
        }
        Ok(Self { entries })
    }

    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        for e in &self.entries {
            let slide = manifest
                .slide(&e.slide_id)
                .ok_or_else(|| Error::Validation(format!("seed mask references unknown slide {}", e.slide_id)))?;
            let ok = slide.annotations.iter().any(|a| a.id == e.annotation_id && a.label == Label::Mitosis);
            if !ok {
                return Err(Error::Validation(format!(
                    "seed mask {}_{} does not reference a mitosis annotation",
                    e.slide_id, e.annotation_id
                )));
            }
            let (h, w) = e.mask.dim();
            if h != w || h == 0 {
                return Err(Error::Shape(format!("seed mask {}_{} is {h}x{w}, expected square", e.slide_id, e.annotation_id)));
            }
        }
        Ok(())
    }
}

/// Mean of the segmenter output over the eight dihedral transforms, each
/// prediction mapped back by the inverse transform.
pub fn tta_segment(segmenter: &dyn PixelSegmenter, patch: &Array3<u8>) -> Result<Array2<f32>> {
    let (h, w, _) = patch.dim();
    if h != w {
        return Err(Error::Shape(format!("TTA needs a square patch, got {h}x{w}")));
    }
    let mut sum = Array2::<f32>::zeros((h, w));
    for t in DihedralTransform::all() {
        let pred = segmenter.segment(&t.apply(patch)?)?;
        if pred.dim() != (h, w) {
            return Err(Error::Shape(format!("segmenter returned {:?} for a {h}x{w} patch", pred.dim())));
        }
        sum += &t.inverse().apply_2d(&pred)?;
    }
    Ok(sum / 8.0)
}

/// 8-connected components of `mask >= threshold` in scan order of their
/// first pixel, each as a list of `(row, col)`.
pub fn connected_components(mask: &Array2<f32>, threshold: f32) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = mask.dim();
    let mut seen = Array2::from_elem((h, w), false);
    let mut comps = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if seen[[r, c]] || mask[[r, c]] < threshold {
                continue;
            }
            let mut comp = Vec::new();
            let mut stack = vec![(r, c)];
            seen[[r, c]] = true;
            while let Some((y, x)) = stack.pop() {
                comp.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if !seen[[ny, nx]] && mask[[ny, nx]] >= threshold {
                            seen[[ny, nx]] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            comps.push(comp);
        }
    }
    comps
}

/// Largest component of `mask >= threshold`, first in scan order on ties.
pub fn largest_component(mask: &Array2<f32>, threshold: f32) -> Vec<(usize, usize)> {
    let mut best: Vec<(usize, usize)> = Vec::new();
    for comp in connected_components(mask, threshold) {
        if comp.len() > best.len() {
            best = comp;
        }
    }
    best
}

pub fn component_box(comp: &[(usize, usize)]) -> Option<BoundingBox> {
    let r0 = comp.iter().map(|p| p.0).min()?;
    let r1 = comp.iter().map(|p| p.0).max()?;
    let c0 = comp.iter().map(|p| p.1).min()?;
    let c1 = comp.iter().map(|p| p.1).max()?;
    Some(BoundingBox { x0: c0 as f64, y0: r0 as f64, x1: (c1 + 1) as f64, y1: (r1 + 1) as f64 })
}

/// Tight half-open box around the largest thresholded component, in mask
/// coordinates. `None` when nothing reaches the threshold.
pub fn mask_to_box(mask: &Array2<f32>, threshold: f32) -> Option<BoundingBox> {
    component_box(&largest_component(mask, threshold))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub threshold: f32,
    pub patch_size: usize,
    pub min_area: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self { threshold: 0.5, patch_size: 128, min_area: 9 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BoxOutcome {
    Boxed { bbox: BoundingBox, mask: Array2<f32> },
    Difficult(String),
}

/// Converts a patch-level soft mask around `centroid` into a frame box.
/// Difficult when the component is smaller than `min_area` or does not cover
/// the centroid pixel.
pub fn assess_mask(mask: &Array2<f32>, centroid: &Point, frame_w: usize, frame_h: usize, cfg: &BootstrapConfig) -> BoxOutcome {
    let size = mask.dim().0;
    let (ox, oy) = patch_origin(centroid, size);
    let comp = largest_component(mask, cfg.threshold);
    if comp.is_empty() {
        return BoxOutcome::Difficult("empty mask".into());
    }
    if comp.len() < cfg.min_area {
        return BoxOutcome::Difficult(format!("component area {} below {}", comp.len(), cfg.min_area));
    }
    let (cx, cy) = centroid.pixel();
    let (pr, pc) = (cy - oy, cx - ox);
    if !comp.iter().any(|&(r, c)| r as i64 == pr && c as i64 == pc) {
        return BoxOutcome::Difficult("centroid outside the segmented component".into());
    }
    let b = component_box(&comp).expect("non-empty");
    let clipped = BoundingBox {
        x0: (b.x0 + ox as f64).max(0.0),
        y0: (b.y0 + oy as f64).max(0.0),
        x1: (b.x1 + ox as f64).min(frame_w as f64),
        y1: (b.y1 + oy as f64).min(frame_h as f64),
    };
    let mut binary = Array2::zeros(mask.dim());
    for &(r, c) in &comp {
        binary[[r, c]] = 1.0;
    }
    match clipped.validate() {
        Ok(()) if clipped.contains(centroid) => BoxOutcome::Boxed { bbox: clipped, mask: binary },
        _ => BoxOutcome::Difficult("box collapses at the frame border".into()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStatistics {
    pub mean_diagonal: f64,
    pub std_diagonal: f64,
    pub count: usize,
}

/// Mean and population standard deviation of box diagonals.
pub fn diagonal_statistics(boxes: &[BoundingBox]) -> Result<BoxStatistics> {
    if boxes.is_empty() {
        return Err(Error::InvalidArgument("no boxes to summarise".into()));
    }
    let n = boxes.len() as f64;
    let diags: Vec<f64> = boxes.iter().map(BoundingBox::diagonal).collect();
    let mean = diags.iter().sum::<f64>() / n;
    let var = diags.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
    Ok(BoxStatistics { mean_diagonal: mean, std_diagonal: var.sqrt(), count: boxes.len() })
}

/// Statistics over every mitosis box in the manifest.
pub fn box_statistics(manifest: &DatasetManifest) -> Result<BoxStatistics> {
    let boxes: Vec<BoundingBox> = manifest
        .slides
        .iter()
        .flat_map(|s| s.annotations.iter())
        .filter(|a| a.label == Label::Mitosis)
        .filter_map(|a| a.bbox)
        .collect();
    diagonal_statistics(&boxes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifficultCase {
    pub slide_id: String,
    pub annotation_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_path: Option<String>,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct BootstrapOptions {
    /// Where to write the final masks as `{slide_id}_{annotation_id}.png`;
    /// `mask_path` entries of the output manifest point there.
    pub mask_dir: Option<PathBuf>,
    /// Where to write patches of difficult cases for manual annotation.
    pub worklist_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct BootstrapOutput {
    pub manifest: DatasetManifest,
    pub difficult: Vec<DifficultCase>,
    pub statistics: Option<BoxStatistics>,
}

fn relative_to(path: &Path, base: &Path) -> String {
    path.strip_prefix(base).unwrap_or(path).to_string_lossy().into_owned()
}

/// Trains a segmenter on the seed masks and boxes every remaining mitosis.
/// Centroids and labels are never modified.
pub fn bootstrap_dataset(
    manifest: &DatasetManifest,
    frames: &dyn FrameSource,
    seeds: &SeedMaskSet,
    factory: &dyn SegmenterFactory,
    cfg: &BootstrapConfig,
    opts: &BootstrapOptions,
) -> Result<BootstrapOutput> {
    if seeds.entries.is_empty() {
        return Err(Error::InvalidArgument("bootstrap needs at least one seed mask".into()));
    }
    if !(cfg.threshold > 0.0 && cfg.threshold < 1.0) || cfg.patch_size == 0 {
        return Err(Error::Config { field: "bootstrap.threshold".into(), message: "threshold must be in (0, 1) and patch_size > 0".into() });
    }
    seeds.validate(manifest)?;
    let seed_index: HashMap<(String, u64), &SeedMask> =
        seeds.entries.iter().map(|e| ((e.slide_id.clone(), e.annotation_id), e)).collect();

    let mut slides_needed: Vec<usize> = manifest
        .slides
        .iter()
        .enumerate()
        .filter(|(_, s)| s.annotations.iter().any(|a| a.label == Label::Mitosis))
        .map(|(i, _)| i)
        .collect();
    slides_needed.sort();

    let mut examples = Vec::new();
    for &i in &slides_needed {
        let slide = &manifest.slides[i];
        let mut frame = None;
        for a in &slide.annotations {
            if let Some(seed) = seed_index.get(&(slide.slide_id.clone(), a.id)) {
                let frame = match &frame {
                    Some(f) => f,
                    None => frame.insert(frames.load_frame(manifest, slide)?),
                };
                let size = seed.mask.dim().0;
                let (ox, oy) = patch_origin(&a.centroid, size);
                examples.push(SeedExample { patch: extract_region(&frame.pixels, ox, oy, size, size), mask: seed.mask.clone() });
            }
        }
    }
    let segmenter = factory.train(&examples)?;

    type SlideOutcome = Vec<(u64, BoxOutcome, Option<Array3<u8>>)>;
    let outcomes: Vec<Result<(usize, SlideOutcome)>> = slides_needed
        .par_iter()
        .map(|&i| {
            let slide = &manifest.slides[i];
            let frame = frames.load_frame(manifest, slide)?;
            let (w, h) = (frame.width(), frame.height());
            let mut out = Vec::new();
            for a in slide.annotations.iter().filter(|a| a.label == Label::Mitosis) {
                let outcome = if let Some(seed) = seed_index.get(&(slide.slide_id.clone(), a.id)) {
                    (assess_mask(&seed.mask, &a.centroid, w, h, cfg), None)
                } else {
                    let (ox, oy) = patch_origin(&a.centroid, cfg.patch_size);
                    let patch = extract_region(&frame.pixels, ox, oy, cfg.patch_size, cfg.patch_size);
                    let soft = tta_segment(segmenter.as_ref(), &patch)?;
                    (assess_mask(&soft, &a.centroid, w, h, cfg), Some(patch))
                };
                out.push((a.id, outcome.0, outcome.1));
            }
            Ok((i, out))
        })
        .collect();

    let mut result = manifest.clone();
    let mut difficult = Vec::new();
    for item in outcomes {
        let (i, anns) = item?;
        let slide_id = result.slides[i].slide_id.clone();
        for (ann_id, outcome, patch) in anns {
            let ann = result.slides[i].annotations.iter_mut().find(|a| a.id == ann_id).expect("annotation exists");
            match outcome {
                BoxOutcome::Boxed { bbox, mask } => {
                    ann.bbox = Some(bbox);
                    if let Some(dir) = &opts.mask_dir {
                        let path = dir.join(format!("{slide_id}_{ann_id}.png"));
                        imageio::write_gray(&path, &imageio::mask_to_gray(&mask))?;
                        ann.mask_path = Some(relative_to(&path, &manifest.root));
                    }
                }
                BoxOutcome::Difficult(reason) => {
                    let patch_path = match (&opts.worklist_dir, patch) {
                        (Some(dir), Some(p)) => {
                            let path = dir.join(format!("{slide_id}_{ann_id}.png"));
                            imageio::write_rgb(&path, &p)?;
                            Some(path.to_string_lossy().into_owned())
                        }
                        _ => None,
                    };
                    difficult.push(DifficultCase { slide_id: slide_id.clone(), annotation_id: ann_id, patch_path, reason });
                }
            }
        }
    }
    let statistics = box_statistics(&result).ok();
    Ok(BootstrapOutput { manifest: result, difficult, statistics })
}

pub fn save_worklist(path: &Path, cases: &[DifficultCase]) -> Result<()> {
    crate::checkpoint::save_json(path, cases)
}

/// Merges manually completed masks (`{slide_id}_{annotation_id}.png`, square,
/// centred on the centroid) back into the manifest. Returns how many were
/// merged; masks that still do not produce a valid box are reported as errors.
pub fn merge_manual_masks(manifest: &mut DatasetManifest, dir: &Path, cfg: &BootstrapConfig) -> Result<usize> {
    let set = SeedMaskSet::load_dir(dir)?;
    set.validate(manifest)?;
    let mut merged = 0;
    for e in set.entries {
        let slide = manifest.slide_mut(&e.slide_id).expect("validated");
        let (w, h) = (slide.width, slide.height);
        let ann = slide.annotations.iter_mut().find(|a| a.id == e.annotation_id).expect("validated");
        match assess_mask(&e.mask, &ann.centroid, w, h, cfg) {
            BoxOutcome::Boxed { bbox, .. } => {
                ann.bbox = Some(bbox);
                merged += 1;
            }
            BoxOutcome::Difficult(reason) => {
                return Err(Error::Validation(format!("manual mask {}_{}: {reason}", e.slide_id, e.annotation_id)));
            }
        }
    }
    Ok(merged)
}

/// Trains the built-in per-pixel network on the seed patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PixelNetSegmenterFactory {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PixelNetSegmenterFactory {
    fn default() -> Self {
        Self { hidden: vec![16, 16], epochs: 30, learning_rate: 0.01, seed: 0 }
    }
}

pub struct PixelNetSegmenter(pub PixelNet);

impl PixelSegmenter for PixelNetSegmenter {
    fn segment(&self, patch: &Array3<u8>) -> Result<Array2<f32>> {
        Ok(self.0.predict(patch))
    }
}

impl SegmenterFactory for PixelNetSegmenterFactory {
    fn train(&self, seeds: &[SeedExample]) -> Result<Box<dyn PixelSegmenter>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut net = PixelNet::new(PixelNetSpec { hidden: self.hidden.clone() }, &mut rng);
        let data: Vec<(ndarray::Array2<f64>, Vec<u8>)> = seeds
            .iter()
            .map(|s| (pixel_features(&s.patch), s.mask.iter().map(|&v| u8::from(v >= 0.5)).collect()))
            .collect();
        let mut opt = Adam::new(AdamConfig::default());
        let focal = FocalParams { gamma: 2.0, alpha: 0.5 };
        let mut order: Vec<usize> = (0..data.len()).collect();
        for epoch in 0..self.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for &i in &order {
                total += net.train_step(&data[i].0, &data[i].1, focal, &mut opt, self.learning_rate, &|_| true);
            }
            if !total.is_finite() {
                return Err(Error::Diverged { epoch, step: 0 });
            }
            log::debug!("segmenter epoch {epoch}: loss {:.5}", total / data.len().max(1) as f64);
        }
        Ok(Box::new(PixelNetSegmenter(net)))
    }
}

/// Segmenter that paints disks of a fixed radius at known centroids; used to
/// check box geometry independently of any learned model.
pub struct DiskSegmenter {
    pub radius: f64,
}

impl PixelSegmenter for DiskSegmenter {
    fn segment(&self, patch: &Array3<u8>) -> Result<Array2<f32>> {
        let (h, w, _) = patch.dim();
        // Centre of the patch, which extraction places on the centroid pixel.
        let (cy, cx) = ((h / 2) as f64 + 0.5, (w / 2) as f64 + 0.5);
        Ok(Array2::from_shape_fn((h, w), |(r, c)| {
            let d = ((r as f64 + 0.5 - cy).powi(2) + (c as f64 + 0.5 - cx).powi(2)).sqrt();
            f32::from(u8::from(d <= self.radius))
        }))
    }
}

/// Returns a fixed segmenter regardless of the seeds.
pub struct FixedSegmenterFactory<F: Fn() -> Box<dyn PixelSegmenter>>(pub F);

impl<F: Fn() -> Box<dyn PixelSegmenter>> SegmenterFactory for FixedSegmenterFactory<F> {
    fn train(&self, _seeds: &[SeedExample]) -> Result<Box<dyn PixelSegmenter>> {
        Ok((self.0)())
    }
}

/// Per-slide counts of boxed and difficult mitoses, for reports.
pub fn summarize(output: &BootstrapOutput) -> BTreeMap<String, (usize, usize)> {
    let mut m: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in &output.manifest.slides {
        let boxed = s.annotations.iter().filter(|a| a.label == Label::Mitosis && a.bbox.is_some()).count();
        m.insert(s.slide_id.clone(), (boxed, 0));
    }
    for d in &output.difficult {
        m.entry(d.slide_id.clone()).or_default().1 += 1;
    }
    m
}

/// Crop of a frame-level mask around a centroid, for seed-mask export.
pub fn crop_mask(mask: &Array2<f32>, centroid: &Point, size: usize) -> Array2<f32> {
    let (ox, oy) = patch_origin(centroid, size);
    extract_region_2d(mask, ox, oy, size, size)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;

    struct RandomStub {
        seed: u64,
    }

    impl PixelSegmenter for RandomStub {
        fn segment(&self, patch: &Array3<u8>) -> Result<Array2<f32>> {
            // Depends on content so each transformed input gives a different map.
            let (h, w, _) = patch.dim();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let weights: Vec<u32> = (0..3).map(|_| rng.random_range(1..7)).collect();
            Ok(Array2::from_shape_fn((h, w), |(r, c)| {
                let v: u32 = (0..3).map(|k| u32::from(patch[[r, c, k]]) * weights[k]).sum::<u32>() + (r * 3 + c) as u32;
                (v % 256) as f32 / 256.0
            }))
        }
    }

    #[test]
    fn constant_backbone_gives_constant_tta() {
        struct Half;
        impl PixelSegmenter for Half {
            fn segment(&self, p: &Array3<u8>) -> Result<Array2<f32>> {
                Ok(Array2::from_elem((p.dim().0, p.dim().1), 0.5))
            }
        }
        let patch = Array3::from_shape_fn((6, 6, 3), |(r, c, k)| (r * 7 + c * 3 + k) as u8);
        assert!(tta_segment(&Half, &patch).unwrap().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn tta_rejects_wrong_shapes() {
        struct Bad;
        impl PixelSegmenter for Bad {
            fn segment(&self, _: &Array3<u8>) -> Result<Array2<f32>> {
                Ok(Array2::zeros((2, 3)))
            }
        }
        let patch = Array3::zeros((6, 6, 3));
        assert!(matches!(tta_segment(&Bad, &patch), Err(Error::Shape(_))));
        assert!(tta_segment(&RandomStub { seed: 0 }, &Array3::zeros((4, 6, 3))).is_err());
    }

    #[test]
    fn tta_fixed_point_for_equivariant_backbone() {
        struct Brightness;
        impl PixelSegmenter for Brightness {
            fn segment(&self, p: &Array3<u8>) -> Result<Array2<f32>> {
                Ok(p.map_axis(ndarray::Axis(2), |v| f32::from(v[0]) / 256.0))
            }
        }
        let patch = Array3::from_shape_fn((8, 8, 3), |(r, c, _)| (r * 30 + c) as u8);
        assert_eq!(tta_segment(&Brightness, &patch).unwrap(), Brightness.segment(&patch).unwrap());
    }

    #[test]
    fn mask_to_box_cases() {
        let mut m = Array2::zeros((12, 12));
        m[[7, 5]] = 1.0;
        assert_eq!(mask_to_box(&m, 0.5), Some(BoundingBox { x0: 5.0, y0: 7.0, x1: 6.0, y1: 8.0 }));
        let mut m = Array2::zeros((12, 12));
        for r in 1..3 {
            for c in 1..6 {
                m[[r, c]] = 0.9;
            }
        }
        m[[10, 10]] = 0.9;
        m[[10, 11]] = 0.9;
        assert_eq!(mask_to_box(&m, 0.5), Some(BoundingBox { x0: 1.0, y0: 1.0, x1: 6.0, y1: 3.0 }));
        assert_eq!(mask_to_box(&Array2::zeros((5, 5)), 0.5), None);
    }

    #[test]
    fn statistics_cases() {
        let b = BoundingBox::new(0.0, 0.0, 20.0, 21.0).unwrap();
        let s = diagonal_statistics(&[b, b, b]).unwrap();
        assert!((s.mean_diagonal - 29.0).abs() < 1e-12 && s.std_diagonal.abs() < 1e-12);
        let d25 = BoundingBox::new(0.0, 0.0, 15.0, 20.0).unwrap();
        let d35 = BoundingBox::new(0.0, 0.0, 21.0, 28.0).unwrap();
        let s = diagonal_statistics(&[d25, d35]).unwrap();
        assert!((s.mean_diagonal - 30.0).abs() < 1e-12 && (s.std_diagonal - 5.0).abs() < 1e-12);
        assert!(diagonal_statistics(&[]).is_err());
    }

    #[test]
    fn disk_segmenter_gives_expected_diagonal() {
        let cfg = BootstrapConfig::default();
        let soft = tta_segment(&DiskSegmenter { radius: 10.0 }, &Array3::zeros((128, 128, 3))).unwrap();
        match assess_mask(&soft, &Point::new(300.5, 200.5), 600, 600, &cfg) {
            BoxOutcome::Boxed { bbox, .. } => {
                assert!((bbox.diagonal() - 20.0 * 2f64.sqrt()).abs() < 2.0, "{}", bbox.diagonal());
                assert!(bbox.contains(&Point::new(300.5, 200.5)));
            }
            other => panic!("{other:?}"),
        }
        let tiny = Array2::from_shape_fn((16, 16), |(r, c)| f32::from(u8::from(r == 8 && c == 8)));
        assert!(matches!(assess_mask(&tiny, &Point::new(50.0, 50.0), 100, 100, &cfg), BoxOutcome::Difficult(_)));
    }

    #[test]
    fn mask_names() {
        assert_eq!(parse_mask_name(Path::new("/x/XR_001_17.png")), Some(("XR_001".into(), 17)));
        assert_eq!(parse_mask_name(Path::new("bad.png")), None);
    }
}
