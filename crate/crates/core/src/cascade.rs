//! End-to-end inference: detector candidates refined by the classifier
//! ensemble, for single frames and for directories of frames.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, FORMAT_VERSION};
use crate::classifier::{refine_detections, Ensemble, EnsembleDescriptor, EnsembleWeights, PatchScorer};
use crate::detector::{detect_candidates, load_detector, DetectorBackbone, DetectorMeta, InferenceParams};
use crate::error::{Error, Result};
use crate::eval::{save_results, ScoredPoint, SlideResult};
use crate::imageio;
use crate::types::{Detection, Frame, ScannerDomain};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CascadeConfig {
    #[serde(default = "format_version")]
    pub format_version: u32,
    /// Detector checkpoint; relative paths resolve against the config file.
    pub detector: PathBuf,
    /// Ensemble descriptor JSON.
    pub ensemble: PathBuf,
    #[serde(default = "default_tile")]
    pub tile: usize,
    #[serde(default = "default_overlap")]
    pub overlap: usize,
    #[serde(default = "default_min_score")]
    pub min_score: f64,
    #[serde(default = "default_dedup")]
    pub dedup_radius: f64,
    /// Falls back to the threshold stored in the ensemble descriptor.
    #[serde(default)]
    pub accept_threshold: Option<f64>,
    /// When set, every artifact sidecar carrying a config hash must match it.
    #[serde(default)]
    pub config_hash: Option<String>,
}

fn format_version() -> u32 {
    FORMAT_VERSION
}
fn default_tile() -> usize {
    InferenceParams::default().tile
}
fn default_overlap() -> usize {
    InferenceParams::default().overlap
}
fn default_min_score() -> f64 {
    InferenceParams::default().min_score
}
fn default_dedup() -> f64 {
    InferenceParams::default().dedup_radius
}

impl CascadeConfig {
    pub fn new(detector: PathBuf, ensemble: PathBuf) -> Self {
        let p = InferenceParams::default();
        Self {
            format_version: FORMAT_VERSION,
            detector,
            ensemble,
            tile: p.tile,
            overlap: p.overlap,
            min_score: p.min_score,
            dedup_radius: p.dedup_radius,
            accept_threshold: None,
            config_hash: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config { field: "cascade".into(), message: e.message().to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses the file and resolves relative artifact paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.detector, &mut cfg.ensemble] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config { field: "cascade".into(), message: e.to_string() })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| Err(Error::Config { field: format!("cascade.{field}"), message });
        if self.format_version != FORMAT_VERSION {
            return bad("format_version", format!("{} is not supported (expected {FORMAT_VERSION})", self.format_version));
        }
        if self.tile == 0 || self.overlap >= self.tile {
            return bad("overlap", "need tile > overlap >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return bad("min_score", "must be in [0, 1]".into());
        }
        if !(self.dedup_radius >= 0.0) {
            return bad("dedup_radius", "must be >= 0".into());
        }
        if let Some(t) = self.accept_threshold.filter(|t| !t.is_finite()) {
            return bad("accept_threshold", format!("{t} is not finite"));
        }
        Ok(())
    }

    pub fn inference_params(&self) -> InferenceParams {
        InferenceParams { tile: self.tile, overlap: self.overlap, min_score: self.min_score, dedup_radius: self.dedup_radius }
    }
}

/// Loaded, read-only pipeline shared by every frame.
pub struct Cascade {
    pub detector: Box<dyn DetectorBackbone>,
    pub members: Vec<Box<dyn PatchScorer>>,
    pub weights: EnsembleWeights,
    pub patch_size: usize,
    pub params: InferenceParams,
    pub accept_threshold: f64,
}

fn check_hash(path: &Path, expected: Option<&str>, found: Option<&str>) -> Result<()> {
    match (expected, found) {
        (Some(e), Some(f)) if e != f => Err(Error::Incompatible { path: path.to_path_buf(), reason: format!("config hash {f} does not match {e}") }),
        _ => Ok(()),
    }
}

impl Cascade {
    /// Loads and cross-checks every artifact; fails before any frame is read.
    pub fn load(cfg: &CascadeConfig) -> Result<Self> {
        cfg.validate()?;
        for p in [&cfg.detector, &cfg.ensemble] {
            if !p.is_file() {
                return Err(Error::Incompatible { path: p.clone(), reason: "artifact not found".into() });
            }
        }
        let expected = cfg.config_hash.as_deref();
        let det_meta = crate::classifier::meta_path(&cfg.detector);
        if det_meta.is_file() {
            let meta: DetectorMeta = checkpoint::load_json(&det_meta)?;
            check_hash(&det_meta, expected, meta.config_hash.as_deref())?;
        }
        let desc: EnsembleDescriptor = checkpoint::load_json(&cfg.ensemble)?;
        check_hash(&cfg.ensemble, expected, desc.config_hash.as_deref())?;
        let detector = load_detector(&cfg.detector)?;
        let ens = Ensemble::load(&cfg.ensemble)?;
        let accept_threshold = cfg.accept_threshold.unwrap_or(ens.threshold);
        Ok(Self::from_parts(Box::new(detector), ens, cfg.inference_params(), accept_threshold))
    }

    pub fn from_parts(detector: Box<dyn DetectorBackbone>, ens: Ensemble, params: InferenceParams, accept_threshold: f64) -> Self {
        Self {
            detector,
            members: ens.members.into_iter().map(|m| Box::new(m) as Box<dyn PatchScorer>).collect(),
            weights: ens.weights,
            patch_size: ens.patch_size,
            params,
            accept_threshold,
        }
    }
}

/// Candidates, refinement, then descending merged score (stable).
pub fn run_cascade(frame: &Frame, cascade: &Cascade) -> Result<Vec<Detection>> {
    let candidates = detect_candidates(cascade.detector.as_ref(), frame, &cascade.params)?;
    let members: Vec<&dyn PatchScorer> = cascade.members.iter().map(|m| m.as_ref()).collect();
    let mut out = refine_detections(candidates, &members, &cascade.weights, frame, cascade.accept_threshold, cascade.patch_size)?;
    out.sort_by(|a, b| b.score().total_cmp(&a.score()));
    Ok(out)
}

pub fn to_slide_result(slide_id: &str, dets: &[Detection]) -> SlideResult {
    SlideResult {
        slide_id: slide_id.to_string(),
        points: dets.iter().map(|d| ScoredPoint { x: d.centroid.x, y: d.centroid.y, score: d.score() }).collect(),
        error: None,
    }
}

fn process_file(path: &Path, slide_id: &str, cascade: &Cascade) -> Result<SlideResult> {
    let pixels = imageio::read_rgb(path)?;
    let frame = Frame::new(slide_id, ScannerDomain::Custom("unknown".into()), pixels)?;
    Ok(to_slide_result(slide_id, &run_cascade(&frame, cascade)?))
}

/// Runs every image of `input_dir` (sorted by file name, slide id = file
/// stem). A failing file yields an error record and the batch continues.
pub fn run_batch(input_dir: &Path, cascade: &Cascade, output: Option<&Path>) -> Result<Vec<SlideResult>> {
    let files = imageio::list_images(input_dir)?;
    let results: Vec<SlideResult> = files
        .par_iter()
        .map(|path| {
            let slide_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            process_file(path, &slide_id, cascade).unwrap_or_else(|e| {
                log::error!("{}: {e}", path.display());
                SlideResult { slide_id, points: Vec::new(), error: Some(e.to_string()) }
            })
        })
        .collect();
    if let Some(out) = output {
        save_results(out, &results)?;
    }
    Ok(results)
}
