//! Second-stage patch classifiers and their ensemble.
//!
//! Two small backbone families (residual and densely connected) share one
//! head: three blocks of conv, ReLU, batch norm and dropout, global average
//! pooling, and a fully connected layer to one logit. Backbone blocks are
//! named `backbone.*` so training can keep them frozen for the first epochs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{hne_randaugment, random_dihedral, AugmentPolicy};
use crate::checkpoint::{self, FORMAT_VERSION};
use crate::dataio::{classifier_items, load_frames, ClassifierItem, DatasetManifest, FrameSource, SplitAssignment, Subset};
use crate::domaingan::{random_domain_transfer, DomainTransformSet};
use crate::error::{Error, Result};
use crate::eval::Counts;
use crate::geometry::{extract_patch, resize_patch, to_f32};
use crate::nn::layers::{
    avg_pool, avg_pool_backward, concat_channels, global_avg_pool, global_avg_pool_backward, split_channels, BatchNorm2d, Conv2d, Dropout, Linear, Relu4,
};
use crate::nn::optim::{Adam, AdamConfig, Optimizer};
use crate::nn::ParamStore;
use crate::train::{cosine_lr, focal_loss_logit, sigmoid, FocalParams};
use crate::types::{Detection, Frame};

pub const BACKBONE_PREFIX: &str = "backbone.";

pub fn is_backbone_block(block: &str) -> bool {
    block.starts_with(BACKBONE_PREFIX)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    #[default]
    Resnet,
    Densenet,
}

impl BackboneKind {
    pub fn name(&self) -> &'static str {
        match self {
            BackboneKind::Resnet => "resnet",
            BackboneKind::Densenet => "densenet",
        }
    }
}

impl std::fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet" => Ok(BackboneKind::Resnet),
            "densenet" => Ok(BackboneKind::Densenet),
            other => Err(Error::InvalidArgument(format!("unknown classifier member {other:?} (expected resnet or densenet)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemberSpec {
    pub kind: BackboneKind,
    /// Channel width of the backbone.
    pub width: usize,
    /// Channel width of the head's conv blocks.
    pub head_width: usize,
    /// Side length patches are resized to before entering the network.
    pub input_size: usize,
    /// Average-pooling factor applied to the input before the first conv.
    pub stem_pool: usize,
    pub dropout: f64,
}

impl Default for MemberSpec {
    fn default() -> Self {
        Self { kind: BackboneKind::Resnet, width: 8, head_width: 8, input_size: 224, stem_pool: 4, dropout: 0.5 }
    }
}

impl MemberSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Err(Error::Config { field: format!("classifier.member.{field}"), message: message.into() });
        if self.width == 0 || self.head_width == 0 {
            return bad("width", "widths must be > 0");
        }
        if self.stem_pool == 0 || self.input_size / self.stem_pool < 2 {
            return bad("stem_pool", "input_size / stem_pool must be >= 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum BackboneNet {
    Resnet { stem: Conv2d, stem_act: Relu4, c1: Conv2d, a1: Relu4, c2: Conv2d, out_act: Relu4 },
    Densenet { stem: Conv2d, stem_act: Relu4, c1: Conv2d, a1: Relu4, c2: Conv2d, a2: Relu4, trans: Conv2d, t_act: Relu4 },
}

impl BackboneNet {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, kind: BackboneKind, width: usize, rng: &mut R) -> Self {
        let stem = Conv2d::new(store, "backbone.stem", "conv", 3, width, 3, rng);
        match kind {
            BackboneKind::Resnet => BackboneNet::Resnet {
                stem,
                stem_act: Relu4::default(),
                c1: Conv2d::new(store, "backbone.stage1", "conv1", width, width, 3, rng),
                a1: Relu4::default(),
                c2: Conv2d::new(store, "backbone.stage1", "conv2", width, width, 3, rng),
                out_act: Relu4::default(),
            },
            BackboneKind::Densenet => BackboneNet::Densenet {
                stem,
                stem_act: Relu4::default(),
                c1: Conv2d::new(store, "backbone.dense1", "conv1", width, width, 3, rng),
                a1: Relu4::default(),
                c2: Conv2d::new(store, "backbone.dense1", "conv2", 2 * width, width, 3, rng),
                a2: Relu4::default(),
                trans: Conv2d::new(store, "backbone.transition", "conv", 3 * width, width, 1, rng),
                t_act: Relu4::default(),
            },
        }
    }

    fn forward(&self, store: &ParamStore, x: &Array4<f64>) -> Array4<f64> {
        match self {
            BackboneNet::Resnet { stem, c1, c2, .. } => {
                let s = Relu4::forward(&stem.forward(store, x));
                let h = c2.forward(store, &Relu4::forward(&c1.forward(store, &s)));
                Relu4::forward(&(&s + &h))
            }
            BackboneNet::Densenet { stem, c1, c2, trans, .. } => {
                let s = Relu4::forward(&stem.forward(store, x));
                let cat1 = concat_channels(&s, &Relu4::forward(&c1.forward(store, &s)));
                let cat2 = concat_channels(&cat1, &Relu4::forward(&c2.forward(store, &cat1)));
                Relu4::forward(&trans.forward(store, &cat2))
            }
        }
    }

    fn forward_train(&mut self, store: &ParamStore, x: &Array4<f64>) -> Array4<f64> {
        match self {
            BackboneNet::Resnet { stem, stem_act, c1, a1, c2, out_act } => {
                let s = stem_act.forward_train(&stem.forward_train(store, x));
                let h = c2.forward_train(store, &a1.forward_train(&c1.forward_train(store, &s)));
                out_act.forward_train(&(&s + &h))
            }
            BackboneNet::Densenet { stem, stem_act, c1, a1, c2, a2, trans, t_act } => {
                let s = stem_act.forward_train(&stem.forward_train(store, x));
                let cat1 = concat_channels(&s, &a1.forward_train(&c1.forward_train(store, &s)));
                let cat2 = concat_channels(&cat1, &a2.forward_train(&c2.forward_train(store, &cat1)));
                t_act.forward_train(&trans.forward_train(store, &cat2))
            }
        }
    }

    /// Accumulates parameter gradients; the input gradient is not needed.
    fn backward(&mut self, store: &mut ParamStore, grad: &Array4<f64>) {
        match self {
            BackboneNet::Resnet { stem, stem_act, c1, a1, c2, out_act } => {
                let g = out_act.backward(grad);
                let gh = c2.backward(store, &g);
                let gs = &g + &c1.backward(store, &a1.backward(&gh));
                stem.backward(store, &stem_act.backward(&gs));
            }
            BackboneNet::Densenet { stem, stem_act, c1, a1, c2, a2, trans, t_act } => {
                let w = stem.cout;
                let g_cat2 = trans.backward(store, &t_act.backward(grad));
                let (g_cat1, g_b) = split_channels(&g_cat2, 2 * w);
                let g_cat1 = &g_cat1 + &c2.backward(store, &a2.backward(&g_b));
                let (g_s, g_a) = split_channels(&g_cat1, w);
                let g_s = &g_s + &c1.backward(store, &a1.backward(&g_a));
                stem.backward(store, &stem_act.backward(&g_s));
            }
        }
    }
}

#[derive(Clone, Debug)]
struct HeadBlock {
    conv: Conv2d,
    act: Relu4,
    bn: BatchNorm2d,
    drop: Dropout,
}

/// The network of one ensemble member.
#[derive(Clone, Debug)]
pub struct ClassifierMember {
    pub spec: MemberSpec,
    pub store: ParamStore,
    backbone: BackboneNet,
    head: Vec<HeadBlock>,
    fc: Linear,
    cache_hw: Option<((usize, usize), (usize, usize))>,
}

#[derive(Serialize, Deserialize)]
pub struct MemberDoc {
    pub format_version: u32,
    pub spec: MemberSpec,
    pub store: ParamStore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberMeta {
    pub format_version: u32,
    pub kind: BackboneKind,
    pub epoch: usize,
    pub val_f1: f64,
    #[serde(default)]
    pub config_hash: Option<String>,
}

pub fn pretrained_file(kind: BackboneKind) -> String {
    format!("classifier_{kind}_pretrained.json")
}

/// Sidecar metadata path: `member.json` -> `member.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("member");
    path.with_file_name(format!("{stem}.meta.json"))
}

impl ClassifierMember {
    pub fn new<R: Rng + ?Sized>(spec: MemberSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let backbone = BackboneNet::new(&mut store, spec.kind, spec.width, rng);
        let mut head = Vec::new();
        let mut cin = spec.width;
        for i in 1..=3 {
            let block = format!("head{i}");
            head.push(HeadBlock {
                conv: Conv2d::new(&mut store, &block, "conv", cin, spec.head_width, 3, rng),
                act: Relu4::default(),
                bn: BatchNorm2d::new(&mut store, &block, "bn", spec.head_width),
                drop: Dropout::new(spec.dropout),
            });
            cin = spec.head_width;
        }
        let fc = Linear::new(&mut store, "fc", "linear", cin, 1, rng);
        Ok(Self { spec, store, backbone, head, fc, cache_hw: None })
    }

    pub fn from_doc(doc: &MemberDoc) -> Result<Self> {
        let mut m = Self::new(doc.spec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        m.store.load_from(&doc.store)?;
        Ok(m)
    }

    pub fn to_doc(&self) -> MemberDoc {
        MemberDoc { format_version: FORMAT_VERSION, spec: self.spec.clone(), store: self.store.clone() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_json(path, &self.to_doc())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: MemberDoc = checkpoint::load_json(path)?;
        checkpoint::check_version(path, doc.format_version)?;
        Self::from_doc(&doc).map_err(|e| Error::Incompatible { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Loads `classifier_<kind>_pretrained.json` from `cache_dir` when present.
    /// Only the backbone is taken from the file; the head stays freshly
    /// initialised.
    pub fn pretrained_or_new(cache_dir: Option<&Path>, spec: MemberSpec, seed: u64) -> Result<Self> {
        let mut m = Self::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let Some(path) = cache_dir.map(|d| d.join(pretrained_file(m.spec.kind))).filter(|p| p.is_file()) else {
            log::warn!("no pretrained {} weights found; backbone starts from random initialisation", m.spec.kind);
            return Ok(m);
        };
        let doc: MemberDoc = checkpoint::load_json(&path)?;
        let src: HashMap<(&str, &str), &crate::nn::ParamEntry> =
            doc.store.entries.iter().map(|e| ((e.block.as_str(), e.name.as_str()), e)).collect();
        for e in m.store.entries.iter_mut().filter(|e| is_backbone_block(&e.block)) {
            match src.get(&(e.block.as_str(), e.name.as_str())) {
                Some(s) if s.shape == e.shape => e.value.clone_from(&s.value),
                _ => {
                    return Err(Error::Incompatible {
                        path,
                        reason: format!("missing or mismatched backbone parameter {}/{}", e.block, e.name),
                    })
                }
            }
        }
        log::info!("loaded pretrained {} backbone from {}", m.spec.kind, path.display());
        Ok(m)
    }

    pub fn blocks(&self) -> Vec<String> {
        self.store.blocks()
    }

    /// Hex SHA-256 of every backbone parameter, for freeze audits.
    pub fn backbone_digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.store.snapshot(is_backbone_block) {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Inference-mode logits for a `(N, 3, S, S)` batch at `input_size`.
    pub fn logits(&self, x: &Array4<f64>) -> Vec<f64> {
        let s = &self.store;
        let mut h = self.backbone.forward(s, &avg_pool(x, self.spec.stem_pool));
        h = avg_pool(&h, 2);
        for b in &self.head {
            h = b.bn.forward(s, &Relu4::forward(&b.conv.forward(s, &h)));
        }
        self.fc.forward(s, &global_avg_pool(&h)).column(0).to_vec()
    }

    /// Training-mode forward. With `train_backbone` false the backbone runs
    /// in inference mode and is skipped by the backward pass.
    fn forward_train<R: Rng + ?Sized>(&mut self, x: &Array4<f64>, train_backbone: bool, rng: &mut R) -> Array2<f64> {
        let pooled = avg_pool(x, self.spec.stem_pool);
        let feat = if train_backbone { self.backbone.forward_train(&self.store, &pooled) } else { self.backbone.forward(&self.store, &pooled) };
        let feat_hw = (feat.dim().2, feat.dim().3);
        let mut h = avg_pool(&feat, 2);
        let head_hw = (h.dim().2, h.dim().3);
        for b in &mut self.head {
            let c = b.act.forward_train(&b.conv.forward_train(&self.store, &h));
            h = b.drop.forward_train(&b.bn.forward_train(&mut self.store, &c, true), rng);
        }
        self.cache_hw = Some((feat_hw, head_hw));
        self.fc.forward_train(&self.store, &global_avg_pool(&h))
    }

    fn backward(&mut self, grad: &Array2<f64>, train_backbone: bool) {
        let (feat_hw, head_hw) = self.cache_hw.take().expect("backward without forward_train");
        let g = self.fc.backward(&mut self.store, grad);
        let mut g = global_avg_pool_backward(&g, head_hw.0, head_hw.1);
        for b in self.head.iter_mut().rev() {
            g = b.drop.backward(&g);
            g = b.bn.backward(&mut self.store, &g);
            g = b.conv.backward(&mut self.store, &b.act.backward(&g));
        }
        if train_backbone {
            let g = avg_pool_backward(&g, 2, feat_hw.0, feat_hw.1);
            self.backbone.backward(&mut self.store, &g);
        }
    }

    /// One optimiser step on the mean focal loss of the batch. Returns the
    /// loss before the update.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        x: &Array4<f64>,
        targets: &[u8],
        focal: FocalParams,
        opt: &mut dyn Optimizer,
        lr: f64,
        train_backbone: bool,
        rng: &mut R,
    ) -> f64 {
        self.store.zero_grad();
        let z = self.forward_train(x, train_backbone, rng);
        let (loss, grad) = focal_batch(&z, targets, focal);
        self.backward(&grad, train_backbone);
        opt.step(&mut self.store, lr, &|b: &str| train_backbone || !is_backbone_block(b));
        loss
    }
}

fn focal_batch(z: &Array2<f64>, targets: &[u8], focal: FocalParams) -> (f64, Array2<f64>) {
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros(z.dim());
    for (i, (&zi, &y)) in z.column(0).iter().zip(targets).enumerate() {
        let (l, g) = focal_loss_logit(zi, y, focal);
        loss += l / n;
        grad[[i, 0]] = g / n;
    }
    (loss, grad)
}

/// `(N, 3, S, S)` tensor in `[-1, 1]` from `(S, S, 3)` rasters.
pub fn to_tensor(patches: &[Array3<f32>]) -> Result<Array4<f64>> {
    let Some(first) = patches.first() else {
        return Err(Error::InvalidArgument("empty batch".into()));
    };
    let (h, w, c) = first.dim();
    if patches.iter().any(|p| p.dim() != (h, w, c)) {
        return Err(Error::Shape("batch rasters must share one shape".into()));
    }
    Ok(Array4::from_shape_fn((patches.len(), c, h, w), |(n, k, y, x)| f64::from(patches[n][[y, x, k]]) / 127.5 - 1.0))
}

/// Probability that a raw patch (any square size) shows a mitosis.
pub trait PatchScorer: Send + Sync {
    fn probability(&self, patch: &Array3<u8>) -> Result<f64>;
}

impl PatchScorer for ClassifierMember {
    fn probability(&self, patch: &Array3<u8>) -> Result<f64> {
        let x = to_tensor(&[resize_patch(&to_f32(patch), self.spec.input_size)?])?;
        Ok(sigmoid(self.logits(&x)[0]))
    }
}

/// Non-negative member weights normalised to sum to one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EnsembleWeights(Vec<f64>);

impl EnsembleWeights {
    pub fn new(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() || raw.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!("ensemble weights must be non-negative and finite: {raw:?}")));
        }
        let sum: f64 = raw.iter().sum();
        if sum <= 0.0 {
            return Err(Error::InvalidArgument("ensemble weights sum to zero".into()));
        }
        Ok(Self(raw.into_iter().map(|w| w / sum).collect()))
    }

    pub fn equal(n: usize) -> Result<Self> {
        Self::new(vec![1.0; n])
    }

    /// Weights proportional to each member's validation F1; equal when all
    /// are zero.
    pub fn from_f1(f1: &[f64]) -> Result<Self> {
        if f1.iter().all(|v| *v == 0.0) {
            Self::equal(f1.len())
        } else {
            Self::new(f1.to_vec())
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `sum_i w_i p_i`, clamped into [0, 1] against rounding.
    pub fn merge(&self, probabilities: &[f64]) -> Result<f64> {
        if probabilities.len() != self.0.len() {
            return Err(Error::InvalidArgument(format!("{} member scores for {} weights", probabilities.len(), self.0.len())));
        }
        Ok(self.0.iter().zip(probabilities).map(|(w, p)| w * p).sum::<f64>().clamp(0.0, 1.0))
    }
}

impl TryFrom<Vec<f64>> for EnsembleWeights {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<EnsembleWeights> for Vec<f64> {
    fn from(w: EnsembleWeights) -> Self {
        w.0
    }
}

fn member_scores(members: &[&dyn PatchScorer], patch: &Array3<u8>) -> Result<Vec<f64>> {
    members.iter().map(|m| m.probability(patch)).collect()
}

/// Weighted average of the member probabilities for one patch.
pub fn classify_patch(members: &[&dyn PatchScorer], weights: &EnsembleWeights, patch: &Array3<u8>) -> Result<f64> {
    if members.len() != weights.len() {
        return Err(Error::InvalidArgument(format!("{} members for {} weights", members.len(), weights.len())));
    }
    weights.merge(&member_scores(members, patch)?)
}

/// Scores every candidate on a `patch_size` crop around its centroid and
/// keeps those whose merged score reaches `accept_threshold`. Input order is
/// preserved.
pub fn refine_detections(
    detections: Vec<Detection>,
    members: &[&dyn PatchScorer],
    weights: &EnsembleWeights,
    frame: &Frame,
    accept_threshold: f64,
    patch_size: usize,
) -> Result<Vec<Detection>> {
    if members.len() != weights.len() {
        return Err(Error::InvalidArgument(format!("{} members for {} weights", members.len(), weights.len())));
    }
    let scored: Vec<Result<Detection>> = detections
        .into_par_iter()
        .map(|mut d| {
            let patch = extract_patch(frame, d.centroid, patch_size)?;
            d.classifier_scores = member_scores(members, &patch)?;
            d.merged_score = Some(weights.merge(&d.classifier_scores)?);
            Ok(d)
        })
        .collect();
    let mut out = Vec::new();
    for d in scored {
        let d = d?;
        if d.merged_score.unwrap_or(0.0) >= accept_threshold {
            out.push(d);
        }
    }
    Ok(out)
}

/// Patch-level counts with `score >= threshold` as a positive call.
pub fn patch_counts(scores: &[(f64, u8)], threshold: f64) -> Counts {
    let mut c = Counts::default();
    for &(s, y) in scores {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

/// Threshold maximising patch-level F1 over the observed scores; ties go to
/// the candidate closest to 0.5. Returns `(threshold, f1)`.
pub fn sweep_threshold(scores: &[(f64, u8)]) -> (f64, f64) {
    let mut candidates: Vec<f64> = scores.iter().map(|s| s.0).collect();
    candidates.push(0.5);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best: (f64, f64) = (0.5, patch_counts(scores, 0.5).precision_recall_f1().2);
    for t in candidates {
        let f1 = patch_counts(scores, t).precision_recall_f1().2;
        if f1 > best.1 || (f1 == best.1 && (t - 0.5).abs() < (best.0 - 0.5).abs()) {
            best = (t, f1);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr0: f64,
    pub adam: AdamConfig,
    pub focal: FocalParams,
    pub unfreeze_backbone_after: usize,
    /// Crop side around each annotation before resizing.
    pub patch_size: usize,
    pub member: MemberSpec,
    pub augment: AugmentPolicy,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 100,
            lr0: 2e-5,
            adam: AdamConfig::default(),
            focal: FocalParams::default(),
            unfreeze_backbone_after: 5,
            patch_size: 80,
            member: MemberSpec::default(),
            augment: AugmentPolicy::default(),
            seed: 0,
        }
    }
}

impl ClassifierTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Err(Error::Config { field: format!("classifier.{field}"), message: message.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be > 0");
        }
        if self.epochs < self.unfreeze_backbone_after {
            return bad("epochs", "must be >= unfreeze_backbone_after");
        }
        if !(self.lr0 > 0.0) {
            return bad("lr0", "must be > 0");
        }
        if self.patch_size == 0 {
            return bad("patch_size", "must be > 0");
        }
        self.member.validate()?;
        self.augment.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_f1: f64,
    pub backbone_frozen: bool,
    pub backbone_digest: String,
}

#[derive(Clone, Debug, Default)]
pub struct ClassifierTrainOptions {
    /// Best member goes to `member.json` + `member.meta.json`, per-epoch
    /// metrics to `metrics.csv`.
    pub out_dir: Option<PathBuf>,
    pub config_hash: Option<String>,
    pub epoch_limit: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct ClassifierTrainReport {
    pub best: ClassifierMember,
    pub best_epoch: usize,
    pub best_f1: f64,
    pub initial_backbone_digest: String,
    pub history: Vec<ClassifierEpoch>,
}

fn training_patch(frame: &Frame, item: &ClassifierItem, tset: Option<&DomainTransformSet>, cfg: &ClassifierTrainConfig, rng: &mut ChaCha8Rng) -> Result<Array3<f32>> {
    let mut patch = extract_patch(frame, item.center, cfg.patch_size)?;
    if let Some(t) = tset {
        patch = random_domain_transfer(&patch, &frame.domain, t, rng)?.1;
    }
    patch = hne_randaugment(&patch, &cfg.augment, rng)?;
    let (_, patch) = random_dihedral(&patch, rng)?;
    resize_patch(&to_f32(&patch), cfg.member.input_size)
}

/// Validation scores `(probability, label)` for every item.
pub fn score_items(scorer: &dyn PatchScorer, items: &[ClassifierItem], frames: &HashMap<String, Arc<Frame>>, patch_size: usize) -> Result<Vec<(f64, u8)>> {
    items
        .par_iter()
        .map(|it| {
            let patch = extract_patch(&frames[&it.slide_id], it.center, patch_size)?;
            Ok((scorer.probability(&patch)?, it.target()))
        })
        .collect()
}

/// Trains one member: head only for the first `unfreeze_backbone_after`
/// epochs, everything afterwards, with a cosine schedule and Adam. The epoch
/// with the best patch-level validation F1 is kept.
pub fn train_member(
    manifest: &DatasetManifest,
    split: &SplitAssignment,
    frames: &dyn FrameSource,
    cfg: &ClassifierTrainConfig,
    tset: Option<&DomainTransformSet>,
    mut member: ClassifierMember,
    opts: &ClassifierTrainOptions,
) -> Result<ClassifierTrainReport> {
    cfg.validate()?;
    if member.spec.input_size != cfg.member.input_size {
        return Err(Error::Config { field: "classifier.member.input_size".into(), message: "does not match the member network".into() });
    }
    if tset.is_none() {
        log::warn!("no domain transform set given; training without scanner-domain augmentation");
    }
    let train = classifier_items(manifest, split, Subset::Train);
    if !train.iter().any(|i| i.target() == 1) {
        return Err(Error::InvalidArgument("no positive classifier items in the training split".into()));
    }
    let val = classifier_items(manifest, split, Subset::Val);
    if val.is_empty() {
        log::warn!("no validation items; validation F1 is reported as 0");
    }
    let frame_map = load_frames(manifest, frames, train.iter().chain(val.iter()).map(|i| i.slide_id.clone()))?;

    let mut opt = Adam::new(cfg.adam);
    let initial_backbone_digest = member.backbone_digest();
    let mut best: Option<(ClassifierMember, usize, f64)> = None;
    let mut history = Vec::new();
    let epochs = opts.epoch_limit.map_or(cfg.epochs, |l| l.min(cfg.epochs));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);

    for epoch in 1..=epochs {
        let frozen = epoch <= cfg.unfreeze_backbone_after;
        let lr = cosine_lr(epoch - 1, cfg.epochs, cfg.lr0);
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let patches: Vec<Result<Array3<f32>>> = batch
                .par_iter()
                .map(|&idx| {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                    rng.set_stream(((epoch as u64) << 32) | idx as u64);
                    let it = &train.0[idx];
                    training_patch(&frame_map[&it.slide_id], it, tset, cfg, &mut rng)
                })
                .collect();
            let patches: Vec<Array3<f32>> = patches.into_iter().collect::<Result<_>>()?;
            let targets: Vec<u8> = batch.iter().map(|&i| train.0[i].target()).collect();
            let x = to_tensor(&patches)?;
            let loss = member.train_step(&x, &targets, cfg.focal, &mut opt, lr, !frozen, &mut dropout_rng);
            if !loss.is_finite() || !member.store.all_finite() {
                log::error!("classifier training diverged at epoch {epoch}, batch {b}");
                return Err(Error::Diverged { epoch, step: b });
            }
            loss_sum += loss;
            batches += 1;
        }
        let val_f1 = if val.is_empty() {
            0.0
        } else {
            patch_counts(&score_items(&member, &val.0, &frame_map, cfg.patch_size)?, 0.5).precision_recall_f1().2
        };
        let record = ClassifierEpoch {
            epoch,
            lr,
            train_loss: loss_sum / batches.max(1) as f64,
            val_f1,
            backbone_frozen: frozen,
            backbone_digest: member.backbone_digest(),
        };
        log::info!("{} epoch {epoch}: loss {:.5} val F1 {:.4} lr {:.2e}{}", member.spec.kind, record.train_loss, val_f1, lr, if frozen { " (backbone frozen)" } else { "" });
        if best.as_ref().is_none_or(|b| val_f1 > b.2) {
            best = Some((member.clone(), epoch, val_f1));
            if let Some(dir) = &opts.out_dir {
                let path = dir.join("member.json");
                member.save(&path)?;
                let meta = MemberMeta { format_version: FORMAT_VERSION, kind: member.spec.kind, epoch, val_f1, config_hash: opts.config_hash.clone() };
                checkpoint::save_json(&meta_path(&path), &meta)?;
            }
        }
        if let Some(dir) = &opts.out_dir {
            checkpoint::append_csv(
                &dir.join("metrics.csv"),
                "epoch,lr,train_loss,val_f1,backbone_frozen,backbone_digest",
                &format!("{},{},{},{},{},{}", epoch, lr, record.train_loss, val_f1, frozen, record.backbone_digest),
            )?;
        }
        history.push(record);
    }
    let (best, best_epoch, best_f1) = best.unwrap_or((member, 0, 0.0));
    Ok(ClassifierTrainReport { best, best_epoch, best_f1, initial_backbone_digest, history })
}

/// On-disk ensemble: member checkpoint paths (relative to the descriptor's
/// directory unless absolute), weights and operating threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleDescriptor {
    pub format_version: u32,
    pub members: Vec<PathBuf>,
    pub weights: EnsembleWeights,
    pub threshold: f64,
    pub patch_size: usize,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub members: Vec<ClassifierMember>,
    pub weights: EnsembleWeights,
    pub threshold: f64,
    pub patch_size: usize,
}

impl Ensemble {
    pub fn new(members: Vec<ClassifierMember>, weights: EnsembleWeights, threshold: f64, patch_size: usize) -> Result<Self> {
        if members.len() != weights.len() {
            return Err(Error::InvalidArgument(format!("{} members for {} weights", members.len(), weights.len())));
        }
        Ok(Self { members, weights, threshold, patch_size })
    }

    pub fn scorers(&self) -> Vec<&dyn PatchScorer> {
        self.members.iter().map(|m| m as &dyn PatchScorer).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let d: EnsembleDescriptor = checkpoint::load_json(path)?;
        checkpoint::check_version(path, d.format_version)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let members = d
            .members
            .iter()
            .map(|p| ClassifierMember::load(&if p.is_absolute() { p.clone() } else { base.join(p) }))
            .collect::<Result<Vec<_>>>()?;
        Self::new(members, d.weights, d.threshold, d.patch_size).map_err(|e| Error::Incompatible { path: path.to_path_buf(), reason: e.to_string() })
    }

    pub fn refine(&self, detections: Vec<Detection>, frame: &Frame, accept_threshold: f64) -> Result<Vec<Detection>> {
        refine_detections(detections, &self.scorers(), &self.weights, frame, accept_threshold, self.patch_size)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    #[default]
    Fixed,
    F1,
}

/// Ensemble over saved members. In `F1` mode weights follow each member's
/// recorded validation F1; otherwise `weights` (default equal). When
/// validation data is given, the threshold is swept on patch-level F1.
pub fn build_ensemble(
    member_paths: &[PathBuf],
    weights: Option<Vec<f64>>,
    mode: WeightMode,
    patch_size: usize,
    validation: Option<(&DatasetManifest, &SplitAssignment, &dyn FrameSource)>,
) -> Result<(Ensemble, EnsembleDescriptor)> {
    if member_paths.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one member".into()));
    }
    let members = member_paths.iter().map(|p| ClassifierMember::load(p)).collect::<Result<Vec<_>>>()?;
    let weights = match mode {
        WeightMode::F1 => {
            let f1 = member_paths
                .iter()
                .map(|p| checkpoint::load_json::<MemberMeta>(&meta_path(p)).map(|m| m.val_f1))
                .collect::<Result<Vec<_>>>()?;
            EnsembleWeights::from_f1(&f1)?
        }
        WeightMode::Fixed => EnsembleWeights::new(weights.unwrap_or_else(|| vec![1.0; members.len()]))?,
    };
    let mut ens = Ensemble::new(members, weights, 0.5, patch_size)?;
    if let Some((manifest, split, frames)) = validation {
        let val = classifier_items(manifest, split, Subset::Val);
        if val.is_empty() {
            log::warn!("no validation items; keeping threshold 0.5");
        } else {
            let frame_map = load_frames(manifest, frames, val.iter().map(|i| i.slide_id.clone()))?;
            let scorer = EnsembleScorer(&ens);
            let scores = score_items(&scorer, &val.0, &frame_map, patch_size)?;
            let (t, f1) = sweep_threshold(&scores);
            log::info!("ensemble threshold {t:.4} (validation patch F1 {f1:.4})");
            ens.threshold = t;
        }
    }
    let descriptor = EnsembleDescriptor {
        format_version: FORMAT_VERSION,
        members: member_paths.to_vec(),
        weights: ens.weights.clone(),
        threshold: ens.threshold,
        patch_size,
        config_hash: None,
    };
    Ok((ens, descriptor))
}

struct EnsembleScorer<'a>(&'a Ensemble);

impl PatchScorer for EnsembleScorer<'_> {
    fn probability(&self, patch: &Array3<u8>) -> Result<f64> {
        classify_patch(&self.0.scorers(), &self.0.weights, patch)
    }
}
