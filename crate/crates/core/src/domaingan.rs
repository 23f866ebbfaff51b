//! Residual cycle-consistent GAN for scanner-domain transfer and the uniform
//! per-image domain sampler used during downstream training.
//!
//! Generators work in normalised pixel space `x / 127.5 - 1` and only add a
//! bounded residual: `out = clamp(x + tanh(backbone(x)), -1, 1)`. The built-in
//! backbone is a per-pixel MLP (a learned colour map); other backbones plug in
//! through [`ResidualBackbone`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array2, Array3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::nn::mlp::{Mlp, MlpActivation, MlpLayerSpec};
use crate::nn::optim::{Adam, AdamConfig, Optimizer};
use crate::nn::ParamStore;
use crate::types::{Frame, ScannerDomain};

pub fn normalize(pixels: &Array3<u8>) -> Array3<f64> {
    pixels.mapv(|v| f64::from(v) / 127.5 - 1.0)
}

pub fn denormalize(values: &Array3<f64>) -> Array3<u8> {
    values.mapv(|v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
}

fn to_rows(image: &Array3<f64>) -> Array2<f64> {
    let (h, w, c) = image.dim();
    image.as_standard_layout().to_owned().into_shape_with_order((h * w, c)).expect("contiguous")
}

fn from_rows(rows: Array2<f64>, h: usize, w: usize) -> Array3<f64> {
    let c = rows.ncols();
    rows.as_standard_layout().to_owned().into_shape_with_order((h, w, c)).expect("contiguous")
}

/// Image-to-image network producing the pre-activation residual.
pub trait ResidualBackbone: Send + Sync {
    /// Unbounded residual for an `(H, W, 3)` image in normalised space.
    fn raw_residual(&self, image: &Array3<f64>) -> Array3<f64>;
}

/// Backbone whose residual is identically zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroBackbone;

impl ResidualBackbone for ZeroBackbone {
    fn raw_residual(&self, image: &Array3<f64>) -> Array3<f64> {
        Array3::zeros(image.dim())
    }
}

/// Per-pixel MLP `3 -> hidden -> hidden -> 3`.
#[derive(Clone, Debug)]
pub struct PixelMlpBackbone {
    pub hidden: usize,
    pub mlp: Mlp,
}

#[derive(Serialize, Deserialize)]
struct PixelMlpDoc {
    hidden: usize,
    store: ParamStore,
}

impl PixelMlpBackbone {
    fn specs(hidden: usize, out: usize) -> Vec<MlpLayerSpec> {
        vec![
            MlpLayerSpec { block: "block1".into(), width: hidden, activation: MlpActivation::LeakyRelu },
            MlpLayerSpec { block: "block2".into(), width: hidden, activation: MlpActivation::LeakyRelu },
            MlpLayerSpec { block: "head".into(), width: out, activation: MlpActivation::Identity },
        ]
    }

    /// Output layer scaled down so training starts near the identity map.
    pub fn new<R: Rng + ?Sized>(hidden: usize, rng: &mut R) -> Self {
        let mut mlp = Mlp::new(3, Self::specs(hidden, 3), rng);
        mlp.scale_output_layer(0.1);
        Self { hidden, mlp }
    }

    pub fn zeroed(hidden: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Self::new(hidden, &mut rng);
        b.mlp.scale_output_layer(0.0);
        b
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_json(path, &PixelMlpDoc { hidden: self.hidden, store: self.mlp.store.clone() })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: PixelMlpDoc = checkpoint::load_json(path)?;
        let mlp = Mlp::from_store(3, Self::specs(doc.hidden, 3), &doc.store)
            .map_err(|e| Error::Incompatible { path: path.to_path_buf(), reason: e.to_string() })?;
        Ok(Self { hidden: doc.hidden, mlp })
    }
}

impl ResidualBackbone for PixelMlpBackbone {
    fn raw_residual(&self, image: &Array3<f64>) -> Array3<f64> {
        let (h, w, _) = image.dim();
        from_rows(self.mlp.forward(&to_rows(image)), h, w)
    }
}

#[derive(Clone)]
pub enum Backbone {
    PixelMlp(PixelMlpBackbone),
    Custom(Arc<dyn ResidualBackbone>),
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backbone::PixelMlp(b) => write!(f, "PixelMlp(hidden={})", b.hidden),
            Backbone::Custom(_) => f.write_str("Custom"),
        }
    }
}

impl Backbone {
    fn raw_residual(&self, image: &Array3<f64>) -> Array3<f64> {
        match self {
            Backbone::PixelMlp(b) => b.raw_residual(image),
            Backbone::Custom(b) => b.raw_residual(image),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResidualGenerator {
    pub source: ScannerDomain,
    pub target: ScannerDomain,
    pub backbone: Backbone,
}

impl ResidualGenerator {
    pub fn new(source: ScannerDomain, target: ScannerDomain, backbone: Backbone) -> Result<Self> {
        if source == target {
            return Err(Error::InvalidArgument(format!("generator source and target are both {source}")));
        }
        Ok(Self { source, target, backbone })
    }
}

/// `clamp(image + tanh(residual))`, with the image in normalised space.
/// When `domain` is given it must equal the generator's source.
pub fn apply_generator(g: &ResidualGenerator, image: &Array3<f64>, domain: Option<&ScannerDomain>) -> Result<Array3<f64>> {
    if let Some(d) = domain {
        if *d != g.source {
            return Err(Error::DomainMismatch { expected: g.source.to_string(), found: d.to_string() });
        }
    }
    if image.dim().2 != 3 {
        return Err(Error::Shape(format!("expected an RGB image, got {:?}", image.dim())));
    }
    let mut out = g.backbone.raw_residual(image);
    Zip::from(&mut out).and(image).for_each(|o, &x| *o = (x + o.tanh()).clamp(-1.0, 1.0));
    Ok(out)
}

pub enum Transform<'a> {
    Identity,
    Generator(&'a ResidualGenerator),
}

/// Generators for ordered domain pairs; same-domain lookups are the identity.
#[derive(Clone, Debug, Default)]
pub struct DomainTransformSet {
    pub generators: BTreeMap<(ScannerDomain, ScannerDomain), ResidualGenerator>,
}

impl DomainTransformSet {
    pub fn insert(&mut self, g: ResidualGenerator) {
        self.generators.insert((g.source.clone(), g.target.clone()), g);
    }

    pub fn get(&self, src: &ScannerDomain, dst: &ScannerDomain) -> Result<Transform<'_>> {
        if src == dst {
            return Ok(Transform::Identity);
        }
        self.generators
            .get(&(src.clone(), dst.clone()))
            .map(Transform::Generator)
            .ok_or_else(|| Error::MissingGenerator { src: src.to_string(), dst: dst.to_string() })
    }

    /// Every domain appearing as a source or target.
    pub fn domains(&self) -> Vec<ScannerDomain> {
        let mut d: Vec<ScannerDomain> = self.generators.keys().flat_map(|(a, b)| [a.clone(), b.clone()]).collect();
        d.sort();
        d.dedup();
        d
    }

    pub fn is_complete(&self) -> bool {
        let d = self.domains();
        self.generators.len() == d.len() * d.len().saturating_sub(1)
    }

    pub fn transfer(&self, src: &ScannerDomain, dst: &ScannerDomain, pixels: &Array3<u8>) -> Result<Array3<u8>> {
        match self.get(src, dst)? {
            Transform::Identity => Ok(pixels.clone()),
            Transform::Generator(g) => Ok(denormalize(&apply_generator(g, &normalize(pixels), Some(src))?)),
        }
    }

    /// Writes every pixel-MLP generator under `dir/{src}_{dst}/`.
    pub fn save(&self, dir: &Path, meta: &GeneratorMeta) -> Result<()> {
        for ((src, dst), g) in &self.generators {
            let Backbone::PixelMlp(b) = &g.backbone else {
                return Err(Error::InvalidArgument(format!("generator {src}->{dst} has a custom backbone and cannot be saved")));
            };
            let sub = pair_dir(dir, src, dst);
            b.save(&sub.join("generator.json"))?;
            let mut m = meta.clone();
            m.source = src.clone();
            m.target = dst.clone();
            checkpoint::save_json(&sub.join("meta.json"), &m)?;
        }
        Ok(())
    }

    /// Loads every `*/meta.json` + `generator.json` pair under `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut set = Self::default();
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let mut subdirs: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.join("meta.json").is_file()).collect();
        subdirs.sort();
        for sub in subdirs {
            let meta_path = sub.join("meta.json");
            let meta: GeneratorMeta = checkpoint::load_json(&meta_path)?;
            checkpoint::check_version(&meta_path, meta.format_version)?;
            let b = PixelMlpBackbone::load(&sub.join("generator.json"))?;
            set.insert(ResidualGenerator::new(meta.source, meta.target, Backbone::PixelMlp(b))?);
        }
        Ok(set)
    }
}

pub fn pair_dir(dir: &Path, src: &ScannerDomain, dst: &ScannerDomain) -> PathBuf {
    dir.join(format!("{src}_{dst}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorMeta {
    pub format_version: u32,
    pub source: ScannerDomain,
    pub target: ScannerDomain,
    pub config: GanTrainConfig,
    pub iterations: usize,
    #[serde(default)]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub cycle_weight: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            cycle_weight: 10.0,
            iterations: 300,
            learning_rate: 1e-3,
            beta1: 0.5,
            batch_size: 4,
            patch_size: 32,
            hidden: 16,
            seed: 0,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| Err(Error::Config { field: format!("gan.{field}"), message: message.into() });
        if !(self.cycle_weight > 0.0) {
            return bad("cycle_weight", "must be > 0");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", "must be in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.patch_size == 0 {
            return bad("patch_size", "must be >= 1");
        }
        if self.hidden == 0 {
            return bad("hidden", "must be >= 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLosses {
    pub iteration: usize,
    pub adversarial: f64,
    pub cycle: f64,
    pub generator: f64,
    pub discriminator: f64,
}

/// Both directions of a trained pair and their discriminators.
#[derive(Clone, Debug)]
pub struct TrainedPair {
    pub g_ab: ResidualGenerator,
    pub g_ba: ResidualGenerator,
    /// Judges domain `a` images.
    pub d_a: Mlp,
    pub d_b: Mlp,
    pub history: Vec<GanLosses>,
}

struct GenPass {
    pre: Array2<f64>,
    t: Array2<f64>,
}

fn gen_forward_train(mlp: &mut Mlp, x: &Array2<f64>) -> (Array2<f64>, GenPass) {
    let t = mlp.forward_train(x).mapv(f64::tanh);
    let pre = x + &t;
    let out = pre.mapv(|v| v.clamp(-1.0, 1.0));
    (out, GenPass { pre, t })
}

fn gen_backward(mlp: &mut Mlp, pass: &GenPass, g_out: &Array2<f64>) -> Array2<f64> {
    let mut g_pre = g_out.clone();
    Zip::from(&mut g_pre).and(&pass.pre).for_each(|g, &p| {
        if !(-1.0..=1.0).contains(&p) {
            *g = 0.0;
        }
    });
    let mut g_raw = g_pre.clone();
    Zip::from(&mut g_raw).and(&pass.t).for_each(|g, &t| *g *= 1.0 - t * t);
    g_pre + mlp.backward(&g_raw)
}

fn add_grads(into: &mut ParamStore, from: &ParamStore) {
    for (a, b) in into.entries.iter_mut().zip(&from.entries) {
        a.grad.iter_mut().zip(&b.grad).for_each(|(x, y)| *x += y);
    }
}

fn discriminator(hidden: usize, rng: &mut ChaCha8Rng) -> Mlp {
    Mlp::new(3, PixelMlpBackbone::specs(hidden, 1), rng)
}

/// Generators and discriminators of one pair with their optimisers.
pub struct GanPairState {
    pub g_ab: Mlp,
    pub g_ba: Mlp,
    pub d_a: Mlp,
    pub d_b: Mlp,
    opt: [Adam; 4],
}

impl GanPairState {
    pub fn new(cfg: &GanTrainConfig, rng: &mut ChaCha8Rng) -> Self {
        let adam = Adam::new(AdamConfig { beta1: cfg.beta1, ..AdamConfig::default() });
        Self {
            g_ab: PixelMlpBackbone::new(cfg.hidden, rng).mlp,
            g_ba: PixelMlpBackbone::new(cfg.hidden, rng).mlp,
            d_a: discriminator(cfg.hidden, rng),
            d_b: discriminator(cfg.hidden, rng),
            opt: [adam.clone(), adam.clone(), adam.clone(), adam],
        }
    }

    /// Generator loss on pixel rows `a`, `b`; fills generator gradients.
    /// Returns `(adversarial, cycle)`.
    pub fn generator_grads(&mut self, a: &Array2<f64>, b: &Array2<f64>, cycle_weight: f64) -> (f64, f64) {
        self.g_ab.store.zero_grad();
        self.g_ba.store.zero_grad();
        let mut g_ab2 = self.g_ab.clone();
        let mut g_ba2 = self.g_ba.clone();
        let (fake_b, p_ab) = gen_forward_train(&mut self.g_ab, a);
        let (fake_a, p_ba) = gen_forward_train(&mut self.g_ba, b);
        let (rec_a, p_ba2) = gen_forward_train(&mut g_ba2, &fake_b);
        let (rec_b, p_ab2) = gen_forward_train(&mut g_ab2, &fake_a);

        let mut adversarial = 0.0;
        let mut adv_grad = |d: &Mlp, fake: &Array2<f64>| {
            let mut d = d.clone();
            let score = d.forward_train(fake);
            let n = score.len() as f64;
            adversarial += score.iter().map(|s| (s - 1.0).powi(2)).sum::<f64>() / n;
            d.backward(&score.mapv(|s| 2.0 * (s - 1.0) / n))
        };
        let g_fake_b_adv = adv_grad(&self.d_b, &fake_b);
        let g_fake_a_adv = adv_grad(&self.d_a, &fake_a);

        let l1 = |rec: &Array2<f64>, x: &Array2<f64>| {
            let n = rec.len() as f64;
            let loss = cycle_weight * (rec - x).mapv(f64::abs).sum() / n;
            let grad = (rec - x).mapv(|d| cycle_weight * d.signum() * f64::from(u8::from(d != 0.0)) / n);
            (loss, grad)
        };
        let (cyc_a, g_rec_a) = l1(&rec_a, a);
        let (cyc_b, g_rec_b) = l1(&rec_b, b);

        let g_fake_b = g_fake_b_adv + gen_backward(&mut g_ba2, &p_ba2, &g_rec_a);
        let g_fake_a = g_fake_a_adv + gen_backward(&mut g_ab2, &p_ab2, &g_rec_b);
        gen_backward(&mut self.g_ab, &p_ab, &g_fake_b);
        gen_backward(&mut self.g_ba, &p_ba, &g_fake_a);
        add_grads(&mut self.g_ab.store, &g_ab2.store);
        add_grads(&mut self.g_ba.store, &g_ba2.store);
        (adversarial, cyc_a + cyc_b)
    }

    /// Least-squares discriminator loss `0.5 (E(D(real)-1)^2 + E D(fake)^2)`.
    fn discriminator_grads(d: &mut Mlp, real: &Array2<f64>, fake: &Array2<f64>) -> f64 {
        d.store.zero_grad();
        let n_real = real.nrows();
        let both = ndarray::concatenate(Axis(0), &[real.view(), fake.view()]).expect("same width");
        let score = d.forward_train(&both);
        let (nr, nf) = (n_real as f64, fake.nrows() as f64);
        let mut loss = 0.0;
        let mut grad = Array2::zeros(score.dim());
        for (i, (&s, g)) in score.iter().zip(grad.iter_mut()).enumerate() {
            if i < n_real {
                loss += 0.5 * (s - 1.0).powi(2) / nr;
                *g = (s - 1.0) / nr;
            } else {
                loss += 0.5 * s * s / nf;
                *g = s / nf;
            }
        }
        d.backward(&grad);
        loss
    }

    pub fn step(&mut self, a: &Array2<f64>, b: &Array2<f64>, cfg: &GanTrainConfig, iteration: usize) -> GanLosses {
        let (adversarial, cycle) = self.generator_grads(a, b, cfg.cycle_weight);
        let all = |_: &str| true;
        self.opt[0].step(&mut self.g_ab.store, cfg.learning_rate, &all);
        self.opt[1].step(&mut self.g_ba.store, cfg.learning_rate, &all);
        let fake_b = gen_apply_rows(&self.g_ab, a);
        let fake_a = gen_apply_rows(&self.g_ba, b);
        let da = Self::discriminator_grads(&mut self.d_a, a, &fake_a);
        let db = Self::discriminator_grads(&mut self.d_b, b, &fake_b);
        self.opt[2].step(&mut self.d_a.store, cfg.learning_rate, &all);
        self.opt[3].step(&mut self.d_b.store, cfg.learning_rate, &all);
        GanLosses { iteration, adversarial, cycle, generator: adversarial + cycle, discriminator: da + db }
    }

    fn finite(&self) -> bool {
        [&self.g_ab, &self.g_ba, &self.d_a, &self.d_b].iter().all(|m| m.store.all_finite())
    }
}

fn gen_apply_rows(mlp: &Mlp, x: &Array2<f64>) -> Array2<f64> {
    let mut out = mlp.forward(x);
    Zip::from(&mut out).and(x).for_each(|o, &v| *o = (v + o.tanh()).clamp(-1.0, 1.0));
    out
}

/// Random patches from a stream of images, flattened into normalised pixel rows.
pub fn sample_pixel_batch<R: Rng + ?Sized>(stream: &[Array3<u8>], batch: usize, patch: usize, rng: &mut R) -> Array2<f64> {
    let mut rows = Vec::new();
    for _ in 0..batch {
        let img = &stream[rng.random_range(0..stream.len())];
        let (h, w, _) = img.dim();
        let (ph, pw) = (patch.min(h), patch.min(w));
        let y = rng.random_range(0..=h - ph);
        let x = rng.random_range(0..=w - pw);
        let crop = img.slice(s![y..y + ph, x..x + pw, ..]).to_owned();
        rows.push(to_rows(&normalize(&crop)));
    }
    let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("same width")
}

#[derive(Clone, Debug, Default)]
pub struct GanTrainOptions {
    /// Where `{a}_{b}` and `{b}_{a}` checkpoints go; written at the end, or with
    /// the last finite state on divergence.
    pub checkpoint_dir: Option<PathBuf>,
    pub config_hash: Option<String>,
}

fn save_pair(state: &GanPairState, a: &ScannerDomain, b: &ScannerDomain, cfg: &GanTrainConfig, iterations: usize, opts: &GanTrainOptions) -> Result<()> {
    let Some(dir) = &opts.checkpoint_dir else { return Ok(()) };
    for (src, dst, g, d) in [(a, b, &state.g_ab, &state.d_b), (b, a, &state.g_ba, &state.d_a)] {
        let sub = pair_dir(dir, src, dst);
        PixelMlpBackbone { hidden: cfg.hidden, mlp: g.clone() }.save(&sub.join("generator.json"))?;
        checkpoint::save_json(&sub.join("discriminator.json"), &d.store)?;
        let meta = GeneratorMeta {
            format_version: FORMAT_VERSION,
            source: src.clone(),
            target: dst.clone(),
            config: cfg.clone(),
            iterations,
            config_hash: opts.config_hash.clone(),
        };
        checkpoint::save_json(&sub.join("meta.json"), &meta)?;
    }
    Ok(())
}

/// Trains `G_ab`, `G_ba`, `D_a`, `D_b` with least-squares adversarial losses
/// plus `cycle_weight` times the L1 cycle-consistency loss in both directions.
pub fn train_pair(
    a: &ScannerDomain,
    b: &ScannerDomain,
    stream_a: &[Array3<u8>],
    stream_b: &[Array3<u8>],
    cfg: &GanTrainConfig,
    opts: &GanTrainOptions,
) -> Result<TrainedPair> {
    cfg.validate()?;
    if a == b {
        return Err(Error::InvalidArgument(format!("cannot train a pair from {a} to itself")));
    }
    if stream_a.is_empty() || stream_b.is_empty() {
        return Err(Error::InvalidArgument(format!("empty image stream for pair {a}/{b}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = GanPairState::new(cfg, &mut rng);
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut last_finite = (state.g_ab.clone(), state.g_ba.clone(), state.d_a.clone(), state.d_b.clone());
    for it in 0..cfg.iterations {
        let xa = sample_pixel_batch(stream_a, cfg.batch_size, cfg.patch_size, &mut rng);
        let xb = sample_pixel_batch(stream_b, cfg.batch_size, cfg.patch_size, &mut rng);
        let losses = state.step(&xa, &xb, cfg, it);
        if !(losses.generator.is_finite() && losses.discriminator.is_finite() && state.finite()) {
            (state.g_ab, state.g_ba, state.d_a, state.d_b) = last_finite;
            save_pair(&state, a, b, cfg, it, opts)?;
            log::error!("GAN pair {a}/{b} diverged at iteration {it}");
            return Err(Error::Diverged { epoch: 0, step: it });
        }
        log::debug!(
            "gan {a}/{b} it {it}: adv {:.5} cycle {:.5} disc {:.5}",
            losses.adversarial,
            losses.cycle,
            losses.discriminator
        );
        history.push(losses);
        last_finite = (state.g_ab.clone(), state.g_ba.clone(), state.d_a.clone(), state.d_b.clone());
    }
    save_pair(&state, a, b, cfg, cfg.iterations, opts)?;
    let wrap = |m: &Mlp| Backbone::PixelMlp(PixelMlpBackbone { hidden: cfg.hidden, mlp: m.clone() });
    Ok(TrainedPair {
        g_ab: ResidualGenerator::new(a.clone(), b.clone(), wrap(&state.g_ab))?,
        g_ba: ResidualGenerator::new(b.clone(), a.clone(), wrap(&state.g_ba))?,
        d_a: state.d_a,
        d_b: state.d_b,
        history,
    })
}

/// Trains every unordered pair of the given domains in parallel and collects
/// all ordered directions. Pair `i` (in sorted order) uses seed `cfg.seed + i`.
pub fn train_all_pairs(
    streams: &BTreeMap<ScannerDomain, Vec<Array3<u8>>>,
    cfg: &GanTrainConfig,
    opts: &GanTrainOptions,
) -> Result<DomainTransformSet> {
    let domains: Vec<&ScannerDomain> = streams.keys().collect();
    let mut pairs = Vec::new();
    for i in 0..domains.len() {
        for j in i + 1..domains.len() {
            pairs.push((domains[i], domains[j]));
        }
    }
    let trained: Vec<Result<TrainedPair>> = pairs
        .par_iter()
        .enumerate()
        .map(|(k, (a, b))| {
            let cfg = GanTrainConfig { seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() };
            train_pair(a, b, &streams[*a], &streams[*b], &cfg, opts)
        })
        .collect();
    let mut set = DomainTransformSet::default();
    for t in trained {
        let t = t?;
        set.insert(t.g_ab);
        set.insert(t.g_ba);
    }
    Ok(set)
}

/// Uniform draw from `available`.
pub fn sample_training_domain<R: Rng + ?Sized>(rng: &mut R, available: &[ScannerDomain]) -> Result<ScannerDomain> {
    if available.is_empty() {
        return Err(Error::InvalidArgument("no domains to sample from".into()));
    }
    Ok(available[rng.random_range(0..available.len())].clone())
}

/// Renders the frame in a uniformly drawn domain of the transform set.
/// Geometry (and therefore every annotation) is unchanged.
pub fn domain_augment<R: Rng + ?Sized>(frame: &Frame, tset: &DomainTransformSet, rng: &mut R) -> Result<(ScannerDomain, Array3<u8>)> {
    random_domain_transfer(&frame.pixels, &frame.domain, tset, rng)
}

/// Same draw as [`domain_augment`] applied to a crop taken from a `source` frame.
pub fn random_domain_transfer<R: Rng + ?Sized>(
    pixels: &Array3<u8>,
    source: &ScannerDomain,
    tset: &DomainTransformSet,
    rng: &mut R,
) -> Result<(ScannerDomain, Array3<u8>)> {
    let mut available = tset.domains();
    if !available.contains(source) {
        available.push(source.clone());
        available.sort();
    }
    let target = sample_training_domain(rng, &available)?;
    let out = tset.transfer(source, &target, pixels)?;
    Ok((target, out))
}

/// Square mosaic: row `i` is patch `i` rendered in the domain of patch `j` in
/// column `j`. The diagonal holds the originals.
pub fn transfer_grid(patches: &[(ScannerDomain, Array3<u8>)], tset: &DomainTransformSet) -> Result<Array3<u8>> {
    let Some((_, first)) = patches.first() else {
        return Err(Error::InvalidArgument("no patches for the grid".into()));
    };
    let (h, w, _) = first.dim();
    if patches.iter().any(|(_, p)| p.dim() != (h, w, 3)) {
        return Err(Error::Shape("grid patches must share one RGB shape".into()));
    }
    let n = patches.len();
    let mut grid = Array3::zeros((n * h, n * w, 3));
    for (i, (src, p)) in patches.iter().enumerate() {
        for (j, (dst, _)) in patches.iter().enumerate() {
            let t = tset.transfer(src, dst, p)?;
            grid.slice_mut(s![i * h..(i + 1) * h, j * w..(j + 1) * w, ..]).assign(&t);
        }
    }
    Ok(grid)
}
