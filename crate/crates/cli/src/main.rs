//! `mitocascade` command-line entrypoint.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use mitocascade::bootstrap::{bootstrap_dataset, merge_manual_masks, save_worklist, BootstrapOptions, FixedSegmenterFactory, PixelNetSegmenterFactory, SeedMaskSet, SegmenterFactory};
use mitocascade::cascade::{run_batch, Cascade, CascadeConfig};
use mitocascade::checkpoint;
use mitocascade::classifier::{build_ensemble, train_member, BackboneKind, ClassifierMember, ClassifierTrainOptions, WeightMode};
use mitocascade::config::{RunConfig, RunRecord};
use mitocascade::dataio::{stratified_split, DatasetManifest, DiskFrames, FrameSource, SplitAssignment};
use mitocascade::detector::{train_detector, DetectorTrainOptions, TinyPixelDetector};
use mitocascade::domaingan::{train_all_pairs, transfer_grid, DomainTransformSet, GanTrainOptions};
use mitocascade::eval::{evaluate_results, load_results};
use mitocascade::imageio;
use mitocascade::synthetic::{generate, write_corpus, DarkPixelSegmenter, MitosisShape, SyntheticConfig};
use mitocascade::types::ScannerDomain;
use sha2::{Digest, Sha256};

const CACHE_ENV: &str = "MITOCASCADE_CACHE";

#[derive(Parser, Debug)]
#[command(name = "mitocascade", version, about = "Two-stage mitosis detection: detector, patch-classifier ensemble, evaluation")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// Run configuration (TOML); flags override its keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Overrides the global seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train residual generators for every pair of scanner domains.
    GanTrain(GanTrainArgs),
    /// Translate a directory of images from one scanner domain to another.
    GanApply(GanApplyArgs),
    /// Render an all-pairs transfer grid from one patch per domain.
    GanGrid(GanGridArgs),
    /// Derive boxes for centroid-only mitoses from a few seed masks.
    BootstrapMasks(BootstrapArgs),
    /// Train the candidate detector with domain and shear augmentation.
    DetectorTrain(DetectorTrainArgs),
    /// Train one patch-classifier ensemble member.
    ClassifierTrain(ClassifierTrainArgs),
    /// Assemble trained members into an ensemble descriptor.
    EnsembleBuild(EnsembleArgs),
    /// Run the cascade over a directory of frames.
    Infer(InferArgs),
    /// Score inference results against a manifest by centroid matching.
    Evaluate(EvaluateArgs),
    /// Write a per-scanner train/validation split.
    Split(SplitArgs),
    /// Generate a synthetic two-domain corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
struct GanTrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Train only this pair of domains.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pair: Option<Vec<String>>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Frames loaded per domain as the image stream.
    #[arg(long, default_value_t = 8)]
    frames_per_domain: usize,
}

#[derive(Args, Debug)]
struct GanApplyArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "gan-dir")]
    gan_dir: Option<PathBuf>,
    #[arg(long)]
    src: String,
    #[arg(long)]
    dst: String,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GanGridArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long = "gan-dir")]
    gan_dir: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    patch: usize,
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Seed masks named `{slide_id}_{annotation_id}.png`.
    #[arg(long)]
    seeds: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mask_dir: Option<PathBuf>,
    /// Patches and a `worklist.json` for cases that need manual masks.
    #[arg(long)]
    worklist: Option<PathBuf>,
    /// Merge manually completed masks instead of bootstrapping.
    #[arg(long)]
    merge: Option<PathBuf>,
    /// Segment by darkness instead of training a segmenter.
    #[arg(long)]
    dark_threshold: Option<f64>,
}

#[derive(Args, Debug)]
struct DetectorTrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long = "gan-dir")]
    gan_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct ClassifierTrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    member: BackboneKind,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long = "gan-dir")]
    gan_dir: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    #[command(flatten)]
    common: Common,
    /// Member checkpoints (`member.json`), in weight order.
    #[arg(long = "member", required = true)]
    members: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',')]
    weights: Option<Vec<f64>>,
    #[arg(long)]
    weight_mode: Option<String>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// Sweep the threshold on this manifest's validation split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    split: Option<PathBuf>,
    /// Also write `cascade.toml` next to the descriptor for this detector.
    #[arg(long)]
    detector: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Cascade file (TOML) naming the detector and ensemble.
    #[arg(long)]
    config: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    accept_threshold: Option<f64>,
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    radius: Option<f64>,
    /// Write the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    val_per_scanner: Option<usize>,
    /// Defaults to `split.json` next to the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    frames_per_domain: usize,
    #[arg(long, default_value_t = 600)]
    size: usize,
    /// Plant disks of this radius instead of ellipses.
    #[arg(long)]
    disk_radius: Option<f64>,
    #[arg(long)]
    no_distractors: bool,
    /// Write centroids only.
    #[arg(long)]
    no_boxes: bool,
}

/// Loaded run configuration plus the bookkeeping every command shares.
struct Run {
    cfg: RunConfig,
    workers: usize,
    args: Vec<String>,
}

impl Run {
    fn start(common: &Common) -> anyhow::Result<Self> {
        init_logging(common.verbose);
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        let workers = init_workers(common.workers)?;
        Ok(Self { cfg, workers, args: std::env::args().skip(1).collect() })
    }

    fn finish(&self, command: &str, dir: &Path) -> anyhow::Result<()> {
        self.cfg.validate()?;
        let rec = RunRecord::new(command, self.args.clone(), &self.cfg, self.workers);
        let path = rec.save(dir)?;
        log::info!("run record {}", path.display());
        Ok(())
    }

    fn hash(&self) -> Option<String> {
        Some(self.cfg.hash())
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).try_init();
}

fn init_workers(workers: Option<usize>) -> anyhow::Result<usize> {
    if let Some(n) = workers {
        if n == 0 {
            bail!("--workers must be >= 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring worker pool")?;
    }
    Ok(rayon::current_num_threads())
}

fn pick(flag: &Option<PathBuf>, cfg: &Option<PathBuf>, name: &str) -> anyhow::Result<PathBuf> {
    flag.clone().or_else(|| cfg.clone()).ok_or_else(|| anyhow!("missing --{name} (or paths.{name} in the config)"))
}

fn existing(path: PathBuf) -> anyhow::Result<PathBuf> {
    if !path.exists() {
        bail!("{} does not exist", path.display());
    }
    Ok(path)
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent().filter(|p| !p.as_os_str().is_empty()).map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

fn load_generators(flag: &Option<PathBuf>, cfg: &RunConfig) -> anyhow::Result<Option<DomainTransformSet>> {
    match flag.clone().or_else(|| cfg.paths.generators.clone()) {
        Some(dir) => {
            let set = DomainTransformSet::load(&existing(dir.clone())?)?;
            log::info!("loaded {} generators from {}", set.generators.len(), dir.display());
            Ok(Some(set))
        }
        None => Ok(None),
    }
}

fn manifest_and_split(run: &Run, manifest: &Option<PathBuf>, split: &Option<PathBuf>) -> anyhow::Result<(DatasetManifest, SplitAssignment)> {
    let m = DatasetManifest::load(&existing(pick(manifest, &run.cfg.paths.manifest, "manifest")?)?)?;
    let s = SplitAssignment::load(&existing(pick(split, &run.cfg.paths.split, "split")?)?)?;
    Ok((m, s))
}

fn cmd_gan_train(a: GanTrainArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common)?;
    if let Some(n) = a.iterations {
        run.cfg.gan.iterations = n;
    }
    run.cfg.gan.seed = run.cfg.seed;
    run.cfg.validate()?;
    let manifest = DatasetManifest::load(&existing(pick(&a.manifest, &run.cfg.paths.manifest, "manifest")?)?)?;
    let out = a.out.clone().or_else(|| run.cfg.paths.generators.clone()).unwrap_or_else(|| PathBuf::from("gan"));
    let domains: Vec<ScannerDomain> = match &a.pair {
        Some(p) => p.iter().map(|s| ScannerDomain::from(s.as_str())).collect(),
        None => manifest.domains(),
    };
    let mut streams = BTreeMap::new();
    for d in &domains {
        let mut slides: Vec<_> = manifest.slides.iter().filter(|s| &s.domain == d).collect();
        slides.sort_by(|x, y| x.slide_id.cmp(&y.slide_id));
        if slides.is_empty() {
            bail!("manifest has no slides from domain {d}");
        }
        let pixels = slides
            .iter()
            .take(a.frames_per_domain.max(1))
            .map(|s| DiskFrames.load_frame(&manifest, s).map(|f| f.pixels.clone()))
            .collect::<mitocascade::Result<Vec<_>>>()?;
        streams.insert(d.clone(), pixels);
    }
    if streams.len() < 2 {
        bail!("need at least two domains, found {}", streams.len());
    }
    create_dir(&out)?;
    let opts = GanTrainOptions { checkpoint_dir: Some(out.clone()), config_hash: run.hash() };
    let set = train_all_pairs(&streams, &run.cfg.gan, &opts)?;
    println!("trained {} generators into {}", set.generators.len(), out.display());
    run.finish("gan-train", &out)
}

fn cmd_gan_apply(a: GanApplyArgs) -> anyhow::Result<()> {
    let run = Run::start(&a.common)?;
    let set = load_generators(&a.gan_dir, &run.cfg)?.ok_or_else(|| anyhow!("missing --gan-dir (or paths.generators)"))?;
    let (src, dst) = (ScannerDomain::from(a.src.as_str()), ScannerDomain::from(a.dst.as_str()));
    set.get(&src, &dst)?;
    create_dir(&a.out)?;
    let files = imageio::list_images(&existing(a.input.clone())?)?;
    for f in &files {
        let px = imageio::read_rgb(f)?;
        let t = set.transfer(&src, &dst, &px)?;
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        imageio::write_rgb(&a.out.join(format!("{stem}.png")), &t)?;
    }
    println!("translated {} images {src} -> {dst}", files.len());
    run.finish("gan-apply", &a.out)
}

fn center_crop(px: &ndarray::Array3<u8>, size: usize) -> anyhow::Result<ndarray::Array3<u8>> {
    let (h, w, _) = px.dim();
    if h < size || w < size {
        bail!("frame {w}x{h} is smaller than the {size} px grid patch");
    }
    let (r0, c0) = ((h - size) / 2, (w - size) / 2);
    Ok(px.slice(ndarray::s![r0..r0 + size, c0..c0 + size, ..]).to_owned())
}

fn cmd_gan_grid(a: GanGridArgs) -> anyhow::Result<()> {
    let run = Run::start(&a.common)?;
    let set = load_generators(&a.gan_dir, &run.cfg)?.ok_or_else(|| anyhow!("missing --gan-dir (or paths.generators)"))?;
    let manifest = DatasetManifest::load(&existing(pick(&a.manifest, &run.cfg.paths.manifest, "manifest")?)?)?;
    let mut patches = Vec::new();
    for d in set.domains() {
        let Some(slide) = manifest.slides.iter().filter(|s| s.domain == d).min_by(|x, y| x.slide_id.cmp(&y.slide_id)) else {
            log::warn!("no slide from {d} in the manifest; skipped in the grid");
            continue;
        };
        let frame = DiskFrames.load_frame(&manifest, slide)?;
        patches.push((d, center_crop(&frame.pixels, a.patch)?));
    }
    let grid = transfer_grid(&patches, &set)?;
    imageio::write_rgb(&a.out, &grid)?;
    println!("{}x{} grid written to {}", patches.len(), patches.len(), a.out.display());
    run.finish("gan-grid", &parent_dir(&a.out))
}

/// Makes image paths absolute when the manifest is saved somewhere else.
fn rebase(manifest: &mut DatasetManifest, out: &Path) {
    let out_dir = parent_dir(out);
    let same = std::fs::canonicalize(&out_dir).ok() == std::fs::canonicalize(&manifest.root).ok();
    if same {
        return;
    }
    let root = std::fs::canonicalize(&manifest.root).unwrap_or_else(|_| manifest.root.clone());
    for s in &mut manifest.slides {
        if Path::new(&s.image_path).is_relative() {
            s.image_path = root.join(&s.image_path).to_string_lossy().into_owned();
        }
        for m in s.annotations.iter_mut().filter_map(|a| a.mask_path.as_mut()) {
            if Path::new(m.as_str()).is_relative() {
                *m = root.join(m.as_str()).to_string_lossy().into_owned();
            }
        }
    }
}

fn cmd_bootstrap(a: BootstrapArgs) -> anyhow::Result<()> {
    let run = Run::start(&a.common)?;
    let mut manifest = DatasetManifest::load(&existing(pick(&a.manifest, &run.cfg.paths.manifest, "manifest")?)?)?;
    let out_dir = parent_dir(&a.out);
    create_dir(&out_dir)?;
    if let Some(dir) = &a.merge {
        let n = merge_manual_masks(&mut manifest, &existing(dir.clone())?, &run.cfg.bootstrap)?;
        rebase(&mut manifest, &a.out);
        manifest.save(&a.out)?;
        println!("merged {n} manual masks into {}", a.out.display());
        return run.finish("bootstrap-masks", &out_dir);
    }
    let seeds_dir = a.seeds.clone().ok_or_else(|| anyhow!("missing --seeds (or use --merge)"))?;
    let seeds = SeedMaskSet::load_dir(&existing(seeds_dir)?)?;
    let factory: Box<dyn SegmenterFactory> = match a.dark_threshold {
        Some(t) => Box::new(FixedSegmenterFactory(move || Box::new(DarkPixelSegmenter { threshold: t }) as Box<dyn mitocascade::bootstrap::PixelSegmenter>)),
        None => Box::new(PixelNetSegmenterFactory { seed: run.cfg.seed, ..Default::default() }),
    };
    let opts = BootstrapOptions { mask_dir: a.mask_dir.clone(), worklist_dir: a.worklist.clone() };
    let mut output = bootstrap_dataset(&manifest, &DiskFrames, &seeds, factory.as_ref(), &run.cfg.bootstrap, &opts)?;
    rebase(&mut output.manifest, &a.out);
    output.manifest.save(&a.out)?;
    if let Some(dir) = &a.worklist {
        save_worklist(&dir.join("worklist.json"), &output.difficult)?;
    }
    if let Some(s) = &output.statistics {
        println!("box diagonal {:.2} +/- {:.2} px over {} boxes", s.mean_diagonal, s.std_diagonal, s.count);
    }
    println!("{} difficult cases", output.difficult.len());
    run.finish("bootstrap-masks", &out_dir)
}

fn cmd_detector_train(a: DetectorTrainArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common)?;
    if let Some(n) = a.epochs {
        run.cfg.detector.max_epochs = n;
    }
    run.cfg.detector.seed = run.cfg.seed;
    run.cfg.validate()?;
    let (manifest, split) = manifest_and_split(&run, &a.manifest, &a.split)?;
    let tset = load_generators(&a.gan_dir, &run.cfg)?;
    let out = a.out.clone().or_else(|| run.cfg.paths.checkpoints.as_ref().map(|c| c.join("detector"))).unwrap_or_else(|| PathBuf::from("detector"));
    create_dir(&out)?;
    let det = TinyPixelDetector::pretrained_or_new(cache_dir().as_deref(), run.cfg.detector.hidden.clone(), run.cfg.seed)?;
    let opts = DetectorTrainOptions { out_dir: Some(out.clone()), config_hash: run.hash(), epoch_limit: None };
    let rep = train_detector(&manifest, &split, &DiskFrames, &run.cfg.detector, tset.as_ref(), det, &opts)?;
    println!("best epoch {} validation PR-AUC {:.4}", rep.best_epoch, rep.best_pr_auc);
    run.finish("detector-train", &out)
}

fn cmd_classifier_train(a: ClassifierTrainArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common)?;
    if let Some(n) = a.epochs {
        run.cfg.classifier.epochs = n;
    }
    run.cfg.classifier.member.kind = a.member;
    run.cfg.classifier.seed = run.cfg.seed;
    run.cfg.validate()?;
    let (manifest, split) = manifest_and_split(&run, &a.manifest, &a.split)?;
    let tset = load_generators(&a.gan_dir, &run.cfg)?;
    let out = a.out.clone().or_else(|| run.cfg.paths.checkpoints.as_ref().map(|c| c.join(a.member.name()))).unwrap_or_else(|| PathBuf::from(a.member.name()));
    create_dir(&out)?;
    let member = ClassifierMember::pretrained_or_new(cache_dir().as_deref(), run.cfg.classifier.member.clone(), run.cfg.seed)?;
    let opts = ClassifierTrainOptions { out_dir: Some(out.clone()), config_hash: run.hash(), epoch_limit: None };
    let rep = train_member(&manifest, &split, &DiskFrames, &run.cfg.classifier, tset.as_ref(), member, &opts)?;
    println!("{}: best epoch {} validation F1 {:.4}", a.member, rep.best_epoch, rep.best_f1);
    run.finish("classifier-train", &out)
}

fn relative_path(path: &Path, base: &Path) -> PathBuf {
    match (std::fs::canonicalize(path), std::fs::canonicalize(base)) {
        (Ok(p), Ok(b)) => p.strip_prefix(&b).map(Path::to_path_buf).unwrap_or(p),
        _ => path.to_path_buf(),
    }
}

fn cmd_ensemble_build(a: EnsembleArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common)?;
    if let Some(w) = &a.weights {
        run.cfg.ensemble.weights = Some(w.clone());
    }
    if let Some(m) = &a.weight_mode {
        run.cfg.ensemble.weight_mode = match m.to_ascii_lowercase().as_str() {
            "fixed" => WeightMode::Fixed,
            "f1" => WeightMode::F1,
            other => bail!("unknown weight mode `{other}` (fixed or f1)"),
        };
    }
    if let Some(p) = a.patch_size {
        run.cfg.classifier.patch_size = p;
    }
    run.cfg.validate()?;
    let members = a.members.iter().map(|p| existing(p.clone())).collect::<anyhow::Result<Vec<_>>>()?;
    let weights = match (&a.weights, run.cfg.ensemble.weights.clone()) {
        (None, Some(w)) if w.len() != members.len() => None,
        (_, w) => w,
    };
    let validation = match a.manifest.clone().or_else(|| run.cfg.paths.manifest.clone()) {
        Some(_) => Some(manifest_and_split(&run, &a.manifest, &a.split)?),
        None => None,
    };
    let frames = DiskFrames;
    let (ens, mut desc) = build_ensemble(
        &members,
        weights,
        run.cfg.ensemble.weight_mode,
        run.cfg.classifier.patch_size,
        validation.as_ref().map(|(m, s)| (m, s, &frames as &dyn FrameSource)),
    )?;
    let out_dir = parent_dir(&a.out);
    create_dir(&out_dir)?;
    desc.members = members.iter().map(|p| relative_path(p, &out_dir)).collect();
    desc.config_hash = run.hash();
    checkpoint::save_json(&a.out, &desc)?;
    println!("ensemble of {} members, weights {:?}, threshold {:.4}", ens.members.len(), ens.weights.as_slice(), ens.threshold);
    if let Some(det) = &a.detector {
        let det = existing(det.clone())?;
        let ens_name = a.out.file_name().map(PathBuf::from).unwrap_or_else(|| a.out.clone());
        let mut cc = CascadeConfig::new(relative_path(&det, &out_dir), ens_name);
        let p = run.cfg.cascade.params();
        (cc.tile, cc.overlap, cc.min_score, cc.dedup_radius) = (p.tile, p.overlap, p.min_score, p.dedup_radius);
        cc.accept_threshold = run.cfg.cascade.accept_threshold;
        cc.validate()?;
        let path = out_dir.join("cascade.toml");
        std::fs::write(&path, cc.to_toml_string()?).with_context(|| format!("writing {}", path.display()))?;
        println!("cascade config {}", path.display());
    }
    run.finish("ensemble-build", &out_dir)
}

fn cmd_infer(a: InferArgs) -> anyhow::Result<()> {
    init_logging(a.verbose);
    let workers = init_workers(a.workers)?;
    let text = std::fs::read_to_string(existing(a.config.clone())?).with_context(|| format!("reading {}", a.config.display()))?;
    let mut cc = CascadeConfig::load(&a.config)?;
    if let Some(t) = a.accept_threshold {
        cc.accept_threshold = Some(t);
    }
    cc.validate()?;
    let cascade = Cascade::load(&cc)?;
    let input = existing(a.input.clone())?;
    let out_dir = parent_dir(&a.out);
    create_dir(&out_dir)?;
    let results = run_batch(&input, &cascade, Some(&a.out))?;
    let failed = results.iter().filter(|r| r.error.is_some()).count();
    let points: usize = results.iter().map(|r| r.points.len()).sum();
    println!("{} frames, {points} detections, {failed} failed", results.len());
    let cfg = RunConfig::default();
    let mut rec = RunRecord::new("infer", std::env::args().skip(1).collect(), &cfg, workers);
    rec.config_hash = cc.config_hash.clone().unwrap_or_else(|| hex::encode(Sha256::digest(text.as_bytes())));
    rec.save(&out_dir)?;
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common)?;
    if let Some(r) = a.radius {
        run.cfg.eval.radius = r;
    }
    run.cfg.validate()?;
    let manifest = DatasetManifest::load(&existing(pick(&a.manifest, &run.cfg.paths.manifest, "manifest")?)?)?;
    let results = load_results(&existing(a.results.clone())?)?;
    let report = evaluate_results(&results, &manifest, run.cfg.eval.radius)?;
    println!("{}", report.to_table());
    let dir = match &a.out {
        Some(out) => {
            checkpoint::save_json(out, &report)?;
            parent_dir(out)
        }
        None => parent_dir(&a.results),
    };
    run.finish("evaluate", &dir)
}

fn cmd_split(a: SplitArgs) -> anyhow::Result<()> {
    let mut run = Run::start(&a.common)?;
    if let Some(n) = a.val_per_scanner {
        run.cfg.split.val_per_scanner = n;
    }
    run.cfg.validate()?;
    let manifest_path = existing(pick(&a.manifest, &run.cfg.paths.manifest, "manifest")?)?;
    let manifest = DatasetManifest::load(&manifest_path)?;
    let split = stratified_split(&manifest, run.cfg.split.val_per_scanner, run.cfg.seed)?;
    let out = a.out.clone().or_else(|| run.cfg.paths.split.clone()).unwrap_or_else(|| parent_dir(&manifest_path).join("split.json"));
    split.save(&out)?;
    for (d, n) in manifest.per_domain_counts() {
        if !d.annotated() {
            continue;
        }
        let val = manifest.slides.iter().filter(|s| s.domain == d && split.val.contains(&s.slide_id)).count();
        println!("{d}: {} train / {val} validation", n - val);
    }
    println!("split written to {}", out.display());
    run.finish("split", &parent_dir(&out))
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let run = Run::start(&a.common)?;
    let mut cfg = SyntheticConfig { frames_per_domain: a.frames_per_domain, size: a.size, boxes: !a.no_boxes, seed: run.cfg.seed, ..Default::default() };
    if let Some(r) = a.disk_radius {
        cfg.shape = MitosisShape::Disk { radius: r };
    }
    if a.no_distractors {
        cfg.distractors = (0, 0);
        cfg.hard_negatives = false;
    }
    let corpus = generate(&cfg)?;
    create_dir(&a.out)?;
    write_corpus(&corpus, &a.out)?;
    println!("{} frames written to {}", corpus.frames.len(), a.out.display());
    run.finish("synth", &a.out)
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GanTrain(a) => cmd_gan_train(a),
        Command::GanApply(a) => cmd_gan_apply(a),
        Command::GanGrid(a) => cmd_gan_grid(a),
        Command::BootstrapMasks(a) => cmd_bootstrap(a),
        Command::DetectorTrain(a) => cmd_detector_train(a),
        Command::ClassifierTrain(a) => cmd_classifier_train(a),
        Command::EnsembleBuild(a) => cmd_ensemble_build(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Split(a) => cmd_split(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<mitocascade::Error>() {
                Some(mitocascade::Error::Config { field, message }) => eprintln!("error: invalid config at `{field}`: {message}"),
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}
