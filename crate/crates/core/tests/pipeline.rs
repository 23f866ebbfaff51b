//! Save/load and batch-inference behaviour of a tiny trained cascade.

use std::path::Path;

use mitocascade::cascade::{run_batch, run_cascade, Cascade, CascadeConfig};
use mitocascade::checkpoint;
use mitocascade::classifier::{build_ensemble, train_member, BackboneKind, ClassifierMember, ClassifierTrainConfig, ClassifierTrainOptions, MemberSpec, WeightMode};
use mitocascade::dataio::{stratified_split, MemoryFrames};
use mitocascade::detector::{detect_candidates, load_detector, train_detector, DetectorTrainConfig, DetectorTrainOptions, InferenceParams, TinyPixelDetector};
use mitocascade::eval::{evaluate_results, load_results};
use mitocascade::synthetic::{generate, write_corpus, SyntheticConfig};
use mitocascade::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const HASH: &str = "cafe";

/// Trains one epoch of everything into `dir` and returns the cascade config path.
fn build(dir: &Path) -> std::path::PathBuf {
    let corpus = generate(&SyntheticConfig { frames_per_domain: 3, seed: 5, ..Default::default() }).unwrap();
    write_corpus(&corpus, &dir.join("corpus")).unwrap();
    let split = stratified_split(&corpus.manifest, 1, 0).unwrap();
    let frames = MemoryFrames::new(corpus.frames.clone());
    let inference = InferenceParams { tile: 300, overlap: 32, min_score: 0.05, dedup_radius: 15.0 };
    let dcfg = DetectorTrainConfig { patch_size: 128, max_epochs: 1, lr0: 0.01, inference, ..Default::default() };
    let opts = DetectorTrainOptions { out_dir: Some(dir.join("det")), config_hash: Some(HASH.into()), epoch_limit: None };
    train_detector(&corpus.manifest, &split, &frames, &dcfg, None, TinyPixelDetector::new(dcfg.hidden.clone(), 0), &opts).unwrap();

    let mut members = Vec::new();
    for kind in [BackboneKind::Resnet, BackboneKind::Densenet] {
        let spec = MemberSpec { kind, width: 4, head_width: 4, stem_pool: 8, ..Default::default() };
        let cfg = ClassifierTrainConfig { epochs: 1, unfreeze_backbone_after: 1, batch_size: 16, lr0: 3e-3, member: spec.clone(), ..Default::default() };
        let m = ClassifierMember::new(spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = dir.join(kind.name());
        let opts = ClassifierTrainOptions { out_dir: Some(out.clone()), config_hash: Some(HASH.into()), epoch_limit: None };
        train_member(&corpus.manifest, &split, &frames, &cfg, None, m, &opts).unwrap();
        members.push(out.join("member.json"));
    }
    let (_, mut desc) = build_ensemble(&members, None, WeightMode::F1, 80, Some((&corpus.manifest, &split, &frames))).unwrap();
    desc.members = vec!["resnet/member.json".into(), "densenet/member.json".into()];
    desc.config_hash = Some(HASH.into());
    checkpoint::save_json(&dir.join("ens.json"), &desc).unwrap();

    let mut cc = CascadeConfig::new("det/detector.json".into(), "ens.json".into());
    (cc.tile, cc.overlap) = (300, 32);
    cc.accept_threshold = Some(0.3);
    cc.config_hash = Some(HASH.into());
    let path = dir.join("cascade.toml");
    std::fs::write(&path, cc.to_toml_string().unwrap()).unwrap();
    path
}

#[test]
fn saved_cascade_runs_batches_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = build(dir.path());
    let cfg = CascadeConfig::load(&cfg_path).unwrap();
    let cascade = Cascade::load(&cfg).unwrap();
    assert_eq!(cascade.accept_threshold, 0.3);

    let images = dir.path().join("corpus/images");
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    let results = run_batch(&images, &cascade, Some(&a)).unwrap();
    run_batch(&images, &Cascade::load(&cfg).unwrap(), Some(&b)).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    // input order, and lossless re-parse by the evaluator
    let ids: Vec<&str> = results.iter().map(|r| r.slide_id.as_str()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted);
    assert_eq!(load_results(&a).unwrap(), results);
    let manifest = mitocascade::dataio::DatasetManifest::load(&dir.path().join("corpus/manifest.json")).unwrap();
    let report = evaluate_results(&results, &manifest, 30.0).unwrap();
    assert_eq!(report.overall.slides, 6);

    // refinement never invents a candidate
    let det = load_detector(&cfg.detector).unwrap();
    let frame = mitocascade::types::Frame::new("x", "SYN-A".into(), mitocascade::imageio::read_rgb(&images.join(format!("{}.png", ids[0]))).unwrap()).unwrap();
    let cands = detect_candidates(&det, &frame, &cfg.inference_params()).unwrap();
    for d in run_cascade(&frame, &cascade).unwrap() {
        assert!(cands.iter().any(|c| c.centroid == d.centroid));
        assert!(d.merged_score.unwrap() >= 0.3);
    }
}

#[test]
fn batch_edge_cases_and_hash_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = build(dir.path());
    let cfg = CascadeConfig::load(&cfg_path).unwrap();
    let cascade = Cascade::load(&cfg).unwrap();

    let empty = dir.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    assert!(run_batch(&empty, &cascade, None).unwrap().is_empty());

    let mixed = dir.path().join("mixed");
    std::fs::create_dir_all(&mixed).unwrap();
    std::fs::copy(dir.path().join("corpus/images/syna_000.png"), mixed.join("a.png")).unwrap();
    std::fs::write(mixed.join("b.png"), b"not an image").unwrap();
    let res = run_batch(&mixed, &cascade, None).unwrap();
    assert_eq!(res.len(), 2);
    assert!(res[0].error.is_none());
    assert!(res[1].error.is_some() && res[1].points.is_empty());

    let mut wrong = cfg.clone();
    wrong.config_hash = Some("beef".into());
    assert!(matches!(Cascade::load(&wrong), Err(Error::Incompatible { .. })));
    let mut missing = cfg;
    missing.detector = dir.path().join("nope.json");
    assert!(Cascade::load(&missing).is_err());
}
