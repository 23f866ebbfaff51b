//! Trains the tiny cascade on a synthetic corpus and scores it on fresh frames.
//!
//! cargo run --release -p mitocascade --example synthetic_e2e

use std::time::Instant;

use mitocascade::cascade::{run_cascade, to_slide_result, Cascade};
use mitocascade::classifier::{
    patch_counts, score_items, sweep_threshold, BackboneKind, ClassifierMember, ClassifierTrainConfig, ClassifierTrainOptions, Ensemble,
    EnsembleWeights, MemberSpec, PatchScorer,
};
use mitocascade::dataio::{classifier_items, load_frames, stratified_split, MemoryFrames, Subset};
use mitocascade::detector::{train_detector, DetectorTrainConfig, DetectorTrainOptions, InferenceParams, TinyPixelDetector};
use mitocascade::eval::evaluate_results;
use mitocascade::synthetic::{generate, SyntheticConfig};

fn main() -> mitocascade::Result<()> {
    env_logger::init();
    let t0 = Instant::now();
    let seed: u64 = std::env::var("SEED").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
    let epochs: usize = std::env::var("EPOCHS").ok().and_then(|s| s.parse().ok()).unwrap_or(15);
    let train = generate(&SyntheticConfig { frames_per_domain: 8, seed, ..Default::default() })?;
    let test = generate(&SyntheticConfig { frames_per_domain: 4, seed: seed + 1000, ..Default::default() })?;
    let split = stratified_split(&train.manifest, 2, 0)?;
    let frames = MemoryFrames::new(train.frames.clone());

    let inference = InferenceParams { tile: 600, overlap: 0, min_score: 0.05, dedup_radius: 15.0 };
    let dcfg = DetectorTrainConfig { patch_size: 256, max_epochs: 8, lr0: 0.01, inference, seed: 0, ..Default::default() };
    let det = TinyPixelDetector::new(dcfg.hidden.clone(), 0);
    let rep = train_detector(&train.manifest, &split, &frames, &dcfg, None, det, &DetectorTrainOptions::default())?;
    println!("detector: best epoch {} PR-AUC {:.4} (baseline {:.4}) [{:.1}s]", rep.best_epoch, rep.best_pr_auc, rep.baseline_pr_auc, t0.elapsed().as_secs_f64());
    println!("  pr-auc trace {:?}", rep.history.iter().map(|h| (h.val_pr_auc * 1000.0).round() / 1000.0).collect::<Vec<_>>());
    for (name, d) in [("best", &rep.best), ("last", &rep.last)] {
        let f = &test.frames[0];
        let heat = d.heatmap(&f.pixels);
        let mut v: Vec<f32> = heat.iter().copied().collect();
        v.sort_by(f32::total_cmp);
        let q = |p: f64| v[((v.len() - 1) as f64 * p) as usize];
        let at: Vec<f32> = f.mitoses().map(|a| heat[[a.centroid.y as usize, a.centroid.x as usize]]).collect();
        let neg: Vec<f32> = f.annotations.iter().filter(|a| a.label == mitocascade::types::Label::HardNegative).map(|a| heat[[a.centroid.y as usize, a.centroid.x as usize]]).collect();
        println!("{name}: q50 {:.3} q99 {:.3} q999 {:.3} max {:.3} mitoses {at:?} negs {neg:?}", q(0.5), q(0.99), q(0.999), q(1.0));
    }

    let mut members = Vec::new();
    for (i, kind) in [BackboneKind::Resnet, BackboneKind::Densenet].into_iter().enumerate() {
        let spec = MemberSpec { kind, stem_pool: 8, ..Default::default() };
        let ccfg = ClassifierTrainConfig { batch_size: 16, epochs, lr0: 3e-3, member: spec.clone(), seed: i as u64, ..Default::default() };
        let m = ClassifierMember::new(spec, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(i as u64))?;
        let r = mitocascade::classifier::train_member(&train.manifest, &split, &frames, &ccfg, None, m, &ClassifierTrainOptions::default())?;
        println!("{kind}: best epoch {} F1 {:.4} [{:.1}s]", r.best_epoch, r.best_f1, t0.elapsed().as_secs_f64());
        println!("  f1 trace {:?}", r.history.iter().map(|h| (h.val_f1 * 100.0).round() / 100.0).collect::<Vec<_>>());
        members.push(r.best);
    }
    let ens = Ensemble::new(members, EnsembleWeights::equal(2)?, 0.5, 80)?;
    let val = classifier_items(&train.manifest, &split, Subset::Val);
    let fm = load_frames(&train.manifest, &frames, val.iter().map(|i| i.slide_id.clone()))?;
    struct S<'a>(&'a Ensemble);
    impl PatchScorer for S<'_> {
        fn probability(&self, p: &ndarray::Array3<u8>) -> mitocascade::Result<f64> {
            mitocascade::classifier::classify_patch(&self.0.scorers(), &self.0.weights, p)
        }
    }
    let scores = score_items(&S(&ens), &val.0, &fm, 80)?;
    let (thr, f1) = sweep_threshold(&scores);
    println!("ensemble val patch F1 at 0.5: {:.4}; sweep -> {thr:.3} ({f1:.4})", patch_counts(&scores, 0.5).precision_recall_f1().2);

    let cascade = Cascade::from_parts(Box::new(rep.best.clone()), ens, inference, thr);
    let results: Vec<_> = test.frames.iter().map(|f| run_cascade(f, &cascade).map(|d| to_slide_result(&f.slide_id, &d))).collect::<Result<_, _>>()?;
    let report = evaluate_results(&results, &test.manifest, 30.0)?;
    println!("{}", report.to_table());
    // detector alone
    let cands: Vec<_> = test
        .frames
        .iter()
        .map(|f| mitocascade::detector::detect_candidates(&rep.best, f, &inference).map(|d| to_slide_result(&f.slide_id, &d)))
        .collect::<Result<_, _>>()?;
    println!("detector only:\n{}", evaluate_results(&cands, &test.manifest, 30.0)?.to_table());
    println!("total {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
