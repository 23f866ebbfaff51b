//! Centroid-matching evaluation: one-to-one matching within a radius,
//! precision/recall/F1, precision-recall curves and per-scanner reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::DatasetManifest;
use crate::error::{Error, Result};
use crate::types::{Label, Point};

pub const DEFAULT_RADIUS: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(pred_idx, gt_idx, distance)`, sorted by `pred_idx`.
    pub tp: Vec<(usize, usize, f64)>,
    pub fp: Vec<usize>,
    #[serde(rename = "fn")]
    pub fn_: Vec<usize>,
    pub radius: f64,
}

impl MatchResult {
    pub fn counts(&self) -> Counts {
        Counts { tp: self.tp.len(), fp: self.fp.len(), fn_: self.fn_.len() }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

impl Counts {
    pub fn precision_recall_f1(&self) -> (f64, f64, f64) {
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        (p, r, f1_score(p, r))
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean of precision and recall, 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    let s = precision + recall;
    if s == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / s
    }
}

pub fn precision_recall_f1(m: &MatchResult) -> (f64, f64, f64) {
    m.counts().precision_recall_f1()
}

/// Connected components of the bipartite "within radius" graph. Each entry
/// holds the prediction and ground-truth indices of one component that has at
/// least one edge; isolated points are left out.
fn components(preds: &[Point], gts: &[Point], radius: f64) -> Vec<(Vec<usize>, Vec<usize>)> {
    let np = preds.len();
    let mut parent: Vec<usize> = (0..np + gts.len()).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let cell = |p: &Point| ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
    let mut grid: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (j, g) in gts.iter().enumerate() {
        grid.entry(cell(g)).or_default().push(j);
    }
    let mut has_edge = vec![false; np + gts.len()];
    for (i, p) in preds.iter().enumerate() {
        let (cx, cy) = cell(p);
        for dx in -1..=1 {
            for dy in -1..=1 {
                let Some(bucket) = grid.get(&(cx + dx, cy + dy)) else { continue };
                for &j in bucket {
                    if p.distance(&gts[j]) <= radius {
                        has_edge[i] = true;
                        has_edge[np + j] = true;
                        let (a, b) = (find(&mut parent, i), find(&mut parent, np + j));
                        if a != b {
                            parent[a.max(b)] = a.min(b);
                        }
                    }
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for v in 0..np + gts.len() {
        if !has_edge[v] {
            continue;
        }
        let root = find(&mut parent, v);
        let g = groups.entry(root).or_default();
        if v < np {
            g.0.push(v);
        } else {
            g.1.push(v - np);
        }
    }
    groups.into_values().collect()
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`),
/// returning the column of each row.
fn hungarian(cost: &[Vec<f64>], cols: usize) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=cols {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Optimal matching inside one component: maximum cardinality, then minimum
/// total distance. Returns `(pred, gt, distance)` triples.
fn match_component(preds: &[Point], gts: &[Point], pi: &[usize], gi: &[usize], radius: f64) -> Vec<(usize, usize, f64)> {
    let k = pi.len().min(gi.len());
    // Any extra matched pair outweighs the largest possible total distance.
    let big = (k as f64 + 1.0) * radius + 1.0;
    let transpose = pi.len() > gi.len();
    let (rows, cols) = if transpose { (gi, pi) } else { (pi, gi) };
    let dist = |r: usize, c: usize| {
        let (a, b) = if transpose { (cols[c], rows[r]) } else { (rows[r], cols[c]) };
        preds[a].distance(&gts[b])
    };
    let cost: Vec<Vec<f64>> = (0..rows.len())
        .map(|r| {
            (0..cols.len())
                .map(|c| {
                    let d = dist(r, c);
                    if d <= radius {
                        d - big
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let assignment = hungarian(&cost, cols.len());
    let mut out = Vec::new();
    for (r, &c) in assignment.iter().enumerate() {
        let d = dist(r, c);
        if d <= radius {
            let (a, b) = if transpose { (cols[c], rows[r]) } else { (rows[r], cols[c]) };
            out.push((a, b, d));
        }
    }
    out
}

fn match_points(preds: &[Point], gts: &[Point], radius: f64) -> MatchResult {
    assert!(radius > 0.0, "matching radius must be positive");
    let mut tp = Vec::new();
    for (pi, gi) in components(preds, gts, radius) {
        tp.extend(match_component(preds, gts, &pi, &gi, radius));
    }
    tp.sort_by_key(|t| t.0);
    let mut pred_hit = vec![false; preds.len()];
    let mut gt_hit = vec![false; gts.len()];
    for &(a, b, _) in &tp {
        pred_hit[a] = true;
        gt_hit[b] = true;
    }
    MatchResult {
        tp,
        fp: (0..preds.len()).filter(|&i| !pred_hit[i]).collect(),
        fn_: (0..gts.len()).filter(|&j| !gt_hit[j]).collect(),
        radius,
    }
}

/// Maximum-cardinality one-to-one matching between predictions and ground
/// truth among pairs at most `radius` apart; ties broken by minimal total
/// distance. Scores do not influence the matching.
pub fn match_detections(preds: &[(Point, f64)], gts: &[Point], radius: f64) -> MatchResult {
    let points: Vec<Point> = preds.iter().map(|p| p.0).collect();
    match_points(&points, gts, radius)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    /// One point per distinct score, threshold descending.
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

/// Predictions and ground truth of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SlidePoints {
    pub preds: Vec<(Point, f64)>,
    pub gts: Vec<Point>,
}

/// Changes in the pooled true-positive count as the threshold descends through
/// the scores of one component.
fn tp_deltas(preds: &[(Point, f64)], gts: &[Point], pi: &[usize], gi: &[usize], radius: f64, out: &mut Vec<(f64, i64)>) {
    let mut scores: Vec<f64> = pi.iter().map(|&i| preds[i].1).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let points: Vec<Point> = preds.iter().map(|p| p.0).collect();
    let mut prev = 0i64;
    for s in scores {
        let active: Vec<usize> = pi.iter().copied().filter(|&i| preds[i].1 >= s).collect();
        let tp = match_component(&points, gts, &active, gi, radius).len() as i64;
        if tp != prev {
            out.push((s, tp - prev));
            prev = tp;
        }
    }
}

/// Precision-recall curve pooled over several images.
pub fn pr_curve_pooled(slides: &[SlidePoints], radius: f64) -> PrCurve {
    let mut deltas = Vec::new();
    let mut scores = Vec::new();
    let mut total_gt = 0usize;
    for s in slides {
        total_gt += s.gts.len();
        scores.extend(s.preds.iter().map(|p| p.1));
        let pts: Vec<Point> = s.preds.iter().map(|p| p.0).collect();
        for (pi, gi) in components(&pts, &s.gts, radius) {
            tp_deltas(&s.preds, &s.gts, &pi, &gi, radius, &mut deltas);
        }
    }
    scores.sort_by(|a, b| b.total_cmp(a));
    deltas.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut n_pred, mut tp, mut d) = (0usize, 0i64, 0usize);
    let mut i = 0;
    while i < scores.len() {
        let t = scores[i];
        while i < scores.len() && scores[i] == t {
            n_pred += 1;
            i += 1;
        }
        while d < deltas.len() && deltas[d].0 >= t {
            tp += deltas[d].1;
            d += 1;
        }
        let tp = tp as usize;
        points.push(PrPoint { threshold: t, precision: ratio(tp, n_pred), recall: ratio(tp, total_gt) });
    }
    let auc = interpolated_auc(&points);
    PrCurve { points, auc }
}

pub fn pr_curve(preds: &[(Point, f64)], gts: &[Point], radius: f64) -> PrCurve {
    pr_curve_pooled(&[SlidePoints { preds: preds.to_vec(), gts: gts.to_vec() }], radius)
}

/// Area under the step function of interpolated precision (the maximum
/// precision at any recall at least as large), over points in descending
/// threshold order.
pub fn interpolated_auc(points: &[PrPoint]) -> f64 {
    let mut interp = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for (i, p) in points.iter().enumerate().rev() {
        best = best.max(p.precision);
        interp[i] = best;
    }
    let mut auc = 0.0;
    let mut prev_recall = 0.0;
    for (p, ip) in points.iter().zip(interp) {
        if p.recall > prev_recall {
            auc += (p.recall - prev_recall) * ip;
            prev_recall = p.recall;
        }
    }
    auc
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Detections of one slide as written by the cascade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideResult {
    pub slide_id: String,
    pub points: Vec<ScoredPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn load_results(path: &Path) -> Result<Vec<SlideResult>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading results {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("results {}: {e}", path.display())))
}

pub fn save_results(path: &Path, results: &[SlideResult]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(results)?).map_err(|e| Error::io(format!("writing results {}", path.display()), e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub slides: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub pr_auc: f64,
}

impl Metrics {
    fn compute(slides: &[SlidePoints], radius: f64) -> Self {
        let counts = slides
            .iter()
            .map(|s| match_detections(&s.preds, &s.gts, radius).counts())
            .fold(Counts::default(), |a, b| a + b);
        let (precision, recall, f1) = counts.precision_recall_f1();
        Self {
            slides: slides.len(),
            tp: counts.tp,
            fp: counts.fp,
            fn_: counts.fn_,
            precision,
            recall,
            f1,
            pr_auc: pr_curve_pooled(slides, radius).auc,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub radius: f64,
    pub overall: Metrics,
    pub per_scanner: BTreeMap<String, Metrics>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "matching radius: {} px", self.radius);
        let _ = writeln!(
            s,
            "{:<10} {:>6} {:>6} {:>6} {:>6} {:>9} {:>9} {:>9} {:>9}",
            "scanner", "slides", "tp", "fp", "fn", "precision", "recall", "f1", "pr_auc"
        );
        let mut row = |name: &str, m: &Metrics| {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>6} {:>6} {:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                name, m.slides, m.tp, m.fp, m.fn_, m.precision, m.recall, m.f1, m.pr_auc
            );
        };
        for (name, m) in &self.per_scanner {
            row(name, m);
        }
        row("overall", &self.overall);
        for n in &self.notes {
            let _ = writeln!(s, "note: {n}");
        }
        s
    }
}

/// Scores cascade results against the mitosis annotations of the manifest.
/// Only slides present in the results are evaluated; counts are pooled over
/// slides before computing metrics.
pub fn evaluate_results(results: &[SlideResult], manifest: &DatasetManifest, radius: f64) -> Result<EvalReport> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!("radius must be positive, got {radius}")));
    }
    let unknown: Vec<&str> = results
        .iter()
        .filter(|r| manifest.slide(&r.slide_id).is_none())
        .map(|r| r.slide_id.as_str())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Validation(format!("results reference unknown slides: {}", unknown.join(", "))));
    }
    let mut notes = Vec::new();
    let mut all = Vec::with_capacity(results.len());
    let mut by_scanner: BTreeMap<String, Vec<SlidePoints>> = BTreeMap::new();
    for r in results {
        let slide = manifest.slide(&r.slide_id).expect("checked above");
        if let Some(e) = &r.error {
            notes.push(format!("slide {} failed during inference ({e}); scored with no detections", r.slide_id));
        }
        let sp = SlidePoints {
            preds: r.points.iter().map(|p| (Point::new(p.x, p.y), p.score)).collect(),
            gts: slide.annotations.iter().filter(|a| a.label == Label::Mitosis).map(|a| a.centroid).collect(),
        };
        by_scanner.entry(slide.domain.name().to_string()).or_default().push(sp.clone());
        all.push(sp);
    }
    let overall = Metrics::compute(&all, radius);
    if overall.tp + overall.fp == 0 || overall.tp + overall.fn_ == 0 {
        notes.push("precision or recall has an empty denominator; reported as 0".to_string());
    }
    let per_scanner = by_scanner.into_iter().map(|(k, v)| (k, Metrics::compute(&v, radius))).collect();
    Ok(EvalReport { radius, overall, per_scanner, notes })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point> {
        v.iter().map(|&(x, y)| Point::new(x, y)).collect()
    }

    #[test]
    fn trivial_matches() {
        let gts = pts(&[(0.0, 0.0), (50.0, 50.0)]);
        let m = match_detections(&[], &gts, 30.0);
        assert_eq!(m.fn_, vec![0, 1]);
        let preds: Vec<(Point, f64)> = gts.iter().map(|&p| (p, 0.5)).collect();
        let m = match_detections(&preds, &gts, 1.0);
        assert_eq!(m.tp, vec![(0, 0, 0.0), (1, 1, 0.0)]);
    }

    #[test]
    fn prefers_cardinality_over_greedy_nearest() {
        // p0 is nearest to g0, but taking that pair leaves p1 unmatched.
        let gts = pts(&[(0.0, 0.0), (20.0, 0.0)]);
        let preds = vec![(Point::new(10.0, 0.0), 0.9), (Point::new(-5.0, 0.0), 0.8)];
        let m = match_detections(&preds, &gts, 10.0);
        assert_eq!(m.tp.len(), 2);
        assert_eq!(m.tp[0].1, 1);
    }

    #[test]
    fn f1_values() {
        assert!((f1_score(0.7820, 0.7349) - 0.7577).abs() < 5e-5);
        assert_eq!(f1_score(0.0, 0.0), 0.0);
        assert!((f1_score(0.3, 0.3) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn hand_pr_case() {
        let gts = pts(&[(0.0, 0.0), (100.0, 0.0), (200.0, 0.0), (300.0, 0.0)]);
        let preds = vec![
            (Point::new(1.0, 0.0), 0.9),
            (Point::new(500.0, 500.0), 0.8),
            (Point::new(101.0, 0.0), 0.7),
            (Point::new(600.0, 500.0), 0.6),
            (Point::new(201.0, 0.0), 0.5),
        ];
        let c = pr_curve(&preds, &gts, 30.0);
        assert_eq!(c.points.len(), 5);
        assert!((c.auc - 17.0 / 30.0).abs() < 1e-12);
        let perfect: Vec<(Point, f64)> = gts.iter().map(|&g| (g, 1.0)).collect();
        assert_eq!(pr_curve(&perfect, &gts, 30.0).auc, 1.0);
        assert_eq!(pr_curve(&preds[1..2], &gts, 30.0).auc, 0.0);
    }

    #[test]
    fn empty_report_notes_zero_convention() {
        let m = DatasetManifest::from_json_str(
            r#"{"images": [{"id": 1, "slide_id": "a", "file_name": "a.png", "scanner": "XR", "width": 50, "height": 50}], "annotations": []}"#,
        )
        .unwrap();
        let r = evaluate_results(&[SlideResult { slide_id: "a".into(), points: vec![], error: None }], &m, 30.0).unwrap();
        assert_eq!(r.overall.f1, 0.0);
        assert!(!r.notes.is_empty());
        let err = evaluate_results(&[SlideResult { slide_id: "zz".into(), points: vec![], error: None }], &m, 30.0);
        assert!(matches!(err, Err(Error::Validation(ref s)) if s.contains("zz")));
        assert!(r.to_table().contains("overall"));
    }
}
