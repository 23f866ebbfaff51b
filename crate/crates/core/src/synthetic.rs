//! Procedural H&E-like frames with planted mitoses, for end-to-end checks.
//!
//! Each frame has a pink tissue background with low-frequency texture, a
//! scatter of pale nuclei, dark filled ellipses (the mitoses) and dark
//! ring-shaped distractors. Two colour palettes stand in for two scanners.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bootstrap::PixelSegmenter;
use crate::dataio::{DatasetManifest, ManifestAnnotation, SlideRecord};
use crate::error::{Error, Result};
use crate::imageio;
use crate::types::{BoundingBox, Frame, Label, MitosisAnnotation, Point, ScannerDomain};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum MitosisShape {
    Ellipse { min_radius: f64, max_radius: f64 },
    /// Disks centred on integer coordinates: exactly `2r` pixels across.
    Disk { radius: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub frames_per_domain: usize,
    pub size: usize,
    pub mitoses: (usize, usize),
    pub distractors: (usize, usize),
    pub nuclei: (usize, usize),
    pub shape: MitosisShape,
    /// Minimum centre distance between two mitoses.
    pub mitosis_spacing: f64,
    /// Write boxes into the manifest (otherwise centroids only).
    pub boxes: bool,
    /// Record distractors as hard-negative annotations.
    pub hard_negatives: bool,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            frames_per_domain: 6,
            size: 600,
            mitoses: (3, 6),
            distractors: (3, 6),
            nuclei: (20, 40),
            shape: MitosisShape::Ellipse { min_radius: 7.0, max_radius: 12.0 },
            mitosis_spacing: 110.0,
            boxes: true,
            hard_negatives: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Palette {
    pub tissue: [f64; 3],
    pub nucleus: [f64; 3],
    pub mitosis: [f64; 3],
    pub distractor: [f64; 3],
}

pub fn domains() -> [(ScannerDomain, Palette); 2] {
    [
        (
            ScannerDomain::Custom("SYN-A".into()),
            Palette { tissue: [232.0, 182.0, 205.0], nucleus: [160.0, 120.0, 185.0], mitosis: [45.0, 20.0, 70.0], distractor: [70.0, 40.0, 95.0] },
        ),
        (
            ScannerDomain::Custom("SYN-B".into()),
            Palette { tissue: [205.0, 192.0, 228.0], nucleus: [135.0, 125.0, 190.0], mitosis: [30.0, 28.0, 85.0], distractor: [55.0, 50.0, 110.0] },
        ),
    ]
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub manifest: DatasetManifest,
    pub frames: Vec<Frame>,
}

struct Canvas {
    px: Array3<f64>,
}

impl Canvas {
    /// Paints pixels whose centre satisfies `inside` within the given window;
    /// returns the painted box.
    fn paint(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, color: [f64; 3], inside: impl Fn(f64, f64) -> bool) -> Option<BoundingBox> {
        let (h, w, _) = self.px.dim();
        let (c0, c1) = (x0.floor().max(0.0) as usize, (x1.ceil().max(0.0) as usize).min(w));
        let (r0, r1) = (y0.floor().max(0.0) as usize, (y1.ceil().max(0.0) as usize).min(h));
        let mut bounds: Option<(usize, usize, usize, usize)> = None;
        for r in r0..r1 {
            for c in c0..c1 {
                if inside(c as f64 + 0.5, r as f64 + 0.5) {
                    for k in 0..3 {
                        self.px[[r, c, k]] = color[k];
                    }
                    bounds = Some(match bounds {
                        None => (c, r, c, r),
                        Some((a, b, d, e)) => (a.min(c), b.min(r), d.max(c), e.max(r)),
                    });
                }
            }
        }
        bounds.map(|(a, b, d, e)| BoundingBox { x0: a as f64, y0: b as f64, x1: (d + 1) as f64, y1: (e + 1) as f64 })
    }

    fn ellipse(&mut self, cx: f64, cy: f64, rx: f64, ry: f64, theta: f64, color: [f64; 3]) -> Option<BoundingBox> {
        let (s, c) = theta.sin_cos();
        let r = rx.max(ry);
        self.paint(cx - r, cy - r, cx + r, cy + r, color, |x, y| {
            let (dx, dy) = (x - cx, y - cy);
            let (u, v) = (dx * c + dy * s, -dx * s + dy * c);
            (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
        })
    }

    fn ring(&mut self, cx: f64, cy: f64, outer: f64, inner: f64, color: [f64; 3]) {
        self.paint(cx - outer, cy - outer, cx + outer, cy + outer, color, |x, y| {
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            d <= outer && d >= inner
        });
    }
}

fn jitter(color: [f64; 3], rng: &mut impl Rng, amount: f64) -> [f64; 3] {
    let d = rng.random_range(-amount..amount);
    color.map(|v| v + d)
}

fn place(rng: &mut impl Rng, size: usize, margin: f64, taken: &[(f64, f64, f64)], min_dist: f64, own_spacing: Option<(&[(f64, f64)], f64)>) -> Option<(f64, f64)> {
    for _ in 0..500 {
        let x = rng.random_range(margin..size as f64 - margin).round();
        let y = rng.random_range(margin..size as f64 - margin).round();
        let clear = taken.iter().all(|&(a, b, r)| ((a - x).powi(2) + (b - y).powi(2)).sqrt() >= r + min_dist);
        let spaced = own_spacing.is_none_or(|(pts, d)| pts.iter().all(|&(a, b)| ((a - x).powi(2) + (b - y).powi(2)).sqrt() >= d));
        if clear && spaced {
            return Some((x, y));
        }
    }
    None
}

/// One frame and its annotations (mitoses first, then distractors).
pub fn render_frame(slide_id: &str, domain: &ScannerDomain, palette: &Palette, cfg: &SyntheticConfig, rng: &mut impl Rng, first_id: u64) -> Result<Frame> {
    let n = cfg.size;
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| (rng.random_range(0.005..0.03), rng.random_range(0.005..0.03), rng.random_range(0.0..6.3), rng.random_range(4.0..10.0)))
        .collect();
    let base = Array3::from_shape_fn((n, n, 3), |(y, x, k)| {
        let t: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
        palette.tissue[k] - t
    });
    let mut canvas = Canvas { px: base };
    let mut taken: Vec<(f64, f64, f64)> = Vec::new();
    let mut annotations = Vec::new();
    let mut id = first_id;

    for _ in 0..rng.random_range(cfg.nuclei.0..=cfg.nuclei.1) {
        let (x, y) = (rng.random_range(0.0..n as f64), rng.random_range(0.0..n as f64));
        let r = rng.random_range(4.0..7.0);
        let color = jitter(palette.nucleus, rng, 12.0);
        canvas.ellipse(x, y, r, r * rng.random_range(0.7..1.0), rng.random_range(0.0..3.2), color);
    }

    let mut mitosis_centres: Vec<(f64, f64)> = Vec::new();
    for _ in 0..rng.random_range(cfg.mitoses.0..=cfg.mitoses.1) {
        let Some((x, y)) = place(rng, n, 30.0, &taken, 20.0, Some((&mitosis_centres, cfg.mitosis_spacing))) else {
            break;
        };
        let color = jitter(palette.mitosis, rng, 8.0);
        let (bbox, r) = match cfg.shape {
            MitosisShape::Ellipse { min_radius, max_radius } => {
                let rx = rng.random_range(min_radius..=max_radius);
                let ry = rx * rng.random_range(0.6..1.0);
                (canvas.ellipse(x, y, rx, ry, rng.random_range(0.0..3.2), color), rx)
            }
            MitosisShape::Disk { radius } => (canvas.ellipse(x, y, radius, radius, 0.0, color), radius),
        };
        let bbox = bbox.ok_or_else(|| Error::InvalidArgument("mitosis radius too small to rasterise".into()))?;
        taken.push((x, y, r));
        mitosis_centres.push((x, y));
        let mut a = MitosisAnnotation::new(id, Point::new(x, y), Label::Mitosis);
        if cfg.boxes {
            a = a.with_box(bbox);
        }
        annotations.push(a);
        id += 1;
    }

    for _ in 0..rng.random_range(cfg.distractors.0..=cfg.distractors.1) {
        let Some((x, y)) = place(rng, n, 30.0, &taken, 25.0, None) else {
            break;
        };
        let outer = rng.random_range(9.0..13.0);
        canvas.ring(x, y, outer, outer * rng.random_range(0.45..0.6), jitter(palette.distractor, rng, 8.0));
        taken.push((x, y, outer));
        if cfg.hard_negatives {
            annotations.push(MitosisAnnotation::new(id, Point::new(x, y), Label::HardNegative));
            id += 1;
        }
    }

    let pixels = canvas.px.mapv(|v| (v + rng.random_range(-6.0..6.0)).round().clamp(0.0, 255.0) as u8);
    Frame::new(slide_id, domain.clone(), pixels)?.with_annotations(annotations)
}

/// Frames for both palettes plus a manifest describing them. Image paths are
/// `images/<slide_id>.png`, matching [`write_corpus`].
pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    if cfg.size < 100 || cfg.mitoses.0 > cfg.mitoses.1 || cfg.distractors.0 > cfg.distractors.1 || cfg.nuclei.0 > cfg.nuclei.1 {
        return Err(Error::Config { field: "synth".into(), message: "need size >= 100 and ordered count ranges".into() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut frames = Vec::new();
    let mut slides = Vec::new();
    let mut next_id = 1u64;
    for (d, (domain, palette)) in domains().iter().enumerate() {
        for i in 0..cfg.frames_per_domain {
            let slide_id = format!("syn{}_{i:03}", (b'a' + d as u8) as char);
            let frame = render_frame(&slide_id, domain, palette, cfg, &mut rng, next_id)?;
            next_id += frame.annotations.len() as u64;
            slides.push(SlideRecord {
                image_id: slides.len() as u64 + 1,
                slide_id: slide_id.clone(),
                domain: domain.clone(),
                image_path: format!("images/{slide_id}.png"),
                width: cfg.size,
                height: cfg.size,
                microns_per_pixel: Some(0.25),
                annotations: frame
                    .annotations
                    .iter()
                    .map(|a| ManifestAnnotation { id: a.id, centroid: a.centroid, label: a.label, bbox: a.bbox, mask_path: None })
                    .collect(),
            });
            frames.push(frame);
        }
    }
    Ok(SyntheticCorpus { manifest: DatasetManifest { root: Default::default(), slides }, frames })
}

/// Writes `images/*.png` and `manifest.json` under `dir`.
pub fn write_corpus(corpus: &SyntheticCorpus, dir: &Path) -> Result<DatasetManifest> {
    for f in &corpus.frames {
        imageio::write_rgb(&dir.join("images").join(format!("{}.png", f.slide_id)), &f.pixels)?;
    }
    let mut manifest = corpus.manifest.clone();
    manifest.root = dir.to_path_buf();
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Foreground = pixels darker than `threshold` (channel mean). On corpora
/// without distractors this recovers the planted mitoses exactly.
pub struct DarkPixelSegmenter {
    pub threshold: f64,
}

impl PixelSegmenter for DarkPixelSegmenter {
    fn segment(&self, patch: &Array3<u8>) -> Result<Array2<f32>> {
        let (h, w, _) = patch.dim();
        Ok(Array2::from_shape_fn((h, w), |(r, c)| {
            let m = (0..3).map(|k| f64::from(patch[[r, c, k]])).sum::<f64>() / 3.0;
            f32::from(u8::from(m < self.threshold))
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_consistent() {
        let cfg = SyntheticConfig { frames_per_domain: 2, ..Default::default() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.frames.len(), 4);
        assert_eq!(a.manifest, b.manifest);
        assert_eq!(a.frames[3].pixels, b.frames[3].pixels);
        assert_eq!(a.manifest.domains().len(), 2);
        let json = a.manifest.to_json_string().unwrap();
        assert_eq!(DatasetManifest::from_json_str(&json).unwrap().slides, a.manifest.slides);
        for f in &a.frames {
            let m: Vec<_> = f.mitoses().collect();
            assert!((3..=6).contains(&m.len()));
            for x in &m {
                let b = x.bbox.unwrap();
                assert!(b.contains(&x.centroid));
                // planted pixels are dark
                let (cx, cy) = x.centroid.pixel();
                let v = f.pixels[[cy as usize, cx as usize, 0]];
                assert!(v < 80, "{v}");
            }
        }
    }

    #[test]
    fn disks_have_exact_diagonal() {
        let cfg = SyntheticConfig { frames_per_domain: 1, shape: MitosisShape::Disk { radius: 10.0 }, ..Default::default() };
        let c = generate(&cfg).unwrap();
        for f in &c.frames {
            for a in f.mitoses() {
                let b = a.bbox.unwrap();
                assert_eq!((b.width(), b.height()), (20.0, 20.0));
                assert_eq!(b.center(), a.centroid);
            }
        }
    }
}
