//! Training augmentation: random dihedral symmetry, shear ("skew") with the
//! matching box/mask transform, and an H&E-oriented RandAugment policy.

use ndarray::{Array2, Array3, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{reflect_index, DihedralTransform};
use crate::types::{BoundingBox, Point};

/// Applies one of the eight dihedral symmetries drawn uniformly.
pub fn random_dihedral<T: Clone, R: Rng + ?Sized>(raster: &Array3<T>, rng: &mut R) -> Result<(DihedralTransform, Array3<T>)> {
    let t = DihedralTransform::new(rng.random_range(0..8u8))?;
    Ok((t, t.apply(raster)?))
}

/// Shear about a centre: `x' = x + shx (y - cy)`, `y' = y + shy (x - cx)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shear {
    pub shx: f64,
    pub shy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Shear {
    /// Shear about the centre of a `width x height` raster.
    pub fn centered(shx: f64, shy: f64, width: usize, height: usize) -> Self {
        Self { shx, shy, cx: width as f64 / 2.0, cy: height as f64 / 2.0 }
    }

    pub fn is_identity(&self) -> bool {
        self.shx == 0.0 && self.shy == 0.0
    }

    pub fn map_point(&self, p: &Point) -> Point {
        let (dx, dy) = (p.x - self.cx, p.y - self.cy);
        Point::new(self.cx + dx + self.shx * dy, self.cy + dy + self.shy * dx)
    }

    fn inverse_point(&self, x: f64, y: f64) -> (f64, f64) {
        let det = 1.0 - self.shx * self.shy;
        let (dx, dy) = (x - self.cx, y - self.cy);
        (self.cx + (dx - self.shx * dy) / det, self.cy + (dy - self.shy * dx) / det)
    }

    /// Axis-aligned hull of the sheared corners, clipped to the raster.
    /// `None` when nothing of the box remains inside.
    pub fn map_box(&self, b: &BoundingBox, width: usize, height: usize) -> Option<BoundingBox> {
        let corners = [(b.x0, b.y0), (b.x1, b.y0), (b.x0, b.y1), (b.x1, b.y1)].map(|(x, y)| self.map_point(&Point::new(x, y)));
        let x0 = corners.iter().map(|p| p.x).fold(f64::INFINITY, f64::min).max(0.0);
        let y0 = corners.iter().map(|p| p.y).fold(f64::INFINITY, f64::min).max(0.0);
        let x1 = corners.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max).min(width as f64);
        let y1 = corners.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max).min(height as f64);
        BoundingBox::new(x0, y0, x1, y1).ok()
    }

    /// Resamples every channel bilinearly through the inverse map, with
    /// reflection outside the raster.
    pub fn apply(&self, raster: &Array3<f32>) -> Array3<f32> {
        if self.is_identity() {
            return raster.clone();
        }
        let (h, w, c) = raster.dim();
        let mut out = Array3::zeros((h, w, c));
        for r in 0..h {
            for k in 0..w {
                let (sx, sy) = self.inverse_point(k as f64 + 0.5, r as f64 + 0.5);
                let (fx, fy) = (sx - 0.5, sy - 0.5);
                let (x0, y0) = (fx.floor(), fy.floor());
                let (ax, ay) = ((fx - x0) as f32, (fy - y0) as f32);
                let (x0, y0) = (x0 as i64, y0 as i64);
                let (c0, c1) = (reflect_index(x0, w), reflect_index(x0 + 1, w));
                let (r0, r1) = (reflect_index(y0, h), reflect_index(y0 + 1, h));
                for ch in 0..c {
                    let top = raster[[r0, c0, ch]] * (1.0 - ax) + raster[[r0, c1, ch]] * ax;
                    let bottom = raster[[r1, c0, ch]] * (1.0 - ax) + raster[[r1, c1, ch]] * ax;
                    out[[r, k, ch]] = top * (1.0 - ay) + bottom * ay;
                }
            }
        }
        out
    }

    pub fn apply_2d(&self, values: &Array2<f32>) -> Array2<f32> {
        let (h, w) = values.dim();
        let v3 = values.clone().into_shape_with_order((h, w, 1)).expect("contiguous");
        self.apply(&v3).into_shape_with_order((h, w)).expect("contiguous")
    }
}

/// Shear with both coefficients drawn uniformly from `[-max_shear, max_shear]`.
pub fn random_shear<R: Rng + ?Sized>(width: usize, height: usize, max_shear: f64, rng: &mut R) -> Result<Shear> {
    if !(0.0..0.9).contains(&max_shear) {
        return Err(Error::InvalidArgument(format!("max_shear must be in [0, 0.9), got {max_shear}")));
    }
    if max_shear == 0.0 {
        return Ok(Shear::centered(0.0, 0.0, width, height));
    }
    let shx = rng.random_range(-max_shear..=max_shear);
    let shy = rng.random_range(-max_shear..=max_shear);
    Ok(Shear::centered(shx, shy, width, height))
}

/// Skews a raster and its boxes with one random shear.
pub fn random_skew<R: Rng + ?Sized>(raster: &Array3<f32>, boxes: &[BoundingBox], max_shear: f64, rng: &mut R) -> Result<(Array3<f32>, Vec<Option<BoundingBox>>)> {
    let (h, w, _) = raster.dim();
    let s = random_shear(w, h, max_shear, rng)?;
    Ok((s.apply(raster), boxes.iter().map(|b| s.map_box(b, w, h)).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentOp {
    Hue,
    Saturation,
    Brightness,
    Contrast,
    GaussianBlur,
    Sharpen,
    Hed,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 7] = [
        AugmentOp::Hue,
        AugmentOp::Saturation,
        AugmentOp::Brightness,
        AugmentOp::Contrast,
        AugmentOp::GaussianBlur,
        AugmentOp::Sharpen,
        AugmentOp::Hed,
    ];

    /// Parameter reached at magnitude 10.
    pub fn max_parameter(&self) -> f64 {
        match self {
            AugmentOp::Hue => 0.1,
            AugmentOp::Saturation => 0.5,
            AugmentOp::Brightness => 0.3,
            AugmentOp::Contrast => 0.5,
            AugmentOp::GaussianBlur => 1.5,
            AugmentOp::Sharpen => 1.0,
            AugmentOp::Hed => 0.05,
        }
    }

    /// Linear map of `m` in `[0, 10]` onto `[0, max_parameter]`.
    pub fn parameter(&self, m: f64) -> f64 {
        self.max_parameter() * m / 10.0
    }

    /// Applies the op at magnitude `m` to an `[0, 255]` RGB raster.
    pub fn apply<R: Rng + ?Sized>(&self, x: &Array3<f32>, m: f64, rng: &mut R) -> Array3<f32> {
        let p = self.parameter(m);
        if p == 0.0 {
            return x.clone();
        }
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let out = match self {
            AugmentOp::Hue => map_hsv(x, |hsv| [(hsv[0] + sign * p).rem_euclid(1.0), hsv[1], hsv[2]]),
            AugmentOp::Saturation => map_hsv(x, |hsv| [hsv[0], (hsv[1] * (1.0 + sign * p)).clamp(0.0, 1.0), hsv[2]]),
            AugmentOp::Brightness => x.mapv(|v| v * (1.0 + sign * p) as f32),
            AugmentOp::Contrast => {
                let mean = x.mean().unwrap_or(0.0);
                x.mapv(|v| mean + (v - mean) * (1.0 + sign * p) as f32)
            }
            AugmentOp::GaussianBlur => gaussian_blur(x, p),
            AugmentOp::Sharpen => {
                let blurred = box_blur3(x);
                let mut out = x.clone();
                Zip::from(&mut out).and(&blurred).for_each(|o, &b| *o += p as f32 * (*o - b));
                out
            }
            AugmentOp::Hed => {
                let alpha: [f64; 3] = std::array::from_fn(|_| 1.0 + rng.random_range(-p..=p));
                let beta: [f64; 3] = std::array::from_fn(|_| rng.random_range(-p..=p));
                hed_perturb(x, alpha, beta)
            }
        };
        out.mapv(|v| v.clamp(0.0, 255.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentPolicy {
    pub n: usize,
    pub m: f64,
    pub ops: Vec<AugmentOp>,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self { n: 3, m: 7.0, ops: AugmentOp::ALL.to_vec() }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=10.0).contains(&self.m) {
            return Err(Error::Config { field: "augment.m".into(), message: format!("must be in [0, 10], got {}", self.m) });
        }
        if self.n > 0 && self.ops.is_empty() {
            return Err(Error::Config { field: "augment.ops".into(), message: "empty op pool with n > 0".into() });
        }
        Ok(())
    }
}

/// Draws `n` ops with replacement and applies each at magnitude `m`.
pub fn hne_randaugment<R: Rng + ?Sized>(raster: &Array3<u8>, policy: &AugmentPolicy, rng: &mut R) -> Result<Array3<u8>> {
    policy.validate()?;
    if policy.n == 0 {
        return Ok(raster.clone());
    }
    let mut x = raster.mapv(f32::from);
    for _ in 0..policy.n {
        let op = policy.ops[rng.random_range(0..policy.ops.len())];
        x = op.apply(&x, policy.m, rng);
    }
    Ok(x.mapv(|v| v.round().clamp(0.0, 255.0) as u8))
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f64; 3]) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn map_hsv(x: &Array3<f32>, f: impl Fn([f64; 3]) -> [f64; 3]) -> Array3<f32> {
    let mut out = x.clone();
    for mut px in out.lanes_mut(ndarray::Axis(2)) {
        let rgb = [px[0], px[1], px[2]].map(|v| f64::from(v) / 255.0);
        let rgb = hsv_to_rgb(f(rgb_to_hsv(rgb)));
        for k in 0..3 {
            px[k] = (rgb[k] * 255.0) as f32;
        }
    }
    out
}

fn gaussian_blur(x: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    separable(x, &kernel)
}

fn box_blur3(x: &Array3<f32>) -> Array3<f32> {
    separable(x, &[1.0 / 3.0; 3])
}

fn separable(x: &Array3<f32>, kernel: &[f32]) -> Array3<f32> {
    let (h, w, c) = x.dim();
    let r = (kernel.len() / 2) as i64;
    let mut tmp = Array3::<f32>::zeros((h, w, c));
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                tmp[[row, col, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * x[[row, reflect_index(col as i64 + i as i64 - r, w), ch]])
                    .sum::<f32>();
            }
        }
    }
    let mut out = Array3::zeros((h, w, c));
    for row in 0..h {
        for col in 0..w {
            for ch in 0..c {
                out[[row, col, ch]] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * tmp[[reflect_index(row as i64 + i as i64 - r, h), col, ch]])
                    .sum::<f32>();
            }
        }
    }
    out
}

/// Stain vectors for haematoxylin, eosin and DAB (Ruifrok and Johnston),
/// rows in RGB optical-density space.
pub const RGB_FROM_HED: [[f64; 3]; 3] = [[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]];

fn invert3(m: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (a, b) = ((j + 1) % 3, (j + 2) % 3);
            let (c, d) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[a][c] * m[b][d] - m[a][d] * m[b][c]) / det;
        }
    }
    inv
}

/// Scales and shifts each stain concentration: `s' = alpha s + beta`.
fn hed_perturb(x: &Array3<f32>, alpha: [f64; 3], beta: [f64; 3]) -> Array3<f32> {
    let hed_from_rgb = invert3(RGB_FROM_HED);
    let mut out = x.clone();
    for mut px in out.lanes_mut(ndarray::Axis(2)) {
        let od: [f64; 3] = std::array::from_fn(|k| -((f64::from(px[k]) / 255.0).max(1e-6)).ln());
        let stains: [f64; 3] = std::array::from_fn(|j| {
            let s: f64 = (0..3).map(|k| od[k] * hed_from_rgb[k][j]).sum();
            s * alpha[j] + beta[j]
        });
        for k in 0..3 {
            let od_k: f64 = (0..3).map(|j| stains[j] * RGB_FROM_HED[j][k]).sum();
            px[k] = ((-od_k).exp() * 255.0) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest, Sha256};

    use super::*;

    fn test_image(seed: u64, h: usize, w: usize) -> Array3<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((h, w, 3), |_| rng.random_range(30..230u8))
    }

    #[test]
    fn dihedral_draws_are_uniform_and_permute_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = test_image(0, 6, 6);
        let mut counts = [0usize; 8];
        let mut sorted_in: Vec<u8> = img.iter().copied().collect();
        sorted_in.sort();
        for _ in 0..8000 {
            let (t, out) = random_dihedral(&img, &mut rng).unwrap();
            counts[t.index() as usize] += 1;
            if counts[t.index() as usize] < 3 {
                let mut v: Vec<u8> = out.iter().copied().collect();
                v.sort();
                assert_eq!(v, sorted_in);
            }
        }
        assert!(counts.iter().all(|&c| (900..=1100).contains(&c)), "{counts:?}");
    }

    #[test]
    fn shear_hand_oracle() {
        let s = Shear { shx: 0.2, shy: 0.0, cx: 0.0, cy: 0.0 };
        let b = BoundingBox::new(3.0, 4.0, 4.0, 5.0).unwrap();
        for (x, y) in [(3.0, 4.0), (4.0, 4.0), (3.0, 5.0), (4.0, 5.0)] {
            let p = s.map_point(&Point::new(x, y));
            assert!((p.x - (x + 0.2 * y)).abs() < 1e-12);
            assert_eq!(p.y, y);
        }
        let mb = s.map_box(&b, 100, 100).unwrap();
        assert!((mb.x0 - 3.8).abs() < 1e-12 && (mb.x1 - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_shear_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = test_image(1, 10, 12).mapv(f32::from);
        let b = BoundingBox::new(1.0, 2.0, 5.0, 6.0).unwrap();
        let (out, boxes) = random_skew(&img, &[b], 0.0, &mut rng).unwrap();
        assert_eq!(out, img);
        assert_eq!(boxes, vec![Some(b)]);
    }

    #[test]
    fn mask_and_box_shear_consistently() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (w, h) = (64, 48);
            let x0 = rng.random_range(10..30) as usize;
            let y0 = rng.random_range(10..25) as usize;
            let (bw, bh) = (rng.random_range(4..12) as usize, rng.random_range(4..12) as usize);
            let mask = Array2::from_shape_fn((h, w), |(r, c)| f32::from(u8::from((y0..y0 + bh).contains(&r) && (x0..x0 + bw).contains(&c))));
            let b = BoundingBox::new(x0 as f64, y0 as f64, (x0 + bw) as f64, (y0 + bh) as f64).unwrap();
            let s = random_shear(w, h, 0.3, &mut rng).unwrap();
            let warped = s.apply_2d(&mask);
            let mb = s.map_box(&b, w, h).unwrap();
            let (mut rmin, mut rmax, mut cmin, mut cmax) = (usize::MAX, 0, usize::MAX, 0);
            for ((r, c), &v) in warped.indexed_iter() {
                if v >= 0.5 {
                    rmin = rmin.min(r);
                    rmax = rmax.max(r);
                    cmin = cmin.min(c);
                    cmax = cmax.max(c);
                }
            }
            assert!(cmin as f64 >= mb.x0 - 1.0 && (cmax + 1) as f64 <= mb.x1 + 1.0);
            assert!(rmin as f64 >= mb.y0 - 1.0 && (rmax + 1) as f64 <= mb.y1 + 1.0);
        }
    }

    #[test]
    fn null_magnitude_and_zero_ops_are_identity() {
        let img = test_image(4, 16, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let zero_m = AugmentPolicy { m: 0.0, ..AugmentPolicy::default() };
        assert_eq!(hne_randaugment(&img, &zero_m, &mut rng).unwrap(), img);
        let zero_n = AugmentPolicy { n: 0, ..AugmentPolicy::default() };
        assert_eq!(hne_randaugment(&img, &zero_n, &mut rng).unwrap(), img);
        let empty = AugmentPolicy { ops: vec![], ..AugmentPolicy::default() };
        assert!(hne_randaugment(&img, &empty, &mut rng).is_err());
    }

    #[test]
    fn hsv_and_hed_roundtrip() {
        for rgb in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(rgb));
            assert!(rgb.iter().zip(back).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        let img = test_image(5, 8, 8).mapv(f32::from);
        let out = hed_perturb(&img, [1.0; 3], [0.0; 3]);
        assert!(Zip::from(&out).and(&img).all(|a, b| (a - b).abs() < 1e-2));
        let inv = invert3(RGB_FROM_HED);
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| RGB_FROM_HED[i][k] * inv[k][j]).sum();
                assert!((v - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn every_op_keeps_range_and_shape() {
        let img = test_image(6, 12, 12).mapv(f32::from);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for op in AugmentOp::ALL {
            let out = op.apply(&img, 10.0, &mut rng);
            assert_eq!(out.dim(), img.dim());
            assert!(out.iter().all(|v| (0.0..=255.0).contains(v)), "{op:?}");
        }
    }

    #[test]
    fn golden_randaugment_n3_m7() {
        let img = test_image(7, 24, 24);
        let policy = AugmentPolicy::default();
        let a = hne_randaugment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(2024)).unwrap();
        let b = hne_randaugment(&img, &policy, &mut ChaCha8Rng::seed_from_u64(2024)).unwrap();
        assert_eq!(a, b);
        let digest = hex::encode(Sha256::digest(a.as_slice().unwrap()));
        assert_eq!(digest, GOLDEN);
    }

    const GOLDEN: &str = "ca28bd463e247f79ce4b09025b08773b90b7a054237475a6f6de5fa88128fdc3";
}
