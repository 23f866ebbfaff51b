//! Deterministic raster geometry: reflect-padded patch extraction, bilinear
//! resizing, frame tiling and the eight dihedral symmetries of the square.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BoundingBox, Frame, Point};

/// Maps an arbitrary index onto `0..n` by mirror reflection without
/// repeating the edge sample (`-1 -> 1`, `n -> n - 2`).
pub fn reflect_index(i: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64 - 1);
    let m = i.rem_euclid(period);
    if m >= n as i64 {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Copies a `height x width` window whose top-left corner is `(x0, y0)`.
/// Out-of-raster samples are filled by reflection.
pub fn extract_region<T: Copy>(pixels: &Array3<T>, x0: i64, y0: i64, width: usize, height: usize) -> Array3<T> {
    let (h, w, c) = pixels.dim();
    let rows: Vec<usize> = (0..height as i64).map(|r| reflect_index(y0 + r, h)).collect();
    let cols: Vec<usize> = (0..width as i64).map(|k| reflect_index(x0 + k, w)).collect();
    Array3::from_shape_fn((height, width, c), |(r, k, ch)| pixels[[rows[r], cols[k], ch]])
}

/// Single-channel counterpart of [`extract_region`].
pub fn extract_region_2d<T: Copy>(values: &Array2<T>, x0: i64, y0: i64, width: usize, height: usize) -> Array2<T> {
    let (h, w) = values.dim();
    let rows: Vec<usize> = (0..height as i64).map(|r| reflect_index(y0 + r, h)).collect();
    let cols: Vec<usize> = (0..width as i64).map(|k| reflect_index(x0 + k, w)).collect();
    Array2::from_shape_fn((height, width), |(r, k)| values[[rows[r], cols[k]]])
}

/// Top-left corner of a `size`-wide window centred on `center`.
pub fn patch_origin(center: &Point, size: usize) -> (i64, i64) {
    let (cx, cy) = center.pixel();
    (cx - (size / 2) as i64, cy - (size / 2) as i64)
}

/// Square `size x size` crop centred on `center` with reflection padding.
pub fn extract_patch(frame: &Frame, center: Point, size: usize) -> Result<Array3<u8>> {
    if size == 0 {
        return Err(Error::InvalidArgument("patch size must be positive".into()));
    }
    let inside = center.x >= 0.0
        && center.y >= 0.0
        && center.x < frame.width() as f64
        && center.y < frame.height() as f64;
    if !inside {
        return Err(Error::InvalidAnnotation(format!(
            "patch center ({}, {}) outside {}x{} frame {}",
            center.x,
            center.y,
            frame.width(),
            frame.height(),
            frame.slide_id
        )));
    }
    let (x0, y0) = patch_origin(&center, size);
    Ok(extract_region(&frame.pixels, x0, y0, size, size))
}

/// Bilinear resize of a square raster to `target x target`, sampling at
/// pixel centres and clamping at the border.
pub fn resize_patch(patch: &Array3<f32>, target: usize) -> Result<Array3<f32>> {
    let (h, w, c) = patch.dim();
    if h != w {
        return Err(Error::Shape(format!("resize expects a square patch, got {h}x{w}")));
    }
    if target == 0 || h == 0 {
        return Err(Error::InvalidArgument("resize target and input must be non-empty".into()));
    }
    if target == h {
        return Ok(patch.clone());
    }
    let scale = h as f64 / target as f64;
    let taps: Vec<(usize, usize, f32)> = (0..target)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (h - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(h - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect();
    Ok(Array3::from_shape_fn((target, target, c), |(r, k, ch)| {
        let (r0, r1, fy) = taps[r];
        let (c0, c1, fx) = taps[k];
        let top = patch[[r0, c0, ch]] * (1.0 - fx) + patch[[r0, c1, ch]] * fx;
        let bottom = patch[[r1, c0, ch]] * (1.0 - fx) + patch[[r1, c1, ch]] * fx;
        top * (1.0 - fy) + bottom * fy
    }))
}

pub fn to_f32(raster: &Array3<u8>) -> Array3<f32> {
    raster.mapv(f32::from)
}

pub fn to_u8(raster: &Array3<f32>) -> Array3<u8> {
    raster.mapv(|v| v.round().clamp(0.0, 255.0) as u8)
}

/// Window origins along one axis of length `len`.
pub fn tile_origins(len: usize, tile: usize, overlap: usize) -> Vec<usize> {
    if tile >= len {
        return vec![0];
    }
    let stride = tile - overlap;
    let mut origins = Vec::new();
    let mut o = 0;
    loop {
        if o + tile >= len {
            origins.push(len - tile);
            break;
        }
        origins.push(o);
        o += stride;
    }
    origins.dedup();
    origins
}

#[derive(Clone, Debug)]
pub struct Tile {
    pub x: usize,
    pub y: usize,
    pub pixels: Array3<u8>,
}

/// Covers the frame with `tile x tile` windows, row-major, edges clamped.
pub fn tile_frame(frame: &Frame, tile: usize, overlap: usize) -> Result<Vec<Tile>> {
    if tile == 0 || overlap >= tile {
        return Err(Error::InvalidArgument(format!("need tile > overlap >= 0, got tile {tile}, overlap {overlap}")));
    }
    let (h, w) = (frame.height(), frame.width());
    let (tw, th) = (tile.min(w), tile.min(h));
    let xs = tile_origins(w, tile, overlap);
    let ys = tile_origins(h, tile, overlap);
    let mut tiles = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let pixels = frame
                .pixels
                .slice(ndarray::s![y..y + th, x..x + tw, ..])
                .to_owned();
            tiles.push(Tile { x, y, pixels });
        }
    }
    Ok(tiles)
}

/// One of the eight symmetries of the square. Index `i` is a rotation by
/// `i % 4` quarter turns followed, for `i >= 4`, by a horizontal mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DihedralTransform(u8);

type Mat2 = [[i64; 2]; 2];

const fn mat_mul(a: Mat2, b: Mat2) -> Mat2 {
    [
        [a[0][0] * b[0][0] + a[0][1] * b[1][0], a[0][0] * b[0][1] + a[0][1] * b[1][1]],
        [a[1][0] * b[0][0] + a[1][1] * b[1][0], a[1][0] * b[0][1] + a[1][1] * b[1][1]],
    ]
}

const QUARTER: Mat2 = [[0, -1], [1, 0]];
const MIRROR: Mat2 = [[-1, 0], [0, 1]];
const IDENTITY: Mat2 = [[1, 0], [0, 1]];

impl DihedralTransform {
    pub const IDENTITY: DihedralTransform = DihedralTransform(0);

    pub fn new(index: u8) -> Result<Self> {
        if index >= 8 {
            return Err(Error::InvalidArgument(format!("dihedral index {index} not in 0..8")));
        }
        Ok(Self(index))
    }

    pub fn all() -> impl Iterator<Item = DihedralTransform> {
        (0..8).map(DihedralTransform)
    }

    pub fn index(&self) -> u8 {
        self.0
    }

    /// Action on centred `(x, y)` coordinates.
    fn matrix(&self) -> Mat2 {
        let mut m = IDENTITY;
        for _ in 0..self.0 % 4 {
            m = mat_mul(QUARTER, m);
        }
        if self.0 >= 4 {
            m = mat_mul(MIRROR, m);
        }
        m
    }

    fn from_matrix(m: Mat2) -> Self {
        Self::all().find(|t| t.matrix() == m).expect("dihedral group is closed")
    }

    /// `self` followed by `next`.
    pub fn then(&self, next: DihedralTransform) -> DihedralTransform {
        Self::from_matrix(mat_mul(next.matrix(), self.matrix()))
    }

    pub fn inverse(&self) -> DihedralTransform {
        let m = self.matrix();
        Self::from_matrix([[m[0][0], m[1][0]], [m[0][1], m[1][1]]])
    }

    /// True when the transform exchanges rows and columns.
    pub fn swaps_axes(&self) -> bool {
        self.0 % 2 == 1
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        if self.swaps_axes() {
            (width, height)
        } else {
            (height, width)
        }
    }

    fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.swaps_axes() && height != width {
            return Err(Error::Shape(format!(
                "quarter-turn dihedral transform needs a square raster, got {height}x{width}"
            )));
        }
        Ok(())
    }

    /// Source pixel for each destination pixel, as flat `(row, col)` pairs.
    fn source_map(&self, height: usize, width: usize) -> Vec<(usize, usize)> {
        let (oh, ow) = self.output_dims(height, width);
        let inv = self.inverse().matrix();
        let mut map = Vec::with_capacity(oh * ow);
        for r in 0..oh {
            for c in 0..ow {
                let u = 2 * c as i64 - (ow as i64 - 1);
                let v = 2 * r as i64 - (oh as i64 - 1);
                let su = inv[0][0] * u + inv[0][1] * v;
                let sv = inv[1][0] * u + inv[1][1] * v;
                map.push((((sv + height as i64 - 1) / 2) as usize, ((su + width as i64 - 1) / 2) as usize));
            }
        }
        map
    }

    pub fn apply<T: Clone>(&self, raster: &Array3<T>) -> Result<Array3<T>> {
        let (h, w, ch) = raster.dim();
        self.check_dims(h, w)?;
        if self.0 == 0 {
            return Ok(raster.clone());
        }
        let (oh, ow) = self.output_dims(h, w);
        let map = self.source_map(h, w);
        Ok(Array3::from_shape_fn((oh, ow, ch), |(r, c, k)| {
            let (sr, sc) = map[r * ow + c];
            raster[[sr, sc, k]].clone()
        }))
    }

    pub fn apply_2d<T: Clone>(&self, raster: &Array2<T>) -> Result<Array2<T>> {
        let view = raster.view().insert_axis(Axis(2)).to_owned();
        Ok(self.apply(&view)?.remove_axis(Axis(2)))
    }

    /// Maps a continuous point of a `width x height` raster.
    pub fn map_point(&self, p: &Point, width: usize, height: usize) -> Point {
        let m = self.matrix();
        let (u, v) = (2.0 * p.x - width as f64, 2.0 * p.y - height as f64);
        let nu = m[0][0] as f64 * u + m[0][1] as f64 * v;
        let nv = m[1][0] as f64 * u + m[1][1] as f64 * v;
        let (oh, ow) = self.output_dims(height, width);
        Point::new((nu + ow as f64) / 2.0, (nv + oh as f64) / 2.0)
    }

    pub fn map_box(&self, b: &BoundingBox, width: usize, height: usize) -> BoundingBox {
        let a = self.map_point(&Point::new(b.x0, b.y0), width, height);
        let c = self.map_point(&Point::new(b.x1, b.y1), width, height);
        BoundingBox { x0: a.x.min(c.x), y0: a.y.min(c.y), x1: a.x.max(c.x), y1: a.y.max(c.y) }
    }
}

/// Free-function form of [`DihedralTransform::apply`].
pub fn apply_dihedral<T: Clone>(raster: &Array3<T>, t: DihedralTransform) -> Result<Array3<T>> {
    t.apply(raster)
}

#[cfg(test)]
mod tests {
    use ndarray::s;
    use proptest::prelude::*;

    use super::*;
    use crate::types::ScannerDomain;

    fn ramp_frame(w: usize, h: usize) -> Frame {
        let px = Array3::from_shape_fn((h, w, 3), |(r, c, k)| ((r * 7 + c * 13 + k * 31) % 251) as u8);
        Frame::new("f", ScannerDomain::Xr, px).unwrap()
    }

    /// Reflect padding assembled by concatenating mirrored slices.
    fn oracle_reflect_pad(px: &Array3<u8>, pad: usize) -> Array3<u8> {
        let (h, w, _) = px.dim();
        let mut rows = Vec::new();
        for i in (1..=pad).rev() {
            rows.push(px.slice(s![i, .., ..]).to_owned());
        }
        for i in 0..h {
            rows.push(px.slice(s![i, .., ..]).to_owned());
        }
        for i in 1..=pad {
            rows.push(px.slice(s![h - 1 - i, .., ..]).to_owned());
        }
        let views: Vec<_> = rows.iter().map(|r| r.view().insert_axis(Axis(0))).collect();
        let tall = ndarray::concatenate(Axis(0), &views).unwrap();
        let mut cols = Vec::new();
        for i in (1..=pad).rev() {
            cols.push(tall.slice(s![.., i, ..]).to_owned());
        }
        for i in 0..w {
            cols.push(tall.slice(s![.., i, ..]).to_owned());
        }
        for i in 1..=pad {
            cols.push(tall.slice(s![.., w - 1 - i, ..]).to_owned());
        }
        let views: Vec<_> = cols.iter().map(|c| c.view().insert_axis(Axis(1))).collect();
        ndarray::concatenate(Axis(1), &views).unwrap()
    }

    #[test]
    fn interior_patch_is_plain_crop() {
        let f = ramp_frame(200, 200);
        let p = extract_patch(&f, Point::new(100.0, 100.0), 80).unwrap();
        assert_eq!(p, f.pixels.slice(s![60..140, 60..140, ..]).to_owned());
    }

    #[test]
    fn corner_patch_matches_reflect_pad_oracle() {
        let f = ramp_frame(100, 100);
        let p = extract_patch(&f, Point::new(0.0, 0.0), 80).unwrap();
        let padded = oracle_reflect_pad(&f.pixels, 40);
        // Patch origin (-40, -40) sits at (0, 0) of the padded frame.
        assert_eq!(p, padded.slice(s![0..80, 0..80, ..]).to_owned());
        // top-left quadrant mirrors interior content
        assert_eq!(p[[0, 0, 0]], f.pixels[[40, 40, 0]]);
    }

    #[test]
    fn patch_center_outside_is_rejected() {
        let f = ramp_frame(50, 50);
        assert!(matches!(
            extract_patch(&f, Point::new(50.0, 10.0), 8),
            Err(Error::InvalidAnnotation(_))
        ));
        assert!(extract_patch(&f, Point::new(5.0, 10.0), 0).is_err());
    }

    #[test]
    fn patch_then_resize_to_224() {
        let f = ramp_frame(200, 200);
        let p = extract_patch(&f, Point::new(100.0, 100.0), 80).unwrap();
        let r = resize_patch(&to_f32(&p), 224).unwrap();
        assert_eq!(r.dim(), (224, 224, 3));
    }

    #[test]
    fn resize_constant_and_identity() {
        let c = Array3::from_elem((80, 80, 3), 93.0f32);
        let r = resize_patch(&c, 224).unwrap();
        assert!(r.iter().all(|&v| (v - 93.0).abs() < 1e-4));
        let x = Array3::from_shape_fn((224, 224, 3), |(a, b, k)| (a * b + k) as f32 % 255.0);
        assert_eq!(resize_patch(&x, 224).unwrap(), x);
        assert!(resize_patch(&Array3::zeros((4, 5, 3)), 8).is_err());
    }

    #[test]
    fn resize_checkerboard_hand_weights() {
        // 2x2 [[0,255],[255,0]] upsampled to 4x4 with half-pixel centres:
        // source coordinates per output index are clamp(-0.25)=0, 0.25, 0.75, clamp(1.25)=1
        let mut cb = Array3::zeros((2, 2, 1));
        cb[[0, 1, 0]] = 255.0;
        cb[[1, 0, 0]] = 255.0;
        let r = resize_patch(&cb, 4).unwrap();
        let w = [0.0, 0.25, 0.75, 1.0];
        for (i, &fy) in w.iter().enumerate() {
            for (j, &fx) in w.iter().enumerate() {
                let expect = 255.0 * (fx * (1.0 - fy) + fy * (1.0 - fx));
                assert!((r[[i, j, 0]] as f64 - expect).abs() < 1e-3, "({i},{j})");
            }
        }
        assert!((r[[1, 1, 0]] - 95.625).abs() < 1e-3);
    }

    #[test]
    fn tile_examples() {
        assert_eq!(tile_origins(3000, 3000, 0), vec![0]);
        // stride 2500; 2500 + 3000 > 5000 so the last origin clamps to 2000
        assert_eq!(tile_origins(5000, 3000, 500), vec![0, 2000]);
        assert_eq!(tile_origins(3000, 3000, 500), vec![0]);
        let f = ramp_frame(50, 30);
        let tiles = tile_frame(&f, 64, 8).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0].pixels.dim(), (30, 50, 3));
        assert!(tile_frame(&f, 8, 8).is_err());
    }

    proptest! {
        #[test]
        fn tiling_covers_frame(w in 1usize..120, h in 1usize..120, tile in 2usize..50, ov in 0usize..40) {
            prop_assume!(ov < tile);
            let f = ramp_frame(w, h);
            let tiles = tile_frame(&f, tile, ov).unwrap();
            let mut covered = Array2::<bool>::from_elem((h, w), false);
            let mut prev: Option<(usize, usize)> = None;
            for t in &tiles {
                let (th, tw, _) = t.pixels.dim();
                prop_assert!(t.x + tw <= w && t.y + th <= h);
                if let Some(p) = prev {
                    prop_assert!((t.y, t.x) > p, "row-major order");
                }
                prev = Some((t.y, t.x));
                covered.slice_mut(s![t.y..t.y + th, t.x..t.x + tw]).fill(true);
            }
            prop_assert!(covered.iter().all(|&c| c));
        }

        #[test]
        fn dihedral_roundtrip(n in 1usize..9, seed in 0u64..1000, t in 0u8..8) {
            let r = Array3::from_shape_fn((n, n, 2), |(a, b, k)| (a as u64 * 31 + b as u64 * 7 + k as u64 + seed) % 97);
            let t = DihedralTransform::new(t).unwrap();
            let back = t.inverse().apply(&t.apply(&r).unwrap()).unwrap();
            prop_assert_eq!(back, r);
        }
    }

    #[test]
    fn dihedral_identity_and_involution() {
        let r = Array3::from_shape_fn((5, 5, 3), |(a, b, k)| a * 100 + b * 10 + k);
        assert_eq!(DihedralTransform::IDENTITY.apply(&r).unwrap(), r);
        let half = DihedralTransform::new(2).unwrap();
        assert_eq!(half.apply(&half.apply(&r).unwrap()).unwrap(), r);
        assert_ne!(half.apply(&r).unwrap(), r);
    }

    #[test]
    fn dihedral_group_table_is_closed() {
        let all: Vec<_> = DihedralTransform::all().collect();
        let r = Array3::from_shape_fn((4, 4, 1), |(a, b, _)| a * 4 + b);
        let images: Vec<_> = all.iter().map(|t| t.apply(&r).unwrap()).collect();
        // all eight images are distinct, so indices are faithful
        for i in 0..8 {
            for j in i + 1..8 {
                assert_ne!(images[i], images[j]);
            }
        }
        for a in &all {
            let mut row = Vec::new();
            for b in &all {
                let c = a.then(*b);
                assert_eq!(b.apply(&a.apply(&r).unwrap()).unwrap(), c.apply(&r).unwrap());
                row.push(c);
            }
            row.sort_by_key(|t| t.index());
            row.dedup();
            assert_eq!(row.len(), 8, "each row of the table is a permutation");
            assert_eq!(a.then(a.inverse()), DihedralTransform::IDENTITY);
        }
    }

    #[test]
    fn dihedral_rejects_rectangles_for_quarter_turns() {
        let r = Array3::<u8>::zeros((3, 5, 1));
        assert!(DihedralTransform::new(1).unwrap().apply(&r).is_err());
        assert!(DihedralTransform::new(2).unwrap().apply(&r).is_ok());
        assert!(DihedralTransform::new(4).unwrap().apply(&r).is_ok());
        assert!(DihedralTransform::new(8).is_err());
    }

    #[test]
    fn dihedral_orbit_average_matches_direct_loops() {
        // Orbit average of a raster via independent rot90/flip loops.
        let n = 6;
        let r = Array2::from_shape_fn((n, n), |(a, b)| ((a * 37 + b * 11) % 17) as f64);
        let rot = |m: &Array2<f64>| Array2::from_shape_fn((n, n), |(i, j)| m[[j, n - 1 - i]]);
        let mut orbit = Vec::new();
        let mut cur = r.clone();
        for _ in 0..4 {
            orbit.push(cur.clone());
            orbit.push(Array2::from_shape_fn((n, n), |(i, j)| cur[[i, n - 1 - j]]));
            cur = rot(&cur);
        }
        let direct: Array2<f64> = orbit.iter().fold(Array2::zeros((n, n)), |acc, m| acc + m) / 8.0;
        let via: Array2<f64> = DihedralTransform::all()
            .map(|t| t.apply_2d(&r).unwrap())
            .fold(Array2::zeros((n, n)), |acc, m| acc + &m)
            / 8.0;
        for (a, b) in direct.iter().zip(via.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn box_diagonal_invariant_under_dihedral() {
        let b = BoundingBox::new(3.0, 10.0, 23.0, 31.0).unwrap();
        for t in DihedralTransform::all() {
            let m = t.map_box(&b, 64, 64);
            assert!((m.diagonal() - b.diagonal()).abs() < 1e-9);
            assert!(m.x0 >= 0.0 && m.x1 <= 64.0 && m.y0 >= 0.0 && m.y1 <= 64.0);
        }
        // the mapped box selects the same pixels as the mapped raster
        let mut mask = Array2::<u8>::zeros((16, 16));
        mask.slice_mut(s![2..5, 9..15]).fill(1);
        let b = BoundingBox::new(9.0, 2.0, 15.0, 5.0).unwrap();
        for t in DihedralTransform::all() {
            let m = t.apply_2d(&mask).unwrap();
            let mb = t.map_box(&b, 16, 16);
            let inside: usize = m
                .slice(s![mb.y0 as usize..mb.y1 as usize, mb.x0 as usize..mb.x1 as usize])
                .iter()
                .map(|&v| v as usize)
                .sum();
            assert_eq!(inside, 18, "transform {}", t.index());
        }
    }
}
