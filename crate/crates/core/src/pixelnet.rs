//! Per-pixel classifier over local colour statistics. Backs the built-in
//! detector and the bootstrap segmenter: each pixel is described by its
//! normalised RGB value and box means of the neighbourhood at three radii,
//! and an MLP maps that descriptor to a logit.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::extract_region;
use crate::nn::mlp::{Mlp, MlpActivation, MlpLayerSpec};
use crate::nn::optim::Optimizer;
use crate::nn::ParamStore;
use crate::train::{focal_loss_logit, sigmoid, FocalParams};

pub const RADII: [usize; 3] = [2, 5, 9];
pub const NUM_FEATURES: usize = 3 * (1 + RADII.len());

/// Box mean of every channel over a `(2r+1)^2` window with reflected borders.
fn box_means(norm: &Array3<f64>, r: usize) -> Array3<f64> {
    let (h, w, c) = norm.dim();
    let padded = extract_region(norm, -(r as i64), -(r as i64), w + 2 * r, h + 2 * r);
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut integral = Array3::<f64>::zeros((ph + 1, pw + 1, c));
    for y in 0..ph {
        for x in 0..pw {
            for k in 0..c {
                integral[[y + 1, x + 1, k]] = padded[[y, x, k]] + integral[[y, x + 1, k]] + integral[[y + 1, x, k]] - integral[[y, x, k]];
            }
        }
    }
    let d = 2 * r + 1;
    let area = (d * d) as f64;
    Array3::from_shape_fn((h, w, c), |(y, x, k)| {
        (integral[[y + d, x + d, k]] - integral[[y, x + d, k]] - integral[[y + d, x, k]] + integral[[y, x, k]]) / area
    })
}

/// `(H * W, NUM_FEATURES)` descriptors in row-major pixel order.
pub fn pixel_features(raster: &Array3<u8>) -> Array2<f64> {
    let (h, w, _) = raster.dim();
    let norm = raster.mapv(|v| f64::from(v) / 127.5 - 1.0);
    let means: Vec<Array3<f64>> = RADII.iter().map(|&r| box_means(&norm, r)).collect();
    let mut feats = Array2::zeros((h * w, NUM_FEATURES));
    for y in 0..h {
        for x in 0..w {
            let row = y * w + x;
            for k in 0..3 {
                feats[[row, k]] = norm[[y, x, k]];
                for (j, m) in means.iter().enumerate() {
                    feats[[row, 3 * (j + 1) + k]] = m[[y, x, k]];
                }
            }
        }
    }
    feats
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelNetSpec {
    /// Hidden widths; the output layer (width 1) is appended as the last block.
    pub hidden: Vec<usize>,
}

impl PixelNetSpec {
    fn layers(&self) -> Vec<MlpLayerSpec> {
        let mut specs: Vec<MlpLayerSpec> = self
            .hidden
            .iter()
            .enumerate()
            .map(|(i, &width)| MlpLayerSpec { block: format!("block{}", i + 1), width, activation: MlpActivation::Relu })
            .collect();
        specs.push(MlpLayerSpec { block: format!("block{}", self.hidden.len() + 1), width: 1, activation: MlpActivation::Identity });
        specs
    }
}

#[derive(Clone, Debug)]
pub struct PixelNet {
    pub spec: PixelNetSpec,
    pub mlp: Mlp,
}

#[derive(Serialize, Deserialize)]
pub struct PixelNetDoc {
    pub spec: PixelNetSpec,
    pub store: ParamStore,
}

impl PixelNet {
    pub fn new<R: Rng + ?Sized>(spec: PixelNetSpec, rng: &mut R) -> Self {
        let mlp = Mlp::new(NUM_FEATURES, spec.layers(), rng);
        Self { spec, mlp }
    }

    pub fn from_doc(doc: &PixelNetDoc) -> Result<Self> {
        let mlp = Mlp::from_store(NUM_FEATURES, doc.spec.layers(), &doc.store)?;
        Ok(Self { spec: doc.spec.clone(), mlp })
    }

    pub fn to_doc(&self) -> PixelNetDoc {
        PixelNetDoc { spec: self.spec.clone(), store: self.mlp.store.clone() }
    }

    /// Ordered block names, first to last.
    pub fn blocks(&self) -> Vec<String> {
        self.spec.layers().into_iter().map(|s| s.block).collect()
    }

    pub fn logits(&self, feats: &Array2<f64>) -> Vec<f64> {
        self.mlp.forward(feats).column(0).to_vec()
    }

    /// Per-pixel probability map `(H, W)`.
    pub fn predict(&self, raster: &Array3<u8>) -> Array2<f32> {
        let (h, w, _) = raster.dim();
        let logits = self.logits(&pixel_features(raster));
        Array2::from_shape_vec((h, w), logits.into_iter().map(|z| sigmoid(z) as f32).collect()).expect("pixel count")
    }

    /// One optimiser step on mean focal loss over the given rows; only blocks
    /// accepted by `trainable` change. Returns the loss before the update.
    pub fn train_step(
        &mut self,
        feats: &Array2<f64>,
        targets: &[u8],
        focal: FocalParams,
        opt: &mut dyn Optimizer,
        lr: f64,
        trainable: &dyn Fn(&str) -> bool,
    ) -> f64 {
        self.mlp.store.zero_grad();
        let z = self.mlp.forward_train(feats);
        let n = targets.len() as f64;
        let mut loss = 0.0;
        let mut grad = Array2::zeros(z.dim());
        for (i, (&zi, &y)) in z.column(0).iter().zip(targets).enumerate() {
            let (l, g) = focal_loss_logit(zi, y, focal);
            loss += l / n;
            grad[[i, 0]] = g / n;
        }
        self.mlp.backward(&grad);
        opt.step(&mut self.mlp.store, lr, trainable);
        loss
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::optim::{Adam, AdamConfig};

    #[test]
    fn box_means_match_direct_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Array3::from_shape_fn((9, 11, 3), |_| rng.random_range(0..=255u8));
        let norm = img.mapv(|v| f64::from(v) / 127.5 - 1.0);
        let r = 2usize;
        let m = box_means(&norm, r);
        let padded = extract_region(&norm, -2, -2, 15, 13);
        for y in 0..9 {
            for x in 0..11 {
                let direct: f64 = (0..5).flat_map(|dy| (0..5).map(move |dx| (dy, dx))).map(|(dy, dx)| padded[[y + dy, x + dx, 1]]).sum::<f64>() / 25.0;
                assert!((m[[y, x, 1]] - direct).abs() < 1e-12);
            }
        }
        assert_eq!(pixel_features(&img).dim(), (99, NUM_FEATURES));
    }

    #[test]
    fn learns_dark_disk() {
        let img = Array3::from_shape_fn((32, 32, 3), |(y, x, _)| {
            let d = ((y as f64 - 16.0).powi(2) + (x as f64 - 16.0).powi(2)).sqrt();
            if d < 6.0 {
                40
            } else {
                210
            }
        });
        let targets: Vec<u8> = img.indexed_iter().filter(|((_, _, k), _)| *k == 0).map(|(_, &v)| u8::from(v < 100)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = PixelNet::new(PixelNetSpec { hidden: vec![8, 8] }, &mut rng);
        let feats = pixel_features(&img);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..200 {
            net.train_step(&feats, &targets, FocalParams::default(), &mut opt, 0.01, &|_| true);
        }
        let p = net.predict(&img);
        assert!(p[[16, 16]] > 0.5 && p[[2, 2]] < 0.5);
    }
}
