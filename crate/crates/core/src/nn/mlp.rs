use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Activation, Linear};
use super::ParamStore;
use crate::error::Result;

/// Layer spec: output width, activation, and the block the layer belongs to.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpLayerSpec {
    pub block: String,
    pub width: usize,
    pub activation: MlpActivation,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpActivation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
}

impl From<MlpActivation> for Activation {
    fn from(a: MlpActivation) -> Self {
        match a {
            MlpActivation::Identity => Activation::Identity,
            MlpActivation::Relu => Activation::Relu,
            MlpActivation::LeakyRelu => Activation::LeakyRelu(0.2),
            MlpActivation::Tanh => Activation::Tanh,
        }
    }
}

/// Fully connected stack operating on rows of an `(N, F)` matrix.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub store: ParamStore,
    pub input: usize,
    pub specs: Vec<MlpLayerSpec>,
    layers: Vec<Linear>,
    cache: Vec<(Array2<f64>, Array2<f64>)>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(input: usize, specs: Vec<MlpLayerSpec>, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut fan_in = input;
        let mut layers = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            layers.push(Linear::new(&mut store, &s.block, &format!("fc{i}"), fan_in, s.width, rng));
            fan_in = s.width;
        }
        Self { store, input, specs, layers, cache: Vec::new() }
    }

    /// Rebuilds the network and loads the given parameters into it.
    pub fn from_store(input: usize, specs: Vec<MlpLayerSpec>, store: &ParamStore) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut mlp = Self::new(input, specs, &mut rng);
        mlp.store.load_from(store)?;
        Ok(mlp)
    }

    pub fn output_width(&self) -> usize {
        self.specs.last().map_or(self.input, |s| s.width)
    }

    /// Scales the last layer's weights and bias, e.g. to start near zero output.
    pub fn scale_output_layer(&mut self, factor: f64) {
        if let Some(last) = self.layers.last() {
            for id in [last.weight, last.bias] {
                self.store.value_mut(id).iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.clone();
        for (layer, spec) in self.layers.iter().zip(&self.specs) {
            let act: Activation = spec.activation.into();
            h = layer.forward(&self.store, &h).mapv(|v| act.apply(v));
        }
        h
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Array2<f64> {
        self.cache.clear();
        let mut h = x.clone();
        for (layer, spec) in self.layers.iter_mut().zip(&self.specs) {
            let act: Activation = spec.activation.into();
            let pre = layer.forward_train(&self.store, &h);
            let out = pre.mapv(|v| act.apply(v));
            self.cache.push((pre, out.clone()));
            h = out;
        }
        h
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, grad: &Array2<f64>) -> Array2<f64> {
        let mut g = grad.clone();
        for ((layer, spec), (pre, out)) in self
            .layers
            .iter_mut()
            .zip(&self.specs)
            .zip(std::mem::take(&mut self.cache))
            .rev()
        {
            let act: Activation = spec.activation.into();
            ndarray::Zip::from(&mut g)
                .and(&pre)
                .and(&out)
                .for_each(|g, &x, &y| *g *= act.derivative(x, y));
            g = layer.backward(&mut self.store, &g);
        }
        g
    }
}
