//! Feature extractor G (`d -> h` ReLU, `h -> b` linear bottleneck) and linear
//! classifier head F (`b -> K`), with hand-written reverse-mode gradients.
//!
//! Weights are stored `out x in`, so a layer computes `x · Wᵀ + bias`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{softmax_rows, Matrix};

pub const HIDDEN: usize = 0;
pub const BOTTLENECK: usize = 1;
pub const HEAD: usize = 2;

const LAYER_NAMES: [&str; 3] = ["g.hidden", "g.bottleneck", "f.head"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub bottleneck_dim: usize,
    pub class_count: usize,
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.bottleneck_dim == 0 || self.class_count == 0 {
            return Err(Error::InvalidArgument(format!("all network dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_out, fan_in)` of each layer.
    fn layer_shapes(&self) -> [(usize, usize); 3] {
        [
            (self.hidden_dim, self.input_dim),
            (self.bottleneck_dim, self.hidden_dim),
            (self.class_count, self.bottleneck_dim),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Layer { weight: Matrix::zeros(out, inp), bias: vec![0.0; out] }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul_t(&self.weight)?;
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn len(&self) -> usize {
        self.weight.data().len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parameters of G and F. `layers` is always `[hidden, bottleneck, head]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub spec: NetSpec,
    pub layers: Vec<Layer>,
}

/// Gradients, shape-congruent with [`NetParams`], plus the input gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<Layer>,
    pub inputs: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub inputs: Matrix,
    pub hidden_pre: Matrix,
    pub hidden: Matrix,
    pub features: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
}

impl NetParams {
    pub fn zeros(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec.layer_shapes().iter().map(|&(o, i)| Layer::zeros(o, i)).collect();
        Ok(NetParams { spec, layers })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        let mut params = NetParams::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut params.layers {
            let (fan_out, fan_in) = layer.weight.shape();
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.random_range(-a..a);
            }
        }
        Ok(params)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    /// All parameters in layer order, weights before biases.
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::Shape(format!("{} values for {} parameters", values.len(), self.param_count())));
        }
        let mut it = values.iter().copied();
        for layer in &mut self.layers {
            for w in layer.weight.data_mut() {
                *w = it.next().unwrap();
            }
            for b in &mut layer.bias {
                *b = it.next().unwrap();
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.all_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// SHA-256 over the little-endian bytes of every parameter.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for v in self.flat() {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardCache> {
        if inputs.cols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "input has {} columns, network expects {}",
                inputs.cols(),
                self.spec.input_dim
            )));
        }
        let hidden_pre = self.layers[HIDDEN].apply(inputs)?;
        let hidden = hidden_pre.map(|v| v.max(0.0));
        let features = self.layers[BOTTLENECK].apply(&hidden)?;
        let logits = self.layers[HEAD].apply(&features)?;
        let probs = if logits.rows() == 0 { logits.clone() } else { softmax_rows(&logits)? };
        Ok(ForwardCache { inputs: inputs.clone(), hidden_pre, hidden, features, logits, probs })
    }

    /// Reverse pass for a loss whose gradient w.r.t. the logits is `dlogits`.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Matrix) -> Result<NetGrads> {
        if dlogits.shape() != cache.logits.shape() {
            return Err(Error::Shape(format!("dlogits {:?} vs logits {:?}", dlogits.shape(), cache.logits.shape())));
        }
        let head = &self.layers[HEAD];
        let g_head = Layer { weight: dlogits.t_matmul(&cache.features)?, bias: dlogits.col_sums() };
        let dfeatures = dlogits.matmul(&head.weight)?;

        let bott = &self.layers[BOTTLENECK];
        let g_bott = Layer { weight: dfeatures.t_matmul(&cache.hidden)?, bias: dfeatures.col_sums() };
        let mut dhidden = dfeatures.matmul(&bott.weight)?;
        for (d, &pre) in dhidden.data_mut().iter_mut().zip(cache.hidden_pre.data()) {
            if pre <= 0.0 {
                *d = 0.0;
            }
        }

        let hid = &self.layers[HIDDEN];
        let g_hid = Layer { weight: dhidden.t_matmul(&cache.inputs)?, bias: dhidden.col_sums() };
        let dinputs = dhidden.matmul(&hid.weight)?;

        Ok(NetGrads { layers: vec![g_hid, g_bott, g_head], inputs: dinputs })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            spec: self.spec,
            layers: self
                .layers
                .iter()
                .zip(LAYER_NAMES)
                .map(|(l, name)| CheckpointLayer {
                    name: name.to_string(),
                    shape: [l.weight.rows(), l.weight.cols()],
                    weight: l.weight.data().to_vec(),
                    bias: l.bias.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        ck.spec.validate()?;
        let shapes = ck.spec.layer_shapes();
        if ck.layers.len() != shapes.len() {
            return Err(Error::Shape(format!("checkpoint has {} layers, expected 3", ck.layers.len())));
        }
        let mut layers = Vec::with_capacity(3);
        for (l, &(o, i)) in ck.layers.iter().zip(&shapes) {
            if l.shape != [o, i] || l.bias.len() != o {
                return Err(Error::Shape(format!("layer {} has shape {:?}, expected [{o}, {i}]", l.name, l.shape)));
            }
            layers.push(Layer { weight: Matrix::from_vec(o, i, l.weight.clone())?, bias: l.bias.clone() });
        }
        Ok(NetParams { spec: ck.spec, layers })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint()).map_err(|e| Error::Io(e.to_string()))?;
        crate::io::write_atomic(path, text.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        NetParams::from_checkpoint(&ck)
    }
}

impl NetGrads {
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &NetGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.data_mut().iter_mut().zip(b.weight.data()).for_each(|(x, y)| *x += y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += y);
        }
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::with_capacity(layers.iter().map(Layer::len).sum());
    for l in layers {
        out.extend_from_slice(l.weight.data());
        out.extend_from_slice(&l.bias);
    }
    out
}

pub const CHECKPOINT_FORMAT: &str = "atdoc-params/v1";

/// JSON checkpoint. Numbers are written in shortest round-trip form, so a
/// save/load cycle reproduces every bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub spec: NetSpec,
    pub layers: Vec<CheckpointLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointLayer {
    pub name: String,
    /// `[fan_out, fan_in]`
    pub shape: [usize; 2],
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}
