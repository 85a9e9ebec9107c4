//! Fully connected ReLU network with fixed input normalization.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::ArtifactMeta;

pub const MODEL_SCHEMA: u32 = 1;
const VAR_FLOOR: f64 = 1e-6;

/// `widths` runs from the input dimension to the output dimension; hidden
/// layers use ReLU, the last layer is affine.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    mean: Array1<f64>,
    var: Array1<f64>,
}

/// Parameter gradients, laid out like the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    /// Accumulates `other` into `self`.
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

struct Trace {
    /// Activations entering each layer (the first is the normalized input).
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Mlp {
    /// He-uniform weights, zero biases, identity normalization.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(
                "an MLP needs at least input and output widths, all positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let last = l == widths.len() - 2;
            let bound = if last {
                (6.0 / (fan_in + fan_out) as f64).sqrt()
            } else {
                (6.0 / fan_in as f64).sqrt()
            };
            weights.push(Array2::from_shape_fn((fan_out, fan_in), |_| {
                rng.random_range(-bound..bound)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            widths: widths.to_vec(),
            weights,
            biases,
            mean: Array1::zeros(widths[0]),
            var: Array1::ones(widths[0]),
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("at least two widths")
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn normalization(&self) -> (&Array1<f64>, &Array1<f64>) {
        (&self.mean, &self.var)
    }

    pub fn set_normalization(&mut self, mean: Array1<f64>, var: Array1<f64>) -> Result<()> {
        if mean.len() != self.input_dim() || var.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: mean.len().min(var.len()),
            });
        }
        self.mean = mean;
        self.var = var.mapv(|v| v.max(VAR_FLOOR));
        Ok(())
    }

    /// Per-feature mean and (floored) variance of the rows of `data`.
    pub fn fit_normalization(&mut self, data: ArrayView2<f64>) -> Result<()> {
        self.check_cols(data.ncols())?;
        if data.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        let mean = data.mean_axis(Axis(0)).expect("non-empty");
        let var = data.var_axis(Axis(0), 0.0);
        self.set_normalization(mean, var)
    }

    fn check_cols(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got,
            });
        }
        Ok(())
    }

    fn normalize(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let sd = self.var.mapv(f64::sqrt);
        (&x - &self.mean) / &sd
    }

    fn trace(&self, x: ArrayView2<f64>) -> Result<Trace> {
        self.check_cols(x.ncols())?;
        let mut inputs = Vec::with_capacity(self.weights.len());
        let mut h = self.normalize(x);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let z = h.dot(&w.t()) + b;
            inputs.push(h);
            h = if l == last { z } else { z.mapv(|v| v.max(0.0)) };
        }
        Ok(Trace { inputs, output: h })
    }

    /// Outputs for each row of `x`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.trace(x)?.output)
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        Ok(self.forward_batch(x)?.row(0).to_vec())
    }

    /// Gradients of `sum_rows upstream . output` with respect to the
    /// parameters, plus the backpropagated signal at the normalized input.
    fn backprop(
        &self,
        x: ArrayView2<f64>,
        upstream: ArrayView2<f64>,
        want_params: bool,
    ) -> Result<(Option<Gradients>, Array2<f64>)> {
        let tr = self.trace(x)?;
        if upstream.dim() != tr.output.dim() {
            return Err(Error::DimensionMismatch {
                expected: tr.output.len(),
                got: upstream.len(),
            });
        }
        let n = self.weights.len();
        let mut gw = Vec::with_capacity(if want_params { n } else { 0 });
        let mut gb = Vec::with_capacity(if want_params { n } else { 0 });
        let mut delta = upstream.to_owned();
        for l in (0..n).rev() {
            if want_params {
                gw.push(delta.t().dot(&tr.inputs[l]));
                gb.push(delta.sum_axis(Axis(0)));
            }
            let mut back = delta.dot(&self.weights[l]);
            if l > 0 {
                // inputs[l] is relu(z) of the previous layer: its positive
                // entries mark where the derivative is one
                back.zip_mut_with(&tr.inputs[l], |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0
                    }
                });
            }
            delta = back;
        }
        let grads = want_params.then(|| {
            gw.reverse();
            gb.reverse();
            Gradients {
                weights: gw,
                biases: gb,
            }
        });
        Ok((grads, delta))
    }

    /// Reverse-mode gradients of `sum_rows upstream . output(x)`.
    pub fn gradients(&self, x: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<Gradients> {
        Ok(self.backprop(x, upstream, true)?.0.expect("requested"))
    }

    /// Gradient of `upstream . output(input)` with respect to the raw input.
    pub fn input_gradient(&self, input: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row vector");
        let u = ArrayView2::from_shape((1, upstream.len()), upstream).expect("row vector");
        let (_, d) = self.backprop(x, u, false)?;
        let sd = self.var.mapv(f64::sqrt);
        Ok((d.row(0).to_owned() / &sd).to_vec())
    }

    pub fn to_file(&self) -> MlpFile {
        MlpFile {
            schema: MODEL_SCHEMA,
            meta: None,
            arch: self.widths.clone(),
            mean: self.mean.to_vec(),
            var: self.var.to_vec(),
            layers: self
                .weights
                .iter()
                .zip(&self.biases)
                .map(|(w, b)| LayerFile {
                    rows: w.nrows(),
                    cols: w.ncols(),
                    weights: w.iter().copied().collect(),
                    bias: b.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_file(f: MlpFile) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidData(format!("model file: {m}")));
        if f.schema != MODEL_SCHEMA {
            return bad("unsupported schema");
        }
        if f.arch.len() < 2 || f.layers.len() != f.arch.len() - 1 {
            return bad("layer count does not match arch");
        }
        if f.mean.len() != f.arch[0] || f.var.len() != f.arch[0] {
            return bad("normalization size does not match input width");
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, layer) in f.layers.into_iter().enumerate() {
            if layer.rows != f.arch[l + 1]
                || layer.cols != f.arch[l]
                || layer.bias.len() != layer.rows
            {
                return bad("layer shape does not match arch");
            }
            let w = Array2::from_shape_vec((layer.rows, layer.cols), layer.weights)
                .map_err(|e| Error::InvalidData(format!("model file: {e}")))?;
            weights.push(w);
            biases.push(Array1::from(layer.bias));
        }
        Ok(Self {
            widths: f.arch,
            weights,
            biases,
            mean: Array1::from(f.mean),
            var: Array1::from(f.var).mapv(|v| v.max(VAR_FLOOR)),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_with_meta(path, None)
    }

    pub fn save_with_meta(&self, path: &Path, meta: Option<&ArtifactMeta>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let file = MlpFile {
            meta: meta.cloned(),
            ..self.to_file()
        };
        serde_json::to_writer(std::io::BufWriter::new(f), &file)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::from_file(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

/// On-disk model: architecture, normalization and row-major weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFile {
    pub schema: u32,
    /// Provenance of the file; ignored when loading.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ArtifactMeta>,
    pub arch: Vec<usize>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub layers: Vec<LayerFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerFile {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Adam optimizer state for one network.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    pub fn new(net: &Mlp, lr: f64) -> Self {
        let zeros = Gradients {
            weights: net
                .weights
                .iter()
                .map(|w| Array2::zeros(w.raw_dim()))
                .collect(),
            biases: net
                .biases
                .iter()
                .map(|b| Array1::zeros(b.raw_dim()))
                .collect(),
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One descent step along `g`.
    pub fn step(&mut self, net: &mut Mlp, g: &Gradients) {
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = self.lr;
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for l in 0..net.weights.len() {
            ndarray::Zip::from(&mut net.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .and(&g.weights[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            ndarray::Zip::from(&mut net.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .and(&g.biases[l])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}
