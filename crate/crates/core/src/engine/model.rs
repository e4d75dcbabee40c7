//! Dense feed-forward classifiers over a flat weight vector.
//!
//! Layer `l` owns a row-major `(out, in)` weight block followed by its `out`
//! biases. Binary problems use a single logit with a sigmoid cross-entropy;
//! `k > 2` classes use `k` logits with softmax cross-entropy.

use std::fmt;
use std::str::FromStr;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EngineError;

/// Deepest supported stack of hidden layers.
pub const MAX_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HiddenLayer {
    pub width: usize,
    /// Adds the layer input to its activated output; requires equal widths.
    pub skip: bool,
}

/// Architecture descriptor, independent of the data it is applied to.
///
/// Text form: `logistic` for no hidden layers, otherwise the activation and
/// the hidden widths, with an `s` suffix marking a skip connection, e.g.
/// `relu:32-32s-16`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Architecture {
    pub hidden: Vec<HiddenLayer>,
    pub activation: Activation,
}

impl Architecture {
    pub fn logistic() -> Self {
        Self {
            hidden: Vec::new(),
            activation: Activation::Relu,
        }
    }

    pub fn mlp(widths: &[usize], activation: Activation) -> Self {
        Self {
            hidden: widths.iter().map(|&width| HiddenLayer { width, skip: false }).collect(),
            activation,
        }
    }

    pub fn depth(&self) -> usize {
        self.hidden.len()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.hidden.is_empty() {
            return f.write_str("logistic");
        }
        write!(f, "{}:", self.activation.name())?;
        for (i, layer) in self.hidden.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{}{}", layer.width, if layer.skip { "s" } else { "" })?;
        }
        Ok(())
    }
}

impl FromStr for Architecture {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, EngineError> {
        let bad = || EngineError::InvalidArchitecture(format!("cannot parse `{s}`"));
        let s = s.trim();
        if s == "logistic" {
            return Ok(Self::logistic());
        }
        let (act, layers) = s.split_once(':').ok_or_else(bad)?;
        let activation = match act {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            _ => return Err(bad()),
        };
        let hidden = layers
            .split('-')
            .map(|tok| {
                let (digits, skip) = match tok.strip_suffix('s') {
                    Some(d) => (d, true),
                    None => (tok, false),
                };
                digits
                    .parse()
                    .map(|width| HiddenLayer { width, skip })
                    .map_err(|_| bad())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { hidden, activation })
    }
}

impl TryFrom<String> for Architecture {
    type Error = EngineError;

    fn try_from(s: String) -> Result<Self, EngineError> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    weight_offset: usize,
    bias_offset: usize,
    skip: bool,
}

impl Dense {
    fn weights<'w>(&self, w: &'w [f64]) -> ArrayView2<'w, f64> {
        let span = &w[self.weight_offset..self.weight_offset + self.inputs * self.outputs];
        ArrayView2::from_shape((self.outputs, self.inputs), span).expect("layout matches")
    }

    fn bias<'w>(&self, w: &'w [f64]) -> ArrayView1<'w, f64> {
        ArrayView1::from(&w[self.bias_offset..self.bias_offset + self.outputs])
    }

    fn end(&self) -> usize {
        self.bias_offset + self.outputs
    }
}

/// Weight layout plus forward/backward passes for one architecture applied to
/// `input_dim` features and `classes` classes. Holds no weights itself.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    architecture: Architecture,
    input_dim: usize,
    classes: usize,
    layers: Vec<Dense>,
    n_weights: usize,
}

/// Per-batch intermediate values kept for the backward pass.
struct Trace {
    /// Input to every dense layer (the batch itself first).
    inputs: Vec<Array2<f64>>,
    /// Activated outputs of hidden layers, before any skip addition.
    activated: Vec<Array2<f64>>,
    logits: Array2<f64>,
}

impl Network {
    pub fn new(architecture: &Architecture, input_dim: usize, classes: usize) -> Result<Self, EngineError> {
        let invalid = |msg: String| Err(EngineError::InvalidArchitecture(msg));
        if input_dim == 0 {
            return invalid("input dimension must be positive".into());
        }
        if classes < 2 {
            return invalid("at least two classes are required".into());
        }
        if architecture.depth() > MAX_DEPTH {
            return invalid(format!("depth {} exceeds {MAX_DEPTH}", architecture.depth()));
        }
        let mut layers = Vec::with_capacity(architecture.depth() + 1);
        let mut offset = 0;
        let mut inputs = input_dim;
        let outputs = if classes == 2 { 1 } else { classes };
        let shapes = architecture
            .hidden
            .iter()
            .map(|h| (h.width, h.skip))
            .chain(std::iter::once((outputs, false)));
        for (width, skip) in shapes {
            if width == 0 {
                return invalid("layer widths must be positive".into());
            }
            if skip && width != inputs {
                return invalid(format!("skip connection needs equal widths, got {inputs} -> {width}"));
            }
            let layer = Dense {
                inputs,
                outputs: width,
                weight_offset: offset,
                bias_offset: offset + inputs * width,
                skip,
            };
            offset = layer.end();
            layers.push(layer);
            inputs = width;
        }
        Ok(Self {
            architecture: architecture.clone(),
            input_dim,
            classes,
            layers,
            n_weights: offset,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.architecture
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn n_weights(&self) -> usize {
        self.n_weights
    }

    /// Span of the flat weight vector owned by each layer (weights then biases).
    pub fn layer_spans(&self) -> Vec<std::ops::Range<usize>> {
        self.layers.iter().map(|l| l.weight_offset..l.end()).collect()
    }

    /// Seeded uniform initialisation in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`
    /// for weights and biases alike.
    pub fn init_weights(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let mut w = vec![0.0; self.n_weights];
        for layer in &self.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for x in &mut w[layer.weight_offset..layer.end()] {
                *x = rng.random_range(-bound..=bound);
            }
        }
        w
    }

    fn check(&self, w: &[f64], x: &ArrayView2<f64>, labels: &[usize]) -> Result<(), EngineError> {
        if w.len() != self.n_weights {
            return Err(EngineError::WeightMismatch {
                expected: self.n_weights,
                got: w.len(),
            });
        }
        if x.nrows() == 0 {
            return Err(EngineError::EmptyBatch);
        }
        if x.ncols() != self.input_dim {
            return Err(EngineError::DimensionMismatch {
                expected: self.input_dim,
                got: x.ncols(),
            });
        }
        if labels.len() != x.nrows() {
            return Err(EngineError::DimensionMismatch {
                expected: x.nrows(),
                got: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.classes) {
            return Err(EngineError::LabelOutOfRange {
                label: bad,
                classes: self.classes,
            });
        }
        Ok(())
    }

    fn forward(&self, w: &[f64], x: &ArrayView2<f64>) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut activated = Vec::with_capacity(self.layers.len() - 1);
        let mut current = x.to_owned();
        let (hidden, output) = self.layers.split_at(self.layers.len() - 1);
        for layer in hidden {
            let mut z = affine(layer, w, &current.view());
            match self.architecture.activation {
                Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
                Activation::Tanh => z.mapv_inplace(f64::tanh),
            }
            let next = if layer.skip { &z + &current } else { z.clone() };
            activated.push(z);
            inputs.push(current);
            current = next;
        }
        let logits = affine(&output[0], w, &current.view());
        inputs.push(current);
        Trace {
            inputs,
            activated,
            logits,
        }
    }

    /// Mean cross-entropy over the batch and, if `grad` is given, its exact
    /// gradient written into `grad` (overwritten, not accumulated).
    pub fn loss_and_grad(
        &self,
        w: &[f64],
        x: &ArrayView2<f64>,
        labels: &[usize],
        grad: Option<&mut [f64]>,
    ) -> Result<f64, EngineError> {
        self.check(w, x, labels)?;
        let trace = self.forward(w, x);
        let batch = x.nrows() as f64;
        let (loss, mut delta) = cross_entropy(&trace.logits, labels);
        if !loss.is_finite() {
            return Err(EngineError::NonFinite);
        }
        let Some(grad) = grad else {
            return Ok(loss);
        };
        if grad.len() != self.n_weights {
            return Err(EngineError::WeightMismatch {
                expected: self.n_weights,
                got: grad.len(),
            });
        }
        delta /= batch;
        let last = self.layers.len() - 1;
        // `dout` is dL/d(layer output); for the output layer that is the
        // logit gradient and there is no activation to pass through.
        let mut dout = delta;
        for l in (0..=last).rev() {
            let layer = &self.layers[l];
            let dpre = if l == last {
                dout.clone()
            } else {
                let mut d = dout.clone();
                let act = &trace.activated[l];
                match self.architecture.activation {
                    Activation::Relu => ndarray::Zip::from(&mut d).and(act).for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    }),
                    Activation::Tanh => ndarray::Zip::from(&mut d).and(act).for_each(|d, &a| *d *= 1.0 - a * a),
                }
                d
            };
            {
                let span = &mut grad[layer.weight_offset..layer.bias_offset];
                let mut gw = ArrayViewMut2::from_shape((layer.outputs, layer.inputs), span).expect("layout matches");
                general_mat_mul(1.0, &dpre.t(), &trace.inputs[l], 0.0, &mut gw);
            }
            let gb = dpre.sum_axis(Axis(0));
            grad[layer.bias_offset..layer.end()].copy_from_slice(gb.as_slice().expect("contiguous"));
            if l == 0 {
                break;
            }
            let mut din = dpre.dot(&layer.weights(w));
            if layer.skip {
                din += &dout;
            }
            dout = din;
        }
        Ok(loss)
    }

    /// Predicted class for every row.
    pub fn predict(&self, w: &[f64], x: &ArrayView2<f64>) -> Result<Vec<usize>, EngineError> {
        if w.len() != self.n_weights {
            return Err(EngineError::WeightMismatch {
                expected: self.n_weights,
                got: w.len(),
            });
        }
        if x.ncols() != self.input_dim {
            return Err(EngineError::DimensionMismatch {
                expected: self.input_dim,
                got: x.ncols(),
            });
        }
        if x.nrows() == 0 {
            return Ok(Vec::new());
        }
        let logits = self.forward(w, x).logits;
        Ok(logits
            .rows()
            .into_iter()
            .map(|row| {
                if row.len() == 1 {
                    usize::from(row[0] > 0.0)
                } else {
                    argmax(row)
                }
            })
            .collect())
    }
}

const INIT_STREAM: u64 = 1 << 63;

fn affine(layer: &Dense, w: &[f64], x: &ArrayView2<f64>) -> Array2<f64> {
    let mut z = Array2::zeros((x.nrows(), layer.outputs));
    general_mat_mul(1.0, x, &layer.weights(w).t(), 0.0, &mut z);
    z += &layer.bias(w);
    z
}

fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean cross-entropy and dL/dlogits per example (not yet divided by the
/// batch size).
fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let mut delta = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    if logits.ncols() == 1 {
        for (i, &y) in labels.iter().enumerate() {
            let s = logits[[i, 0]];
            let y = y as f64;
            // softplus(s) - y s, computed stably.
            total += s.max(0.0) - y * s + (-s.abs()).exp().ln_1p();
            delta[[i, 0]] = sigmoid(s) - y;
        }
    } else {
        let mut probs = Array1::zeros(logits.ncols());
        for (i, &y) in labels.iter().enumerate() {
            let row = logits.row(i);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut sum = 0.0;
            for (p, &v) in probs.iter_mut().zip(row) {
                *p = (v - max).exp();
                sum += *p;
            }
            total += sum.ln() + max - row[y];
            for (j, p) in probs.iter().enumerate() {
                delta[[i, j]] = p / sum;
            }
            delta[[i, y]] -= 1.0;
        }
    }
    (total / labels.len() as f64, delta)
}

fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}
