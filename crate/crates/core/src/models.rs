//! Closed-form loss and gradient oracles.
//!
//! Three families share one dense-layer engine: linear regression (one layer,
//! one output, squared error), multinomial logistic regression (one layer, C
//! outputs, softmax cross-entropy) and a one-hidden-layer MLP.
//!
//! Parameters are flattened layer by layer; within a layer the weight matrix
//! comes first (row-major, `out × in`), followed by the bias vector.

use rand::Rng;
use thiserror::Error;

use crate::numkit::{self, NumError, ParamVector, RngStream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("parameter dimension {got} does not match model dimension {expected}")]
    ParamDim { expected: usize, got: usize },
    #[error("feature row {row} has dimension {got}, model expects {expected}")]
    FeatureDim { row: usize, expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch has {features} feature rows but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },
    #[error("label {label} at row {row} outside [0, {classes})")]
    LabelOutOfRange { row: usize, label: usize, classes: usize },
    #[error("classification model given real-valued targets")]
    RealTargetsForClassifier,
    #[error("invalid model shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Labels {
    Classes(Vec<usize>),
    Targets(Vec<f64>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Targets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Regression target for row `i`; class indices are read as reals.
    fn target(&self, i: usize) -> f64 {
        match self {
            Labels::Classes(v) => v[i] as f64,
            Labels::Targets(v) => v[i],
        }
    }
}

/// A set of feature rows with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<Vec<f64>>,
    pub labels: Labels,
}

impl Batch {
    pub fn new(features: Vec<Vec<f64>>, labels: Labels) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(ModelError::LengthMismatch {
                features: features.len(),
                labels: labels.len(),
            });
        }
        Ok(Self { features, labels })
    }

    pub fn classification(features: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        Self::new(features, Labels::Classes(labels))
    }

    pub fn regression(features: Vec<Vec<f64>>, targets: Vec<f64>) -> Result<Self> {
        Self::new(features, Labels::Targets(targets))
    }

    pub fn size(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    /// Concatenation of two batches with the same label kind.
    pub fn concat(&self, other: &Batch) -> Result<Batch> {
        let mut features = self.features.clone();
        features.extend(other.features.iter().cloned());
        let labels = match (&self.labels, &other.labels) {
            (Labels::Classes(a), Labels::Classes(b)) => Labels::Classes([a.as_slice(), b].concat()),
            (Labels::Targets(a), Labels::Targets(b)) => Labels::Targets([a.as_slice(), b].concat()),
            _ => return Err(ModelError::Shape("cannot concatenate mixed label kinds".into())),
        };
        Batch::new(features, labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    LinearRegression,
    MultinomialLogistic,
    MlpOneHidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Subgradient at zero is zero.
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Class(usize),
    Value(f64),
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    inputs: usize,
    outputs: usize,
    offset: usize,
}

impl Layer {
    fn weight_len(&self) -> usize {
        self.inputs * self.outputs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    family: Family,
    d_in: usize,
    classes: usize,
    hidden: usize,
    activation: Activation,
    bias: bool,
}

impl Model {
    pub fn linear_regression(d_in: usize) -> Result<Self> {
        Self::build(Family::LinearRegression, d_in, 1, 0, Activation::Tanh)
    }

    pub fn logistic(d_in: usize, classes: usize) -> Result<Self> {
        Self::build(Family::MultinomialLogistic, d_in, classes, 0, Activation::Tanh)
    }

    pub fn mlp(d_in: usize, hidden: usize, classes: usize, activation: Activation) -> Result<Self> {
        if hidden == 0 {
            return Err(ModelError::Shape("hidden width must be positive".into()));
        }
        Self::build(Family::MlpOneHidden, d_in, classes, hidden, activation)
    }

    fn build(family: Family, d_in: usize, classes: usize, hidden: usize, activation: Activation) -> Result<Self> {
        if d_in == 0 {
            return Err(ModelError::Shape("input dimension must be positive".into()));
        }
        if family != Family::LinearRegression && classes < 2 {
            return Err(ModelError::Shape(format!("need at least 2 classes, got {classes}")));
        }
        Ok(Self {
            family,
            d_in,
            classes,
            hidden,
            activation,
            bias: true,
        })
    }

    /// Drops the bias terms from every layer.
    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn is_classifier(&self) -> bool {
        self.family != Family::LinearRegression
    }

    fn layers(&self) -> Vec<Layer> {
        let shapes: Vec<(usize, usize)> = match self.family {
            Family::LinearRegression => vec![(self.d_in, 1)],
            Family::MultinomialLogistic => vec![(self.d_in, self.classes)],
            Family::MlpOneHidden => vec![(self.d_in, self.hidden), (self.hidden, self.classes)],
        };
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(inputs, outputs)| {
                let layer = Layer {
                    inputs,
                    outputs,
                    offset,
                };
                offset += inputs * outputs + if self.bias { outputs } else { 0 };
                layer
            })
            .collect()
    }

    pub fn param_dim(&self) -> usize {
        self.layers()
            .iter()
            .map(|l| l.weight_len() + if self.bias { l.outputs } else { 0 })
            .sum()
    }

    /// Initial parameters: zeros for the linear families, uniform on
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer for the MLP.
    pub fn init_params(&self, stream: &RngStream) -> Result<ParamVector> {
        if self.family != Family::MlpOneHidden {
            return Ok(ParamVector::zeros(self.param_dim())?);
        }
        let mut rng = stream.rng();
        let mut values = Vec::with_capacity(self.param_dim());
        for layer in self.layers() {
            let s = 1.0 / (layer.inputs as f64).sqrt();
            let count = layer.weight_len() + if self.bias { layer.outputs } else { 0 };
            values.extend((0..count).map(|_| rng.random_range(-s..=s)));
        }
        Ok(ParamVector::new(values)?)
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.param_dim() {
            return Err(ModelError::ParamDim {
                expected: self.param_dim(),
                got: params.dim(),
            });
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if batch.features.len() != batch.labels.len() {
            return Err(ModelError::LengthMismatch {
                features: batch.features.len(),
                labels: batch.labels.len(),
            });
        }
        for (row, x) in batch.features.iter().enumerate() {
            self.check_row(row, x)?;
        }
        if self.is_classifier() {
            match &batch.labels {
                Labels::Targets(_) => return Err(ModelError::RealTargetsForClassifier),
                Labels::Classes(ys) => {
                    if let Some((row, &label)) = ys.iter().enumerate().find(|(_, &y)| y >= self.classes) {
                        return Err(ModelError::LabelOutOfRange {
                            row,
                            label,
                            classes: self.classes,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn check_row(&self, row: usize, x: &[f64]) -> Result<()> {
        if x.len() != self.d_in {
            return Err(ModelError::FeatureDim {
                row,
                expected: self.d_in,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Runs the dense stack on one row. Returns per-layer (pre-activation,
    /// post-activation) pairs; the last layer is left linear.
    fn forward(&self, w: &[f64], layers: &[Layer], x: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let mut acts: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(layers.len());
        for (li, layer) in layers.iter().enumerate() {
            let input: &[f64] = if li == 0 { x } else { &acts[li - 1].1 };
            let weights = &w[layer.offset..layer.offset + layer.weight_len()];
            let mut z: Vec<f64> = weights
                .chunks_exact(layer.inputs)
                .map(|row| row.iter().zip(input).map(|(a, b)| a * b).sum())
                .collect();
            if self.bias {
                let b = &w[layer.offset + layer.weight_len()..][..layer.outputs];
                for (zi, bi) in z.iter_mut().zip(b) {
                    *zi += bi;
                }
            }
            let a = if li + 1 < layers.len() {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            acts.push((z, a));
        }
        acts
    }

    /// Loss contribution of one row and its derivative w.r.t. the outputs.
    fn output_loss(&self, out: &[f64], labels: &Labels, i: usize) -> (f64, Vec<f64>) {
        if self.is_classifier() {
            let y = match labels {
                Labels::Classes(v) => v[i],
                Labels::Targets(_) => unreachable!("checked by check_batch"),
            };
            let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = out.iter().map(|&o| (o - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let loss = sum.ln() + max - out[y];
            let mut d: Vec<f64> = exps.iter().map(|e| e / sum).collect();
            d[y] -= 1.0;
            (loss, d)
        } else {
            let r = out[0] - labels.target(i);
            (r * r, vec![2.0 * r])
        }
    }

    /// Mean loss over the batch: squared error for regression, softmax
    /// cross-entropy (natural log) for classification.
    pub fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let layers = self.layers();
        let w = params.as_slice();
        let total: f64 = batch
            .features
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let acts = self.forward(w, &layers, x);
                self.output_loss(&acts.last().expect("at least one layer").1, &batch.labels, i)
                    .0
            })
            .sum();
        Ok(total / batch.size() as f64)
    }

    /// Exact gradient of [`Model::loss`].
    pub fn grad(&self, params: &ParamVector, batch: &Batch) -> Result<ParamVector> {
        Ok(self.loss_and_grad(params, batch)?.1)
    }

    pub fn loss_and_grad(&self, params: &ParamVector, batch: &Batch) -> Result<(f64, ParamVector)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let layers = self.layers();
        let w = params.as_slice();
        let mut g = vec![0.0; w.len()];
        let mut total = 0.0;
        for (i, x) in batch.features.iter().enumerate() {
            let acts = self.forward(w, &layers, x);
            let (loss, mut delta) = self.output_loss(&acts.last().expect("at least one layer").1, &batch.labels, i);
            total += loss;
            for li in (0..layers.len()).rev() {
                let layer = layers[li];
                let input: &[f64] = if li == 0 { x } else { &acts[li - 1].1 };
                let gw = &mut g[layer.offset..layer.offset + layer.weight_len()];
                for (row, &d) in gw.chunks_exact_mut(layer.inputs).zip(&delta) {
                    for (gi, xi) in row.iter_mut().zip(input) {
                        *gi += d * xi;
                    }
                }
                if self.bias {
                    let gb = &mut g[layer.offset + layer.weight_len()..][..layer.outputs];
                    for (gi, d) in gb.iter_mut().zip(&delta) {
                        *gi += d;
                    }
                }
                if li > 0 {
                    let weights = &w[layer.offset..layer.offset + layer.weight_len()];
                    let mut back = vec![0.0; layer.inputs];
                    for (row, &d) in weights.chunks_exact(layer.inputs).zip(&delta) {
                        for (bi, wi) in back.iter_mut().zip(row) {
                            *bi += d * wi;
                        }
                    }
                    let (z, a) = &acts[li - 1];
                    for ((bi, &zi), &ai) in back.iter_mut().zip(z).zip(a) {
                        *bi *= self.activation.derivative(zi, ai);
                    }
                    delta = back;
                }
            }
        }
        let n = batch.size() as f64;
        for gi in &mut g {
            *gi /= n;
        }
        Ok((total / n, ParamVector::new(g)?))
    }

    /// Raw outputs (logits, or the regression value) for one feature row.
    pub fn outputs(&self, params: &ParamVector, features: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_row(0, features)?;
        let acts = self.forward(params.as_slice(), &self.layers(), features);
        Ok(acts.into_iter().last().expect("at least one layer").1)
    }

    /// Argmax class (lowest index wins ties) or the regression output.
    pub fn predict(&self, params: &ParamVector, features: &[f64]) -> Result<Prediction> {
        let out = self.outputs(params, features)?;
        if !self.is_classifier() {
            return Ok(Prediction::Value(out[0]));
        }
        let mut best = 0;
        for (c, &v) in out.iter().enumerate().skip(1) {
            if v > out[best] {
                best = c;
            }
        }
        Ok(Prediction::Class(best))
    }

    /// Smallest |pre-activation| of the hidden layer across the batch, or
    /// `None` for models without a hidden layer. Used to keep ReLU
    /// finite-difference probes away from kinks.
    pub fn min_hidden_preactivation(&self, params: &ParamVector, batch: &Batch) -> Result<Option<f64>> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        if self.family != Family::MlpOneHidden {
            return Ok(None);
        }
        let layers = self.layers();
        let min = batch
            .features
            .iter()
            .flat_map(|x| self.forward(params.as_slice(), &layers, x).swap_remove(0).0)
            .fold(f64::INFINITY, |m, z| m.min(z.abs()));
        Ok(Some(min))
    }

    /// Central-difference gradient of the batch loss.
    pub fn fd_gradient(&self, params: &ParamVector, batch: &Batch, h: f64) -> Result<ParamVector> {
        numkit::fd_gradient(|p| self.loss(p, batch), params, h)
    }
}
