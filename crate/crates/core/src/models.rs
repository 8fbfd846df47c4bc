//! Framework-free local objectives, gradients, and SGD.
//!
//! Three objectives cover the simulator's needs: a scalar quadratic mean
//! estimator (used by the closed-form round analysis), a softmax linear
//! classifier, and a one-hidden-layer tanh network. All gradients are
//! analytic and checked against central finite differences in tests.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::datastats::Dataset;
use crate::error::{Error, Result};

/// Named parameter segment within the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    fn len(&self) -> usize {
        self.rows * self.cols
    }
}

/// Flat model parameters plus the segment layout they decompose into.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub values: Vec<f64>,
    pub layout: Vec<Segment>,
}

impl ModelParams {
    pub fn new(values: Vec<f64>, layout: Vec<Segment>) -> Result<Self> {
        let expect: usize = layout.iter().map(Segment::len).sum();
        if values.len() != expect {
            return Err(Error::validation(format!(
                "parameter vector has {} values, layout wants {}",
                values.len(),
                expect
            )));
        }
        Ok(ModelParams { values, layout })
    }

    pub fn size(&self) -> usize {
        self.values.len()
    }

    pub fn same_layout(&self, other: &ModelParams) -> bool {
        self.layout == other.layout
    }

    /// Offset of a named segment within the flat vector.
    fn segment_range(&self, name: &str) -> std::ops::Range<usize> {
        let mut offset = 0;
        for seg in &self.layout {
            if seg.name == name {
                return offset..offset + seg.len();
            }
            offset += seg.len();
        }
        panic!("unknown segment {name}");
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        &self.values[self.segment_range(name)]
    }
}

/// Learning-rate schedule over a fixed step horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the configured rate to zero across
    /// `total_steps` global steps.
    Cosine { total_steps: u64 },
}

/// SGD hyperparameters shared by all clients of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub batch_size: usize,
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::validation("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation("momentum must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::validation("weight_decay must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if let Schedule::Cosine { total_steps } = self.schedule {
            if total_steps == 0 {
                return Err(Error::validation("cosine schedule needs a positive step horizon"));
            }
        }
        Ok(())
    }

    /// Learning rate at a global step index (0-based).
    pub fn rate_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine { total_steps } => {
                if total_steps <= 1 {
                    return self.learning_rate;
                }
                let t = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Per-client optimizer state; reset whenever a client restarts from the
/// global model.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(param_count: usize) -> Self {
        OptimizerState { velocity: vec![0.0; param_count] }
    }
}

/// Which local objective all clients optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Scalar mean estimation under quadratic loss; targets are the scalar
    /// features themselves.
    QuadraticMean,
    /// Linear softmax classifier with cross-entropy loss.
    Softmax { num_classes: usize, feature_dim: usize },
    /// One hidden tanh layer followed by softmax cross-entropy.
    Mlp { num_classes: usize, feature_dim: usize, hidden: usize },
}

impl Objective {
    pub fn layout(&self) -> Vec<Segment> {
        match *self {
            Objective::QuadraticMean => vec![Segment { name: "theta", rows: 1, cols: 1 }],
            Objective::Softmax { num_classes, feature_dim } => vec![
                Segment { name: "weight", rows: num_classes, cols: feature_dim },
                Segment { name: "bias", rows: num_classes, cols: 1 },
            ],
            Objective::Mlp { num_classes, feature_dim, hidden } => vec![
                Segment { name: "w1", rows: hidden, cols: feature_dim },
                Segment { name: "b1", rows: hidden, cols: 1 },
                Segment { name: "w2", rows: num_classes, cols: hidden },
                Segment { name: "b2", rows: num_classes, cols: 1 },
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(Segment::len).sum()
    }

    pub fn is_classifier(&self) -> bool {
        !matches!(self, Objective::QuadraticMean)
    }

    /// Initial parameters: zeros for the linear models, symmetric uniform
    /// scaled by 1/sqrt(fan_in) for the hidden layer weights.
    pub fn init_params(&self, rng: &mut ChaCha12Rng) -> ModelParams {
        let layout = self.layout();
        match *self {
            Objective::QuadraticMean | Objective::Softmax { .. } => {
                let len = layout.iter().map(Segment::len).sum();
                ModelParams::new(vec![0.0; len], layout).unwrap()
            }
            Objective::Mlp { .. } => {
                let mut values = Vec::new();
                for seg in &layout {
                    if seg.name.starts_with('w') {
                        let bound = 1.0 / (seg.cols as f64).sqrt();
                        values.extend((0..seg.len()).map(|_| rng.gen_range(-bound..bound)));
                    } else {
                        values.extend(std::iter::repeat(0.0).take(seg.len()));
                    }
                }
                ModelParams::new(values, layout).unwrap()
            }
        }
    }

    fn check_shapes(&self, params: &ModelParams, data: &Dataset) -> Result<()> {
        if params.size() != self.param_count() {
            return Err(Error::validation(format!(
                "parameter vector has {} values, objective wants {}",
                params.size(),
                self.param_count()
            )));
        }
        let want_dim = match *self {
            Objective::QuadraticMean => 1,
            Objective::Softmax { feature_dim, .. } => feature_dim,
            Objective::Mlp { feature_dim, .. } => feature_dim,
        };
        if data.feature_dim() != want_dim {
            return Err(Error::validation(format!(
                "dataset features have dim {}, objective wants {want_dim}",
                data.feature_dim()
            )));
        }
        Ok(())
    }
}

/// A minibatch: row indices into a dataset.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub data: &'a Dataset,
    pub indices: Vec<usize>,
}

/// Uniform sample of min(B, |D|) rows without replacement (fresh each call).
/// Indices come back sorted so downstream sums run in canonical order.
pub fn sample_batch<'a>(data: &'a Dataset, batch_size: usize, rng: &mut ChaCha12Rng) -> Batch<'a> {
    assert!(!data.is_empty(), "cannot sample from an empty client");
    let take = batch_size.min(data.len());
    let mut indices = rand::seq::index::sample(rng, data.len(), take).into_vec();
    indices.sort_unstable();
    Batch { data, indices }
}

fn softmax_probs(logits: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in logits.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in logits.iter_mut() {
        *v /= sum;
    }
}

/// Mean loss and its gradient over a batch.
pub fn loss_and_grad(
    objective: &Objective,
    params: &ModelParams,
    batch: &Batch<'_>,
) -> Result<(f64, Vec<f64>)> {
    if batch.indices.is_empty() {
        return Err(Error::validation("batch must be nonempty"));
    }
    objective.check_shapes(params, batch.data)?;
    let (loss, grad) = match *objective {
        Objective::QuadraticMean => quadratic_loss_grad(params, batch),
        Objective::Softmax { num_classes, feature_dim } => {
            softmax_loss_grad(params, batch, num_classes, feature_dim)
        }
        Objective::Mlp { num_classes, feature_dim, hidden } => {
            mlp_loss_grad(params, batch, num_classes, feature_dim, hidden)
        }
    };
    if !loss.is_finite() {
        return Err(Error::numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss, grad))
}

fn quadratic_loss_grad(params: &ModelParams, batch: &Batch<'_>) -> (f64, Vec<f64>) {
    let theta = params.values[0];
    let n = batch.indices.len() as f64;
    let mut loss = 0.0;
    let mut mean = 0.0;
    for &i in &batch.indices {
        let z = batch.data.row(i)[0];
        loss += 0.5 * (theta - z) * (theta - z);
        mean += z;
    }
    (loss / n, vec![theta - mean / n])
}

fn softmax_loss_grad(
    params: &ModelParams,
    batch: &Batch<'_>,
    num_classes: usize,
    feature_dim: usize,
) -> (f64, Vec<f64>) {
    let w = params.segment("weight");
    let b = params.segment("bias");
    let mut grad = vec![0.0; params.size()];
    let (gw, gb) = grad.split_at_mut(num_classes * feature_dim);
    let inv_n = 1.0 / batch.indices.len() as f64;
    let mut loss = 0.0;
    let mut probs = vec![0.0; num_classes];
    for &i in &batch.indices {
        let x = batch.data.row(i);
        let y = batch.data.label(i);
        for (c, p) in probs.iter_mut().enumerate() {
            let row = &w[c * feature_dim..(c + 1) * feature_dim];
            *p = b[c] + row.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>();
        }
        softmax_probs(&mut probs);
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();
        for c in 0..num_classes {
            let delta = (probs[c] - f64::from(u8::from(c == y))) * inv_n;
            gb[c] += delta;
            let row = &mut gw[c * feature_dim..(c + 1) * feature_dim];
            for (g, &xv) in row.iter_mut().zip(x) {
                *g += delta * xv;
            }
        }
    }
    (loss * inv_n, grad)
}

fn mlp_loss_grad(
    params: &ModelParams,
    batch: &Batch<'_>,
    num_classes: usize,
    feature_dim: usize,
    hidden: usize,
) -> (f64, Vec<f64>) {
    let w1 = params.segment("w1");
    let b1 = params.segment("b1");
    let w2 = params.segment("w2");
    let b2 = params.segment("b2");
    let mut grad = vec![0.0; params.size()];
    let (gw1, rest) = grad.split_at_mut(hidden * feature_dim);
    let (gb1, rest) = rest.split_at_mut(hidden);
    let (gw2, gb2) = rest.split_at_mut(num_classes * hidden);

    let inv_n = 1.0 / batch.indices.len() as f64;
    let mut loss = 0.0;
    let mut h = vec![0.0; hidden];
    let mut probs = vec![0.0; num_classes];
    let mut dh = vec![0.0; hidden];
    for &i in &batch.indices {
        let x = batch.data.row(i);
        let y = batch.data.label(i);
        for (j, hv) in h.iter_mut().enumerate() {
            let row = &w1[j * feature_dim..(j + 1) * feature_dim];
            *hv = (b1[j] + row.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>()).tanh();
        }
        for (c, p) in probs.iter_mut().enumerate() {
            let row = &w2[c * hidden..(c + 1) * hidden];
            *p = b2[c] + row.iter().zip(&h).map(|(wv, hv)| wv * hv).sum::<f64>();
        }
        softmax_probs(&mut probs);
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();

        dh.iter_mut().for_each(|v| *v = 0.0);
        for c in 0..num_classes {
            let dlogit = (probs[c] - f64::from(u8::from(c == y))) * inv_n;
            gb2[c] += dlogit;
            let row = &w2[c * hidden..(c + 1) * hidden];
            let grow = &mut gw2[c * hidden..(c + 1) * hidden];
            for j in 0..hidden {
                grow[j] += dlogit * h[j];
                dh[j] += dlogit * row[j];
            }
        }
        for j in 0..hidden {
            let dz = dh[j] * (1.0 - h[j] * h[j]);
            gb1[j] += dz;
            let grow = &mut gw1[j * feature_dim..(j + 1) * feature_dim];
            for (g, &xv) in grow.iter_mut().zip(x) {
                *g += dz * xv;
            }
        }
    }
    (loss * inv_n, grad)
}

/// One SGD step in place: weight decay folds into the gradient, the momentum
/// buffer accumulates it, and the scheduled rate scales the update.
pub fn sgd_step(
    params: &mut ModelParams,
    grad: &[f64],
    config: &OptimizerConfig,
    state: &mut OptimizerState,
    step: u64,
) {
    assert_eq!(grad.len(), params.size(), "gradient/parameter length mismatch");
    let rate = config.rate_at(step);
    for ((p, v), &g) in params.values.iter_mut().zip(&mut state.velocity).zip(grad) {
        let g = g + config.weight_decay * *p;
        *v = config.momentum * *v + g;
        *p -= rate * *v;
    }
}

/// Evaluation result; accuracy is absent for non-classification objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Full-dataset mean loss and top-1 accuracy.
pub fn evaluate(objective: &Objective, params: &ModelParams, data: &Dataset) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::validation("cannot evaluate on an empty dataset"));
    }
    objective.check_shapes(params, data)?;
    match *objective {
        Objective::QuadraticMean => {
            let batch = Batch { data, indices: (0..data.len()).collect() };
            let (loss, _) = quadratic_loss_grad(params, &batch);
            Ok(EvalMetrics { loss, accuracy: None })
        }
        Objective::Softmax { num_classes, feature_dim } => {
            let mut logits = vec![0.0; num_classes];
            let w = params.segment("weight");
            let b = params.segment("bias");
            let mut loss = 0.0;
            let mut correct = 0usize;
            for i in 0..data.len() {
                let x = data.row(i);
                for (c, p) in logits.iter_mut().enumerate() {
                    let row = &w[c * feature_dim..(c + 1) * feature_dim];
                    *p = b[c] + row.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>();
                }
                softmax_probs(&mut logits);
                loss -= logits[data.label(i)].max(f64::MIN_POSITIVE).ln();
                correct += usize::from(argmax(&logits) == data.label(i));
            }
            let n = data.len() as f64;
            Ok(EvalMetrics { loss: loss / n, accuracy: Some(correct as f64 / n) })
        }
        Objective::Mlp { num_classes, feature_dim, hidden } => {
            let w1 = params.segment("w1");
            let b1 = params.segment("b1");
            let w2 = params.segment("w2");
            let b2 = params.segment("b2");
            let mut h = vec![0.0; hidden];
            let mut logits = vec![0.0; num_classes];
            let mut loss = 0.0;
            let mut correct = 0usize;
            for i in 0..data.len() {
                let x = data.row(i);
                for (j, hv) in h.iter_mut().enumerate() {
                    let row = &w1[j * feature_dim..(j + 1) * feature_dim];
                    *hv =
                        (b1[j] + row.iter().zip(x).map(|(wv, xv)| wv * xv).sum::<f64>()).tanh();
                }
                for (c, p) in logits.iter_mut().enumerate() {
                    let row = &w2[c * hidden..(c + 1) * hidden];
                    *p = b2[c] + row.iter().zip(&h).map(|(wv, hv)| wv * hv).sum::<f64>();
                }
                softmax_probs(&mut logits);
                loss -= logits[data.label(i)].max(f64::MIN_POSITIVE).ln();
                correct += usize::from(argmax(&logits) == data.label(i));
            }
            let n = data.len() as f64;
            Ok(EvalMetrics { loss: loss / n, accuracy: Some(correct as f64 / n) })
        }
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
