//! Learner architectures, flat parameter vectors, losses and gradients.
//!
//! Three learners: scalar linear regression (squared error), a softmax
//! classifier, and a one-hidden-layer tanh MLP. All parameters live in one
//! flat vector so the federated pipeline can treat every model as a plain
//! point in R^d.

use crate::error::{Error, Result};
use crate::learnkit::Dataset;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense real vector of model-update dimension d.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn zeros(dim: usize) -> Self {
        GradientVector(vec![0.0; dim])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        GradientVector(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn add_scaled(&mut self, other: &GradientVector, factor: f64) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                got: other.len(),
                context: "gradient accumulation",
            });
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
        Ok(())
    }
}

/// Layer layout shared by params and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// Scalar regression: w . x + b against a real target.
    Linear { n_features: usize },
    /// Softmax classifier over `n_classes`.
    Logistic {
        n_features: usize,
        n_classes: usize,
    },
    /// One tanh hidden layer feeding a softmax output.
    Mlp {
        n_features: usize,
        hidden: usize,
        n_classes: usize,
    },
}

impl Architecture {
    pub fn dim(&self) -> usize {
        match *self {
            Architecture::Linear { n_features } => n_features + 1,
            Architecture::Logistic {
                n_features,
                n_classes,
            } => n_classes * n_features + n_classes,
            Architecture::Mlp {
                n_features,
                hidden,
                n_classes,
            } => hidden * n_features + hidden + n_classes * hidden + n_classes,
        }
    }

    pub fn zero_params(&self) -> ModelParams {
        ModelParams {
            arch: *self,
            values: vec![0.0; self.dim()],
        }
    }

    /// Gaussian init, needed to break symmetry in the MLP.
    pub fn random_params(&self, scale: f64, rng: &mut ChaCha8Rng) -> ModelParams {
        let values = (0..self.dim())
            .map(|_| scale * rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        ModelParams { arch: *self, values }
    }
}

/// Flat parameter vector tied to its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    values: Vec<f64>,
}

fn softmax_log_probs(logits: &mut [f64]) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let log_z = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    for v in logits.iter_mut() {
        *v -= log_z;
    }
}

impl ModelParams {
    pub fn new(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.dim() {
            return Err(Error::ShapeMismatch {
                expected: arch.dim(),
                got: values.len(),
                context: "model parameters",
            });
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidSpec("non-finite model parameter".into()));
        }
        Ok(ModelParams { arch, values })
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// params - step_size * g
    pub fn sgd_step(&self, g: &GradientVector, step_size: f64) -> Result<ModelParams> {
        if g.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                expected: self.values.len(),
                got: g.len(),
                context: "sgd step",
            });
        }
        let values = self
            .values
            .iter()
            .zip(&g.0)
            .map(|(p, g)| p - step_size * g)
            .collect();
        Ok(ModelParams {
            arch: self.arch,
            values,
        })
    }

    /// Mean per-sample loss over the batch: cross-entropy for classifiers,
    /// squared error for regression.
    pub fn loss(&self, ds: &Dataset, batch: &[usize]) -> Result<f64> {
        self.check_batch(ds, batch)?;
        let mut total = 0.0;
        for &i in batch {
            total += self.sample_loss(ds, i);
        }
        Ok(total / batch.len() as f64)
    }

    /// Exact analytic gradient of [`ModelParams::loss`] on the batch.
    pub fn gradient(&self, ds: &Dataset, batch: &[usize]) -> Result<GradientVector> {
        self.check_batch(ds, batch)?;
        let mut g = vec![0.0; self.values.len()];
        for &i in batch {
            self.accumulate_sample_gradient(ds, i, &mut g);
        }
        let inv = 1.0 / batch.len() as f64;
        for v in &mut g {
            *v *= inv;
        }
        Ok(GradientVector(g))
    }

    /// Class prediction (argmax); linear regression rounds to nearest class.
    pub fn predict_class(&self, x: &[f64]) -> usize {
        match self.arch {
            Architecture::Linear { .. } => {
                let (w, b) = self.linear_parts();
                let pred = dot(w, x) + b;
                pred.round().max(0.0) as usize
            }
            Architecture::Logistic { n_classes, .. } => {
                let logits = self.logistic_logits(x, n_classes);
                argmax(&logits)
            }
            Architecture::Mlp {
                hidden, n_classes, ..
            } => {
                let (_, logits) = self.mlp_forward(x, hidden, n_classes);
                argmax(&logits)
            }
        }
    }

    /// Fraction of correctly classified samples.
    pub fn accuracy(&self, ds: &Dataset, indices: &[usize]) -> f64 {
        if indices.is_empty() {
            return 0.0;
        }
        let correct = indices
            .iter()
            .filter(|&&i| Some(self.predict_class(ds.row(i))) == ds.class_of(i))
            .count();
        correct as f64 / indices.len() as f64
    }

    fn check_batch(&self, ds: &Dataset, batch: &[usize]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidSpec("empty batch".into()));
        }
        let expected = match self.arch {
            Architecture::Linear { n_features } => n_features,
            Architecture::Logistic { n_features, .. } => n_features,
            Architecture::Mlp { n_features, .. } => n_features,
        };
        if ds.n_features() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: ds.n_features(),
                context: "dataset features",
            });
        }
        Ok(())
    }

    fn linear_parts(&self) -> (&[f64], f64) {
        let n = self.values.len() - 1;
        (&self.values[..n], self.values[n])
    }

    fn logistic_logits(&self, x: &[f64], n_classes: usize) -> Vec<f64> {
        let n_features = x.len();
        let bias_off = n_classes * n_features;
        (0..n_classes)
            .map(|c| {
                dot(&self.values[c * n_features..(c + 1) * n_features], x)
                    + self.values[bias_off + c]
            })
            .collect()
    }

    fn mlp_forward(&self, x: &[f64], hidden: usize, n_classes: usize) -> (Vec<f64>, Vec<f64>) {
        let n_features = x.len();
        let w1_len = hidden * n_features;
        let b1_off = w1_len;
        let w2_off = b1_off + hidden;
        let b2_off = w2_off + n_classes * hidden;
        let act: Vec<f64> = (0..hidden)
            .map(|h| {
                (dot(&self.values[h * n_features..(h + 1) * n_features], x)
                    + self.values[b1_off + h])
                    .tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..n_classes)
            .map(|c| {
                dot(
                    &self.values[w2_off + c * hidden..w2_off + (c + 1) * hidden],
                    &act,
                ) + self.values[b2_off + c]
            })
            .collect();
        (act, logits)
    }

    fn sample_loss(&self, ds: &Dataset, i: usize) -> f64 {
        let x = ds.row(i);
        match self.arch {
            Architecture::Linear { .. } => {
                let (w, b) = self.linear_parts();
                let err = dot(w, x) + b - ds.target_of(i);
                err * err
            }
            Architecture::Logistic { n_classes, .. } => {
                let mut logits = self.logistic_logits(x, n_classes);
                softmax_log_probs(&mut logits);
                -logits[ds.class_of(i).expect("class label")]
            }
            Architecture::Mlp {
                hidden, n_classes, ..
            } => {
                let (_, mut logits) = self.mlp_forward(x, hidden, n_classes);
                softmax_log_probs(&mut logits);
                -logits[ds.class_of(i).expect("class label")]
            }
        }
    }

    fn accumulate_sample_gradient(&self, ds: &Dataset, i: usize, g: &mut [f64]) {
        let x = ds.row(i);
        match self.arch {
            Architecture::Linear { n_features } => {
                let (w, b) = self.linear_parts();
                let err = dot(w, x) + b - ds.target_of(i);
                for j in 0..n_features {
                    g[j] += 2.0 * err * x[j];
                }
                g[n_features] += 2.0 * err;
            }
            Architecture::Logistic {
                n_features,
                n_classes,
            } => {
                let mut logits = self.logistic_logits(x, n_classes);
                softmax_log_probs(&mut logits);
                let label = ds.class_of(i).expect("class label");
                let bias_off = n_classes * n_features;
                for c in 0..n_classes {
                    let delta = logits[c].exp() - if c == label { 1.0 } else { 0.0 };
                    for j in 0..n_features {
                        g[c * n_features + j] += delta * x[j];
                    }
                    g[bias_off + c] += delta;
                }
            }
            Architecture::Mlp {
                n_features,
                hidden,
                n_classes,
            } => {
                let (act, mut logits) = self.mlp_forward(x, hidden, n_classes);
                softmax_log_probs(&mut logits);
                let label = ds.class_of(i).expect("class label");
                let w1_len = hidden * n_features;
                let b1_off = w1_len;
                let w2_off = b1_off + hidden;
                let b2_off = w2_off + n_classes * hidden;

                let out_delta: Vec<f64> = (0..n_classes)
                    .map(|c| logits[c].exp() - if c == label { 1.0 } else { 0.0 })
                    .collect();
                for c in 0..n_classes {
                    for h in 0..hidden {
                        g[w2_off + c * hidden + h] += out_delta[c] * act[h];
                    }
                    g[b2_off + c] += out_delta[c];
                }
                for h in 0..hidden {
                    let back: f64 = (0..n_classes)
                        .map(|c| out_delta[c] * self.values[w2_off + c * hidden + h])
                        .sum();
                    let hid_delta = back * (1.0 - act[h] * act[h]);
                    for j in 0..n_features {
                        g[h * n_features + j] += hid_delta * x[j];
                    }
                    g[b1_off + h] += hid_delta;
                }
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
