//! The halting policy: LayerNorm, two 512-wide hidden layers and a
//! tempered-sigmoid head giving the probability of taking another ponder step.
//!
//! All gradients are written out by hand. [`Controller::backward`] is the
//! workhorse: given a cached batched forward pass and the derivative of some
//! scalar objective with respect to each row's pre-temperature logit, it
//! returns the parameter gradient of that objective.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{check_dims, checksum_f64, gelu, gelu_grad, sigmoid, RngStream, Vector, LAYER_NORM_EPS};

pub const HIDDEN: usize = 512;
pub const PARAM_BUDGET: usize = 1_000_000;
pub const CONTROLLER_SCHEMA_VERSION: u32 = 1;

/// Probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu(x),
            Activation::Relu => x.max(0.0),
        }
    }

    fn grad(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => gelu_grad(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Controller parameters, also used as the gradient type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
    /// `HIDDEN x d`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `HIDDEN x HIDDEN`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w_out: Array1<f64>,
    pub b_out: f64,
}

impl Weights {
    pub fn zeros(dim: usize) -> Weights {
        Weights {
            ln_gain: Array1::zeros(dim),
            ln_bias: Array1::zeros(dim),
            w1: Array2::zeros((HIDDEN, dim)),
            b1: Array1::zeros(HIDDEN),
            w2: Array2::zeros((HIDDEN, HIDDEN)),
            b2: Array1::zeros(HIDDEN),
            w_out: Array1::zeros(HIDDEN),
            b_out: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.ln_gain.len()
    }

    pub fn param_count(&self) -> usize {
        self.ln_gain.len()
            + self.ln_bias.len()
            + self.w1.len()
            + self.b1.len()
            + self.w2.len()
            + self.b2.len()
            + self.w_out.len()
            + 1
    }

    fn same_shape(&self, other: &Weights) -> bool {
        self.ln_gain.dim() == other.ln_gain.dim()
            && self.ln_bias.dim() == other.ln_bias.dim()
            && self.w1.dim() == other.w1.dim()
            && self.b1.dim() == other.b1.dim()
            && self.w2.dim() == other.w2.dim()
            && self.b2.dim() == other.b2.dim()
            && self.w_out.dim() == other.w_out.dim()
    }

    fn check_shape(&self, other: &Weights) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: other.param_count(),
            });
        }
        Ok(())
    }

    /// Flat views of every tensor in a fixed order; `b_out` is excluded.
    fn tensors(&self) -> [&[f64]; 7] {
        [
            self.ln_gain.as_slice().expect("contiguous"),
            self.ln_bias.as_slice().expect("contiguous"),
            self.w1.as_slice().expect("contiguous"),
            self.b1.as_slice().expect("contiguous"),
            self.w2.as_slice().expect("contiguous"),
            self.b2.as_slice().expect("contiguous"),
            self.w_out.as_slice().expect("contiguous"),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.ln_gain.as_slice_mut().expect("contiguous"),
            self.ln_bias.as_slice_mut().expect("contiguous"),
            self.w1.as_slice_mut().expect("contiguous"),
            self.b1.as_slice_mut().expect("contiguous"),
            self.w2.as_slice_mut().expect("contiguous"),
            self.b2.as_slice_mut().expect("contiguous"),
            self.w_out.as_slice_mut().expect("contiguous"),
        ]
    }

    /// All parameters flattened in a fixed order.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in self.tensors() {
            out.extend_from_slice(t);
        }
        out.push(self.b_out);
        out
    }

    /// Inverse of [`Weights::to_flat`] for a template of the same shape.
    pub fn from_flat(&self, flat: &[f64]) -> Result<Weights> {
        check_dims(self.param_count(), flat.len())?;
        let mut out = self.clone();
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        out.b_out = flat[offset];
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite())) && self.b_out.is_finite()
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self
            .tensors()
            .iter()
            .map(|t| t.iter().map(|x| x * x).sum::<f64>())
            .sum();
        (sq + self.b_out * self.b_out).sqrt()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, scale: f64, other: &Weights) -> Result<()> {
        self.check_shape(other)?;
        self.ln_gain.scaled_add(scale, &other.ln_gain);
        self.ln_bias.scaled_add(scale, &other.ln_bias);
        self.w1.scaled_add(scale, &other.w1);
        self.b1.scaled_add(scale, &other.b1);
        self.w2.scaled_add(scale, &other.w2);
        self.b2.scaled_add(scale, &other.b2);
        self.w_out.scaled_add(scale, &other.w_out);
        self.b_out += scale * other.b_out;
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
        self.b_out *= factor;
    }

    pub fn checksum(&self) -> String {
        let tail = [self.b_out];
        checksum_f64(self.tensors().into_iter().chain(std::iter::once(&tail[..])))
    }
}

/// Parameter count of the architecture for a `dim`-dimensional state.
pub fn param_count_for(dim: usize) -> usize {
    2 * dim + (HIDDEN * dim + HIDDEN) + (HIDDEN * HIDDEN + HIDDEN) + (HIDDEN + 1)
}

/// Cached intermediates of a batched forward pass, one row per state.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    xhat: Array2<f64>,
    g0: Array2<f64>,
    h1: Array2<f64>,
    g1: Array2<f64>,
    h2: Array2<f64>,
    g2: Array2<f64>,
    /// Pre-temperature logits.
    pub logits: Array1<f64>,
    /// Continue probabilities.
    pub probs: Vec<f64>,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.probs.len()
    }
}

/// Result of [`Controller::logprob_and_grad`].
#[derive(Clone, Debug)]
pub struct LogProbGrad {
    pub logprob: f64,
    pub grad: Weights,
    /// True when `p` had to be clamped before taking the log.
    pub clamped: bool,
}

/// Bernoulli log-probability of `action` with clamping.
pub fn bernoulli_logprob(p: f64, action: u8) -> (f64, bool) {
    let clamped_p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let lp = if action == 1 {
        clamped_p.ln()
    } else {
        (1.0 - clamped_p).ln()
    };
    (lp, clamped_p != p)
}

/// Bernoulli entropy in nats with the same clamping.
pub fn bernoulli_entropy(p: f64) -> f64 {
    let p = p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

/// Derivative of `log pi(action)` with respect to the pre-temperature logit.
pub fn logprob_logit_grad(p: f64, action: u8, temp: f64) -> f64 {
    (action as f64 - p) / temp
}

/// Derivative of the Bernoulli entropy with respect to the pre-temperature logit.
pub fn entropy_logit_grad(logit: f64, p: f64, temp: f64) -> f64 {
    -(logit / temp) * p * (1.0 - p) / temp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    temp: f64,
    activations: [Activation; 2],
    weights: Weights,
}

#[derive(Serialize, Deserialize)]
struct ControllerFile {
    schema_version: u32,
    dim: usize,
    temp: f64,
    activations: [Activation; 2],
    checksum: String,
    weights: Weights,
}

fn check_temp(temp: f64) -> Result<()> {
    if !(temp > 0.0 && temp.is_finite()) {
        return Err(Error::invalid("controller temperature must be positive"));
    }
    Ok(())
}

fn check_budget(count: usize) -> Result<()> {
    if count > PARAM_BUDGET {
        return Err(Error::ParameterBudget {
            count,
            limit: PARAM_BUDGET,
        });
    }
    Ok(())
}

impl Controller {
    /// GELU controller with Xavier-uniform weights, unit LayerNorm gain and zero biases.
    pub fn init(dim: usize, seed: u64, temp: f64) -> Result<Controller> {
        Controller::init_with(dim, seed, temp, [Activation::Gelu; 2])
    }

    pub fn init_with(
        dim: usize,
        seed: u64,
        temp: f64,
        activations: [Activation; 2],
    ) -> Result<Controller> {
        if dim == 0 {
            return Err(Error::invalid("controller input dimension must be positive"));
        }
        check_temp(temp)?;
        check_budget(param_count_for(dim))?;
        let mut rng = RngStream::new(seed, "controller");
        let mut xavier = |rows: usize, cols: usize, fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| limit * (2.0 * rng.uniform() - 1.0))
        };
        let w1 = xavier(HIDDEN, dim, dim, HIDDEN);
        let w2 = xavier(HIDDEN, HIDDEN, HIDDEN, HIDDEN);
        let w_out = xavier(1, HIDDEN, HIDDEN, 1).into_shape_with_order(HIDDEN).expect("row");
        let weights = Weights {
            ln_gain: Array1::ones(dim),
            ln_bias: Array1::zeros(dim),
            w1,
            b1: Array1::zeros(HIDDEN),
            w2,
            b2: Array1::zeros(HIDDEN),
            w_out,
            b_out: 0.0,
        };
        Ok(Controller {
            temp,
            activations,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.weights.dim()
    }

    pub fn temp(&self) -> f64 {
        self.temp
    }

    pub fn set_temp(&mut self, temp: f64) -> Result<()> {
        check_temp(temp)?;
        self.temp = temp;
        Ok(())
    }

    pub fn activations(&self) -> [Activation; 2] {
        self.activations
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    /// Replaces the weights; shapes must match and values must be finite.
    pub fn set_weights(&mut self, weights: Weights) -> Result<()> {
        self.weights.check_shape(&weights)?;
        if !weights.is_finite() {
            return Err(Error::NonFinite("controller weights"));
        }
        self.weights = weights;
        Ok(())
    }

    /// Re-asserts the parameter budget.
    pub fn check_budget(&self) -> Result<()> {
        check_budget(self.param_count())
    }

    pub fn checksum(&self) -> String {
        self.weights.checksum()
    }

    /// Stacks states into a matrix, checking each dimension.
    pub fn stack(&self, states: &[&Vector]) -> Result<Array2<f64>> {
        let d = self.dim();
        let mut m = Array2::zeros((states.len(), d));
        for (mut row, z) in m.rows_mut().into_iter().zip(states) {
            check_dims(d, z.dim())?;
            row.assign(&ndarray::ArrayView1::from(z.as_slice()));
        }
        Ok(m)
    }

    /// Batched forward pass over the rows of `zs`.
    pub fn forward_cached(&self, zs: ArrayView2<f64>) -> Result<ForwardCache> {
        check_dims(self.dim(), zs.ncols())?;
        let w = &self.weights;
        let d = self.dim() as f64;
        let mut xhat = zs.to_owned();
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|x| x - mean);
            let var = row.iter().map(|x| x * x).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|x| x * inv);
        }
        let g0 = &xhat * &w.ln_gain + &w.ln_bias;
        let h1 = g0.dot(&w.w1.t()) + &w.b1;
        let g1 = h1.mapv(|x| self.activations[0].apply(x));
        let h2 = g1.dot(&w.w2.t()) + &w.b2;
        let g2 = h2.mapv(|x| self.activations[1].apply(x));
        let logits = g2.dot(&w.w_out) + w.b_out;
        let probs: Vec<f64> = logits.iter().map(|l| sigmoid(l / self.temp)).collect();
        if probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("controller output"));
        }
        Ok(ForwardCache {
            xhat,
            g0,
            h1,
            g1,
            h2,
            g2,
            logits,
            probs,
        })
    }

    /// Gradient of `sum_r upstream[r] * logit_r` with respect to all parameters.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<Weights> {
        check_dims(cache.rows(), upstream.len())?;
        let w = &self.weights;
        let u = Array1::from(upstream.to_vec());

        let w_out = cache.g2.t().dot(&u);
        let b_out = u.sum();

        let mut dh2 = u
            .view()
            .insert_axis(Axis(1))
            .dot(&w.w_out.view().insert_axis(Axis(0)));
        Zip::from(&mut dh2)
            .and(&cache.h2)
            .for_each(|g, &x| *g *= self.activations[1].grad(x));
        let w2 = dh2.t().dot(&cache.g1);
        let b2 = dh2.sum_axis(Axis(0));

        let mut dh1 = dh2.dot(&w.w2);
        Zip::from(&mut dh1)
            .and(&cache.h1)
            .for_each(|g, &x| *g *= self.activations[0].grad(x));
        let w1 = dh1.t().dot(&cache.g0);
        let b1 = dh1.sum_axis(Axis(0));

        let dg0 = dh1.dot(&w.w1);
        let ln_gain = (&dg0 * &cache.xhat).sum_axis(Axis(0));
        let ln_bias = dg0.sum_axis(Axis(0));

        Ok(Weights {
            ln_gain,
            ln_bias,
            w1,
            b1,
            w2,
            b2,
            w_out,
            b_out,
        })
    }

    /// Pre-temperature logit for one state.
    pub fn logit(&self, z: &Vector) -> Result<f64> {
        let m = self.stack(&[z])?;
        Ok(self.forward_cached(m.view())?.logits[0])
    }

    /// Continue probability for one state.
    pub fn forward(&self, z: &Vector) -> Result<f64> {
        let m = self.stack(&[z])?;
        Ok(self.forward_cached(m.view())?.probs[0])
    }

    pub fn forward_batch(&self, states: &[&Vector]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let m = self.stack(states)?;
        Ok(self.forward_cached(m.view())?.probs)
    }

    pub fn logprob_and_grad(&self, z: &Vector, action: u8) -> Result<LogProbGrad> {
        if action > 1 {
            return Err(Error::invalid("action must be 0 or 1"));
        }
        let m = self.stack(&[z])?;
        let cache = self.forward_cached(m.view())?;
        let p = cache.probs[0];
        let (logprob, clamped) = bernoulli_logprob(p, action);
        let grad = self.backward(&cache, &[logprob_logit_grad(p, action, self.temp)])?;
        Ok(LogProbGrad {
            logprob,
            grad,
            clamped,
        })
    }

    pub fn entropy(&self, z: &Vector) -> Result<f64> {
        Ok(bernoulli_entropy(self.forward(z)?))
    }

    /// Gradient of the policy entropy at `z`.
    pub fn entropy_grad(&self, z: &Vector) -> Result<Weights> {
        let m = self.stack(&[z])?;
        let cache = self.forward_cached(m.view())?;
        let g = entropy_logit_grad(cache.logits[0], cache.probs[0], self.temp);
        self.backward(&cache, &[g])
    }

    pub fn save_json(&self) -> Result<String> {
        let file = ControllerFile {
            schema_version: CONTROLLER_SCHEMA_VERSION,
            dim: self.dim(),
            temp: self.temp,
            activations: self.activations,
            checksum: self.checksum(),
            weights: self.weights.clone(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn load_json(text: &str) -> Result<Controller> {
        let file: ControllerFile = serde_json::from_str(text)?;
        if file.schema_version != CONTROLLER_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                expected: CONTROLLER_SCHEMA_VERSION,
                found: file.schema_version,
            });
        }
        let template = Weights::zeros(file.dim);
        template.check_shape(&file.weights)?;
        let found = file.weights.checksum();
        if found != file.checksum {
            return Err(Error::ChecksumMismatch {
                expected: file.checksum,
                found,
            });
        }
        check_temp(file.temp)?;
        let controller = Controller {
            temp: file.temp,
            activations: file.activations,
            weights: file.weights,
        };
        controller.check_budget()?;
        Ok(controller)
    }
}
