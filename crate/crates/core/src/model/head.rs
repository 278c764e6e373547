//! The two-layer feed-forward classification head.
//!
//! `linear(input -> hidden) -> ReLU -> linear(hidden -> output)` followed by
//! softmax (multi-class) or sigmoid (multi-label, independent labels).

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden width of the classification head.
pub const DEFAULT_HIDDEN_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Softmax,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub activation: OutputActivation,
}

impl HeadConfig {
    /// Standard head: hidden width 1024.
    pub fn new(input_dim: usize, output_dim: usize, activation: OutputActivation) -> Self {
        HeadConfig { input_dim, hidden_dim: DEFAULT_HIDDEN_DIM, output_dim, activation }
    }

    pub fn with_hidden_dim(mut self, hidden_dim: usize) -> Self {
        self.hidden_dim = hidden_dim;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.output_dim == 0 {
            return Err(Error::InvalidDimension(format!(
                "head dimensions must be >= 1, got {} -> {} -> {}",
                self.input_dim, self.hidden_dim, self.output_dim
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.input_dim * self.hidden_dim
            + self.hidden_dim
            + self.hidden_dim * self.output_dim
            + self.output_dim
    }
}

/// Head weights. Layout of the flat parameter vector is
/// `[w1 row-major, b1, w2 row-major, b2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    config: HeadConfig,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

/// Intermediate activations kept for the backward pass.
pub struct HeadForward {
    pub probabilities: Array2<f64>,
    hidden_pre: Array2<f64>,
    hidden: Array2<f64>,
}

/// Gradients from one backward pass.
pub struct HeadGradient {
    /// Flat gradient, same layout as [`Head::parameters`].
    pub params: Vec<f64>,
    /// d(loss)/d(input features), for fine-tuning the backbone underneath.
    pub input: Array2<f64>,
}

fn uniform_fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = (6.0 / rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

impl Head {
    /// Builds a head with fan-in-scaled uniform weights and zero biases,
    /// deterministic per seed.
    pub fn build(config: HeadConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = uniform_fan_in(&mut rng, config.input_dim, config.hidden_dim);
        let w2 = uniform_fan_in(&mut rng, config.hidden_dim, config.output_dim);
        Ok(Head {
            b1: Array1::zeros(config.hidden_dim),
            b2: Array1::zeros(config.output_dim),
            config,
            w1,
            w2,
        })
    }

    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out
    }

    pub fn set_parameters(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} head parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let c = &self.config;
        let mut offset = 0;
        let mut take = |n: usize| {
            let slice = &params[offset..offset + n];
            offset += n;
            slice.to_vec()
        };
        self.w1 = Array2::from_shape_vec((c.input_dim, c.hidden_dim), take(c.input_dim * c.hidden_dim))
            .expect("sizes match");
        self.b1 = Array1::from_vec(take(c.hidden_dim));
        self.w2 = Array2::from_shape_vec((c.hidden_dim, c.output_dim), take(c.hidden_dim * c.output_dim))
            .expect("sizes match");
        self.b2 = Array1::from_vec(take(c.output_dim));
        Ok(())
    }

    /// Forward pass over a feature batch (rows are samples).
    pub fn forward(&self, features: &Array2<f64>) -> Result<HeadForward> {
        if features.ncols() != self.config.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "feature width {} does not match head input {}",
                features.ncols(),
                self.config.input_dim
            )));
        }
        let hidden_pre = features.dot(&self.w1) + &self.b1;
        let hidden = hidden_pre.mapv(|v| v.max(0.0));
        let logits = hidden.dot(&self.w2) + &self.b2;
        let probabilities = match self.config.activation {
            OutputActivation::Softmax => softmax_rows(&logits),
            OutputActivation::Sigmoid => logits.mapv(sigmoid),
        };
        Ok(HeadForward { probabilities, hidden_pre, hidden })
    }

    /// Backward pass given `d(loss)/d(logits)`.
    pub fn backward(
        &self,
        features: &Array2<f64>,
        forward: &HeadForward,
        grad_logits: &Array2<f64>,
    ) -> HeadGradient {
        let dw2 = forward.hidden.t().dot(grad_logits);
        let db2 = grad_logits.sum_axis(Axis(0));
        let dhidden = grad_logits.dot(&self.w2.t());
        let relu_mask = forward.hidden_pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let dpre = dhidden * &relu_mask;
        let dw1 = features.t().dot(&dpre);
        let db1 = dpre.sum_axis(Axis(0));
        let input = dpre.dot(&self.w1.t());

        let mut params = Vec::with_capacity(self.param_count());
        params.extend(dw1.iter());
        params.extend(db1.iter());
        params.extend(dw2.iter());
        params.extend(db2.iter());
        HeadGradient { params, input }
    }
}

pub(crate) fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn param_count_matches_hand_arithmetic() {
        let config = HeadConfig::new(2048, 12, OutputActivation::Softmax);
        assert_eq!(config.hidden_dim, 1024);
        assert_eq!(config.param_count(), 2_110_476);
    }

    #[test]
    fn tagging_head_output_layer_shape() {
        let config = HeadConfig::new(1280, 1500, OutputActivation::Sigmoid);
        let head = Head::build(config, 0).unwrap();
        assert_eq!(head.w2.dim(), (1024, 1500));
    }

    #[test]
    fn equal_seeds_build_identical_heads() {
        let config = HeadConfig::new(16, 4, OutputActivation::Softmax).with_hidden_dim(8);
        let a = Head::build(config.clone(), 42).unwrap();
        let b = Head::build(config.clone(), 42).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        let c = Head::build(config, 43).unwrap();
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let config = HeadConfig::new(0, 4, OutputActivation::Softmax);
        assert!(Head::build(config, 0).is_err());
    }

    #[test]
    fn zero_weight_softmax_head_is_uniform() {
        let config = HeadConfig::new(3, 12, OutputActivation::Softmax).with_hidden_dim(5);
        let mut head = Head::build(config.clone(), 0).unwrap();
        head.set_parameters(&vec![0.0; config.param_count()]).unwrap();
        let features = array![[0.3, -0.1, 0.9]];
        let fwd = head.forward(&features).unwrap();
        for &p in fwd.probabilities.row(0) {
            assert_abs_diff_eq!(p, 1.0 / 12.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_and_sigmoid_closed_forms() {
        let logits = array![[1.0, 0.0]];
        let probs = softmax_rows(&logits);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(probs[[0, 0]], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(probs[[0, 1]], 1.0 / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(probs[[0, 0]], 0.7311, epsilon = 1e-4);
        assert_abs_diff_eq!(probs[[0, 1]], 0.2689, epsilon = 1e-4);
        assert_abs_diff_eq!(sigmoid(0.0), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_keep_argmax() {
        let logits = array![[3.0, -2.0, 0.5, 11.0], [-40.0, 2.0, 2.0, 1.9]];
        let probs = softmax_rows(&logits);
        for (l_row, p_row) in logits.rows().into_iter().zip(probs.rows()) {
            let sum: f64 = p_row.sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-6);
            let argmax_l = l_row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
                if v > acc.1 { (i, v) } else { acc }
            });
            let argmax_p = p_row.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
                if v > acc.1 { (i, v) } else { acc }
            });
            assert_eq!(argmax_l.0, argmax_p.0);
        }
    }

    #[test]
    fn round_trip_parameters() {
        let config = HeadConfig::new(6, 3, OutputActivation::Sigmoid).with_hidden_dim(4);
        let head = Head::build(config.clone(), 9).unwrap();
        let mut other = Head::build(config, 1).unwrap();
        other.set_parameters(&head.parameters()).unwrap();
        assert_eq!(head, other);
    }
}
