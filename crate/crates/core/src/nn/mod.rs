//! Framework-free tensors and differentiable layers.

mod checkpoint;
pub mod layers;
pub mod tensor;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_FORMAT};
pub use layers::{
    batchnorm, batchnorm_backward, batchnorm_forward, conv2d, conv2d_backward, dense, dense_backward, dropout, elu,
    elu_grad, relu, relu_grad, update_running_stats, BatchNormCache, BN_EPSILON, BN_MOMENTUM,
};
pub use tensor::{concat_channels, global_avg_pool, global_avg_pool_backward, split_channels, Tensor3};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d {
        filter: usize,
        dilation: usize,
        in_channels: usize,
        out_channels: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerKind {
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerKind::Conv2d { filter, in_channels, out_channels, .. } => {
                filter * filter * in_channels * out_channels
            }
            LayerKind::BatchNorm { channels } => channels,
            LayerKind::Dense { inputs, outputs } => inputs * outputs,
        }
    }

    pub fn bias_count(&self) -> usize {
        match *self {
            LayerKind::Conv2d { out_channels, .. } => out_channels,
            LayerKind::BatchNorm { channels } => channels,
            LayerKind::Dense { outputs, .. } => outputs,
        }
    }

    /// Trainable parameters; batch-norm running statistics are not counted.
    pub fn param_count(&self) -> usize {
        self.weight_count() + self.bias_count()
    }

    /// Fan-in used by weight initialization.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerKind::Conv2d { filter, in_channels, .. } => filter * filter * in_channels,
            LayerKind::BatchNorm { .. } => 1,
            LayerKind::Dense { inputs, .. } => inputs,
        }
    }
}

/// Closed-form trainable parameter count of a layer sequence.
pub fn count_params(layers: &[LayerKind]) -> usize {
    layers.iter().map(LayerKind::param_count).sum()
}

/// One layer's parameters. For batch norm, `weights` holds the scale and
/// `biases` the shift; running statistics are kept alongside.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub running_mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub running_var: Vec<f64>,
}

impl LayerParams {
    /// Zero weights and biases; batch norm starts as the identity (scale 1,
    /// running mean 0, running variance 1).
    pub fn new(kind: LayerKind) -> Self {
        let (weights, running_mean, running_var) = match kind {
            LayerKind::BatchNorm { channels } => (vec![1.0; channels], vec![0.0; channels], vec![1.0; channels]),
            _ => (vec![0.0; kind.weight_count()], Vec::new(), Vec::new()),
        };
        Self {
            kind,
            weights,
            biases: vec![0.0; kind.bias_count()],
            running_mean,
            running_var,
        }
    }

    pub fn is_consistent(&self) -> bool {
        let stats = match self.kind {
            LayerKind::BatchNorm { channels } => {
                self.running_mean.len() == channels && self.running_var.len() == channels
            }
            _ => self.running_mean.is_empty() && self.running_var.is_empty(),
        };
        stats
            && self.weights.len() == self.kind.weight_count()
            && self.biases.len() == self.kind.bias_count()
            && self.weights.iter().chain(&self.biases).all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

/// Gradients mirroring a [`ParamStore`] layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGrads>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            layers: store
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weights: vec![0.0; l.weights.len()],
                    biases: vec![0.0; l.biases.len()],
                })
                .collect(),
        }
    }

    /// Adds `other` element-wise.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.iter_mut().zip(&b.weights).for_each(|(x, y)| *x += y);
            a.biases.iter_mut().zip(&b.biases).for_each(|(x, y)| *x += y);
        }
    }

    /// Same ordering as [`ParamStore::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }
}

/// The flat parameter vector of a network, organized per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    pub layers: Vec<LayerParams>,
}

impl ParamStore {
    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }

    pub fn total(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// Trainable values, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.biases);
        }
        out
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn assign(&mut self, flat: &[f64]) -> crate::Result<()> {
        if flat.len() != self.total() {
            return Err(crate::Error::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.total()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = l.biases.len();
            l.biases.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }
}
