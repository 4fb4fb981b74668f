use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters.
///
/// [`NetConfig::reference`] is the reference network: nine valid convolutions
/// that reduce a 36x36 patch to a 1x1x256 feature, followed by two
/// 3-layer classification heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Output channels of conv1..conv9. The last entry is the feature width.
    pub channels: Vec<usize>,
    /// Kernel sizes of conv1..conv9.
    pub kernels: Vec<usize>,
    pub input_channels: usize,
    /// Square training patch side.
    pub patch: usize,
    /// Hidden widths of fc1 and fc2; fc3 always emits 2 logits.
    pub head_hidden: Vec<usize>,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

/// Trainable parameter count of [`NetConfig::reference`].
pub const REFERENCE_TRAINABLE_PARAMS: usize = 8_879_748;

impl Default for NetConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl NetConfig {
    pub fn reference() -> Self {
        Self {
            channels: vec![32, 64, 64, 64, 128, 128, 256, 256, 256],
            kernels: vec![5, 5, 5, 5, 5, 5, 5, 5, 4],
            input_channels: 3,
            patch: 36,
            head_hidden: vec![128, 64],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Same layer structure with different conv widths (e.g. a narrow
    /// network for CPU-scale experiments).
    pub fn with_channels(channels: Vec<usize>) -> Self {
        Self { channels, ..Self::reference() }
    }

    /// A narrow variant of the reference network sized for single-core
    /// training on synthetic data.
    pub fn desk() -> Self {
        Self { channels: vec![8, 8, 16, 16, 16, 16, 32, 32, 64], head_hidden: vec![64, 32], ..Self::reference() }
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() != self.kernels.len() {
            return Err(Error::Config("channels and kernels must list the same number of conv layers".into()));
        }
        if self.channels.iter().chain(&self.kernels).any(|v| *v == 0) || self.input_channels == 0 {
            return Err(Error::Config("channel counts and kernel sizes must be positive".into()));
        }
        if self.head_hidden.len() != 2 || self.head_hidden.contains(&0) {
            return Err(Error::Config("head_hidden must list two positive widths".into()));
        }
        let shrink: usize = self.kernels.iter().map(|k| k - 1).sum();
        if self.patch != shrink + 1 {
            return Err(Error::Config(format!(
                "patch {} does not reduce to 1x1 through kernels {:?}",
                self.patch, self.kernels
            )));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("invalid batch-norm hyper-parameters".into()));
        }
        Ok(())
    }

    /// Horizontal growth of the feature map per extra input column.
    pub fn receptive_shrink(&self) -> usize {
        self.kernels.iter().map(|k| k - 1).sum()
    }

    /// `(layer name, [h, w, c])` after every conv layer for an `h x w` input.
    pub fn shape_chain(&self, h: usize, w: usize) -> Vec<(String, [usize; 3])> {
        let (mut h, mut w) = (h, w);
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, (c, k)) in self.channels.iter().zip(&self.kernels).enumerate() {
            h = h.saturating_sub(k - 1);
            w = w.saturating_sub(k - 1);
            out.push((format!("conv{}", i + 1), [h, w, *c]));
        }
        out
    }

    /// Closed-form trainable parameter count: conv weights and biases, the
    /// affine batch-norm parameters of every conv but the last, and both heads.
    pub fn expected_trainable_params(&self) -> usize {
        let mut c_in = self.input_channels;
        let mut tower = 0;
        for (i, (c, k)) in self.channels.iter().zip(&self.kernels).enumerate() {
            tower += c_in * c * k * k + c;
            if i + 1 < self.channels.len() {
                tower += 2 * c;
            }
            c_in = *c;
        }
        let f = self.feature_dim();
        let (h1, h2) = (self.head_hidden[0], self.head_hidden[1]);
        let head = |n_in: usize| n_in * h1 + h1 + h1 * h2 + h2 + h2 * 2 + 2;
        2 * tower + head(f) + head(2 * f)
    }
}
