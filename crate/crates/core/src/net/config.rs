use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Side length of the square input images.
    pub input_size: usize,
    /// Total downsampling of the backbone; a power of two.
    pub backbone_stride: usize,
    /// Channels of the deepest backbone stage and of the encoder output.
    pub backbone_channels: usize,
    /// Output channels of each of the eight DirConv branches.
    pub dir_branch_channels: usize,
    /// Channels of the local relation features.
    pub metric_channels: usize,
    /// Bottleneck reduction of the gating MLP.
    pub gate_reduction: usize,
    pub use_dirconv: bool,
    pub use_gating: bool,
    /// Replace every nonlinearity (ReLU, gate and output sigmoids) by the
    /// identity and drop batch-norm. Only meaningful for gradient checks.
    #[serde(default)]
    pub linear: bool,
}

impl NetConfig {
    /// Shapes of the reference architecture: 256×256 inputs, stride-32
    /// backbone with 2048 channels, 8×256 DirConv branches, 1024 metric
    /// channels with reduction 16.
    pub fn paper() -> Self {
        Self {
            input_size: 256,
            backbone_stride: 32,
            backbone_channels: 2048,
            dir_branch_channels: 256,
            metric_channels: 1024,
            gate_reduction: 16,
            use_dirconv: true,
            use_gating: true,
            linear: false,
        }
    }

    /// Small configuration that trains on one CPU core.
    pub fn tiny() -> Self {
        Self {
            input_size: 64,
            backbone_stride: 8,
            backbone_channels: 64,
            dir_branch_channels: 8,
            metric_channels: 32,
            gate_reduction: 4,
            use_dirconv: true,
            use_gating: true,
            linear: false,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn with_ablation(mut self, use_dirconv: bool, use_gating: bool) -> Self {
        self.use_dirconv = use_dirconv;
        self.use_gating = use_gating;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.backbone_stride;
        if s < 2 || !s.is_power_of_two() {
            return Err(Error::Config(format!(
                "backbone_stride must be a power of two >= 2, got {s}"
            )));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(s) {
            return Err(Error::Config(format!(
                "input_size {} is not divisible by backbone_stride {s}",
                self.input_size
            )));
        }
        if self.backbone_channels >> self.num_stages() == 0 {
            return Err(Error::Config(format!(
                "backbone_channels {} too small for {} stages",
                self.backbone_channels,
                self.num_stages()
            )));
        }
        if self.use_dirconv {
            if !self.backbone_channels.is_multiple_of(8) {
                return Err(Error::Config(format!(
                    "backbone_channels {} is not divisible by 8",
                    self.backbone_channels
                )));
            }
            if 8 * self.dir_branch_channels != self.backbone_channels {
                return Err(Error::Config(format!(
                    "eight DirConv branches of {} channels do not join to {}",
                    self.dir_branch_channels, self.backbone_channels
                )));
            }
        }
        if self.metric_channels == 0
            || self.gate_reduction == 0
            || !self.metric_channels.is_multiple_of(self.gate_reduction)
        {
            return Err(Error::Config(format!(
                "gate_reduction {} must divide metric_channels {}",
                self.gate_reduction, self.metric_channels
            )));
        }
        Ok(())
    }

    /// Number of stride-2 backbone stages (and of decoder stages).
    pub fn num_stages(&self) -> usize {
        self.backbone_stride.trailing_zeros() as usize
    }

    /// Spatial side of the deepest feature map.
    pub fn feature_size(&self) -> usize {
        self.input_size / self.backbone_stride
    }

    /// Output channels of backbone stage `s` (0-based); doubles per stage up
    /// to `backbone_channels`.
    pub fn stage_channels(&self, s: usize) -> usize {
        self.backbone_channels >> (self.num_stages() - 1 - s)
    }

    /// Output channels of decoder stage `t` (0-based, coarse to fine).
    pub fn decoder_channels(&self, t: usize) -> usize {
        self.backbone_channels >> (t + 1)
    }

    /// Channels of the skip feature concatenated at decoder stage `t`: the
    /// query backbone stage at the same stride, or the query image itself at
    /// full resolution.
    pub fn skip_channels(&self, t: usize) -> usize {
        let n = self.num_stages();
        if t + 1 < n {
            self.stage_channels(n - 2 - t)
        } else {
            3
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        NetConfig::paper().validate().unwrap();
        NetConfig::tiny().validate().unwrap();
        assert_eq!(NetConfig::paper().feature_size(), 8);
        assert_eq!(NetConfig::tiny().feature_size(), 8);
        assert_eq!(NetConfig::tiny().num_stages(), 3);
    }

    #[test]
    fn stage_widths_double_to_backbone_channels() {
        let c = NetConfig::paper();
        let widths: Vec<_> = (0..5).map(|s| c.stage_channels(s)).collect();
        assert_eq!(widths, vec![128, 256, 512, 1024, 2048]);
        let t = NetConfig::tiny();
        assert_eq!((0..3).map(|s| t.stage_channels(s)).collect::<Vec<_>>(), vec![16, 32, 64]);
        assert_eq!((0..3).map(|s| t.skip_channels(s)).collect::<Vec<_>>(), vec![32, 16, 3]);
        assert_eq!((0..3).map(|s| t.decoder_channels(s)).collect::<Vec<_>>(), vec![32, 16, 8]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = NetConfig::tiny();
        c.input_size = 60;
        assert!(c.validate().is_err());
        let mut c = NetConfig::tiny();
        c.backbone_stride = 6;
        assert!(c.validate().is_err());
        let mut c = NetConfig::tiny();
        c.backbone_channels = 60;
        c.dir_branch_channels = 7;
        assert!(c.validate().is_err());
        let mut c = NetConfig::tiny();
        c.gate_reduction = 5;
        assert!(c.validate().is_err());
        // without DirConv the branch width is irrelevant
        let mut c = NetConfig::tiny().with_ablation(false, true);
        c.dir_branch_channels = 3;
        assert!(c.validate().is_ok());
        assert!(NetConfig::preset("huge").is_err());
    }
}
