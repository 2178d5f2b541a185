use serde::{Deserialize, Serialize};

use super::NnError;

/// One convolution stage: `out_channels` filters of `kernel_size`², stride 1, no padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
}

/// Architecture of the shared network: a stack of conv+ReLU stages, global
/// average pooling and one dense head per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// (channels, height, width)
    pub input_shape: (usize, usize, usize),
    pub conv_layers: Vec<ConvSpec>,
    /// Hidden units inside each task head; 0 maps pooled features straight to logits.
    #[serde(default)]
    pub head_width: usize,
    /// Subtracted from every pixel before the first conv, centring [0, 1] images.
    #[serde(default = "default_input_center")]
    pub input_center: f64,
    pub seed: u64,
}

fn default_input_center() -> f64 {
    0.5
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            input_shape: (3, 16, 16),
            conv_layers: vec![
                ConvSpec { out_channels: 8, kernel_size: 3 },
                ConvSpec { out_channels: 16, kernel_size: 3 },
            ],
            head_width: 0,
            input_center: default_input_center(),
            seed: 0,
        }
    }
}

/// Resolved tensor shapes of one conv stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
}

impl LayerGeometry {
    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.plane()
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let (c, h, w) = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(NnError::Config("input shape must be positive".into()));
        }
        if !self.input_center.is_finite() {
            return Err(NnError::Config("input_center must be finite".into()));
        }
        if self.conv_layers.is_empty() {
            return Err(NnError::Config("at least one conv layer is required".into()));
        }
        let (mut h, mut w) = (h, w);
        for (i, layer) in self.conv_layers.iter().enumerate() {
            if layer.out_channels < 2 {
                return Err(NnError::Config(format!(
                    "conv layer {i}: out_channels must be >= 2, got {}",
                    layer.out_channels
                )));
            }
            if layer.kernel_size == 0 || layer.kernel_size % 2 == 0 {
                return Err(NnError::Config(format!(
                    "conv layer {i}: kernel size must be a positive odd integer, got {}",
                    layer.kernel_size
                )));
            }
            if h < layer.kernel_size + 1 || w < layer.kernel_size + 1 {
                return Err(NnError::Config(format!(
                    "conv layer {i}: output would be smaller than 2 pixels in some dimension"
                )));
            }
            h = h + 1 - layer.kernel_size;
            w = w + 1 - layer.kernel_size;
            if h * w < 2 {
                return Err(NnError::Config(format!("conv layer {i}: spatial extent < 2")));
            }
        }
        Ok(())
    }

    /// Shapes of every conv stage. Assumes a validated config.
    pub fn geometry(&self) -> Vec<LayerGeometry> {
        let (mut c, mut h, mut w) = self.input_shape;
        self.conv_layers
            .iter()
            .map(|l| {
                let g = LayerGeometry {
                    in_channels: c,
                    in_h: h,
                    in_w: w,
                    out_channels: l.out_channels,
                    out_h: h + 1 - l.kernel_size,
                    out_w: w + 1 - l.kernel_size,
                    kernel: l.kernel_size,
                };
                c = g.out_channels;
                h = g.out_h;
                w = g.out_w;
                g
            })
            .collect()
    }

    pub fn input_len(&self) -> usize {
        let (c, h, w) = self.input_shape;
        c * h * w
    }

    /// Width of the pooled feature vector fed to the heads.
    pub fn feature_len(&self) -> usize {
        self.conv_layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn channels_per_layer(&self) -> Vec<usize> {
        self.conv_layers.iter().map(|l| l.out_channels).collect()
    }

    pub fn num_units(&self) -> usize {
        self.conv_layers.iter().map(|l| l.out_channels).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_shrinks_by_kernel() {
        let cfg = NetworkConfig::default();
        cfg.validate().unwrap();
        let g = cfg.geometry();
        assert_eq!((g[0].out_h, g[0].out_w), (14, 14));
        assert_eq!((g[1].out_h, g[1].out_w), (12, 12));
        assert_eq!(cfg.num_units(), 24);
        assert_eq!(cfg.feature_len(), 16);
    }

    #[test]
    fn rejects_bad_layers() {
        let mut cfg = NetworkConfig::default();
        cfg.conv_layers[0].out_channels = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = NetworkConfig::default();
        cfg.conv_layers[1].kernel_size = 4;
        assert!(cfg.validate().is_err());

        let mut cfg = NetworkConfig::default();
        cfg.input_shape = (3, 4, 4);
        assert!(cfg.validate().is_err());

        let mut cfg = NetworkConfig::default();
        cfg.conv_layers.clear();
        assert!(cfg.validate().is_err());
    }
}
