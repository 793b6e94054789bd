//! Reference architectures: the three sensor families and a small synthetic one.

use serde::{Deserialize, Serialize};

use super::{ChannelGrowth, ContextNetConfig, DiscriminatorConfig, EncoderConfig, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchPreset {
    Synthetic,
    Har,
    Ssc,
    Mfd,
}

impl ArchPreset {
    pub const ALL: [ArchPreset; 4] = [ArchPreset::Synthetic, ArchPreset::Har, ArchPreset::Ssc, ArchPreset::Mfd];

    /// Window length the architecture is designed for.
    pub fn input_length(self) -> usize {
        match self {
            ArchPreset::Synthetic => 512,
            ArchPreset::Har => 128,
            ArchPreset::Ssc => 3000,
            ArchPreset::Mfd => 5120,
        }
    }

    /// Model for `channels` inputs and `classes` outputs.
    pub fn model(self, channels: usize, classes: usize) -> ModelConfig {
        // (layers, c, growth, k, s, disc hidden, disc layers, heads, ff, gru hidden)
        let (layers, c, growth, k, s, hidden, d_layers, heads, ff, gru) = match self {
            ArchPreset::Synthetic => (3, 8, ChannelGrowth::Doubling, 8, 3, 16, 2, 2, 32, 32),
            ArchPreset::Har => (3, 16, ChannelGrowth::Constant, 8, 2, 16, 8, 2, 64, 16),
            ArchPreset::Ssc => (3, 32, ChannelGrowth::Doubling, 25, 3, 64, 8, 4, 512, 64),
            ArchPreset::Mfd => (5, 8, ChannelGrowth::Constant, 32, 2, 8, 4, 4, 128, 64),
        };
        let encoder = EncoderConfig {
            input_channels: channels,
            num_layers: layers,
            channels: c,
            growth,
            widths: None,
            kernel_size: k,
            stride: s,
            padding: None,
        };
        let width = encoder.output_channels();
        ModelConfig {
            input_length: self.input_length(),
            num_classes: classes,
            encoder,
            context: ContextNetConfig {
                input_dim: width,
                hidden_dim: gru,
                num_layers: 1,
            },
            discriminator: DiscriminatorConfig {
                input_channels: width,
                hidden_dim: hidden,
                num_layers: d_layers,
                num_heads: heads,
                feedforward_dim: ff,
            },
            horizon: None,
        }
    }

    /// Channels and classes of the reference data for this family.
    pub fn default_io(self) -> (usize, usize) {
        match self {
            ArchPreset::Synthetic => (1, 3),
            ArchPreset::Har => (9, 6),
            ArchPreset::Ssc => (1, 5),
            ArchPreset::Mfd => (1, 3),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for p in ArchPreset::ALL {
            let (m, c) = p.default_io();
            let cfg = p.model(m, c);
            cfg.validate().unwrap();
            assert!(cfg.feature_len().unwrap() >= 2);
        }
        assert_eq!(ArchPreset::Synthetic.model(1, 3).feature_len().unwrap(), 20);
        assert_eq!(ArchPreset::Ssc.model(1, 5).context.input_dim, 128);
    }
}
