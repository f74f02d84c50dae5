use serde::{Deserialize, Serialize};

use super::ResnetError;

/// Residual branch layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    /// Two 3×3 convolutions.
    Basic,
    /// 1×1 reduce, 3×3, 1×1 expand (×4).
    Bottleneck,
}

impl BlockKind {
    pub fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }

    pub fn convs_per_block(self) -> usize {
        match self {
            BlockKind::Basic => 2,
            BlockKind::Bottleneck => 3,
        }
    }
}

pub const STANDARD_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const DEFAULT_RESOLUTION: usize = 224;

/// Shape of a residual network: block kind, per-stage block counts and
/// widths, head size and expected input resolution.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Named depth (34, 50, 101, 152) or `None` for a custom layout.
    pub variant: Option<u32>,
    pub block: BlockKind,
    pub stage_blocks: [usize; 4],
    /// Base widths of stages 2–5; the stem has `widths[0]` channels.
    pub widths: [usize; 4],
    pub num_classes: usize,
    pub input_channels: usize,
    pub resolution: usize,
}

impl NetworkConfig {
    /// One of the four standard depths at 224×224×3.
    pub fn variant(depth: u32, num_classes: usize) -> Result<Self, ResnetError> {
        let (block, stage_blocks) = match depth {
            34 => (BlockKind::Basic, [3, 4, 6, 3]),
            50 => (BlockKind::Bottleneck, [3, 4, 6, 3]),
            101 => (BlockKind::Bottleneck, [3, 4, 23, 3]),
            152 => (BlockKind::Bottleneck, [3, 8, 36, 3]),
            other => return Err(ResnetError::UnknownVariant(other)),
        };
        let config = NetworkConfig {
            variant: Some(depth),
            block,
            stage_blocks,
            widths: STANDARD_WIDTHS,
            num_classes,
            input_channels: 3,
            resolution: DEFAULT_RESOLUTION,
        };
        config.validate()?;
        Ok(config)
    }

    /// A non-standard layout, e.g. a tiny network for desk-scale experiments.
    pub fn custom(
        block: BlockKind,
        stage_blocks: [usize; 4],
        widths: [usize; 4],
        num_classes: usize,
        resolution: usize,
    ) -> Result<Self, ResnetError> {
        let config = NetworkConfig {
            variant: None,
            block,
            stage_blocks,
            widths,
            num_classes,
            input_channels: 3,
            resolution,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_resolution(mut self, resolution: usize) -> Result<Self, ResnetError> {
        self.resolution = resolution;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), ResnetError> {
        if self.num_classes < 2 {
            return Err(ResnetError::TooFewClasses(self.num_classes));
        }
        if self.stage_blocks.contains(&0) || self.widths.contains(&0) || self.input_channels == 0 {
            return Err(ResnetError::InvalidConfig(
                "stage block counts, widths and input channels must be positive".into(),
            ));
        }
        // Stem (÷2) and pool (÷2) then three stride-2 stages: at least 1×1 at the end.
        if self.resolution < 32 {
            return Err(ResnetError::InvalidConfig(format!(
                "resolution {} is below the 32-pixel minimum",
                self.resolution
            )));
        }
        if let Some(depth) = self.variant {
            if self.weight_layer_count() != depth as usize {
                return Err(ResnetError::InvalidConfig(format!(
                    "layout has {} weight layers but is labelled {depth}",
                    self.weight_layer_count()
                )));
            }
        }
        Ok(())
    }

    /// Stem conv + branch convs + head; projection shortcuts are not counted.
    pub fn weight_layer_count(&self) -> usize {
        2 + self.stage_blocks.iter().sum::<usize>() * self.block.convs_per_block()
    }

    /// Channel width entering the pooling layer.
    pub fn feature_width(&self) -> usize {
        self.widths[3] * self.block.expansion()
    }

    /// Spatial extent after the stem conv and after each of stages 2–5.
    pub fn stage_extents(&self) -> [usize; 5] {
        let stem = (self.resolution + 2 * 3 - 7) / 2 + 1;
        let pooled = (stem + 2 - 3) / 2 + 1;
        let s3 = (pooled - 1) / 2 + 1;
        let s4 = (s3 - 1) / 2 + 1;
        let s5 = (s4 - 1) / 2 + 1;
        [stem, pooled, s3, s4, s5]
    }

    pub fn label(&self) -> String {
        match self.variant {
            Some(d) => format!("resnet{d}"),
            None => format!(
                "custom-{:?}-{}",
                self.block,
                self.stage_blocks
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>()
                    .join("_")
            )
            .to_lowercase(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_depths_count_their_layers() {
        for depth in [34, 50, 101, 152] {
            let c = NetworkConfig::variant(depth, 2).unwrap();
            assert_eq!(c.weight_layer_count(), depth as usize);
        }
    }

    #[test]
    fn unknown_depth_and_single_class_rejected() {
        assert!(matches!(
            NetworkConfig::variant(18, 2),
            Err(ResnetError::UnknownVariant(18))
        ));
        assert!(matches!(
            NetworkConfig::variant(50, 1),
            Err(ResnetError::TooFewClasses(1))
        ));
    }

    #[test]
    fn extents_at_224() {
        let c = NetworkConfig::variant(50, 2).unwrap();
        assert_eq!(c.stage_extents(), [112, 56, 28, 14, 7]);
        assert_eq!(c.feature_width(), 2048);
        assert_eq!(NetworkConfig::variant(34, 2).unwrap().feature_width(), 512);
    }
}
