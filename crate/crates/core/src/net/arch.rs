use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Branch widths of one inception block.
///
/// Branches: 1x1; 1x1 -> 3x3; 1x1 -> 5x5; 3x3 max-pool -> 1x1. Every
/// convolution is followed by batch norm and ReLU, the branch outputs are
/// concatenated and a 1x1 conv + batch norm shortcut is added before the
/// final ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionSpec {
    pub branch1: usize,
    pub branch3_reduce: usize,
    pub branch3: usize,
    pub branch5_reduce: usize,
    pub branch5: usize,
    pub pool_proj: usize,
}

impl InceptionSpec {
    pub fn out_channels(&self) -> usize {
        self.branch1 + self.branch3 + self.branch5 + self.pool_proj
    }
}

/// Layer list of the patch classifier. Each stage is an inception block
/// with residual shortcut followed by a 2x2 max-pool; after the last stage
/// come global average pooling, the inner-product layer and softmax.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_channels: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stages: Vec<InceptionSpec>,
    pub num_classes: usize,
}

impl Architecture {
    /// 3x3 stem (32 ch), inception stages of 64 and 128 channels.
    pub fn patch_net(num_classes: usize) -> Self {
        Architecture {
            input_channels: 3,
            input_size: 64,
            stem_channels: 32,
            stem_kernel: 3,
            stages: vec![
                InceptionSpec {
                    branch1: 16,
                    branch3_reduce: 8,
                    branch3: 24,
                    branch5_reduce: 4,
                    branch5: 8,
                    pool_proj: 16,
                },
                InceptionSpec {
                    branch1: 32,
                    branch3_reduce: 16,
                    branch3: 48,
                    branch5_reduce: 8,
                    branch5: 16,
                    pool_proj: 32,
                },
            ],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 scanner classes, got {}",
                self.num_classes
            )));
        }
        if self.stem_kernel % 2 == 0 {
            return Err(Error::Parameter("stem kernel must be odd".into()));
        }
        let min_size = 1usize << self.stages.len();
        if self.input_size < min_size || self.input_size % min_size != 0 {
            return Err(Error::Parameter(format!(
                "input size {} is not divisible by 2^{} pooling",
                self.input_size,
                self.stages.len()
            )));
        }
        let zero = |s: &InceptionSpec| {
            [s.branch1, s.branch3_reduce, s.branch3, s.branch5_reduce, s.branch5, s.pool_proj]
                .contains(&0)
        };
        if self.input_channels == 0 || self.stem_channels == 0 || self.stages.iter().any(zero) {
            return Err(Error::Parameter("every layer needs at least one channel".into()));
        }
        Ok(())
    }

    /// Channel count entering the inner-product layer.
    pub fn feature_channels(&self) -> usize {
        self.stages
            .last()
            .map(|s| s.out_channels())
            .unwrap_or(self.stem_channels)
    }

    /// Learnable parameter count (conv kernels, batch-norm scale and shift,
    /// inner-product weights and bias). Running statistics are not counted.
    pub fn parameter_count(&self) -> usize {
        let conv_bn = |cin: usize, cout: usize, k: usize| cin * cout * k * k + 2 * cout;
        let mut total = conv_bn(self.input_channels, self.stem_channels, self.stem_kernel);
        let mut cin = self.stem_channels;
        for s in &self.stages {
            total += conv_bn(cin, s.branch1, 1)
                + conv_bn(cin, s.branch3_reduce, 1)
                + conv_bn(s.branch3_reduce, s.branch3, 3)
                + conv_bn(cin, s.branch5_reduce, 1)
                + conv_bn(s.branch5_reduce, s.branch5, 5)
                + conv_bn(cin, s.pool_proj, 1)
                + conv_bn(cin, s.out_channels(), 1);
            cin = s.out_channels();
        }
        total + cin * self.num_classes + self.num_classes
    }
}
