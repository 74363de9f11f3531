use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Shallow: 11 attention layers.
    S,
    /// Deep: 22 attention layers.
    D,
    /// Any other depth, for desk-scale experiments.
    Custom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Global average pooling.
    Gap,
    /// Spatial-mixed aggregation.
    Smd,
    /// Pooled local features unfolded over the grid.
    Local,
}

/// Full architectural description of one branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub stem_channels: Vec<usize>,
    pub stem_strides: Vec<usize>,
    pub projection_dim: usize,
    pub head: HeadKind,
    #[serde(default = "default_smd_k")]
    pub smd_k: usize,
    #[serde(default = "default_local_pool")]
    pub local_pool_hw: (usize, usize),
    #[serde(default = "default_local_proj")]
    pub local_proj_dim: usize,
    #[serde(default)]
    pub classifier_classes: usize,
    pub input_hw: (usize, usize),
}

fn default_smd_k() -> usize {
    8
}

fn default_local_pool() -> (usize, usize) {
    (4, 16)
}

fn default_local_proj() -> usize {
    48
}

pub const STEM_CHANNELS: [usize; 6] = [64, 128, 128, 256, 256, 512];
pub const STEM_STRIDES: [usize; 6] = [2, 2, 1, 2, 1, 2];
pub const HIDDEN_DIM: usize = 384;
pub const HEADS: usize = 12;

impl ModelConfig {
    fn named(variant: Variant, depth: usize, input_hw: (usize, usize)) -> Self {
        Self {
            variant,
            depth,
            dim: HIDDEN_DIM,
            heads: HEADS,
            stem_channels: STEM_CHANNELS.to_vec(),
            stem_strides: STEM_STRIDES.to_vec(),
            projection_dim: HIDDEN_DIM,
            head: HeadKind::Gap,
            smd_k: default_smd_k(),
            local_pool_hw: default_local_pool(),
            local_proj_dim: default_local_proj(),
            classifier_classes: 0,
            input_hw,
        }
    }

    pub fn saig_s(input_hw: (usize, usize)) -> Self {
        Self::named(Variant::S, 11, input_hw)
    }

    pub fn saig_d(input_hw: (usize, usize)) -> Self {
        Self::named(Variant::D, 22, input_hw)
    }

    /// Small custom configuration with a reduced stem.
    pub fn desk(depth: usize, dim: usize, heads: usize, stem_channels: &[usize], input_hw: (usize, usize)) -> Self {
        Self {
            variant: Variant::Custom,
            depth,
            dim,
            heads,
            stem_channels: stem_channels.to_vec(),
            projection_dim: dim,
            ..Self::named(Variant::Custom, depth, input_hw)
        }
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }

    pub fn with_smd_k(mut self, k: usize) -> Self {
        self.smd_k = k;
        self
    }

    pub fn with_classes(mut self, classes: usize) -> Self {
        self.classifier_classes = classes;
        self
    }

    pub fn with_input_hw(mut self, hw: (usize, usize)) -> Self {
        self.input_hw = hw;
        self
    }

    /// Total spatial downsampling of the stem.
    pub fn stride_product(&self) -> usize {
        self.stem_strides.iter().product()
    }

    /// Token grid produced by the stem for `input_hw`.
    pub fn grid_hw(&self) -> (usize, usize) {
        let s = self.stride_product();
        (self.input_hw.0 / s, self.input_hw.1 / s)
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid_hw();
        h * w
    }

    /// Length of the descriptor emitted by the configured head.
    pub fn descriptor_dim(&self) -> usize {
        match self.head {
            HeadKind::Gap => self.dim,
            HeadKind::Smd => self.smd_k * self.dim,
            HeadKind::Local => self.local_pool_hw.0 * self.local_pool_hw.1 * self.local_proj_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.projection_dim != self.dim {
            return Err(Error::contract(format!(
                "projection_dim {} must equal dim {}",
                self.projection_dim, self.dim
            )));
        }
        if self.stem_channels.is_empty() || self.stem_channels.len() != self.stem_strides.len() {
            return Err(Error::contract("stem_channels and stem_strides must have equal, non-zero length"));
        }
        if self.stem_channels.contains(&0) || self.stem_strides.contains(&0) {
            return Err(Error::contract("stem channels and strides must be positive"));
        }
        let s = self.stride_product();
        let (h, w) = self.input_hw;
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::dim(format!(
                "input {h}x{w} not divisible by stem stride product {s}"
            )));
        }
        match self.variant {
            Variant::S if self.depth != 11 => {
                return Err(Error::contract("variant S has 11 attention layers"));
            }
            Variant::D if self.depth != 22 => {
                return Err(Error::contract("variant D has 22 attention layers"));
            }
            _ => {}
        }
        match self.head {
            HeadKind::Smd if self.smd_k == 0 => return Err(Error::contract("smd_k must be >= 1")),
            HeadKind::Local => {
                let (gh, gw) = self.grid_hw();
                let (ph, pw) = self.local_pool_hw;
                if ph == 0 || pw == 0 || gh % ph != 0 || gw % pw != 0 || self.local_proj_dim == 0 {
                    return Err(Error::dim(format!(
                        "token grid {gh}x{gw} not divisible by local pool {ph}x{pw}"
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_variants_validate() {
        ModelConfig::saig_s((224, 224)).validate().unwrap();
        ModelConfig::saig_d((128, 512)).validate().unwrap();
        assert_eq!(ModelConfig::saig_d((128, 512)).grid_hw(), (8, 32));
        assert_eq!(ModelConfig::saig_d((320, 320)).tokens(), 400);
    }

    #[test]
    fn rejects_indivisible_input() {
        let err = ModelConfig::saig_s((100, 224)).validate().unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn rejects_wrong_depth_for_variant() {
        let mut c = ModelConfig::saig_s((224, 224));
        c.depth = 12;
        assert!(c.validate().is_err());
    }

    #[test]
    fn descriptor_dims() {
        let c = ModelConfig::saig_d((128, 512));
        assert_eq!(c.descriptor_dim(), 384);
        assert_eq!(c.clone().with_head(HeadKind::Smd).descriptor_dim(), 3072);
        assert_eq!(c.with_head(HeadKind::Local).descriptor_dim(), 3072);
    }
}
