//! Closed-form parameter and FLOP counts.
//!
//! FLOPs follow the profiler convention used for published vision backbones:
//! one multiply-accumulate counts as one FLOP. Normalization, softmax,
//! activations and residual additions are not counted.

use crate::aggregation::SMD_EXPANSION;
use crate::model::{HeadKind, ModelConfig};

/// Learnable scalars of one branch: stem convolutions (bias-free, followed
/// by batch norm), batch-norm affines, stem projection, position embedding,
/// attention layers, final norm, head, and optional classifier.
pub fn param_count(config: &ModelConfig) -> u64 {
    let mut total = 0u64;
    let mut c_in = 3u64;
    for &c in &config.stem_channels {
        let c = c as u64;
        total += c * c_in * 9 + 2 * c;
        c_in = c;
    }
    let d = config.dim as u64;
    total += c_in * config.projection_dim as u64 + config.projection_dim as u64;
    let p = config.tokens() as u64;
    total += p * d;
    let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d);
    total += config.depth as u64 * per_layer;
    total += 2 * d;
    total += match config.head {
        HeadKind::Gap => 0,
        HeadKind::Smd => {
            let wide = SMD_EXPANSION as u64 * p;
            let k = config.smd_k as u64;
            (p * wide + wide) + (wide * p + p) + (p * k + k)
        }
        HeadKind::Local => {
            let proj = config.local_proj_dim as u64;
            d * proj + proj
        }
    };
    let classes = config.classifier_classes as u64;
    if classes > 0 {
        total += d * classes + classes;
    }
    total
}

/// Two independent branches at their own resolutions.
pub fn siamese_param_count(config: &ModelConfig, ground_hw: (usize, usize), aerial_hw: (usize, usize)) -> u64 {
    param_count(&config.clone().with_input_hw(ground_hw)) + param_count(&config.clone().with_input_hw(aerial_hw))
}

/// Per-stage breakdown of a single-branch forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub stem_conv: u64,
    pub stem_proj: u64,
    pub attention_layers: u64,
    pub head: u64,
    pub classifier: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.stem_conv + self.stem_proj + self.attention_layers + self.head + self.classifier
    }
}

pub fn flop_breakdown(config: &ModelConfig) -> FlopBreakdown {
    let (mut h, mut w) = config.input_hw;
    let mut c_in = 3u64;
    let mut stem_conv = 0u64;
    for (&c, &s) in config.stem_channels.iter().zip(&config.stem_strides) {
        h = (h + 2 - 3) / s + 1;
        w = (w + 2 - 3) / s + 1;
        stem_conv += (h * w) as u64 * c as u64 * c_in * 9;
        c_in = c as u64;
    }
    let p = (h * w) as u64;
    let d = config.dim as u64;
    let stem_proj = p * c_in * config.projection_dim as u64;
    // qkv and output projections, then QK^T and AV
    let per_layer = p * d * 3 * d + p * d * d + 2 * p * p * d;
    let attention_layers = config.depth as u64 * per_layer;
    let head = match config.head {
        HeadKind::Gap => 0,
        HeadKind::Smd => {
            let wide = SMD_EXPANSION as u64 * p;
            d * (p * wide + wide * p + p * config.smd_k as u64)
        }
        HeadKind::Local => {
            let (ph, pw) = config.local_pool_hw;
            (ph * pw) as u64 * d * config.local_proj_dim as u64
        }
    };
    let classifier = d * config.classifier_classes as u64;
    FlopBreakdown {
        stem_conv,
        stem_proj,
        attention_layers,
        head,
        classifier,
    }
}

/// Single-branch forward FLOPs at `config.input_hw`.
pub fn flop_count(config: &ModelConfig) -> u64 {
    flop_breakdown(config).total()
}

/// Both branches, each at its own resolution.
pub fn siamese_flop_count(config: &ModelConfig, ground_hw: (usize, usize), aerial_hw: (usize, usize)) -> u64 {
    flop_count(&config.clone().with_input_hw(ground_hw)) + flop_count(&config.clone().with_input_hw(aerial_hw))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stem_term_scales_by_four_when_extents_double() {
        let small = flop_breakdown(&ModelConfig::saig_s((128, 128)));
        let big = flop_breakdown(&ModelConfig::saig_s((256, 256)));
        assert_eq!(big.stem_conv, 4 * small.stem_conv);
        assert_eq!(big.stem_proj, 4 * small.stem_proj);
        assert!(big.attention_layers > 4 * small.attention_layers);
    }

    #[test]
    fn classifier_adds_affine_params() {
        let base = ModelConfig::saig_s((224, 224));
        assert_eq!(
            param_count(&base.clone().with_classes(1000)) - param_count(&base),
            384 * 1000 + 1000
        );
    }
}
