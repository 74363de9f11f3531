use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{checkpoint, Branch, ModelConfig};
use crate::numerics::{Scalar, Tensor};

/// Per-branch configurations; the branches differ only in input size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiameseConfig {
    pub ground: ModelConfig,
    pub aerial: ModelConfig,
}

impl SiameseConfig {
    pub fn new(base: &ModelConfig, ground_hw: (usize, usize), aerial_hw: (usize, usize)) -> Self {
        Self {
            ground: base.clone().with_input_hw(ground_hw),
            aerial: base.clone().with_input_hw(aerial_hw),
        }
    }
}

/// Seed of each branch, so the two never start from the same weights.
pub fn branch_seeds(seed: u64) -> (u64, u64) {
    let mix = |x: u64| {
        let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    };
    (mix(seed.wrapping_mul(2)), mix(seed.wrapping_mul(2).wrapping_add(1)))
}

/// Ground and aerial networks with independent parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SiamesePair<T: Scalar = f32> {
    pub ground: Branch<T>,
    pub aerial: Branch<T>,
}

impl<T: Scalar> SiamesePair<T> {
    pub fn init(config: &SiameseConfig, seed: u64) -> Result<Self> {
        let (gs, as_) = branch_seeds(seed);
        Ok(Self {
            ground: Branch::init(&config.ground, gs)?,
            aerial: Branch::init(&config.aerial, as_)?,
        })
    }

    pub fn config(&self) -> SiameseConfig {
        SiameseConfig {
            ground: self.ground.config().clone(),
            aerial: self.aerial.config().clone(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.ground.num_scalars() + self.aerial.num_scalars()
    }

    /// All tensors, prefixed `ground.` / `aerial.`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let prefixed = |prefix: &str, b: &Branch<T>| {
            b.named_tensors()
                .into_iter()
                .map(|(n, t)| (format!("{prefix}.{n}"), t))
                .collect::<Vec<_>>()
        };
        let mut out = prefixed("ground", &self.ground);
        out.extend(prefixed("aerial", &self.aerial));
        out
    }

    pub fn from_named(config: &SiameseConfig, tensors: &[(String, Tensor<T>)]) -> Result<Self> {
        let lookup = |prefix: &'static str| {
            move |name: &str| {
                let full = format!("{prefix}.{name}");
                tensors.iter().find(|(n, _)| *n == full).map(|(_, t)| t.clone())
            }
        };
        Ok(Self {
            ground: Branch::from_named(&config.ground, lookup("ground"))?,
            aerial: Branch::from_named(&config.aerial, lookup("aerial"))?,
        })
    }
}

impl SiamesePair<f32> {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.config(), &self.named_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = checkpoint::load::<SiameseConfig>(path)?;
        Self::from_named(&file.config, &file.tensors)
    }
}
