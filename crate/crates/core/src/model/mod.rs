//! The backbone: convolutional stem, feed-forward-free attention stack,
//! descriptor head, and a two-branch Siamese wrapper without weight sharing.

mod branch;
pub mod checkpoint;
pub mod complexity;
mod config;
pub mod layout;
mod siamese;

pub use branch::{init_params, msa_block, Branch, BranchOutput, PatchGrid};
pub use complexity::{flop_count, param_count, siamese_flop_count, siamese_param_count};
pub use config::{HeadKind, ModelConfig, Variant, HEADS, HIDDEN_DIM, STEM_CHANNELS, STEM_STRIDES};
pub use siamese::{branch_seeds, SiameseConfig, SiamesePair};
