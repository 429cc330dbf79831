//! Pretraining: modality-switched masked modeling, tri-modal contrastive
//! alignment and class triplets, optimized jointly.

pub mod masking;
pub mod objectives;
pub mod trainer;

pub use masking::{mask_genes, mask_text, mask_wsi, GeneMask, SlideMask, TextMask};
pub use objectives::{clip_pair_loss, clip_total, mine_triplets, total_loss, triplet_loss};
pub use trainer::{LossRow, Pretrainer};
