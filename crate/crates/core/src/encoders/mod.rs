//! Per-modality encoders. Each maps its raw input to a CLS token plus a
//! (possibly aggregated) token sequence of the shared width.

pub mod genes;
pub mod slide;
pub mod text;

pub use genes::{discretize_expression, ExpressionBinner, GeneEncoder, GeneEncoding, PathwayPartition};
pub use slide::{region_aggregate, reshape_to_grid, FeatureBag, Grid, RegionLayout, SlideEncoder, SlideEncoding};
pub use text::{TextEncoder, TokenSequence, Vocab};
