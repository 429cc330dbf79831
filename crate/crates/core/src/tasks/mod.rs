//! Fine-tuning heads and their losses.

pub mod decoder;
pub mod finetune;
pub mod heads;
pub mod losses;
pub mod probe;
pub mod survival;

pub use decoder::ReportDecoder;
pub use heads::{MlpHead, MultimodalHead, PoolKind, TaskHeads};
pub use losses::cross_entropy;
pub use survival::{
    bin_times, cox_closed_form_gradient, cox_gradient_check, cox_loss, cox_loss_value, nll_survival_loss,
    SurvivalLabel, TimeBins,
};
