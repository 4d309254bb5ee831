//! Matching, losses, optimization and the freeze-and-tune driver.

pub mod gradcheck;
pub mod losses;
pub mod matching;
pub mod optim;
pub mod train;

pub use gradcheck::{grad_check, GradCheck};
pub use losses::{bce_cls_loss, bce_mask_loss, dice_loss, segmentation_loss, LossNodes};
pub use matching::{hungarian, match_cost, match_cost_probs, Assignment, CostMatrix, MatchWeights, Target};
pub use optim::{poly_lr, AdamW, AdamWConfig};
pub use train::{
    append_loss_log, mask_targets, train_task, LossRecord, Objective, TrainHyper, TrainReport,
};
