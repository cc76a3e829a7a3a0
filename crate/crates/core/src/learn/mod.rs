//! Contrastive representation learning and fatigue-level classification:
//! paired convolutional encoders over (raw window, feature vector) inputs,
//! a convolutional classifier head, stratified cross-validation, and the
//! metric suite used to report results.

pub mod checkpoint;
pub mod kfold;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod train;

pub use kfold::stratified_folds;
pub use loss::{contrastive_loss, contrastive_loss_grad, ContrastiveOutput};
pub use metrics::{
    auroc_binary, auroc_macro_ovr, confusion_matrix, metric_set, ClassMetrics, MetricSet,
};
pub use model::{Classifier, Encoder, EncoderConfig};
pub use train::{
    crossvalidate, evaluate_model, majority_baseline, predict_probs, pretrain, train_classifier,
    train_full, Aggregate, FoldOutcome, FoldReport, LrSchedule, PairDataset, TrainConfig,
    TrainedModel,
};
