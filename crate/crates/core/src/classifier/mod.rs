//! Frozen embeddings, the two-layer head, training, ensembles and metrics.

mod ensemble;
mod head;
mod metrics;
mod provider;
mod train;

pub use ensemble::{
    combine, ensemble_predict, evaluate, seed_sweep, summarize, Ensemble, LabeledImage, MetricSummary, Model, SweepSummary,
};
pub use head::{
    confidence, cross_entropy, decide, softmax2, Activation, Forward, Gradients, HeadModel, Normalization, BLOCKS,
    HIDDEN_UNITS, N_CLASSES,
};
pub use metrics::{eval_report, roc_auc, Confusion, EvalReport, Prediction};
#[cfg(feature = "onnx")]
pub use provider::OnnxFileProvider;
pub use provider::{embed_batch, embed_image, embed_model_input, model_input, EmbeddingProvider, PixelPca, Providers, INPUT_SIZE};
pub use train::{
    adamw_step, gradient_check, train_head, train_on_features, AdamState, EpochLog, FeatureSet, GradientCheck, TrainConfig,
    TrainingLog, FD_STEP,
};
