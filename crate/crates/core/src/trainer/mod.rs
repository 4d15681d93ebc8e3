//! Classification head, combined objective, optimizer, metrics and the
//! training loop.

mod adam;
pub mod checkpoint;
mod config;
mod eval;
mod model;
mod train;

pub use adam::Adam;
pub use config::{parse_key_values, GateSource, TrainConfig};
pub use eval::{argmax, evaluate, predict, score_predictions, EvalReport, TypeCounts};
pub use model::{
    build_feature, classifier_logits, classify, combined_loss, labels_from_corpus, CandidateOutput,
    ClassifierParams, Dataset, EmbeddingInit, GatedGcnModel, LossBreakdown, LossVars,
    SentenceEncoding,
};
pub use train::{
    batch_loss, train, train_model, train_with, training_candidates, EpochRecord, TrainOutcome,
};
