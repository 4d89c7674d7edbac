//! Machine unlearning for dual-encoder contrastive models.
//!
//! A tiny image/text dual encoder is pretrained contrastively on a synthetic
//! paired corpus, then made to forget a subset of the data by jointly
//! minimizing a forgetting loss (mean similarity of forget pairs), a
//! retention loss (contrastive loss on retained pairs) and a consistency loss
//! (KL divergence to a frozen copy of the original model). Gradient-ascent
//! style baselines, four evaluation tasks, ablations and forget-fraction
//! sweeps are included.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod model;
pub mod optim;
pub mod plot;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use data::{
    batches, generate_corpus, split_by_class, split_by_fraction, split_by_keyword, Batch, Corpus, CorpusConfig,
    PairSample, SplitDataset, SplitSpec, Subset,
};
pub use engine::{pretrain, unlearn, PretrainConfig, RunHistory, UnlearnConfig};
pub use error::{Error, Result};
pub use eval::{
    evaluate_suite, export_embeddings, recall_at_k, run_ablation, sweep_forget_fraction, zero_shot_predict,
    zero_shot_retrieve, MetricsReport, SweepConfig, SweepResult,
};
pub use losses::{
    baseline_loss, consistency_loss, contrastive_loss, forgetting_loss, retention_loss, total_unlearn_loss,
    LossBreakdown, LossWeights, Method,
};
pub use model::{similarity_matrix, snapshot, ArchConfig, DualEncoderModel, EmbeddingMatrix, FrozenModel};
