//! Desk-scale toolkit for reverse-engineered adaptation of dense retrievers.
//!
//! The pipeline this crate implements:
//!
//! 1. [`checkpoint`] — bit-exact persistence of named f32 tensor sets in a
//!    seekable little-endian container, plus key alignment and glob filtering.
//! 2. [`arith`] — the adapter arithmetic: extract the dense weight difference
//!    between a fine-tuned model and its base, materialize trained DoRA
//!    adapters as dense deltas, and recompose weights as
//!    `base + alpha * knowledge + beta * readapter`.
//! 3. [`model`] — a small deterministic transformer with reverse-mode autodiff,
//!    supporting both a next-token head and pooled unit-norm text embeddings.
//! 4. [`train`] — AdamW trainers producing the three checkpoints the arithmetic
//!    consumes: a pretrained backbone, a contrastively trained retriever, and a
//!    DoRA knowledge adapter trained on unlabeled documents.
//! 5. [`eval`] — BEIR-layout dataset ingestion, exhaustive dense search, and
//!    trec-style ranking metrics (nDCG, recall, MRR).
//! 6. [`harness`] + [`synth`] — reproducible experiment commands over synthetic
//!    retrieval domains, each driven by a JSON manifest written next to its
//!    outputs.

pub mod arith;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod harness;
pub mod model;
pub mod pattern;
pub mod synth;
pub mod tensor;
pub mod train;

pub use arith::{
    drop_head, extract_readapter, merge_dora, readapt, to_dense_delta, AdapterSource,
    LowRankAdapter, PartialAdaptation, ReAdapter,
};
pub use checkpoint::{
    align_keys, filter_keys, load_checkpoint, save_checkpoint, Checkpoint, FilterMode,
    KeyAlignment,
};
pub use error::{Error, Result};
pub use eval::{
    build_index, evaluate, load_beir_dataset, mrr_at_k, ndcg_at_k, recall_at_k, search,
    DenseIndex, EvalReport, RetrievalDataset, SearchHit,
};
pub use model::{embed, forward_lm, init_params, EncoderConfig, Gradients, ModelParams, Pooling};
pub use synth::{gen_synthetic, SyntheticDomainSpec};
pub use tensor::Tensor;
pub use train::{
    pretrain_lm, train_knowledge_adapter, train_retriever, AdamWConfig, DoraTrainConfig,
    Schedule, TrainConfig,
};
