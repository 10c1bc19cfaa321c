//! Early depression-risk detection over post streams.
//!
//! Posts are screened against psychiatric-scale templates, the riskiest
//! ones are kept in a bounded evolving queue, and a hierarchical attention
//! classifier runs only when that queue changes. Evaluation (ERDE, F1, AUC,
//! threshold sweeps) and the lexical and temporal analyses live here too.

pub mod analysis;
pub mod corpus;
pub mod embedding;
pub mod error;
pub mod han;
pub mod metrics;
pub mod screening;
pub mod stream;
pub mod templates;

pub use corpus::{
    group_by_interval, load_histories, save_histories, synth_generate, Dataset, Post, PostGroup, Split, SynthConfig,
    UserHistory,
};
pub use embedding::{cosine, EmbeddingVector, Provider, ProviderConfig, ProviderKind};
pub use error::{Error, Result};
pub use han::{ModelConfig, ModelParams};
pub use metrics::{EvalReport, ErdeParams};
pub use screening::{ScoredPost, ScoredRecord, Screener};
pub use stream::{run_stream, Decision, DetectorState, EvolvingQueue, RiskModel, UserTrace};
pub use templates::{preset, Scale, Template, TemplateSet};
