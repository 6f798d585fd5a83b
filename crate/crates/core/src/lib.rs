//! Composed-image retrieval with an assessor-guided second stage.
//!
//! Stage I ranks a gallery of unit embeddings by cosine similarity to a
//! query. Stage II asks a relevance assessor about a budgeted window of the
//! top candidates, refines the query toward the accepted ones, and reorders
//! the window. The supporting pieces are a ReAlign modality shift, a
//! cluster-aware batch scheduler and an InfoNCE projector trainer.

pub mod assessor;
pub mod cluster;
pub mod contrastive;
pub mod embedding;
pub mod error;
pub mod gallery;
pub mod metrics;
pub mod pipeline;
pub mod realign;
pub mod rerank;
pub mod rng;
pub mod synth;

pub use assessor::{Assessor, AssessorError, AssessorRequest, MockAssessor, MockNoise, RelevanceScore};
pub use embedding::{cosine_sim, l2_normalize, top_k, Embedding, RankedList, ScoredId};
pub use error::{Error, Result};
pub use gallery::{build_index, EmbeddingRecord, GalleryIndex};
pub use metrics::{Metric, QueryJudgment, Report};
pub use realign::{apply_realign, fit_realign, RealignStats};
pub use rerank::{rerank, Query, RerankConfig, RerankOutcome};
