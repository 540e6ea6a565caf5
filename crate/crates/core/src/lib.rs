//! Span detection for aspect-based sentiment analysis: corpus handling,
//! annotator agreement, IOB tagging, a BiLSTM-CRF tagger and span metrics.

pub mod agreement;
pub mod corpus;
pub mod crf;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod neural;
pub mod pipeline;
pub mod tagging;
pub mod tensor;

pub use error::{Error, Result};
pub use corpus::{Corpus, Document, Label, SpanAnnotation};
pub use pipeline::{predict, train, Model, TrainConfig};
pub use tagging::{Scheme, SchemeSpan};
