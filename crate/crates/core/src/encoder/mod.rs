//! Mini transformer encoder, tokenizer, and embedding cache/providers.

mod cache;
mod model;
mod tokenizer;

pub use cache::{content_hash, fetch_embeddings, CacheKey, EmbeddingCache, ProviderDescriptor, UNCALIBRATED};
pub use model::{contextualized_segment_embedding, AttentionBias, EncodeOutput, EncoderConfig, MiniEncoder, Pooling};
pub use tokenizer::{SpanMap, TokenizedDocument, Tokenizer, DEFAULT_VOCAB_SIZE, END_TOKEN, START_TOKEN};
