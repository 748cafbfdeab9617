//! Corpus ingestion, sequence packing and MLM corruption.

mod cache;
mod corpus;
mod ingest;
mod mask;
mod pack;

pub use cache::{cached_documents, open_cache, write_cache, CacheReader};
pub use corpus::{Corpus, FileCorpus, WeightedFile};
pub use ingest::{ingest, DocId, Document, Ingest};
pub use mask::{is_maskable, mask_for_mlm, mask_with_rng, MaskingConfig};
pub use pack::{batches, pack, pack_stats, Batcher, PackStats, PackedBatch, PackedRow, Packer, MIN_WINDOW};
