//! Co-citation datasets: ingestion, pair extraction, negative sampling and
//! splitting.

mod cocite;
mod record;
mod split;

pub use cocite::{extract_cocitations, sample_negatives, CoCitations, PairKey};
pub use record::{
    ingest, ingest_reader, write_records, CitationGraph, Corpus, CorpusEntry, IngestReport, PaperRecord,
    Rejection,
};
pub use split::{
    build_dataset, build_splits, read_pairs, write_dataset, write_pairs, DatasetStats, DomainStats,
    NegativeScope, PairDataset, PairEntry, Split, SplitConfig, CORPUS_FILE, STATS_FILE,
};
