//! Example records, the synthetic task suite, corpus files and checkpoints.

mod checkpoint;
mod corpus;
mod record;
mod synthetic;

pub use checkpoint::{load_checkpoint, model_digest, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use corpus::{
    format_corpus, load_corpus, load_suite, parse_corpus, save_corpus, save_suite, split_path, CANDIDATE_SEP,
    CORPUS_VERSION,
};
pub use record::{corpus_vocabulary, ExampleRecord, Payload, Split, TaskDataset, TaskSplits, SCORE_RANGE};
pub use synthetic::{
    gen_synthetic_suite, keyword_label, relation_label, relevance_positive, similarity_score, suite_specs,
    suite_vocabulary, Suite, SuiteSizes, KEYWORDS, KEYWORD_TASK, RANKING_CANDIDATES, RELATION_TASK,
    RELEVANCE_TASK, SIMILARITY_TASK,
};
