//! Synthetic domains, corpus files, training, scoring and experiment runs.

mod corpus;
mod domain;
mod experiment;
mod train;
mod wer;

pub use corpus::{
    gen_corpus, gen_split, gen_text, gen_utterance, read_corpus, read_matrix, read_split, read_text, texts, utterance_id, utterance_rng,
    write_corpus, write_matrix, write_split, write_text, Corpus, CorpusSizes, SPLITS,
};
pub use domain::{stock_class, DomainSpec, SyntheticUtterance, STOCK_CLASSES, STOCK_FEAT_DIM, STOCK_TOKENS};
pub use train::{train_transducer, EpochStats, TrainConfig};
pub use wer::{edit_counts, eval_wer, EditCounts, Latency, Metrics, Transcript};
pub use experiment::{
    decode_all, evaluate, references, run_experiment, to_json, AdaptRun, ExperimentConfig, Report, Seeds, StageRecord,
    StageStatus, Summary, MIN_RELATIVE_IMPROVEMENT, STAGES,
};
