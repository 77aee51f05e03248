//! Translation quality and pronoun metrics, the synthetic task, and reports.

pub mod apt;
pub mod bleu;
pub mod contrastive;
pub mod report;
pub mod synth;

pub use apt::{apt, read_alignments, Alignment, AptCounts, AptInput, AptReport, Lexicon};
pub use bleu::{bleu, bleu_lines, BleuScore};
pub use contrastive::{
    contrastive_eval, read_sets, write_sets, Bucket, BucketStats, ContrastiveReport, ContrastiveSet,
    ModelScorer, SequenceScorer,
};
pub use report::{format_table, source_tag_agreement, ReportRow};
pub use synth::{make_synthetic_task, write_synthetic_task, SynthSizes};
