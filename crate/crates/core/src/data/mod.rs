//! Dataset ingestion, prompts, tokenization, target scaling and embedding dumps.

pub mod dump;
pub mod normalize;
pub mod prompt;
pub mod sample;
pub mod synth;
pub mod tokenizer;

pub use dump::EmbeddingDump;
pub use normalize::{NormMode, ScoreTransform};
pub use prompt::PromptTemplate;
pub use sample::{load_tsv, Dataset, QESample, ScoreRange};
pub use tokenizer::Tokenizer;

/// Prompt-formats and tokenizes samples, truncating long sequences in the
/// middle so the prompt opening and the end of the translation both survive.
pub fn encode_samples(
    samples: &[QESample],
    template: &PromptTemplate,
    tokenizer: &Tokenizer,
    max_len: usize,
) -> Vec<Vec<u32>> {
    samples
        .iter()
        .map(|s| tokenizer::truncate_head_tail(&tokenizer.encode(&template.build(s)), max_len, max_len / 2))
        .collect()
}
