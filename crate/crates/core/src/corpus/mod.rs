//! Examples, vocabulary, synthetic data, masking, entity-pair sampling and
//! the answer/subgraph swap transforms.

mod dataset;
mod masking;
mod pairs;
mod synth;
mod transforms;
mod vocab;

pub use dataset::{
    example_to_json, read_jsonl, read_jsonl_file, subgraph_json, write_jsonl, write_jsonl_file,
    CandidateInput, McqaExample,
};
pub use masking::{mask_count, mask_tokens, MaskedBatch, MASK_RATE};
pub use pairs::{sample_entity_pairs, EntityPairBatch};
pub use synth::{generate_synthetic_dataset, GenConfig, SyntheticData};
pub use transforms::{apply_operation_a, apply_operation_b};
pub use vocab::{
    build_vocab, is_special, Vocab, INT, MASK, NUM_SPECIAL, PAD, SEP, SPECIAL_TOKENS, UNK,
};

use crate::kg::KnowledgeGraph;

/// Vocabulary over entity surfaces, relation names and every training token.
pub fn vocab_for(kg: &KnowledgeGraph, train: &[McqaExample]) -> crate::Result<Vocab> {
    let text = train.iter().flat_map(|ex| {
        ex.context
            .iter()
            .chain(&ex.question)
            .chain(ex.candidates.iter().flatten())
            .map(String::as_str)
    });
    build_vocab(
        kg.surfaces()
            .iter()
            .map(String::as_str)
            .chain(kg.relation_names().iter().map(String::as_str))
            .chain(text),
    )
}
