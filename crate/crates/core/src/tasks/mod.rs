//! Procedural puzzles in five categories, rationale synthesis and filtering,
//! and the line-delimited dataset format.

mod dataset;
mod generate;
mod panel;
mod puzzle;
mod rationale;
mod rule;
mod vocab;

pub use dataset::{generate_suite, load_dataset, serialize_dataset, DatasetRecord, Split};
pub use generate::{
    gen_bongard_puzzle, gen_matrix_puzzle, gen_odd_one_out, gen_transform_puzzle, generate_puzzle, reformat_arc,
    reformat_bongard, TaskConfig,
};
pub use panel::{AttrSpace, Attribute, Cell, Panel, MAX_SIDE};
pub use puzzle::{apply_transform, concept_holds, Puzzle};
pub use rationale::{
    attach_rationale, bound_attribute, filter_chain, is_well_formed, predicted_option, split_steps, synthesize_rationale,
    MAX_STEPS, MIN_STEPS,
};
pub use rule::{sample_rule, Category, Concept, RuleDescriptor, RuleKind, Transform};
pub use vocab::{Token, MAX_OPTIONS, VOCAB_SIZE};
