//! Zero-shot link prediction for unseen relations.
//!
//! Relation names are turned into hierarchical character n-gram graphs
//! ([`ngram_graph`]), encoded into relation vectors by a graph-masked
//! Transformer ([`gram_transformer`]) and scored against entity embeddings
//! with TransE or DistMult ([`kge`]). Because a relation vector is computed
//! from its name alone, relations never seen during training can still be
//! scored at test time ([`evaluator`]).

pub mod cli;
pub mod dataset;
pub mod evaluator;
pub mod gram_transformer;
pub mod kge;
pub mod model;
pub mod ndtensor;
pub mod ngram_graph;
pub mod trainer;
