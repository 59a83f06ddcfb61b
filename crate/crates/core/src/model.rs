//! Encoder + entity table bundle, with its on-disk checkpoint layout:
//!
//! * `params.json`: all tensors (encoder and `entities`) in the tensor file format
//! * `model.json`: configuration, n-gram vocabulary and frozen parameter names
//! * `entities.tsv`: the entity vocabulary the table rows refer to

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetError, Entity, Relation, Triple};
use crate::gram_transformer::{
    encode_input, init_params, load_edge_embeddings, EncodeError, EncoderInput,
    GramTransformerConfig, GramVocab,
};
use crate::kge::{
    entity_row, init_entity_table, score_all_tails, ScoreError, ScoreFn, ENTITY_TABLE,
};
use crate::ndtensor::{
    read_tensor_file, write_tensor_file, Bound, ParamSet, Tape, TensorError, Var,
};
use crate::ngram_graph::{build_graph, tokenize, GraphConfig, GraphError, TokenizeConfig};

pub const PARAMS_FILE: &str = "params.json";
pub const MODEL_FILE: &str = "model.json";
pub const ENTITY_VOCAB_FILE: &str = "entities.tsv";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("unknown entity index {0}")]
    UnknownEntity(usize),
    #[error("unknown relation index {0}")]
    UnknownRelation(usize),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("entity vocabulary mismatch: {0}")]
    VocabMismatch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: GramTransformerConfig,
    pub graph: GraphConfig,
    pub tokenize: TokenizeConfig,
    pub score_fn: ScoreFn,
}

impl ModelConfig {
    /// Keeps the encoder's position table in step with the graph truncation.
    pub fn synced(mut self) -> Self {
        self.encoder.max_nodes = self.graph.max_nodes;
        self
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: GramTransformerConfig::default(),
            graph: GraphConfig::default(),
            tokenize: TokenizeConfig::default(),
            score_fn: ScoreFn::TransE,
        }
        .synced()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkModel {
    pub config: ModelConfig,
    pub vocab: GramVocab,
    pub params: ParamSet,
    /// Parameters excluded from optimizer updates.
    pub frozen: BTreeSet<String>,
    pub entities: Vec<Entity>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    config: ModelConfig,
    grams: Vec<String>,
    frozen: BTreeSet<String>,
}

impl LinkModel {
    /// Fresh parameters. When `edge_file` is given, the adjoin/compositional
    /// vectors are read from it and frozen.
    pub fn init<R: Rng + ?Sized>(
        config: ModelConfig,
        vocab: GramVocab,
        entities: Vec<Entity>,
        edge_file: Option<&Path>,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        let config = config.synced();
        let mut params = init_params(&config.encoder, vocab.size(), rng)?;
        params.insert(
            ENTITY_TABLE,
            init_entity_table(entities.len(), config.encoder.d_model, rng),
        );
        let mut frozen = BTreeSet::new();
        if let Some(path) = edge_file {
            let edges = load_edge_embeddings(path, config.encoder.d_model)?;
            frozen.extend(edges.names().map(str::to_string));
            params.extend(edges);
        }
        Ok(Self {
            config,
            vocab,
            params,
            frozen,
            entities,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    /// Encoder inputs for every relation, in relation-index order.
    pub fn prepare(&self, relations: &[Relation]) -> Result<Vec<EncoderInput>, ModelError> {
        relations
            .iter()
            .map(|r| {
                let name = tokenize(&r.surface, self.config.tokenize)?;
                let graph = build_graph(&name, &self.config.graph)?;
                Ok(EncoderInput::from_graph(
                    &graph,
                    &self.vocab,
                    self.config.encoder.variant,
                    self.config.encoder.max_nodes,
                ))
            })
            .collect()
    }

    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        input: &EncoderInput,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        Ok(encode_input(
            tape,
            bound,
            input,
            &self.config.encoder,
            training,
            rng,
        )?)
    }

    /// Label-smoothed cross-entropy of a batch against all entities. Each
    /// distinct relation in the batch is encoded once, in order of first
    /// appearance.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        inputs: &[EncoderInput],
        batch: &[Triple],
        label_smoothing: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, ModelError> {
        let table = bound.var(ENTITY_TABLE)?;
        let mut encoded: BTreeMap<usize, Var> = BTreeMap::new();
        let mut rows = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for t in batch {
            if t.head >= self.n_entities() {
                return Err(ModelError::UnknownEntity(t.head));
            }
            if t.tail >= self.n_entities() {
                return Err(ModelError::UnknownEntity(t.tail));
            }
            let input = inputs
                .get(t.relation)
                .ok_or(ModelError::UnknownRelation(t.relation))?;
            let s = match encoded.get(&t.relation) {
                Some(&s) => s,
                None => {
                    let s = self.encode(tape, bound, input, training, rng)?;
                    encoded.insert(t.relation, s);
                    s
                }
            };
            let head = entity_row(tape, table, t.head)?;
            rows.push(score_all_tails(tape, self.config.score_fn, head, s, table)?);
            targets.push(t.tail);
        }
        let logits = tape.stack_rows(&rows)?;
        Ok(tape.cross_entropy_label_smoothed(logits, &targets, label_smoothing)?)
    }

    /// Eval-mode relation embeddings for every prepared input.
    pub fn relation_vectors(&self, inputs: &[EncoderInput]) -> Result<Vec<Vec<f64>>, ModelError> {
        // eval mode never draws from the rng
        let mut no_rng = ChaCha8Rng::seed_from_u64(0);
        inputs
            .iter()
            .map(|input| {
                let mut tape = Tape::new();
                let bound = self.params.bind(&mut tape);
                let s = self.encode(&mut tape, &bound, input, false, &mut no_rng)?;
                Ok(tape.value(s).data().to_vec())
            })
            .collect()
    }

    pub fn entity_vector(&self, index: usize) -> Result<&[f64], ModelError> {
        let table = self.params.get(ENTITY_TABLE)?;
        if index >= table.dims2().0 {
            return Err(ModelError::UnknownEntity(index));
        }
        Ok(table.row(index))
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        let err = |path: &Path, e: &dyn std::fmt::Display| ModelError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        std::fs::create_dir_all(dir).map_err(|e| err(dir, &e))?;
        write_tensor_file(&dir.join(PARAMS_FILE), &self.params)?;
        let file = ModelFile {
            config: self.config.clone(),
            grams: self.vocab.grams().to_vec(),
            frozen: self.frozen.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file).map_err(|e| err(dir, &e))?;
        text.push('\n');
        let model_path = dir.join(MODEL_FILE);
        std::fs::write(&model_path, text).map_err(|e| err(&model_path, &e))?;
        let mut ents = String::new();
        for e in &self.entities {
            let _ = writeln!(ents, "{}\t{}", e.id, e.name);
        }
        let ent_path = dir.join(ENTITY_VOCAB_FILE);
        std::fs::write(&ent_path, ents).map_err(|e| err(&ent_path, &e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        let model_path = dir.join(MODEL_FILE);
        let text = std::fs::read_to_string(&model_path).map_err(|e| ModelError::Checkpoint {
            path: model_path.clone(),
            message: e.to_string(),
        })?;
        let file: ModelFile = serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint {
            path: model_path.clone(),
            message: e.to_string(),
        })?;
        let params = read_tensor_file(&dir.join(PARAMS_FILE))?;
        let ent_path = dir.join(ENTITY_VOCAB_FILE);
        let ent_text = std::fs::read_to_string(&ent_path).map_err(|e| ModelError::Checkpoint {
            path: ent_path.clone(),
            message: e.to_string(),
        })?;
        let mut entities = Vec::new();
        for (n, line) in ent_text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let parsed = line.split_once('\t').and_then(|(id, name)| {
                id.parse().ok().map(|id| Entity {
                    id,
                    name: name.to_string(),
                })
            });
            entities.push(parsed.ok_or_else(|| ModelError::Checkpoint {
                path: ent_path.clone(),
                message: format!("line {}: expected `id<TAB>name`", n + 1),
            })?);
        }
        let model = Self {
            config: file.config,
            vocab: GramVocab::new(file.grams),
            params,
            frozen: file.frozen,
            entities,
        };
        let rows = model.params.get(ENTITY_TABLE)?.dims2().0;
        if rows != model.entities.len() {
            return Err(ModelError::Checkpoint {
                path: dir.to_path_buf(),
                message: format!(
                    "entity table has {rows} rows but {} entities are listed",
                    model.entities.len()
                ),
            });
        }
        Ok(model)
    }

    /// Checks that `entities` lists the same ids and names, in the same order,
    /// as the ones this model was trained on.
    pub fn check_entities(&self, entities: &[Entity]) -> Result<(), ModelError> {
        if entities.len() != self.entities.len() {
            return Err(ModelError::VocabMismatch(format!(
                "checkpoint has {} entities, split has {}",
                self.entities.len(),
                entities.len()
            )));
        }
        if let Some((i, (a, b))) = self
            .entities
            .iter()
            .zip(entities)
            .enumerate()
            .find(|(_, (a, b))| a != b)
        {
            return Err(ModelError::VocabMismatch(format!(
                "entity #{i}: checkpoint has {} ({}), split has {} ({})",
                a.id, a.name, b.id, b.name
            )));
        }
        Ok(())
    }
}
