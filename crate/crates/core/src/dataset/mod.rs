//! Zero-shot link prediction splits: on-disk format, validation and the
//! n-gram vocabulary over seen relation names.
//!
//! A split directory holds five UTF-8, LF-terminated files:
//!
//! | file                 | line format                                                     |
//! |----------------------|-----------------------------------------------------------------|
//! | `entities.tsv`       | `id \t name`                                                    |
//! | `relations.tsv`      | `id \t surface_name`                                            |
//! | `train.tsv`          | `head_id \t relation_id \t tail_id`                             |
//! | `dev.tsv`            | `head_id \t relation_id \t tail_id`                             |
//! | `test_queries.jsonl` | `{"head":id,"relation":id,"truth":id,"candidates":[id, ...]}`   |
//!
//! Seen relations are the ones used by `train.tsv`, unseen relations the ones
//! used by the test queries; the two sets must be disjoint.

mod convert;
mod synth;

pub use convert::{convert_zsgan, ConversionLog, ConvertOptions};
pub use synth::{synth_fixture, write_fixture, SynthSizes};

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gram_transformer::GramVocab;
use crate::ngram_graph::{tokenize, word_ngrams, GraphError, TokenizeConfig};

pub const ENTITIES_FILE: &str = "entities.tsv";
pub const RELATIONS_FILE: &str = "relations.tsv";
pub const TRAIN_FILE: &str = "train.tsv";
pub const DEV_FILE: &str = "dev.tsv";
pub const TEST_FILE: &str = "test_queries.jsonl";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {message}")]
    MalformedLine {
        file: String,
        line: usize,
        message: String,
    },
    #[error("relation {0} is used both for training and as an unseen test relation")]
    SplitOverlap(String),
    #[error("{file}:{line}: unknown {kind} id {id}")]
    DanglingId {
        file: String,
        line: usize,
        kind: &'static str,
        id: u64,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("relation {id}: {source}")]
    SurfaceName { id: u64, source: GraphError },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entity {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Relation {
    pub id: u64,
    pub surface: String,
}

/// A fact; fields are indices into [`ZslSplit::entities`] / [`ZslSplit::relations`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

/// A tail-prediction query over an unseen relation. Indices as in [`Triple`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub head: usize,
    pub relation: usize,
    pub truth: usize,
    pub candidates: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZslSplit {
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
    pub seen: BTreeSet<usize>,
    pub unseen: BTreeSet<usize>,
    pub train: Vec<Triple>,
    pub dev: Vec<Triple>,
    pub test: Vec<Query>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Treat a missing `dev.tsv` as empty instead of an error.
    pub dev_optional: bool,
}

#[derive(Serialize, Deserialize)]
struct QueryLine {
    head: u64,
    relation: u64,
    truth: u64,
    candidates: Vec<u64>,
}

fn read_file(dir: &Path, name: &str) -> Result<Option<String>, DatasetError> {
    let path = dir.join(name);
    match std::fs::read_to_string(&path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(source) => Err(DatasetError::Io { path, source }),
    }
}

fn require(dir: &Path, name: &str) -> Result<String, DatasetError> {
    read_file(dir, name)?.ok_or_else(|| DatasetError::MissingFile(dir.join(name)))
}

/// Non-blank lines with 1-based line numbers.
fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn malformed(file: &str, line: usize, message: impl Into<String>) -> DatasetError {
    DatasetError::MalformedLine {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn parse_id(file: &str, line: usize, field: &str) -> Result<u64, DatasetError> {
    field
        .trim()
        .parse()
        .map_err(|_| malformed(file, line, format!("invalid id {field:?}")))
}

/// Parses `id \t text` lines, rejecting duplicate ids.
fn parse_named(file: &str, text: &str) -> Result<Vec<(u64, String)>, DatasetError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, l) in lines(text) {
        let Some((id, name)) = l.split_once('\t') else {
            return Err(malformed(file, n, "expected `id<TAB>name`"));
        };
        let id = parse_id(file, n, id)?;
        if !seen.insert(id) {
            return Err(malformed(file, n, format!("duplicate id {id}")));
        }
        if name.trim().is_empty() {
            return Err(malformed(file, n, "empty name"));
        }
        out.push((id, name.to_string()));
    }
    Ok(out)
}

struct Resolver<'a> {
    entities: &'a HashMap<u64, usize>,
    relations: &'a HashMap<u64, usize>,
}

impl Resolver<'_> {
    fn entity(&self, file: &str, line: usize, id: u64) -> Result<usize, DatasetError> {
        self.entities
            .get(&id)
            .copied()
            .ok_or(DatasetError::DanglingId {
                file: file.to_string(),
                line,
                kind: "entity",
                id,
            })
    }

    fn relation(&self, file: &str, line: usize, id: u64) -> Result<usize, DatasetError> {
        self.relations
            .get(&id)
            .copied()
            .ok_or(DatasetError::DanglingId {
                file: file.to_string(),
                line,
                kind: "relation",
                id,
            })
    }

    fn triples(&self, file: &str, text: &str) -> Result<Vec<Triple>, DatasetError> {
        let mut out = Vec::new();
        for (n, l) in lines(text) {
            let fields: Vec<&str> = l.split('\t').collect();
            let [h, r, t] = fields.as_slice() else {
                return Err(malformed(file, n, "expected `head<TAB>relation<TAB>tail`"));
            };
            out.push(Triple {
                head: self.entity(file, n, parse_id(file, n, h)?)?,
                relation: self.relation(file, n, parse_id(file, n, r)?)?,
                tail: self.entity(file, n, parse_id(file, n, t)?)?,
            });
        }
        Ok(out)
    }
}

/// Reads and validates a split directory.
pub fn load(dir: &Path, options: LoadOptions) -> Result<ZslSplit, DatasetError> {
    let entities_text = require(dir, ENTITIES_FILE)?;
    let relations_text = require(dir, RELATIONS_FILE)?;
    let train_text = require(dir, TRAIN_FILE)?;
    let dev_text = match read_file(dir, DEV_FILE)? {
        Some(t) => t,
        None if options.dev_optional => String::new(),
        None => return Err(DatasetError::MissingFile(dir.join(DEV_FILE))),
    };
    let test_text = require(dir, TEST_FILE)?;

    let entities: Vec<Entity> = parse_named(ENTITIES_FILE, &entities_text)?
        .into_iter()
        .map(|(id, name)| Entity { id, name })
        .collect();
    let relations: Vec<Relation> = parse_named(RELATIONS_FILE, &relations_text)?
        .into_iter()
        .map(|(id, surface)| Relation { id, surface })
        .collect();
    let entity_index: HashMap<u64, usize> = entities
        .iter()
        .enumerate()
        .map(|(i, e)| (e.id, i))
        .collect();
    let relation_index: HashMap<u64, usize> = relations
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id, i))
        .collect();
    let resolve = Resolver {
        entities: &entity_index,
        relations: &relation_index,
    };

    let train = resolve.triples(TRAIN_FILE, &train_text)?;
    let dev = resolve.triples(DEV_FILE, &dev_text)?;

    let mut test = Vec::new();
    for (n, l) in lines(&test_text) {
        let q: QueryLine =
            serde_json::from_str(l).map_err(|e| malformed(TEST_FILE, n, e.to_string()))?;
        if q.candidates.is_empty() {
            return Err(malformed(TEST_FILE, n, "empty candidate set"));
        }
        if !q.candidates.contains(&q.truth) {
            return Err(malformed(
                TEST_FILE,
                n,
                format!("truth {} is not among the candidates", q.truth),
            ));
        }
        let candidates = q
            .candidates
            .iter()
            .map(|&c| resolve.entity(TEST_FILE, n, c))
            .collect::<Result<Vec<_>, _>>()?;
        test.push(Query {
            head: resolve.entity(TEST_FILE, n, q.head)?,
            relation: resolve.relation(TEST_FILE, n, q.relation)?,
            truth: resolve.entity(TEST_FILE, n, q.truth)?,
            candidates,
        });
    }

    let seen: BTreeSet<usize> = train.iter().map(|t| t.relation).collect();
    let unseen: BTreeSet<usize> = test.iter().map(|q| q.relation).collect();
    if let Some(&r) = seen.intersection(&unseen).next() {
        return Err(DatasetError::SplitOverlap(relations[r].id.to_string()));
    }

    Ok(ZslSplit {
        entities,
        relations,
        seen,
        unseen,
        train,
        dev,
        test,
    })
}

/// Writes the five split files into `dir`, creating it if needed.
pub fn write(split: &ZslSplit, dir: &Path) -> Result<(), DatasetError> {
    let io = |path: PathBuf| move |source| DatasetError::Io { path, source };
    std::fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;

    let mut entities = String::new();
    for e in &split.entities {
        let _ = writeln!(entities, "{}\t{}", e.id, e.name);
    }
    let mut relations = String::new();
    for r in &split.relations {
        let _ = writeln!(relations, "{}\t{}", r.id, r.surface);
    }
    let triples = |ts: &[Triple]| {
        let mut s = String::new();
        for t in ts {
            let _ = writeln!(
                s,
                "{}\t{}\t{}",
                split.entities[t.head].id,
                split.relations[t.relation].id,
                split.entities[t.tail].id
            );
        }
        s
    };
    let mut test = String::new();
    for q in &split.test {
        let line = QueryLine {
            head: split.entities[q.head].id,
            relation: split.relations[q.relation].id,
            truth: split.entities[q.truth].id,
            candidates: q.candidates.iter().map(|&c| split.entities[c].id).collect(),
        };
        test.push_str(&serde_json::to_string(&line).expect("query line serializes"));
        test.push('\n');
    }

    for (name, body) in [
        (ENTITIES_FILE, entities),
        (RELATIONS_FILE, relations),
        (TRAIN_FILE, triples(&split.train)),
        (DEV_FILE, triples(&split.dev)),
        (TEST_FILE, test),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(io(path.clone()))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct VocabReport {
    pub vocab: GramVocab,
    /// Fraction of distinct unseen-relation grams present in the vocabulary;
    /// 1.0 when there are no unseen relations.
    pub coverage: f64,
}

fn relation_grams(
    surface: &str,
    max_n: usize,
    tokenize_cfg: TokenizeConfig,
) -> Result<BTreeSet<String>, GraphError> {
    let name = tokenize(surface, tokenize_cfg)?;
    Ok(name
        .words
        .iter()
        .flat_map(|w| word_ngrams(w, max_n))
        .map(|n| n.text)
        .collect())
}

/// N-gram vocabulary over the seen relations' surface names.
pub fn build_vocab(
    split: &ZslSplit,
    max_n: usize,
    tokenize_cfg: TokenizeConfig,
) -> Result<VocabReport, DatasetError> {
    let grams_of = |r: usize| {
        relation_grams(&split.relations[r].surface, max_n, tokenize_cfg).map_err(|source| {
            DatasetError::SurfaceName {
                id: split.relations[r].id,
                source,
            }
        })
    };
    let mut seen_grams = BTreeSet::new();
    for &r in &split.seen {
        seen_grams.extend(grams_of(r)?);
    }
    let mut unseen_grams = BTreeSet::new();
    for &r in &split.unseen {
        unseen_grams.extend(grams_of(r)?);
    }
    let vocab = GramVocab::new(seen_grams);
    let coverage = if unseen_grams.is_empty() {
        1.0
    } else {
        unseen_grams.iter().filter(|g| vocab.contains(g)).count() as f64 / unseen_grams.len() as f64
    };
    Ok(VocabReport { vocab, coverage })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_split(seen: &[&str], unseen: &[&str]) -> ZslSplit {
        let entities = (0..3)
            .map(|i| Entity {
                id: i,
                name: format!("e{i}"),
            })
            .collect();
        let mut relations = Vec::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (i, s) in seen.iter().chain(unseen).enumerate() {
            relations.push(Relation {
                id: i as u64,
                surface: s.to_string(),
            });
            if i < seen.len() {
                train.push(Triple {
                    head: 0,
                    relation: i,
                    tail: 1,
                });
            } else {
                test.push(Query {
                    head: 0,
                    relation: i,
                    truth: 2,
                    candidates: vec![1, 2],
                });
            }
        }
        ZslSplit {
            entities,
            relations,
            seen: (0..seen.len()).collect(),
            unseen: (seen.len()..seen.len() + unseen.len()).collect(),
            train,
            dev: Vec::new(),
            test,
        }
    }

    #[test]
    fn vocab_of_has() {
        let split = tiny_split(&["has"], &["as"]);
        let report = build_vocab(&split, 3, TokenizeConfig::default()).unwrap();
        assert_eq!(report.vocab.grams(), ["a", "as", "h", "ha", "has", "s"]);
        assert_eq!(report.vocab.size(), 7);
        assert_eq!(report.coverage, 1.0);
    }

    #[test]
    fn vocab_coverage_partial_and_vacuous() {
        let split = tiny_split(&["has"], &["ask"]);
        // unseen grams: a s k as sk ask -> present: a s as
        let report = build_vocab(&split, 3, TokenizeConfig::default()).unwrap();
        assert_eq!(report.coverage, 0.5);
        let split = tiny_split(&["has"], &[]);
        assert_eq!(
            build_vocab(&split, 3, TokenizeConfig::default())
                .unwrap()
                .coverage,
            1.0
        );
    }

    #[test]
    fn vocab_independent_of_relation_order() {
        let a = build_vocab(
            &tiny_split(&["works at", "plays for"], &[]),
            4,
            TokenizeConfig::default(),
        )
        .unwrap();
        let b = build_vocab(
            &tiny_split(&["plays for", "works at"], &[]),
            4,
            TokenizeConfig::default(),
        )
        .unwrap();
        assert_eq!(a.vocab, b.vocab);
    }
}
