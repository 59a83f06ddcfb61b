//! Conversion from the task-per-relation JSON layout used by the published
//! NELL-ZS / Wiki-ZS releases:
//!
//! * `train_tasks.json`, `test_tasks.json`, optional `dev_tasks.json`:
//!   `{"relation": [[head, relation, tail], ...], ...}`
//! * `rel2candidates.json`: `{"relation": [entity, ...], ...}`
//!
//! Names become ids in sorted order. Test triples become queries whose
//! candidates are the relation's candidate list (plus the truth, when the
//! list omits it). Without `dev_tasks.json`, a seeded 5% of the training
//! triples is held out as dev.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{write, DatasetError, Entity, Query, Relation, Triple, ZslSplit};

type Tasks = BTreeMap<String, Vec<[String; 3]>>;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvertOptions {
    pub max_seen: Option<usize>,
    pub max_unseen: Option<usize>,
    pub max_dev: Option<usize>,
    pub max_triples_per_relation: Option<usize>,
    pub seed: u64,
}

/// Counts of what was written, for cross-checking against a later load.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversionLog {
    pub entities: usize,
    pub relations: usize,
    pub seen_relations: usize,
    pub unseen_relations: usize,
    pub dev_relations: usize,
    pub train_triples: usize,
    pub dev_triples: usize,
    pub test_queries: usize,
    pub truths_added_to_candidates: usize,
    pub dev_from_train: bool,
}

fn read_json<T: for<'de> Deserialize<'de>>(
    dir: &Path,
    name: &str,
) -> Result<Option<T>, DatasetError> {
    let path = dir.join(name);
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(source) => return Err(DatasetError::Io { path, source }),
    };
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| DatasetError::MalformedLine {
            file: name.to_string(),
            line: e.line(),
            message: e.to_string(),
        })
}

fn take(
    tasks: &Tasks,
    limit: Option<usize>,
    per_rel: Option<usize>,
) -> Vec<(&str, Vec<&[String; 3]>)> {
    tasks
        .iter()
        .take(limit.unwrap_or(usize::MAX))
        .map(|(r, ts)| {
            (
                r.as_str(),
                ts.iter().take(per_rel.unwrap_or(usize::MAX)).collect(),
            )
        })
        .collect()
}

pub fn convert_zsgan(
    src: &Path,
    out: &Path,
    options: ConvertOptions,
) -> Result<ConversionLog, DatasetError> {
    let train_tasks: Tasks = read_json(src, "train_tasks.json")?
        .ok_or_else(|| DatasetError::MissingFile(src.join("train_tasks.json")))?;
    let test_tasks: Tasks = read_json(src, "test_tasks.json")?
        .ok_or_else(|| DatasetError::MissingFile(src.join("test_tasks.json")))?;
    let dev_tasks: Option<Tasks> = read_json(src, "dev_tasks.json")?;
    let candidates: BTreeMap<String, Vec<String>> = read_json(src, "rel2candidates.json")?
        .ok_or_else(|| DatasetError::MissingFile(src.join("rel2candidates.json")))?;

    let per_rel = options.max_triples_per_relation;
    let train_sel = take(&train_tasks, options.max_seen, per_rel);
    let test_sel = take(&test_tasks, options.max_unseen, per_rel);
    let dev_sel = dev_tasks
        .as_ref()
        .map(|d| take(d, options.max_dev, per_rel))
        .unwrap_or_default();

    let train_rels: BTreeSet<&str> = train_sel.iter().map(|(r, _)| *r).collect();
    if let Some((r, _)) = test_sel.iter().find(|(r, _)| train_rels.contains(r)) {
        return Err(DatasetError::SplitOverlap(r.to_string()));
    }

    let mut entity_names: BTreeSet<&str> = BTreeSet::new();
    let mut relation_names: BTreeSet<&str> = BTreeSet::new();
    for (r, ts) in train_sel.iter().chain(&dev_sel).chain(&test_sel) {
        relation_names.insert(r);
        for t in ts {
            entity_names.insert(&t[0]);
            entity_names.insert(&t[2]);
        }
    }
    for (r, _) in &test_sel {
        let list = candidates
            .get(*r)
            .ok_or_else(|| DatasetError::MalformedLine {
                file: "rel2candidates.json".to_string(),
                line: 0,
                message: format!("no candidates for test relation {r:?}"),
            })?;
        entity_names.extend(list.iter().map(String::as_str));
    }

    let entities: Vec<Entity> = entity_names
        .iter()
        .enumerate()
        .map(|(i, n)| Entity {
            id: i as u64,
            name: n.to_string(),
        })
        .collect();
    let relations: Vec<Relation> = relation_names
        .iter()
        .enumerate()
        .map(|(i, n)| Relation {
            id: i as u64,
            surface: n.to_string(),
        })
        .collect();
    let entity_index: BTreeMap<&str, usize> = entity_names
        .iter()
        .enumerate()
        .map(|(i, n)| (*n, i))
        .collect();
    let relation_index: BTreeMap<&str, usize> = relation_names
        .iter()
        .enumerate()
        .map(|(i, n)| (*n, i))
        .collect();
    let ent = |n: &str| entity_index[n];
    let rel = |n: &str| relation_index[n];
    let triples = |sel: &[(&str, Vec<&[String; 3]>)]| -> Vec<Triple> {
        sel.iter()
            .flat_map(|(r, ts)| {
                ts.iter().map(|t| Triple {
                    head: ent(&t[0]),
                    relation: rel(r),
                    tail: ent(&t[2]),
                })
            })
            .collect()
    };

    let mut train = triples(&train_sel);
    let (dev, dev_from_train) = if dev_tasks.is_some() {
        (triples(&dev_sel), false)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        train.shuffle(&mut rng);
        let n_dev = train.len() / 20;
        let dev: Vec<Triple> = train.drain(..n_dev).collect();
        train.sort();
        (dev, true)
    };

    let mut truths_added = 0;
    let mut test = Vec::new();
    for (r, ts) in &test_sel {
        let list: Vec<usize> = candidates[*r].iter().map(|c| ent(c)).collect();
        for t in ts {
            let truth = ent(&t[2]);
            let mut cands = list.clone();
            if !cands.contains(&truth) {
                cands.push(truth);
                truths_added += 1;
            }
            test.push(Query {
                head: ent(&t[0]),
                relation: rel(r),
                truth,
                candidates: cands,
            });
        }
    }

    let seen: BTreeSet<usize> = train.iter().map(|t| t.relation).collect();
    let unseen: BTreeSet<usize> = test.iter().map(|q| q.relation).collect();
    let dev_relations: BTreeSet<usize> = dev.iter().map(|t| t.relation).collect();
    let split = ZslSplit {
        entities,
        relations,
        seen,
        unseen,
        train,
        dev,
        test,
    };
    write(&split, out)?;

    let log = ConversionLog {
        entities: split.entities.len(),
        relations: split.relations.len(),
        seen_relations: split.seen.len(),
        unseen_relations: split.unseen.len(),
        dev_relations: dev_relations.len(),
        train_triples: split.train.len(),
        dev_triples: split.dev.len(),
        test_queries: split.test.len(),
        truths_added_to_candidates: truths_added,
        dev_from_train,
    };
    let log_path = out.join("conversion_log.json");
    let mut text = serde_json::to_string_pretty(&log).expect("log serializes");
    text.push('\n');
    std::fs::write(&log_path, text).map_err(|source| DatasetError::Io {
        path: log_path,
        source,
    })?;
    Ok(log)
}
