//! Candidate ranking and MRR / hits@k.
//!
//! Ranking is raw within each candidate set. Ties are broken by ascending
//! entity index, so a query's ranking never depends on candidate order.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Query, Relation, Triple};
use crate::kge::{score, ScoreError};
use crate::model::{LinkModel, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no ranks to aggregate")]
    EmptyInput,
    #[error("rank must be at least 1")]
    InvalidRank,
    #[error("candidate entity index {0} is out of range")]
    UnknownCandidate(usize),
    #[error("query has no candidates")]
    NoCandidates,
    #[error("ground truth {0} is not among the candidates")]
    TruthNotCandidate(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> Result<f64, EvalError> {
    check_ranks(ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Fraction of ranks `<= k`.
pub fn hits_at_k(ranks: &[usize], k: usize) -> Result<f64, EvalError> {
    check_ranks(ranks)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

fn check_ranks(ranks: &[usize]) -> Result<(), EvalError> {
    if ranks.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if ranks.contains(&0) {
        return Err(EvalError::InvalidRank);
    }
    Ok(())
}

/// Descending score, then ascending entity index. NaN sorts last.
fn by_score(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    let key = |s: f64| if s.is_nan() { f64::NEG_INFINITY } else { s };
    key(b.1).total_cmp(&key(a.1)).then(a.0.cmp(&b.0))
}

/// Scores and sorts `candidates` for `(head, relation)`, best first.
pub fn predict_tail(
    model: &LinkModel,
    head: usize,
    relation: &[f64],
    candidates: &[usize],
) -> Result<Vec<(usize, f64)>, EvalError> {
    let h = model.entity_vector(head)?;
    let mut scored = candidates
        .iter()
        .map(|&c| {
            let t = model
                .entity_vector(c)
                .map_err(|_| EvalError::UnknownCandidate(c))?;
            Ok((c, score(model.config.score_fn, h, relation, t)?))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    scored.sort_by(by_score);
    Ok(scored)
}

/// 1-based position of `truth` in a ranking from [`predict_tail`].
pub fn rank_of(ranking: &[(usize, f64)], truth: usize) -> Result<usize, EvalError> {
    ranking
        .iter()
        .position(|&(e, _)| e == truth)
        .map(|p| p + 1)
        .ok_or(EvalError::TruthNotCandidate(truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "MRR")]
    pub mrr: f64,
    #[serde(rename = "hits@10")]
    pub hits10: f64,
    #[serde(rename = "hits@5")]
    pub hits5: f64,
    #[serde(rename = "hits@1")]
    pub hits1: f64,
    pub queries: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self, EvalError> {
        Ok(Self {
            mrr: mrr(ranks)?,
            hits10: hits_at_k(ranks, 10)?,
            hits5: hits_at_k(ranks, 5)?,
            hits1: hits_at_k(ranks, 1)?,
            queries: ranks.len(),
        })
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "| {:>7} | {:>7} | {:>7} | {:>7} | {:>7} |",
            "MRR", "hits@10", "hits@5", "hits@1", "queries"
        )?;
        writeln!(f, "|{0:-<9}|{0:-<9}|{0:-<9}|{0:-<9}|{0:-<9}|", "")?;
        writeln!(
            f,
            "| {:>7.4} | {:>7.4} | {:>7.4} | {:>7.4} | {:>7} |",
            self.mrr, self.hits10, self.hits5, self.hits1, self.queries
        )
    }
}

/// One line of the per-query dump. Ids are the dataset's entity and relation ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryResult {
    pub head: u64,
    pub relation: u64,
    pub truth: u64,
    pub rank: usize,
    pub top5: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub per_query: Vec<QueryResult>,
}

impl Evaluation {
    pub fn ranks(&self) -> Vec<usize> {
        self.per_query.iter().map(|q| q.rank).collect()
    }

    pub fn dump_jsonl(&self) -> String {
        self.per_query
            .iter()
            .map(|q| serde_json::to_string(q).expect("plain record") + "\n")
            .collect()
    }
}

/// Ranks every query's truth within its candidates. `relations` is the
/// full relation table the query indices refer to.
pub fn evaluate(
    model: &LinkModel,
    relations: &[Relation],
    queries: &[Query],
) -> Result<Evaluation, EvalError> {
    if queries.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let used: Vec<usize> = {
        let mut v: Vec<usize> = queries.iter().map(|q| q.relation).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let vectors = relation_vectors_for(model, relations, &used)?;
    let mut per_query = Vec::with_capacity(queries.len());
    for q in queries {
        if q.candidates.is_empty() {
            return Err(EvalError::NoCandidates);
        }
        let rel = &vectors[used.binary_search(&q.relation).expect("collected above")];
        let ranking = predict_tail(model, q.head, rel, &q.candidates)?;
        let rank = rank_of(&ranking, q.truth)?;
        let id = |e: usize| model.entities[e].id;
        per_query.push(QueryResult {
            head: id(q.head),
            relation: relations[q.relation].id,
            truth: id(q.truth),
            rank,
            top5: ranking.iter().take(5).map(|&(e, _)| id(e)).collect(),
        });
    }
    let ranks: Vec<usize> = per_query.iter().map(|q| q.rank).collect();
    Ok(Evaluation {
        metrics: Metrics::from_ranks(&ranks)?,
        per_query,
    })
}

/// Rank of each triple's tail among all entities.
pub fn rank_triples(
    model: &LinkModel,
    relations: &[Relation],
    triples: &[Triple],
) -> Result<Vec<usize>, EvalError> {
    let mut used: Vec<usize> = triples.iter().map(|t| t.relation).collect();
    used.sort_unstable();
    used.dedup();
    let vectors = relation_vectors_for(model, relations, &used)?;
    let all: Vec<usize> = (0..model.n_entities()).collect();
    triples
        .iter()
        .map(|t| {
            let rel = &vectors[used.binary_search(&t.relation).expect("collected above")];
            rank_of(&predict_tail(model, t.head, rel, &all)?, t.tail)
        })
        .collect()
}

fn relation_vectors_for(
    model: &LinkModel,
    relations: &[Relation],
    used: &[usize],
) -> Result<Vec<Vec<f64>>, EvalError> {
    let subset = used
        .iter()
        .map(|&r| {
            relations
                .get(r)
                .cloned()
                .ok_or(ModelError::UnknownRelation(r))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let inputs = model.prepare(&subset)?;
    Ok(model.relation_vectors(&inputs)?)
}
