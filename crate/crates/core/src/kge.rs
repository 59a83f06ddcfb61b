//! Triple scoring from entity embeddings and encoded relation vectors.
//!
//! Both scorers return "higher is better" values so a single softmax
//! cross-entropy head serves either:
//!
//! * TransE: `-‖e_h + S - e_t‖₂`
//! * DistMult: `Σ_i e_h[i] · S[i] · e_t[i]`

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndtensor::{Tape, Tensor, TensorError, Var};

pub const ENTITY_TABLE: &str = "entities";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScoreError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreFn {
    #[default]
    TransE,
    DistMult,
}

impl std::str::FromStr for ScoreFn {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "transe" => Ok(Self::TransE),
            "distmult" => Ok(Self::DistMult),
            other => Err(format!("unknown score function {other:?}")),
        }
    }
}

/// Entity table initializer: N(0, 1/d).
pub fn init_entity_table<R: Rng + ?Sized>(n_entities: usize, dim: usize, rng: &mut R) -> Tensor {
    let dist = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).expect("positive std");
    let data = (0..n_entities * dim).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![n_entities, dim], data).expect("shape")
}

/// Scalar score of one triple, on plain slices.
pub fn score(
    score_fn: ScoreFn,
    head: &[f64],
    relation: &[f64],
    tail: &[f64],
) -> Result<f64, ScoreError> {
    if head.len() != relation.len() || tail.len() != relation.len() {
        return Err(ScoreError::DimensionMismatch(format!(
            "head {}, relation {}, tail {}",
            head.len(),
            relation.len(),
            tail.len()
        )));
    }
    Ok(match score_fn {
        ScoreFn::TransE => {
            let sq: f64 = head
                .iter()
                .zip(relation)
                .zip(tail)
                .map(|((h, r), t)| {
                    let d = h + r - t;
                    d * d
                })
                .sum();
            -sq.sqrt()
        }
        ScoreFn::DistMult => head
            .iter()
            .zip(relation)
            .zip(tail)
            .map(|((h, r), t)| h * r * t)
            .sum(),
    })
}

/// Scores of `(head, relation, t)` for every row `t` of `table`, recorded on
/// the tape so they can serve as logits. `head` and `relation` are vectors.
pub fn score_all_tails(
    tape: &mut Tape,
    score_fn: ScoreFn,
    head: Var,
    relation: Var,
    table: Var,
) -> Result<Var, ScoreError> {
    let (hd, rd) = (tape.value(head).len(), tape.value(relation).len());
    let td = tape.value(table).dims2().1;
    if hd != rd || td != rd || tape.value(table).rank() != 2 {
        return Err(ScoreError::DimensionMismatch(format!(
            "head {hd}, relation {rd}, entity table {:?}",
            tape.value(table).shape()
        )));
    }
    match score_fn {
        ScoreFn::TransE => {
            let query = tape.add(head, relation)?;
            let neg_query = tape.neg(query);
            let diff = tape.add_row(table, neg_query)?;
            let dist = tape.row_l2_norm(diff);
            Ok(tape.neg(dist))
        }
        ScoreFn::DistMult => {
            let hr = tape.mul(head, relation)?;
            let prod = tape.mul_row(table, hr)?;
            Ok(tape.row_sum(prod))
        }
    }
}

/// Row `index` of the entity table as a vector on the tape.
pub fn entity_row(tape: &mut Tape, table: Var, index: usize) -> Result<Var, ScoreError> {
    let row = tape.gather_rows(table, &[index])?;
    let d = tape.value(row).len();
    Ok(tape.reshape(row, &[d])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn transe_examples() {
        assert_eq!(
            score(ScoreFn::TransE, &[0.0; 3], &[0.0; 3], &[0.0; 3]).unwrap(),
            0.0
        );
        assert_eq!(
            score(ScoreFn::TransE, &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]).unwrap(),
            0.0
        );
        assert_eq!(
            score(ScoreFn::TransE, &[0.0, 0.0], &[3.0, 0.0], &[0.0, 4.0]).unwrap(),
            -5.0
        );
    }

    #[test]
    fn distmult_example() {
        assert_eq!(
            score(ScoreFn::DistMult, &[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]).unwrap(),
            63.0
        );
    }

    #[test]
    fn distmult_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = init_entity_table(2, 7, &mut rng);
        let r: Vec<f64> = (0..7).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a = score(ScoreFn::DistMult, t.row(0), &r, t.row(1)).unwrap();
        let b = score(ScoreFn::DistMult, t.row(1), &r, t.row(0)).unwrap();
        // same products, different association order
        assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
    }

    #[test]
    fn dimension_mismatch() {
        assert!(matches!(
            score(ScoreFn::TransE, &[1.0], &[1.0, 2.0], &[1.0, 2.0]),
            Err(ScoreError::DimensionMismatch(_))
        ));
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::vector(vec![0.0; 3]));
        let r = tape.constant(Tensor::vector(vec![0.0; 3]));
        let e = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(score_all_tails(&mut tape, ScoreFn::DistMult, h, r, e).is_err());
    }

    #[test]
    fn zero_table_transe() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::vector(vec![3.0, 0.0]));
        let r = tape.constant(Tensor::vector(vec![0.0, 4.0]));
        let e = tape.constant(Tensor::zeros(&[3, 2]));
        let s = score_all_tails(&mut tape, ScoreFn::TransE, h, r, e).unwrap();
        assert_eq!(tape.value(s).data(), &[-5.0, -5.0, -5.0]);
    }

    #[test]
    fn translation_is_only_zero_at_exact_tail() {
        let h = [0.5, -1.0, 2.0];
        let r = [1.0, 1.0, -1.0];
        let exact = [1.5, 0.0, 1.0];
        assert_eq!(score(ScoreFn::TransE, &h, &r, &exact).unwrap(), 0.0);
        let off = [1.5, 0.0, 1.0 + 1e-9];
        assert!(score(ScoreFn::TransE, &h, &r, &off).unwrap() < 0.0);
    }
}
