//! Synthetic splits with a planted, learnable structure.
//!
//! Entities get latent points `z_e ~ N(0, I_k)`. Relation names are
//! `"<verb> <preposition>"` pairs, and every word carries a latent offset;
//! a relation's offset is the sum of its two words' offsets. The tail of
//! `(h, r)` is the entity closest to `z_h + offset(r)` (excluding `h`).
//!
//! Seen relations cover every verb and every preposition, so each unseen
//! relation is a new combination of known words and shares all of its
//! n-grams with the seen relations.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write, DatasetError, Entity, Query, Relation, Triple, ZslSplit};

const VERBS: [&str; 10] = [
    "works", "plays", "lives", "studies", "teaches", "writes", "sells", "competes", "trains",
    "invests",
];
const PREPOSITIONS: [&str; 8] = [
    "at", "for", "in", "with", "from", "near", "against", "under",
];

const LATENT_DIM: usize = 4;
const WORD_SCALE: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSizes {
    pub n_entities: usize,
    pub n_seen: usize,
    pub n_unseen: usize,
    pub triples_per_relation: usize,
    pub candidates: usize,
    /// Held-out triples per seen relation written to `dev.tsv`.
    pub dev_per_relation: usize,
}

impl Default for SynthSizes {
    fn default() -> Self {
        Self {
            n_entities: 50,
            n_seen: 8,
            n_unseen: 2,
            triples_per_relation: 40,
            candidates: 20,
            dev_per_relation: 2,
        }
    }
}

/// `(verb, preposition)` indices.
type Cell = (usize, usize);

/// Grid of verb × preposition cells: seen cells first (covering every row
/// and column), then unseen cells drawn from the remainder.
fn pick_relations(rng: &mut ChaCha8Rng, n_seen: usize, n_unseen: usize) -> (Vec<Cell>, Vec<Cell>) {
    let total = (n_seen + n_unseen).max(1);
    let cols = ((total as f64).sqrt().floor() as usize).clamp(1, PREPOSITIONS.len());
    let rows = total.div_ceil(cols).min(VERBS.len());
    // a cover needs at least max(rows, cols) seen cells
    let (rows, cols) = if n_seen < rows.max(cols) && n_seen > 0 {
        (rows.min(n_seen), cols.min(n_seen))
    } else {
        (rows, cols)
    };

    let mut verbs: Vec<usize> = (0..VERBS.len()).collect();
    let mut preps: Vec<usize> = (0..PREPOSITIONS.len()).collect();
    verbs.shuffle(rng);
    preps.shuffle(rng);

    let mut cells: Vec<(usize, usize)> = Vec::new();
    for i in 0..rows.max(cols) {
        let c = (i % rows, i % cols);
        if !cells.contains(&c) {
            cells.push(c);
        }
    }
    let mut rest: Vec<(usize, usize)> = (0..rows)
        .flat_map(|r| (0..cols).map(move |c| (r, c)))
        .filter(|c| !cells.contains(c))
        .collect();
    rest.shuffle(rng);
    cells.extend(rest);

    let map = |(r, c): (usize, usize)| (verbs[r], preps[c]);
    let seen = cells.iter().take(n_seen).copied().map(map).collect();
    let unseen = cells
        .iter()
        .skip(n_seen)
        .take(n_unseen)
        .copied()
        .map(map)
        .collect();
    (seen, unseen)
}

fn nearest(points: &[Vec<f64>], target: &[f64], exclude: usize) -> usize {
    let mut best = (f64::INFINITY, usize::MAX);
    for (i, p) in points.iter().enumerate() {
        if i == exclude {
            continue;
        }
        let d: f64 = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Builds a split in memory. Deterministic in `seed`.
pub fn synth_fixture(seed: u64, sizes: SynthSizes) -> ZslSplit {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let points: Vec<Vec<f64>> = (0..sizes.n_entities)
        .map(|_| {
            (0..LATENT_DIM)
                .map(|_| std_normal.sample(&mut rng))
                .collect()
        })
        .collect();
    let offset = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..LATENT_DIM)
            .map(|_| WORD_SCALE * std_normal.sample(rng))
            .collect()
    };
    let verb_offsets: Vec<Vec<f64>> = VERBS.iter().map(|_| offset(&mut rng)).collect();
    let prep_offsets: Vec<Vec<f64>> = PREPOSITIONS.iter().map(|_| offset(&mut rng)).collect();

    let (seen_cells, unseen_cells) = pick_relations(&mut rng, sizes.n_seen, sizes.n_unseen);
    let entities: Vec<Entity> = (0..sizes.n_entities)
        .map(|i| Entity {
            id: i as u64,
            name: format!("entity_{i:03}"),
        })
        .collect();
    let relations: Vec<Relation> = seen_cells
        .iter()
        .chain(&unseen_cells)
        .enumerate()
        .map(|(i, &(v, p))| Relation {
            id: i as u64,
            surface: format!("{} {}", VERBS[v], PREPOSITIONS[p]),
        })
        .collect();

    let tail_of = |head: usize, (v, p): (usize, usize)| {
        let target: Vec<f64> = (0..LATENT_DIM)
            .map(|k| points[head][k] + verb_offsets[v][k] + prep_offsets[p][k])
            .collect();
        nearest(&points, &target, head)
    };

    let all: Vec<usize> = (0..sizes.n_entities).collect();
    let mut train = Vec::new();
    let mut dev = Vec::new();
    for (r, &cell) in seen_cells.iter().enumerate() {
        let want = (sizes.triples_per_relation + sizes.dev_per_relation).min(sizes.n_entities);
        let heads: Vec<usize> = all.choose_multiple(&mut rng, want).copied().collect();
        for (k, &h) in heads.iter().enumerate() {
            let t = Triple {
                head: h,
                relation: r,
                tail: tail_of(h, cell),
            };
            if k < sizes.triples_per_relation {
                train.push(t);
            } else {
                dev.push(t);
            }
        }
    }

    let mut test = Vec::new();
    for (u, &cell) in unseen_cells.iter().enumerate() {
        let r = seen_cells.len() + u;
        let n = sizes.triples_per_relation.min(sizes.n_entities);
        let heads: Vec<usize> = all.choose_multiple(&mut rng, n).copied().collect();
        for h in heads {
            let truth = tail_of(h, cell);
            let others: Vec<usize> = all.iter().copied().filter(|&e| e != truth).collect();
            let mut candidates: Vec<usize> = others
                .choose_multiple(&mut rng, sizes.candidates.saturating_sub(1))
                .copied()
                .collect();
            let slot = rng.random_range(0..=candidates.len());
            candidates.insert(slot, truth);
            test.push(Query {
                head: h,
                relation: r,
                truth,
                candidates,
            });
        }
    }

    ZslSplit {
        entities,
        relations,
        seen: (0..seen_cells.len()).collect(),
        unseen: (seen_cells.len()..seen_cells.len() + unseen_cells.len()).collect(),
        train,
        dev,
        test,
    }
}

/// Generates a fixture and writes it to `dir`.
pub fn write_fixture(seed: u64, sizes: SynthSizes, dir: &Path) -> Result<ZslSplit, DatasetError> {
    let split = synth_fixture(seed, sizes);
    write(&split, dir)?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::build_vocab;
    use crate::ngram_graph::TokenizeConfig;
    use std::collections::BTreeSet;

    #[test]
    fn default_sizes() {
        let s = synth_fixture(0, SynthSizes::default());
        assert_eq!(s.entities.len(), 50);
        assert_eq!(s.seen.len(), 8);
        assert_eq!(s.unseen.len(), 2);
        assert_eq!(s.train.len(), 320);
        assert_eq!(s.dev.len(), 16);
        assert_eq!(s.test.len(), 80);
        assert!(s
            .test
            .iter()
            .all(|q| q.candidates.len() == 20 && q.candidates.contains(&q.truth)));
        let distinct: BTreeSet<&str> = s.relations.iter().map(|r| r.surface.as_str()).collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn unseen_relations_reuse_seen_words() {
        for seed in 0..10 {
            let s = synth_fixture(seed, SynthSizes::default());
            let seen_words: BTreeSet<&str> = s
                .seen
                .iter()
                .flat_map(|&r| s.relations[r].surface.split(' '))
                .collect();
            for &u in &s.unseen {
                for w in s.relations[u].surface.split(' ') {
                    assert!(seen_words.contains(w), "seed {seed}: {w}");
                }
            }
            let report = build_vocab(&s, 13, TokenizeConfig::default()).unwrap();
            assert!(report.coverage >= 0.7);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            synth_fixture(3, SynthSizes::default()),
            synth_fixture(3, SynthSizes::default())
        );
        assert_ne!(
            synth_fixture(3, SynthSizes::default()),
            synth_fixture(4, SynthSizes::default())
        );
    }

    #[test]
    fn no_unseen_relations() {
        let s = synth_fixture(
            1,
            SynthSizes {
                n_unseen: 0,
                ..Default::default()
            },
        );
        assert!(s.test.is_empty());
        assert!(s.unseen.is_empty());
        assert_eq!(s.train.len(), 320);
    }
}
