//! Shared helpers for the integration tests and the acceptance runner.
//! The reference implementations here use plain nested `Vec`s and loops so
//! they share no code with the tape-based versions they check.

#![allow(dead_code)]

use gramlink::gram_transformer::{KeySource, MaskMode};
use gramlink::ndtensor::Tensor;
use gramlink::ngram_graph::{build_graph, tokenize, GraphConfig, NGramGraph, NodeOrder};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn graph(text: &str, order: NodeOrder, max_nodes: usize) -> NGramGraph {
    let config = GraphConfig {
        order,
        max_nodes,
        ..Default::default()
    };
    build_graph(&tokenize(text, Default::default()).unwrap(), &config).unwrap()
}

/// A lowercase name of 1 to 3 words, each 1 to `max_len` letters from a
/// small alphabet so that words share n-grams.
pub fn random_name<R: Rng>(rng: &mut R, max_len: usize) -> String {
    const ALPHABET: &[u8] = b"abcdeor";
    let words = rng.random_range(1..=3);
    (0..words)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len)
                .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
                .collect::<String>()
        })
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn to_mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

pub fn mat_from_u8(rows: &[Vec<u8>]) -> Mat {
    rows.iter()
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let n = b[0].len();
    a.iter()
        .map(|row| {
            (0..n)
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn add_vec(a: &Mat, v: &[f64]) -> Mat {
    a.iter()
        .map(|row| row.iter().zip(v).map(|(x, y)| x + y).collect())
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// One edge-kind term of the combined weights.
fn masked_term(q: &Mat, k: &Mat, mask: &Mat, mode: MaskMode) -> Mat {
    let d_k = q[0].len() as f64;
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d_k.sqrt())
                .collect();
            match mode {
                MaskMode::Post | MaskMode::PostRenorm => {
                    let p = softmax(&scores);
                    let masked: Vec<f64> = p.iter().zip(&mask[i]).map(|(a, m)| a * m).collect();
                    if mode == MaskMode::PostRenorm {
                        let s: f64 = masked.iter().sum();
                        masked.iter().map(|x| x / s).collect()
                    } else {
                        masked
                    }
                }
                MaskMode::Pre => {
                    let kept: Vec<f64> = scores
                        .iter()
                        .zip(&mask[i])
                        .filter(|(_, &m)| m != 0.0)
                        .map(|(s, _)| *s)
                        .collect();
                    let p = softmax(&kept);
                    let mut it = p.into_iter();
                    mask[i]
                        .iter()
                        .map(|&m| if m != 0.0 { it.next().unwrap() } else { 0.0 })
                        .collect()
                }
            }
        })
        .collect()
}

pub struct HeadWeights<'a> {
    pub wq: &'a Mat,
    pub wk: &'a Mat,
    pub wv: &'a Mat,
    pub r_a: &'a [f64],
    pub r_c: &'a [f64],
}

/// Reference edge-aware head: returns (combined weights, output).
pub fn reference_head(
    x: &Mat,
    w: &HeadWeights,
    ma: &Mat,
    mc: &Mat,
    mode: MaskMode,
    keys: KeySource,
) -> (Mat, Mat) {
    let q = matmul(x, w.wq);
    let k = matmul(x, w.wk);
    let v = matmul(x, w.wv);
    let mut combined: Mat = vec![vec![0.0; x.len()]; x.len()];
    for (r, mask) in [(w.r_a, ma), (w.r_c, mc)] {
        let qr = add_vec(&q, r);
        let kr = match keys {
            KeySource::Projected => add_vec(&k, r),
            KeySource::Tied => qr.clone(),
        };
        let term = masked_term(&qr, &kr, mask, mode);
        for (crow, trow) in combined.iter_mut().zip(&term) {
            for (c, t) in crow.iter_mut().zip(trow) {
                *c += t;
            }
        }
    }
    let out = matmul(&combined, &v);
    (combined, out)
}

/// Reference standard head: softmax(QKᵀ/√d_k)·V.
pub fn reference_standard(x: &Mat, wq: &Mat, wk: &Mat, wv: &Mat) -> Mat {
    let n = x.len();
    let ones = vec![vec![1.0; n]; n];
    let q = matmul(x, wq);
    let k = matmul(x, wk);
    let w = masked_term(&q, &k, &ones, MaskMode::Post);
    matmul(&w, &matmul(x, wv))
}

pub fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

/// Expected MRR when the truth's rank is uniform over `n` candidates.
pub fn uniform_mrr_exact(n: usize) -> f64 {
    (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64
}

/// Monte Carlo estimate of the same quantity: the truth and `n - 1`
/// distractors get i.i.d. uniform scores.
pub fn uniform_mrr_monte_carlo(n: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = rng(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let truth: f64 = rng.random();
        let better = (1..n).filter(|_| rng.random::<f64>() > truth).count();
        total += 1.0 / (better + 1) as f64;
    }
    total / trials as f64
}
