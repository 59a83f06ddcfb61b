//! Relation encoder over hierarchical n-gram graphs.
//!
//! A block splits each head's projections by edge kind:
//!
//! ```text
//! Q^a = Q + r_a    K^a = K + r_a
//! Q^c = Q + r_c    K^c = K + r_c
//! W   = mask(softmax(Q^a K^aᵀ / √d_k), M_a) + mask(softmax(Q^c K^cᵀ / √d_k), M_c)
//! out = W · V
//! ```
//!
//! `r_a` and `r_c` are `d_model` vectors; head `h` uses the `h`-th slice of
//! width `d_k`. How the mask enters is selected by [`MaskMode`]. Blocks are
//! pre-norm Transformer blocks with a GELU feed-forward layer; the relation
//! vector is the mean of the final node states.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ndtensor::{read_tensor_file, Bound, ParamSet, Tape, Tensor, TensorError, Var};
use crate::ngram_graph::{BoolMatrix, NGramGraph};

pub const UNK: &str = "<unk>";
pub const LN_EPS: f64 = 1e-5;

pub const NODE_EMB: &str = "node_embeddings";
pub const POS_EMB: &str = "position_embeddings";
pub const EDGE_ADJOIN: &str = "edge_adjoin";
pub const EDGE_COMP: &str = "edge_compositional";

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("graph has {nodes} nodes but the position table holds {max_nodes}")]
    GraphTooLarge { nodes: usize, max_nodes: usize },
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("mask is {mask}x{mask} but the graph has {nodes} nodes")]
    MaskShapeMismatch { mask: usize, nodes: usize },
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadSplit { d_model: usize, n_heads: usize },
    #[error("edge embedding file: {0}")]
    EdgeFile(String),
}

/// Where the graph masks enter the attention weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    /// Full-row softmax, then elementwise product with the 0/1 mask.
    #[default]
    Post,
    /// As `Post`, then each masked row is rescaled to sum to one.
    PostRenorm,
    /// Softmax over the unmasked entries only.
    Pre,
}

impl std::str::FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "post" => Ok(Self::Post),
            "post-renorm" | "post_renorm" => Ok(Self::PostRenorm),
            "pre" => Ok(Self::Pre),
            other => Err(format!("unknown mask mode {other:?}")),
        }
    }
}

/// Encoder variant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Relation-masked attention over the full n-gram graph.
    #[default]
    Full,
    /// Plain self-attention over the character (1-gram) sequence only.
    Wng,
    /// Plain self-attention over all graph nodes, no masks, no edge vectors.
    Wg,
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Self::Full),
            "wng" => Ok(Self::Wng),
            "wg" => Ok(Self::Wg),
            other => Err(format!("unknown variant {other:?}")),
        }
    }
}

/// Source of the keys inside the edge-aware attention terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeySource {
    /// `K^a = K + r_a` with `K` from its own projection.
    #[default]
    Projected,
    /// `K^a = Q^a`: the query projection doubles as the key.
    Tied,
}

impl std::str::FromStr for KeySource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "projected" => Ok(Self::Projected),
            "tied" => Ok(Self::Tied),
            other => Err(format!("unknown key source {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GramTransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub mask_mode: MaskMode,
    pub variant: Variant,
    pub key_source: KeySource,
    pub max_nodes: usize,
}

impl Default for GramTransformerConfig {
    fn default() -> Self {
        Self {
            d_model: 201,
            n_heads: 3,
            n_layers: 1,
            d_ff: 200,
            dropout: 0.5,
            mask_mode: MaskMode::Post,
            variant: Variant::Full,
            key_source: KeySource::Projected,
            max_nodes: 90,
        }
    }
}

impl GramTransformerConfig {
    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), EncodeError> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(EncodeError::HeadSplit {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TensorError::InvalidRate(self.dropout).into());
        }
        Ok(())
    }
}

/// N-gram text → row of the node embedding table. The last row is `<unk>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GramVocab {
    grams: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl GramVocab {
    /// Grams are sorted and deduplicated so ids do not depend on input order.
    pub fn new<I, S>(grams: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut grams: Vec<String> = grams.into_iter().map(Into::into).collect();
        grams.sort();
        grams.dedup();
        grams.retain(|g| g != UNK);
        let mut vocab = Self {
            grams,
            index: BTreeMap::new(),
        };
        vocab.reindex();
        vocab
    }

    fn reindex(&mut self) {
        self.index = self
            .grams
            .iter()
            .enumerate()
            .map(|(i, g)| (g.clone(), i))
            .collect();
    }

    /// Rebuilds the lookup map after deserialization.
    pub fn restored(mut self) -> Self {
        self.reindex();
        self
    }

    pub fn unk_id(&self) -> usize {
        self.grams.len()
    }

    /// Number of embedding rows, including `<unk>`.
    pub fn size(&self) -> usize {
        self.grams.len() + 1
    }

    pub fn id(&self, gram: &str) -> usize {
        self.index.get(gram).copied().unwrap_or(self.unk_id())
    }

    pub fn contains(&self, gram: &str) -> bool {
        self.index.contains_key(gram)
    }

    pub fn grams(&self) -> &[String] {
        &self.grams
    }
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("layer{layer}.{part}")
}

fn head_name(layer: usize, head: usize, part: &str) -> String {
    format!("layer{layer}.head{head}.{part}")
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape")
}

fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Fresh encoder parameters. Embeddings ~ N(0, 0.02²); projections are
/// Xavier-uniform; layer-norm gains start at 1 and biases at 0.
pub fn init_params<R: Rng + ?Sized>(
    config: &GramTransformerConfig,
    vocab_size: usize,
    rng: &mut R,
) -> Result<ParamSet, EncodeError> {
    config.validate()?;
    let d = config.d_model;
    let dk = config.d_k();
    let mut p = ParamSet::new();
    p.insert(NODE_EMB, normal(rng, &[vocab_size, d], 0.02));
    p.insert(POS_EMB, normal(rng, &[config.max_nodes, d], 0.02));
    p.insert(EDGE_ADJOIN, normal(rng, &[d], 0.02));
    p.insert(EDGE_COMP, normal(rng, &[d], 0.02));
    for l in 0..config.n_layers {
        p.insert(layer_name(l, "ln1.gain"), Tensor::filled(&[d], 1.0));
        p.insert(layer_name(l, "ln1.bias"), Tensor::zeros(&[d]));
        for h in 0..config.n_heads {
            for part in ["wq", "wk", "wv"] {
                p.insert(head_name(l, h, part), xavier(rng, d, dk));
            }
        }
        p.insert(layer_name(l, "wo"), xavier(rng, d, d));
        p.insert(layer_name(l, "ln2.gain"), Tensor::filled(&[d], 1.0));
        p.insert(layer_name(l, "ln2.bias"), Tensor::zeros(&[d]));
        p.insert(layer_name(l, "ffn.w1"), xavier(rng, d, config.d_ff));
        p.insert(layer_name(l, "ffn.b1"), Tensor::zeros(&[config.d_ff]));
        p.insert(layer_name(l, "ffn.w2"), xavier(rng, config.d_ff, d));
        p.insert(layer_name(l, "ffn.b2"), Tensor::zeros(&[d]));
    }
    Ok(p)
}

/// Reads `adjoin` / `compositional` vectors from a tensor file and returns
/// them under the encoder's parameter names.
pub fn load_edge_embeddings(path: &Path, d_model: usize) -> Result<ParamSet, EncodeError> {
    let file = read_tensor_file(path)?;
    let mut out = ParamSet::new();
    for (key, name) in [("adjoin", EDGE_ADJOIN), ("compositional", EDGE_COMP)] {
        let t = file
            .get(key)
            .map_err(|_| EncodeError::EdgeFile(format!("missing vector {key:?}")))?;
        if t.len() != d_model {
            return Err(EncodeError::EdgeFile(format!(
                "vector {key:?} has {} values, expected {d_model}",
                t.len()
            )));
        }
        out.insert(name, t.clone().reshaped(&[d_model])?);
    }
    Ok(out)
}

/// The graph reduced to what the encoder consumes for a given variant.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub gram_ids: Vec<usize>,
    /// `None` means unrestricted attention.
    pub masks: Option<(BoolMatrix, BoolMatrix)>,
}

impl EncoderInput {
    pub fn from_graph(
        graph: &NGramGraph,
        vocab: &GramVocab,
        variant: Variant,
        max_nodes: usize,
    ) -> Self {
        match variant {
            Variant::Full => Self {
                gram_ids: graph.nodes.iter().map(|n| vocab.id(&n.text)).collect(),
                masks: Some((graph.mask_a.clone(), graph.mask_c.clone())),
            },
            Variant::Wg => Self {
                gram_ids: graph.nodes.iter().map(|n| vocab.id(&n.text)).collect(),
                masks: None,
            },
            Variant::Wng => {
                let gram_ids = graph
                    .name
                    .words
                    .iter()
                    .flat_map(|w| w.chars())
                    .take(max_nodes)
                    .map(|c| vocab.id(c.encode_utf8(&mut [0u8; 4])))
                    .collect();
                Self {
                    gram_ids,
                    masks: None,
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.gram_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gram_ids.is_empty()
    }
}

/// `X[i] = node_emb(text_i) + pos_emb(i)`.
pub fn embed_nodes(
    tape: &mut Tape,
    params: &Bound,
    gram_ids: &[usize],
    max_nodes: usize,
) -> Result<Var, EncodeError> {
    if gram_ids.is_empty() {
        return Err(EncodeError::EmptyGraph);
    }
    if gram_ids.len() > max_nodes {
        return Err(EncodeError::GraphTooLarge {
            nodes: gram_ids.len(),
            max_nodes,
        });
    }
    let nodes = tape.gather_rows(params.var(NODE_EMB)?, gram_ids)?;
    let positions: Vec<usize> = (0..gram_ids.len()).collect();
    let pos = tape.gather_rows(params.var(POS_EMB)?, &positions)?;
    Ok(tape.add(nodes, pos)?)
}

/// Per-head projections of the normalized block input.
struct HeadProjection {
    q: Var,
    k: Var,
    v: Var,
}

fn project(
    tape: &mut Tape,
    params: &Bound,
    h_in: Var,
    layer: usize,
    head: usize,
) -> Result<HeadProjection, EncodeError> {
    let q = tape.matmul(h_in, params.var(&head_name(layer, head, "wq"))?)?;
    let k = tape.matmul(h_in, params.var(&head_name(layer, head, "wk"))?)?;
    let v = tape.matmul(h_in, params.var(&head_name(layer, head, "wv"))?)?;
    Ok(HeadProjection { q, k, v })
}

fn scaled_scores(tape: &mut Tape, q: Var, k: Var, d_k: usize) -> Result<Var, EncodeError> {
    let kt = tape.transpose(k)?;
    let s = tape.matmul(q, kt)?;
    Ok(tape.scale(s, 1.0 / (d_k as f64).sqrt()))
}

/// `softmax(Q Kᵀ / √d_k) · V` for one head.
pub fn attention_standard(
    tape: &mut Tape,
    params: &Bound,
    h_in: Var,
    layer: usize,
    head: usize,
    d_k: usize,
) -> Result<Var, EncodeError> {
    let p = project(tape, params, h_in, layer, head)?;
    let scores = scaled_scores(tape, p.q, p.k, d_k)?;
    let weights = tape.softmax_rows(scores);
    Ok(tape.matmul(weights, p.v)?)
}

fn masked_weights(
    tape: &mut Tape,
    scores: Var,
    mask: &BoolMatrix,
    mode: MaskMode,
) -> Result<Var, EncodeError> {
    match mode {
        MaskMode::Post | MaskMode::PostRenorm => {
            let w = tape.softmax_rows(scores);
            let m = tape.constant(Tensor::new(vec![mask.size(), mask.size()], mask.to_f64())?);
            let masked = tape.mul(w, m)?;
            Ok(if mode == MaskMode::PostRenorm {
                tape.row_normalize(masked)
            } else {
                masked
            })
        }
        MaskMode::Pre => {
            let allowed: Vec<bool> = mask.to_f64().iter().map(|&v| v != 0.0).collect();
            Ok(tape.masked_softmax_rows(scores, &allowed)?)
        }
    }
}

fn edge_slice(
    tape: &mut Tape,
    params: &Bound,
    name: &str,
    head: usize,
    n_heads: usize,
    d_k: usize,
) -> Result<Var, EncodeError> {
    let r = params.var(name)?;
    let table = tape.reshape(r, &[n_heads, d_k])?;
    let row = tape.gather_rows(table, &[head])?;
    Ok(tape.reshape(row, &[d_k])?)
}

/// Combined attention weights of one head, `m × m`. Exposed for inspection
/// and for the mask-semantics tests.
#[allow(clippy::too_many_arguments)]
pub fn relation_masked_weights(
    tape: &mut Tape,
    params: &Bound,
    h_in: Var,
    masks: (&BoolMatrix, &BoolMatrix),
    layer: usize,
    head: usize,
    config: &GramTransformerConfig,
) -> Result<(Var, Var), EncodeError> {
    let m = tape.value(h_in).dims2().0;
    for mask in [masks.0, masks.1] {
        if mask.size() != m {
            return Err(EncodeError::MaskShapeMismatch {
                mask: mask.size(),
                nodes: m,
            });
        }
    }
    let d_k = config.d_k();
    let p = project(tape, params, h_in, layer, head)?;
    let mut terms = Vec::with_capacity(2);
    for (edge, mask) in [(EDGE_ADJOIN, masks.0), (EDGE_COMP, masks.1)] {
        let r = edge_slice(tape, params, edge, head, config.n_heads, d_k)?;
        let q = tape.add_row(p.q, r)?;
        let k = match config.key_source {
            KeySource::Projected => tape.add_row(p.k, r)?,
            KeySource::Tied => q,
        };
        let scores = scaled_scores(tape, q, k, d_k)?;
        terms.push(masked_weights(tape, scores, mask, config.mask_mode)?);
    }
    let combined = tape.add(terms[0], terms[1])?;
    Ok((combined, p.v))
}

/// Edge-aware masked attention for one head: `W · V`.
#[allow(clippy::too_many_arguments)]
pub fn attention_relation_masked(
    tape: &mut Tape,
    params: &Bound,
    h_in: Var,
    masks: (&BoolMatrix, &BoolMatrix),
    layer: usize,
    head: usize,
    config: &GramTransformerConfig,
) -> Result<Var, EncodeError> {
    let (weights, v) = relation_masked_weights(tape, params, h_in, masks, layer, head, config)?;
    Ok(tape.matmul(weights, v)?)
}

fn layer_norm(
    tape: &mut Tape,
    params: &Bound,
    x: Var,
    layer: usize,
    which: &str,
) -> Result<Var, EncodeError> {
    let n = tape.layer_norm_rows(x, LN_EPS);
    let g = tape.mul_row(n, params.var(&layer_name(layer, &format!("{which}.gain")))?)?;
    Ok(tape.add_row(g, params.var(&layer_name(layer, &format!("{which}.bias")))?)?)
}

/// Runs the encoder over prepared input and mean-pools to a `d_model` vector.
pub fn encode_input<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &Bound,
    input: &EncoderInput,
    config: &GramTransformerConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var, EncodeError> {
    config.validate()?;
    let mut h = embed_nodes(tape, params, &input.gram_ids, config.max_nodes)?;
    let d_k = config.d_k();
    for l in 0..config.n_layers {
        let a = layer_norm(tape, params, h, l, "ln1")?;
        let mut heads = Vec::with_capacity(config.n_heads);
        for head in 0..config.n_heads {
            let out = match &input.masks {
                Some((ma, mc)) if config.variant == Variant::Full => {
                    attention_relation_masked(tape, params, a, (ma, mc), l, head, config)?
                }
                _ => attention_standard(tape, params, a, l, head, d_k)?,
            };
            heads.push(out);
        }
        let cat = tape.concat_cols(&heads)?;
        let proj = tape.matmul(cat, params.var(&layer_name(l, "wo"))?)?;
        let proj = tape.dropout(proj, config.dropout, training, rng)?;
        h = tape.add(h, proj)?;

        let b = layer_norm(tape, params, h, l, "ln2")?;
        let f = tape.matmul(b, params.var(&layer_name(l, "ffn.w1"))?)?;
        let f = tape.add_row(f, params.var(&layer_name(l, "ffn.b1"))?)?;
        let f = tape.gelu(f);
        let f = tape.dropout(f, config.dropout, training, rng)?;
        let f = tape.matmul(f, params.var(&layer_name(l, "ffn.w2"))?)?;
        let f = tape.add_row(f, params.var(&layer_name(l, "ffn.b2"))?)?;
        let f = tape.dropout(f, config.dropout, training, rng)?;
        h = tape.add(h, f)?;
    }
    Ok(tape.mean_rows(h))
}

/// Relation embedding `S` of a graph.
pub fn encode_relation<R: Rng + ?Sized>(
    tape: &mut Tape,
    params: &Bound,
    graph: &NGramGraph,
    vocab: &GramVocab,
    config: &GramTransformerConfig,
    training: bool,
    rng: &mut R,
) -> Result<Var, EncodeError> {
    if graph.is_empty() {
        return Err(EncodeError::EmptyGraph);
    }
    let input = EncoderInput::from_graph(graph, vocab, config.variant, config.max_nodes);
    encode_input(tape, params, &input, config, training, rng)
}
