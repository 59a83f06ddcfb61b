//! Hierarchical character n-gram graphs built from relation surface names.
//!
//! Every word of a surface name contributes all of its contiguous character
//! n-grams as nodes. Two edge kinds connect them:
//!
//! * **adjoin** edges join same-level n-grams whose spans are adjacent
//!   (`h`–`a`, `ha`–`as`);
//! * **compositional** edges point from a level-`n` n-gram to each
//!   level-`n+1` n-gram whose span contains it (`h`→`ha`, `a`→`ha`).
//!
//! Words are stitched together with a level-1 adjoin edge between the last
//! character of one word and the first character of the next. A word that
//! occurs verbatim as an n-gram inside another word also inherits that
//! n-gram's adjoin neighbours and compositional superiors.
//!
//! The node list is then ordered ([`NodeOrder`]), truncated from the left to
//! at most `max_nodes` entries and turned into two symmetric 0/1 masks with
//! a unit diagonal.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("surface name {0:?} has no tokens after normalization")]
    EmptySurfaceName(String),
    #[error("max_n must be at least 1")]
    InvalidMaxN,
    #[error("max_nodes must be at least 1")]
    InvalidMaxNodes,
}

/// Normalization switches applied by [`tokenize`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizeConfig {
    /// Drop a leading `namespace:` token such as NELL's `concept:`.
    #[serde(default)]
    pub strip_prefix: bool,
    /// Split `camelCase` boundaries before lowercasing.
    #[serde(default)]
    pub split_camel: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurfaceName {
    pub raw: String,
    pub words: Vec<String>,
}

impl SurfaceName {
    pub fn parse(raw: &str, config: TokenizeConfig) -> Result<Self, GraphError> {
        tokenize(raw, config)
    }
}

/// Lowercases and splits a raw relation name on whitespace and underscores.
pub fn tokenize(raw: &str, config: TokenizeConfig) -> Result<SurfaceName, GraphError> {
    let mut text = raw.trim_start();
    if config.strip_prefix {
        if let Some(colon) = text.find(':') {
            let prefix = &text[..colon];
            if !prefix.is_empty() && !prefix.chars().any(char::is_whitespace) {
                text = &text[colon + 1..];
            }
        }
    }

    let mut spaced = String::with_capacity(text.len() + 8);
    let mut prev: Option<char> = None;
    for c in text.chars() {
        if config.split_camel {
            if let Some(p) = prev {
                if c.is_uppercase() && (p.is_lowercase() || p.is_ascii_digit()) {
                    spaced.push(' ');
                }
            }
        }
        spaced.push(c);
        prev = Some(c);
    }

    let words: Vec<String> = spaced
        .split(|c: char| c.is_whitespace() || c == '_')
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    if words.is_empty() {
        return Err(GraphError::EmptySurfaceName(raw.to_string()));
    }
    Ok(SurfaceName {
        raw: raw.to_string(),
        words,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeKind {
    Adjoin,
    Compositional,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NGramNode {
    pub text: String,
    pub word_index: usize,
    pub level: usize,
    pub start: usize,
    pub position: usize,
}

/// Total order used to lay out the nodes before truncation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeOrder {
    /// Word by word; inside a word, all 1-grams, then all 2-grams, ...
    WordMajor,
    /// Level by level; inside a level, words in sentence order.
    #[default]
    LevelMajor,
}

impl std::str::FromStr for NodeOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "word_major" | "word-major" | "strategy1" => Ok(Self::WordMajor),
            "level_major" | "level-major" | "strategy2" => Ok(Self::LevelMajor),
            other => Err(format!("unknown node order {other:?}")),
        }
    }
}

/// Cross-word linking switches. Both rules are on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EdgeConfig {
    pub link_adjacent_words: bool,
    pub link_embedded_words: bool,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            link_adjacent_words: true,
            link_embedded_words: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub max_n: usize,
    pub max_nodes: usize,
    pub order: NodeOrder,
    pub edges: EdgeConfig,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            max_n: 13,
            max_nodes: 90,
            order: NodeOrder::LevelMajor,
            edges: EdgeConfig::default(),
        }
    }
}

/// Square 0/1 matrix stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    size: usize,
    cells: Vec<bool>,
}

impl BoolMatrix {
    pub fn identity(size: usize) -> Self {
        let mut cells = vec![false; size * size];
        for i in 0..size {
            cells[i * size + i] = true;
        }
        Self { size, cells }
    }

    pub fn ones(size: usize) -> Self {
        Self {
            size,
            cells: vec![true; size * size],
        }
    }

    pub fn from_rows(rows: &[Vec<bool>]) -> Self {
        let size = rows.len();
        let mut cells = Vec::with_capacity(size * size);
        for row in rows {
            assert_eq!(row.len(), size, "mask rows must form a square matrix");
            cells.extend_from_slice(row);
        }
        Self { size, cells }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.size + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.cells[i * self.size + j] = value;
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }

    pub fn rows(&self) -> Vec<Vec<u8>> {
        self.cells
            .chunks(self.size.max(1))
            .take(self.size)
            .map(|r| r.iter().map(|&b| u8::from(b)).collect())
            .collect()
    }

    /// 0.0/1.0 values, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.cells
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect()
    }

    /// Reorders rows and columns: `out[i][j] = self[perm[i]][perm[j]]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.size;
        let mut out = Self {
            size: n,
            cells: vec![false; n * n],
        };
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, self.get(perm[i], perm[j]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramGraph {
    pub name: SurfaceName,
    pub nodes: Vec<NGramNode>,
    /// Unordered pairs stored as `(min, max)` node positions.
    pub adjoin_edges: BTreeSet<(usize, usize)>,
    /// Directed `(lower, superior)` node positions.
    pub comp_edges: BTreeSet<(usize, usize)>,
    pub mask_a: BoolMatrix,
    pub mask_c: BoolMatrix,
    pub full_node_count: usize,
}

/// All contiguous n-grams of `word` with `1 <= n <= min(max_n, len)`, level by level.
///
/// `word_index` and `position` are left at zero; [`build_graph`] fills them in.
pub fn word_ngrams(word: &str, max_n: usize) -> Vec<NGramNode> {
    let chars: Vec<char> = word.chars().collect();
    let top = max_n.min(chars.len());
    let mut out = Vec::with_capacity(top * (2 * chars.len() + 1 - top) / 2);
    for level in 1..=top {
        for start in 0..=chars.len() - level {
            out.push(NGramNode {
                text: chars[start..start + level].iter().collect(),
                word_index: 0,
                level,
                start,
                position: 0,
            });
        }
    }
    out
}

pub fn build_graph(name: &SurfaceName, config: &GraphConfig) -> Result<NGramGraph, GraphError> {
    if config.max_n == 0 {
        return Err(GraphError::InvalidMaxN);
    }
    if config.max_nodes == 0 {
        return Err(GraphError::InvalidMaxNodes);
    }
    if name.words.is_empty() {
        return Err(GraphError::EmptySurfaceName(name.raw.clone()));
    }

    // Canonical node list: word by word, level-major within a word.
    let mut nodes: Vec<NGramNode> = Vec::new();
    let mut word_len = Vec::with_capacity(name.words.len());
    for (w, word) in name.words.iter().enumerate() {
        word_len.push(word.chars().count());
        for mut node in word_ngrams(word, config.max_n) {
            node.word_index = w;
            nodes.push(node);
        }
    }
    let full_node_count = nodes.len();
    let lookup = |w: usize, level: usize, start: usize| -> Option<usize> {
        nodes
            .iter()
            .position(|n| n.word_index == w && n.level == level && n.start == start)
    };

    let mut adjoin: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut comp: BTreeSet<(usize, usize)> = BTreeSet::new();
    let add_adjoin = |a: usize, b: usize, set: &mut BTreeSet<(usize, usize)>| {
        if a != b {
            set.insert((a.min(b), a.max(b)));
        }
    };

    for (i, node) in nodes.iter().enumerate() {
        if let Some(j) = lookup(node.word_index, node.level, node.start + 1) {
            add_adjoin(i, j, &mut adjoin);
        }
        let sup = node.level + 1;
        for s in [node.start.wrapping_sub(1), node.start] {
            if s == usize::MAX {
                continue;
            }
            if let Some(j) = lookup(node.word_index, sup, s) {
                comp.insert((i, j));
            }
        }
    }

    if config.edges.link_adjacent_words {
        for (w, &len) in word_len
            .iter()
            .enumerate()
            .take(name.words.len().saturating_sub(1))
        {
            let last = lookup(w, 1, len - 1);
            let first = lookup(w + 1, 1, 0);
            if let (Some(a), Some(b)) = (last, first) {
                add_adjoin(a, b, &mut adjoin);
            }
        }
    }

    if config.edges.link_embedded_words {
        let within_adjoin = adjoin.clone();
        let within_comp = comp.clone();
        for (w, word) in name.words.iter().enumerate() {
            let Some(whole) = lookup(w, word_len[w], 0) else {
                continue;
            };
            for (g, gram) in nodes.iter().enumerate() {
                if gram.word_index == w || gram.text != *word {
                    continue;
                }
                for &(a, b) in &within_adjoin {
                    if a == g {
                        add_adjoin(whole, b, &mut adjoin);
                    } else if b == g {
                        add_adjoin(whole, a, &mut adjoin);
                    }
                }
                for &(lower, superior) in &within_comp {
                    if lower == g {
                        comp.insert((whole, superior));
                    }
                }
            }
        }
    }

    // Ordering: `order[p]` is the canonical index placed at position p.
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    match config.order {
        NodeOrder::WordMajor => {}
        NodeOrder::LevelMajor => {
            order.sort_by_key(|&i| (nodes[i].level, nodes[i].word_index, nodes[i].start));
        }
    }
    order.truncate(config.max_nodes);
    let mut position_of = vec![usize::MAX; nodes.len()];
    for (p, &i) in order.iter().enumerate() {
        position_of[i] = p;
    }

    let remap = |(a, b): (usize, usize)| -> Option<(usize, usize)> {
        let (pa, pb) = (position_of[a], position_of[b]);
        (pa != usize::MAX && pb != usize::MAX).then_some((pa, pb))
    };
    let adjoin_edges: BTreeSet<(usize, usize)> = adjoin
        .into_iter()
        .filter_map(remap)
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    let comp_edges: BTreeSet<(usize, usize)> = comp.into_iter().filter_map(remap).collect();

    let ordered: Vec<NGramNode> = order
        .iter()
        .enumerate()
        .map(|(p, &i)| NGramNode {
            position: p,
            ..nodes[i].clone()
        })
        .collect();

    let (mask_a, mask_c) = masks_from_edges(ordered.len(), &adjoin_edges, &comp_edges);
    Ok(NGramGraph {
        name: name.clone(),
        nodes: ordered,
        adjoin_edges,
        comp_edges,
        mask_a,
        mask_c,
        full_node_count,
    })
}

fn masks_from_edges(
    m: usize,
    adjoin: &BTreeSet<(usize, usize)>,
    comp: &BTreeSet<(usize, usize)>,
) -> (BoolMatrix, BoolMatrix) {
    let mut mask_a = BoolMatrix::identity(m);
    let mut mask_c = BoolMatrix::identity(m);
    for &(i, j) in adjoin {
        mask_a.set(i, j, true);
        mask_a.set(j, i, true);
    }
    for &(i, j) in comp {
        mask_c.set(i, j, true);
        mask_c.set(j, i, true);
    }
    (mask_a, mask_c)
}

/// Recomputes `(mask_a, mask_c)` from the graph's edge sets.
pub fn mask_matrices(graph: &NGramGraph) -> (BoolMatrix, BoolMatrix) {
    masks_from_edges(graph.len(), &graph.adjoin_edges, &graph.comp_edges)
}

impl NGramGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.text.as_str()).collect()
    }

    /// Compact single-line JSON, newline-terminated. Stable for golden files.
    pub fn to_json(&self) -> String {
        let export = GraphExport {
            relation: &self.name.raw,
            words: &self.name.words,
            full_node_count: self.full_node_count,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeExport {
                    text: &n.text,
                    level: n.level,
                    word: n.word_index,
                    start: n.start,
                    position: n.position,
                })
                .collect(),
            adjoin_edges: self.adjoin_edges.iter().map(|&(a, b)| [a, b]).collect(),
            compositional_edges: self.comp_edges.iter().map(|&(a, b)| [a, b]).collect(),
            mask_a: self.mask_a.rows(),
            mask_c: self.mask_c.rows(),
        };
        let mut s = serde_json::to_string(&export).expect("graph export is always serializable");
        s.push('\n');
        s
    }

    /// Graphviz rendering: adjoin edges solid and undirected, compositional dashed.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph ngram {\n  node [shape=box];\n");
        for n in &self.nodes {
            let _ = writeln!(
                out,
                "  n{} [label=\"{}\" level={}];",
                n.position,
                n.text.replace('\\', "\\\\").replace('"', "\\\""),
                n.level
            );
        }
        for &(a, b) in &self.adjoin_edges {
            let _ = writeln!(out, "  n{a} -> n{b} [dir=none];");
        }
        for &(a, b) in &self.comp_edges {
            let _ = writeln!(out, "  n{a} -> n{b} [style=dashed];");
        }
        out.push_str("}\n");
        out
    }
}

#[derive(Serialize)]
struct NodeExport<'a> {
    text: &'a str,
    level: usize,
    word: usize,
    start: usize,
    position: usize,
}

#[derive(Serialize)]
struct GraphExport<'a> {
    relation: &'a str,
    words: &'a [String],
    full_node_count: usize,
    nodes: Vec<NodeExport<'a>>,
    adjoin_edges: Vec<[usize; 2]>,
    compositional_edges: Vec<[usize; 2]>,
    mask_a: Vec<Vec<u8>>,
    mask_c: Vec<Vec<u8>>,
}
