mod common;

use common::{graph, random_name, rng};
use gramlink::ngram_graph::{
    build_graph, mask_matrices, tokenize, GraphConfig, NodeOrder, TokenizeConfig,
};
use rand::Rng;

const HAS_JSON: &str = concat!(
    r#"{"relation":"has","words":["has"],"full_node_count":6,"nodes":["#,
    r#"{"text":"h","level":1,"word":0,"start":0,"position":0},"#,
    r#"{"text":"a","level":1,"word":0,"start":1,"position":1},"#,
    r#"{"text":"s","level":1,"word":0,"start":2,"position":2},"#,
    r#"{"text":"ha","level":2,"word":0,"start":0,"position":3},"#,
    r#"{"text":"as","level":2,"word":0,"start":1,"position":4},"#,
    r#"{"text":"has","level":3,"word":0,"start":0,"position":5}],"#,
    r#""adjoin_edges":[[0,1],[1,2],[3,4]],"#,
    r#""compositional_edges":[[0,3],[1,3],[1,4],[2,4],[3,5],[4,5]],"#,
    r#""mask_a":[[1,1,0,0,0,0],[1,1,1,0,0,0],[0,1,1,0,0,0],[0,0,0,1,1,0],[0,0,0,1,1,0],[0,0,0,0,0,1]],"#,
    r#""mask_c":[[1,0,0,1,0,0],[0,1,0,1,1,0],[0,0,1,0,1,0],[1,1,0,1,0,1],[0,1,1,0,1,1],[0,0,0,1,1,1]]}"#,
    "\n"
);

#[test]
fn has_graph_matches_golden_json() {
    let g = graph("has", NodeOrder::LevelMajor, 90);
    assert_eq!(g.to_json(), HAS_JSON);
}

#[test]
fn has_graph_is_identical_under_both_orders() {
    let a = graph("has", NodeOrder::LevelMajor, 90);
    let b = graph("has", NodeOrder::WordMajor, 90);
    assert_eq!(a.to_json(), b.to_json());
}

#[test]
fn single_word_node_count_is_triangular() {
    let mut r = rng(11);
    for _ in 0..50 {
        let m = r.random_range(1..=15);
        let word: String = (0..m)
            .map(|_| (b'a' + r.random_range(0..26u8)) as char)
            .collect();
        let max_n = r.random_range(m..=20);
        let config = GraphConfig {
            max_n,
            max_nodes: 1000,
            ..Default::default()
        };
        let g = build_graph(
            &tokenize(&word, TokenizeConfig::default()).unwrap(),
            &config,
        )
        .unwrap();
        assert_eq!(g.len(), m * (m + 1) / 2, "word {word}");
        assert_eq!(g.full_node_count, g.len());
    }
}

#[test]
fn capped_level_count_matches_enumeration() {
    let mut r = rng(12);
    for _ in 0..50 {
        let m = r.random_range(1..=15);
        let word: String = (0..m)
            .map(|_| (b'a' + r.random_range(0..26u8)) as char)
            .collect();
        let max_n = r.random_range(1..=m);
        let mut expected = 0;
        for start in 0..m {
            for end in start + 1..=m {
                if end - start <= max_n {
                    expected += 1;
                }
            }
        }
        let config = GraphConfig {
            max_n,
            max_nodes: 1000,
            ..Default::default()
        };
        let g = build_graph(
            &tokenize(&word, TokenizeConfig::default()).unwrap(),
            &config,
        )
        .unwrap();
        assert_eq!(g.len(), expected, "word {word} max_n {max_n}");
    }
}

#[test]
fn a_part_of_word_major_order() {
    let g = graph("a part of", NodeOrder::WordMajor, 90);
    let expected = [
        "a", "p", "a", "r", "t", "pa", "ar", "rt", "par", "art", "part", "o", "f", "of",
    ];
    assert_eq!(g.texts(), expected);
}

#[test]
fn a_part_of_level_major_order() {
    let g = graph("a part of", NodeOrder::LevelMajor, 90);
    let expected = [
        "a", "p", "a", "r", "t", "o", "f", "pa", "ar", "rt", "of", "par", "art", "part",
    ];
    assert_eq!(g.texts(), expected);
}

#[test]
fn orders_hold_the_same_multiset_of_nodes() {
    let mut r = rng(13);
    for _ in 0..30 {
        let name = random_name(&mut r, 6);
        let mut a: Vec<String> = graph(&name, NodeOrder::WordMajor, 1000)
            .texts()
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut b: Vec<String> = graph(&name, NodeOrder::LevelMajor, 1000)
            .texts()
            .iter()
            .map(|s| s.to_string())
            .collect();
        a.sort();
        b.sort();
        assert_eq!(a, b, "name {name}");
    }
}

#[test]
fn masks_are_symmetric_with_self_loops() {
    let mut r = rng(14);
    for _ in 0..50 {
        let name = random_name(&mut r, 7);
        for order in [NodeOrder::WordMajor, NodeOrder::LevelMajor] {
            let g = graph(&name, order, 40);
            for mask in [&g.mask_a, &g.mask_c] {
                assert_eq!(mask.size(), g.len());
                assert!(mask.is_symmetric(), "name {name}");
                for i in 0..g.len() {
                    assert!(mask.get(i, i), "name {name} node {i}");
                }
            }
            let (ma, mc) = mask_matrices(&g);
            assert_eq!(ma, g.mask_a);
            assert_eq!(mc, g.mask_c);
        }
    }
}

#[test]
fn single_word_edges_match_position_rules() {
    let mut r = rng(15);
    for _ in 0..30 {
        let m = r.random_range(1..=8);
        let word: String = (0..m)
            .map(|_| (b'a' + r.random_range(0..5u8)) as char)
            .collect();
        let g = graph(&word, NodeOrder::LevelMajor, 1000);
        for (i, a) in g.nodes.iter().enumerate() {
            for (j, b) in g.nodes.iter().enumerate() {
                if i >= j {
                    continue;
                }
                let adjoin = a.level == b.level && a.start.abs_diff(b.start) == 1;
                assert_eq!(g.adjoin_edges.contains(&(i, j)), adjoin, "{word} {i} {j}");
                let comp = b.level == a.level + 1 && (b.start == a.start || b.start + 1 == a.start);
                assert_eq!(g.comp_edges.contains(&(i, j)), comp, "{word} {i} {j}");
            }
        }
    }
}

#[test]
fn truncation_keeps_the_leading_nodes() {
    let mut r = rng(16);
    for _ in 0..30 {
        let name = random_name(&mut r, 7);
        for order in [NodeOrder::WordMajor, NodeOrder::LevelMajor] {
            let full = graph(&name, order, 1000);
            let cap = r.random_range(1..=full.len());
            let cut = graph(&name, order, cap);
            assert_eq!(cut.len(), cap);
            assert_eq!(cut.full_node_count, full.len());
            assert_eq!(cut.texts(), full.texts()[..cap].to_vec());
            for &(i, j) in cut.adjoin_edges.iter().chain(&cut.comp_edges) {
                assert!(i < cap && j < cap);
            }
        }
    }
}

#[test]
fn empty_or_blank_names_are_rejected() {
    for raw in ["", "   ", "__", "\t"] {
        assert!(tokenize(raw, TokenizeConfig::default()).is_err(), "{raw:?}");
    }
}

#[test]
fn tokenizer_switches() {
    let cfg = TokenizeConfig {
        strip_prefix: true,
        split_camel: true,
    };
    let name = tokenize("concept:athletePlaysForTeam", cfg).unwrap();
    assert_eq!(name.words, ["athlete", "plays", "for", "team"]);
    let plain = tokenize("member_of_team", TokenizeConfig::default()).unwrap();
    assert_eq!(plain.words, ["member", "of", "team"]);
}

#[test]
fn dot_output_lists_every_node_and_edge() {
    let g = graph("a part of", NodeOrder::LevelMajor, 90);
    let dot = g.to_dot();
    assert!(dot.starts_with("graph") || dot.starts_with("digraph"));
    for i in 0..g.len() {
        assert!(
            dot.contains(&format!("n{i} ")) || dot.contains(&format!("n{i}[")),
            "node {i}"
        );
    }
    let edge_lines = dot
        .lines()
        .filter(|l| l.contains("--") || l.contains("->"))
        .count();
    assert_eq!(edge_lines, g.adjoin_edges.len() + g.comp_edges.len());
}
