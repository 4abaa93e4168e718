mod common;

use std::collections::BTreeSet;

use krlm_core::relgraph::{Pattern, RelationalGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn edge_set(g: &RelationalGraph) -> BTreeSet<(usize, usize, usize)> {
    g.edges.iter().map(|&(a, p, b)| (a, p.index(), b)).collect()
}

#[test]
fn shared_tail_gives_symmetric_t2t() {
    // (a, r0, b), (c, r1, b): both relations end at b.
    let kg = common::graph(3, 2, &[(0, 0, 1), (2, 1, 1)]).augment_inverses().unwrap();
    let g = RelationalGraph::build(&kg).unwrap();
    assert!(g.edges.contains(&(0, Pattern::T2t, 1)));
    assert!(g.edges.contains(&(1, Pattern::T2t, 0)));
}

#[test]
fn lone_triplet_has_no_self_pattern_edges() {
    let kg = common::graph(2, 1, &[(0, 0, 1)]).augment_inverses().unwrap();
    let g = RelationalGraph::build(&kg).unwrap();
    for &(a, _, b) in &g.edges {
        assert_ne!(a, b, "self edge from a single occurrence: {:?}", g.edges);
    }
    assert!(g.edges.contains(&(0, Pattern::H2t, 1)));
    assert!(g.edges.contains(&(1, Pattern::T2h, 0)));
    assert_eq!(g.node_count, 2);
}

#[test]
fn requires_augmented_graph() {
    let kg = common::graph(2, 1, &[(0, 0, 1)]);
    assert!(RelationalGraph::build(&kg).is_err());
}

#[test]
fn matches_pairwise_oracle_on_small_random_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let kg = common::random_graph(&mut rng, 6, 3, 20).augment_inverses().unwrap();
        let g = RelationalGraph::build(&kg).unwrap();
        assert_eq!(edge_set(&g), common::brute_relational_edges(kg.triplets()));
    }
}

#[test]
fn matches_oracle_with_self_loops_and_dense_reuse() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let n = rng.random_range(1..5);
        let kg = common::random_graph(&mut rng, n, 2, 12).augment_inverses().unwrap();
        let g = RelationalGraph::build(&kg).unwrap();
        assert_eq!(edge_set(&g), common::brute_relational_edges(kg.triplets()));
    }
}

#[test]
fn symmetry_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let kg = common::random_graph(&mut rng, 30, 6, 150).augment_inverses().unwrap();
    let g = RelationalGraph::build(&kg).unwrap();
    let set = edge_set(&g);
    for &(a, p, b) in &set {
        let mirrored = match p {
            0 => (b, 2, a),
            1 => (b, 1, a),
            2 => (b, 0, a),
            _ => (b, 3, a),
        };
        assert!(set.contains(&mirrored));
        assert!(a < g.node_count && b < g.node_count);
    }
    assert_eq!(set.len(), g.edges.len());
    assert_eq!(g.count(Pattern::H2t), g.count(Pattern::T2h));
}
