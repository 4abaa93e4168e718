//! Shared fixtures and brute-force oracles for the integration tests.
//!
//! The oracles recompute quantities from their definitions with plain loops
//! and dense matrices; they share no code with the library beyond reading
//! parameter tensors out of a store.
#![allow(dead_code)]

use std::collections::BTreeSet;

use krlm_core::backbone::BackboneConfig;
use krlm_core::encoder::{EncoderConfig, EntityGnn, RelationGnn};
use krlm_core::instruction::Template;
use krlm_core::kg::{EntityRecord, KnowledgeGraph, RelationRecord, Triplet};
use krlm_core::model::{Model, ModelConfig};
use krlm_core::nn::Linear;
use krlm_core::trainer::build_tokenizer;
use krlm_numerics::{ParamStore, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn entities(n: usize) -> Vec<EntityRecord> {
    (0..n)
        .map(|id| EntityRecord {
            id,
            name: format!("entity {id}"),
            description: format!("entity number {id} of the test graph"),
        })
        .collect()
}

pub fn relations(n: usize) -> Vec<RelationRecord> {
    (0..n)
        .map(|id| RelationRecord {
            id,
            name: format!("relation {id}"),
            description: format!("test relation {id}"),
            is_inverse: false,
            base_id: id,
        })
        .collect()
}

/// Unaugmented graph from raw triplets.
pub fn graph(n_ent: usize, n_rel: usize, triplets: &[(usize, usize, usize)]) -> KnowledgeGraph {
    let ts = triplets.iter().map(|&(h, r, t)| Triplet::new(h, r, t)).collect();
    KnowledgeGraph::new(entities(n_ent), relations(n_rel), ts).unwrap().0
}

pub fn random_graph(rng: &mut ChaCha8Rng, n_ent: usize, n_rel: usize, n_trip: usize) -> KnowledgeGraph {
    let ts: Vec<(usize, usize, usize)> = (0..n_trip)
        .map(|_| {
            (
                rng.random_range(0..n_ent),
                rng.random_range(0..n_rel),
                rng.random_range(0..n_ent),
            )
        })
        .collect();
    graph(n_ent, n_rel, &ts)
}

pub fn tiny_config(vocab: usize, layers: usize, dim: usize, memory_k: usize) -> ModelConfig {
    let mut bb = BackboneConfig::new(1, 16, vocab, 5);
    bb.ffn = 32;
    ModelConfig {
        backbone: bb,
        encoder: EncoderConfig { layers, dim },
        memory_k,
        vocab_items: 4,
        desc_tokens: 4,
        seed: 9,
    }
}

/// Small model over `kg` with a tokenizer trained on it.
pub fn tiny_model(kg: &KnowledgeGraph, layers: usize, dim: usize, memory_k: usize) -> (Model, ParamStore) {
    let template = Template::default_template();
    let tok = build_tokenizer(kg, &template, 400);
    let cfg = tiny_config(tok.vocab_size(), layers, dim, memory_k);
    Model::new(cfg, tok, template).unwrap()
}

/// Typed relational edges `(r1, pattern index, r2)` from every ordered pair
/// of distinct triplet occurrences sharing an entity.
/// Pattern indices: 0 h2t, 1 h2h, 2 t2h, 3 t2t.
pub fn brute_relational_edges(triplets: &[Triplet]) -> BTreeSet<(usize, usize, usize)> {
    let mut out = BTreeSet::new();
    for (i, a) in triplets.iter().enumerate() {
        for (j, b) in triplets.iter().enumerate() {
            if i == j {
                continue;
            }
            if a.head == b.tail {
                out.insert((a.rel, 0, b.rel));
            }
            if a.head == b.head {
                out.insert((a.rel, 1, b.rel));
            }
            if a.tail == b.head {
                out.insert((a.rel, 2, b.rel));
            }
            if a.tail == b.tail {
                out.insert((a.rel, 3, b.rel));
            }
        }
    }
    out
}

fn dense_linear(store: &ParamStore, l: &Linear, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w = store.tensor(l.w);
    let b = l.b.map(|b| store.tensor(b).row(0).to_vec());
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|j| {
                    let s: f64 = row.iter().enumerate().map(|(i, v)| v * w.get(i, j)).sum();
                    s + b.as_ref().map_or(0.0, |b| b[j])
                })
                .collect()
        })
        .collect()
}

fn relu(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    x.into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

/// One dense propagation step: per edge type `k` an `n × n` adjacency `A_k`
/// with `A_k[dst][src] = 1`, and `agg = Σ_k A_k (H ⊙ 1·f_kᵀ)`.
fn dense_aggregate(n: usize, edges: &[(usize, usize, usize)], h: &[Vec<f64>], feats: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let d = h[0].len();
    let kinds = feats.len();
    let mut adj = vec![vec![vec![0.0; n]; n]; kinds];
    for &(src, kind, dst) in edges {
        adj[kind][dst][src] = 1.0;
    }
    let mut agg = vec![vec![0.0; d]; n];
    for (k, a) in adj.iter().enumerate() {
        for i in 0..n {
            for j in 0..n {
                if a[i][j] != 0.0 {
                    for c in 0..d {
                        agg[i][c] += a[i][j] * h[j][c] * feats[k][c];
                    }
                }
            }
        }
    }
    agg
}

fn concat(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter().zip(b).map(|(x, y)| x.iter().chain(y).copied().collect()).collect()
}

/// Relation GNN recomputed with dense adjacency matrices.
pub fn dense_relation_gnn(
    store: &ParamStore,
    gnn: &RelationGnn,
    n_rel: usize,
    edges: &[(usize, usize, usize)],
    query: usize,
) -> Vec<Vec<f64>> {
    let d = gnn.dim;
    let mut h = vec![vec![0.0; d]; n_rel];
    h[query] = vec![1.0; d];
    let pat = store.tensor(gnn.patterns);
    let feats: Vec<Vec<f64>> = (0..pat.rows()).map(|k| pat.row(k).to_vec()).collect();
    for update in &gnn.updates {
        let agg = dense_aggregate(n_rel, edges, &h, &feats);
        h = relu(dense_linear(store, update, &concat(&h, &agg)));
    }
    h
}

/// Entity GNN recomputed with dense adjacency matrices.
pub fn dense_entity_gnn(
    store: &ParamStore,
    gnn: &EntityGnn,
    n_ent: usize,
    edges: &[(usize, usize, usize)],
    relations: &[Vec<f64>],
    head: usize,
    boundary: &[f64],
) -> Vec<Vec<f64>> {
    let d = gnn.dim;
    let mut h = vec![vec![0.0; d]; n_ent];
    h[head] = boundary.to_vec();
    for (mlp, update) in gnn.edge_mlps.iter().zip(&gnn.updates) {
        let feats = dense_linear(store, &mlp.out, &relu(dense_linear(store, &mlp.hidden, relations)));
        let agg = dense_aggregate(n_ent, edges, &h, &feats);
        h = relu(dense_linear(store, update, &concat(&h, &agg)));
    }
    h
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Rank by sorting every candidate: descending score, ascending id, with
/// `excluded` candidates (other than the answer) removed first.
pub fn brute_rank(scores: &[f64], answer: usize, excluded: &[usize]) -> usize {
    let mut cands: Vec<usize> = (0..scores.len())
        .filter(|&e| e == answer || !excluded.contains(&e))
        .collect();
    cands.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("finite scores")
            .then(a.cmp(&b))
    });
    cands.iter().position(|&e| e == answer).unwrap() + 1
}

/// Random graph of 30 distinct triplets plus 6 further held-out queries.
pub fn toy_split(seed: u64, n_ent: usize) -> krlm_core::dataset::Split {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ts: Vec<Triplet> = Vec::new();
    while ts.len() < 36 {
        let t = Triplet::new(rng.random_range(0..n_ent), rng.random_range(0..3), rng.random_range(0..n_ent));
        if !ts.contains(&t) {
            ts.push(t);
        }
    }
    let (queries, graph_part) = ts.split_at(6);
    let kg = KnowledgeGraph::new(entities(n_ent), relations(3), graph_part.to_vec()).unwrap().0;
    let queries = queries.to_vec();
    krlm_core::dataset::Split::new(kg, queries, Default::default()).unwrap()
}
