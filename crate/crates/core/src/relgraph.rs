//! The relational graph: relations as nodes, typed by how two triplets share
//! an entity.

use std::collections::HashMap;

use krlm_numerics::EdgeIndex;

use crate::error::{KrlmError, Result};
use crate::kg::KnowledgeGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pattern {
    /// Head of the first triplet is the tail of the second.
    H2t = 0,
    H2h = 1,
    /// Tail of the first triplet is the head of the second.
    T2h = 2,
    T2t = 3,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::H2t, Pattern::H2h, Pattern::T2h, Pattern::T2t];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::H2t => "h2t",
            Pattern::H2h => "h2h",
            Pattern::T2h => "t2h",
            Pattern::T2t => "t2t",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationalGraph {
    pub node_count: usize,
    /// Sorted by `(src, pattern, dst)`, no duplicates.
    pub edges: Vec<(usize, Pattern, usize)>,
}

#[derive(Default)]
struct Roles {
    /// relation -> number of triplets with this entity as head
    head: HashMap<usize, usize>,
    tail: HashMap<usize, usize>,
    /// relation -> number of self-loop triplets `(e, r, e)`
    self_loops: HashMap<usize, usize>,
}

impl RelationalGraph {
    /// Builds the graph over all relations of an inverse-augmented `kg`.
    ///
    /// A typed edge `(r1, p, r2)` exists when two distinct triplets with
    /// relations `r1` and `r2` share an entity in the roles named by `p`.
    pub fn build(kg: &KnowledgeGraph) -> Result<Self> {
        if !kg.is_augmented() {
            return Err(KrlmError::Graph(
                "relational graph requires an inverse-augmented graph".into(),
            ));
        }
        let mut roles: Vec<Roles> = (0..kg.num_entities()).map(|_| Roles::default()).collect();
        for t in kg.triplets() {
            *roles[t.head].head.entry(t.rel).or_default() += 1;
            *roles[t.tail].tail.entry(t.rel).or_default() += 1;
            if t.head == t.tail {
                *roles[t.head].self_loops.entry(t.rel).or_default() += 1;
            }
        }

        let mut edges = Vec::new();
        for r in &roles {
            let mut heads: Vec<(usize, usize)> = r.head.iter().map(|(&a, &b)| (a, b)).collect();
            let mut tails: Vec<(usize, usize)> = r.tail.iter().map(|(&a, &b)| (a, b)).collect();
            heads.sort_unstable();
            tails.sort_unstable();
            let loops = |rel: usize| r.self_loops.get(&rel).copied().unwrap_or(0);

            // Witness pairs (i, j) with i != j. Two occurrences in the same
            // role always come from distinct triplets; across roles only a
            // self-loop triplet can pair with itself.
            for &(a, ca) in &heads {
                for &(b, _) in &heads {
                    if a != b || ca >= 2 {
                        edges.push((a, Pattern::H2h, b));
                    }
                }
                for &(b, cb) in &tails {
                    let same = if a == b { loops(a) } else { 0 };
                    if ca * cb > same {
                        edges.push((a, Pattern::H2t, b));
                        edges.push((b, Pattern::T2h, a));
                    }
                }
            }
            for &(a, ca) in &tails {
                for &(b, _) in &tails {
                    if a != b || ca >= 2 {
                        edges.push((a, Pattern::T2t, b));
                    }
                }
            }
        }
        edges.sort_unstable();
        edges.dedup();
        Ok(Self {
            node_count: kg.num_relations(),
            edges,
        })
    }

    pub fn count(&self, p: Pattern) -> usize {
        self.edges.iter().filter(|e| e.1 == p).count()
    }

    /// Message-passing edges `src → dst` typed by pattern index.
    pub fn edge_index(&self) -> EdgeIndex {
        let mut e = EdgeIndex::new();
        for &(s, p, d) in &self.edges {
            e.push(s, p.index(), d);
        }
        e
    }
}
