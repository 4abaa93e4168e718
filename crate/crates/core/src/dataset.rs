//! On-disk inductive datasets: a training graph with validation queries and
//! a disjoint test graph with test queries.
//!
//! ```text
//! <root>/train/{entities,relations,graph,queries}.tsv
//! <root>/test/{entities,relations,graph,queries}.tsv
//! ```
//!
//! `graph.tsv` is the message-passing graph; `queries.tsv` holds held-out
//! triplets over the same vocabularies (validation for `train/`, test for
//! `test/`).

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{KrlmError, Result};
use crate::kg::{read_triplets, Descriptions, GraphContext, KnowledgeGraph, LoadReport, QueryTriplet, Triplet};

pub const SPLIT_FILES: [&str; 4] = ["entities.tsv", "relations.tsv", "graph.tsv", "queries.tsv"];

/// Known true tails per `(head, relation)` over augmented relation ids.
#[derive(Debug, Clone, Default)]
pub struct FilterIndex {
    known: HashMap<(usize, usize), Vec<usize>>,
}

impl FilterIndex {
    /// `base` are non-augmented triplets; both directions are indexed.
    pub fn build(base: impl IntoIterator<Item = Triplet>, num_base_relations: usize) -> Self {
        let mut known: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for t in base {
            known.entry((t.head, t.rel)).or_default().push(t.tail);
            known
                .entry((t.tail, t.rel + num_base_relations))
                .or_default()
                .push(t.head);
        }
        for v in known.values_mut() {
            v.sort_unstable();
            v.dedup();
        }
        Self { known }
    }

    /// Sorted true answers of `(head, rel, ?)`.
    pub fn known(&self, head: usize, rel: usize) -> &[usize] {
        self.known.get(&(head, rel)).map_or(&[], Vec::as_slice)
    }
}

/// One evaluation or training query in augmented relation space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DirectedQuery {
    /// Index of the source triplet in its list.
    pub index: usize,
    /// `false` for `(h, r, ?)`, `true` for `(t, r⁻¹, ?)`.
    pub inverse: bool,
    pub head: usize,
    pub rel: usize,
    pub answer: usize,
}

impl DirectedQuery {
    /// Both directions of `t` (base relation ids) in a graph with `j` base
    /// relations.
    pub fn both(index: usize, t: Triplet, j: usize) -> [Self; 2] {
        [
            Self {
                index,
                inverse: false,
                head: t.head,
                rel: t.rel,
                answer: t.tail,
            },
            Self {
                index,
                inverse: true,
                head: t.tail,
                rel: t.rel + j,
                answer: t.head,
            },
        ]
    }

    pub fn query(&self) -> QueryTriplet {
        QueryTriplet {
            head: self.head,
            rel: self.rel,
            answer: Some(self.answer),
        }
    }

    /// The edge this query asks about, in augmented ids.
    pub fn as_triplet(&self) -> Triplet {
        Triplet::new(self.head, self.rel, self.answer)
    }
}

/// A graph, its held-out queries and the filter index over both.
#[derive(Debug, Clone)]
pub struct Split {
    pub ctx: GraphContext,
    /// Held-out triplets, base relation ids.
    pub queries: Vec<Triplet>,
    pub filter: FilterIndex,
    pub report: LoadReport,
}

impl Split {
    /// `kg` must not be augmented; `queries` use its base relation ids.
    pub fn new(kg: KnowledgeGraph, queries: Vec<Triplet>, report: LoadReport) -> Result<Self> {
        if kg.is_augmented() {
            return Err(KrlmError::Graph("split graphs are stored without inverses".into()));
        }
        let j = kg.num_relations();
        for q in &queries {
            if q.head >= kg.num_entities() || q.tail >= kg.num_entities() || q.rel >= j {
                return Err(KrlmError::Graph(format!("query {q:?} references an unknown id")));
            }
        }
        let leaked = queries.iter().filter(|q| kg.contains(q)).count();
        if leaked > 0 {
            log::warn!("{leaked} held-out queries also appear in the graph");
        }
        let filter = FilterIndex::build(kg.triplets().iter().chain(&queries).copied(), j);
        Ok(Self {
            ctx: GraphContext::new(kg)?,
            queries,
            filter,
            report,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ents = Descriptions::read(&dir.join("entities.tsv"))?;
        let rels = Descriptions::read(&dir.join("relations.tsv"))?;
        let graph = read_triplets(&dir.join("graph.tsv"), &ents, &rels)?;
        let queries_path = dir.join("queries.tsv");
        let queries = read_triplets(&queries_path, &ents, &rels)?;
        let (kg, duplicates) = KnowledgeGraph::new(ents.entity_records(), rels.relation_records(), graph)?;
        let report = LoadReport {
            entities: kg.num_entities(),
            relations: kg.num_relations(),
            triplets: kg.triplets().len(),
            duplicates,
        };
        let mut queries_dedup = Vec::with_capacity(queries.len());
        let mut seen = std::collections::HashSet::new();
        for q in queries {
            if seen.insert(q) {
                queries_dedup.push(q);
            }
        }
        Self::new(kg, queries_dedup, report)
    }

    /// Graph without inverse edges.
    pub fn base_graph(&self) -> Result<KnowledgeGraph> {
        self.ctx.kg.strip_inverses()
    }

    pub fn num_base_relations(&self) -> usize {
        self.ctx.kg.num_base_relations()
    }

    /// Both directions of every held-out query, in file order.
    pub fn directed_queries(&self) -> Vec<DirectedQuery> {
        let j = self.num_base_relations();
        self.queries
            .iter()
            .enumerate()
            .flat_map(|(i, &t)| DirectedQuery::both(i, t, j))
            .collect()
    }

    /// Both directions of every graph triplet (training queries).
    pub fn graph_queries(&self) -> Vec<DirectedQuery> {
        let j = self.num_base_relations();
        self.ctx
            .kg
            .triplets()
            .iter()
            .filter(|t| t.rel < j)
            .enumerate()
            .flat_map(|(i, &t)| DirectedQuery::both(i, t, j))
            .collect()
    }

    /// Writes the split with dense numeric ids.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let kg = &self.ctx.kg;
        let j = kg.num_base_relations();
        fs::create_dir_all(dir).map_err(|e| KrlmError::io(dir, e))?;
        let mut ents = String::new();
        for e in kg.entities() {
            let _ = writeln!(ents, "{}\t{}\t{}", e.id, clean(&e.name), clean(&e.description));
        }
        let mut rels = String::new();
        for r in &kg.relations()[..j] {
            let _ = writeln!(rels, "{}\t{}\t{}", r.id, clean(&r.name), clean(&r.description));
        }
        let rows = |ts: &mut dyn Iterator<Item = &Triplet>| {
            let mut s = String::new();
            for t in ts {
                let _ = writeln!(s, "{}\t{}\t{}", t.head, t.rel, t.tail);
            }
            s
        };
        let graph = rows(&mut kg.triplets().iter().filter(|t| t.rel < j));
        let queries = rows(&mut self.queries.iter());
        for (name, body) in SPLIT_FILES.iter().zip([ents, rels, graph, queries]) {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| KrlmError::io(&path, e))?;
        }
        Ok(())
    }
}

fn clean(s: &str) -> String {
    s.replace(['\t', '\n', '\r'], " ")
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    pub root: PathBuf,
    pub train: Split,
    pub test: Split,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let name = root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into());
        Ok(Self {
            name,
            root: root.to_path_buf(),
            train: Split::load(&root.join("train"))?,
            test: Split::load(&root.join("test"))?,
        })
    }

    pub fn write(&self, root: &Path) -> Result<()> {
        self.train.write(&root.join("train"))?;
        self.test.write(&root.join("test"))
    }
}

/// SHA-256 over every split file of a dataset directory, in fixed order.
pub fn content_hash(root: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for split in ["train", "test"] {
        for f in SPLIT_FILES {
            let path = root.join(split).join(f);
            let bytes = fs::read(&path).map_err(|e| KrlmError::io(&path, e))?;
            h.update(format!("{split}/{f}\0{}\0", bytes.len()).as_bytes());
            h.update(&bytes);
        }
    }
    Ok(hex::encode(h.finalize()))
}
