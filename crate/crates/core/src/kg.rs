//! Knowledge graphs: entity and relation vocabularies, the triplet store and
//! inverse-relation augmentation.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use krlm_numerics::EdgeIndex;

use crate::error::{KrlmError, Result};

pub const INVERSE_PREFIX: &str = "inverse of ";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityRecord {
    pub id: usize,
    pub name: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationRecord {
    pub id: usize,
    pub name: String,
    pub description: String,
    pub is_inverse: bool,
    pub base_id: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triplet {
    pub head: usize,
    pub rel: usize,
    pub tail: usize,
}

impl Triplet {
    pub fn new(head: usize, rel: usize, tail: usize) -> Self {
        Self { head, rel, tail }
    }
}

/// A directed query `<head, rel, ?>` with an optional known answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct QueryTriplet {
    pub head: usize,
    pub rel: usize,
    pub answer: Option<usize>,
}

impl From<Triplet> for QueryTriplet {
    fn from(t: Triplet) -> Self {
        Self {
            head: t.head,
            rel: t.rel,
            answer: Some(t.tail),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub entities: usize,
    pub relations: usize,
    pub triplets: usize,
    pub duplicates: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeGraph {
    entities: Vec<EntityRecord>,
    relations: Vec<RelationRecord>,
    triplets: Vec<Triplet>,
    augmented: bool,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
    lookup: HashSet<Triplet>,
}

impl KnowledgeGraph {
    /// Validates and deduplicates `triplets` (first occurrence kept). Returns
    /// the graph and the number of duplicates dropped.
    pub fn new(
        entities: Vec<EntityRecord>,
        relations: Vec<RelationRecord>,
        triplets: Vec<Triplet>,
    ) -> Result<(Self, usize)> {
        for (i, e) in entities.iter().enumerate() {
            if e.id != i {
                return Err(KrlmError::Graph(format!("entity {} has id {}", i, e.id)));
            }
            if e.name.is_empty() {
                return Err(KrlmError::Graph(format!("entity {i} has an empty name")));
            }
        }
        for (i, r) in relations.iter().enumerate() {
            if r.id != i || r.base_id >= relations.len() {
                return Err(KrlmError::Graph(format!("relation {i} has inconsistent ids")));
            }
        }
        let total = triplets.len();
        let mut lookup = HashSet::with_capacity(total);
        let mut kept = Vec::with_capacity(total);
        for t in triplets {
            if t.head >= entities.len() || t.tail >= entities.len() || t.rel >= relations.len() {
                return Err(KrlmError::Graph(format!("triplet {t:?} references an unknown id")));
            }
            if lookup.insert(t) {
                kept.push(t);
            }
        }
        let duplicates = total - kept.len();
        let mut g = Self {
            incoming: Vec::new(),
            outgoing: Vec::new(),
            augmented: relations.iter().any(|r| r.is_inverse),
            entities,
            relations,
            triplets: kept,
            lookup,
        };
        g.index();
        Ok((g, duplicates))
    }

    fn index(&mut self) {
        let n = self.entities.len();
        self.incoming = vec![Vec::new(); n];
        self.outgoing = vec![Vec::new(); n];
        for (i, t) in self.triplets.iter().enumerate() {
            self.outgoing[t.head].push(i);
            self.incoming[t.tail].push(i);
        }
    }

    pub fn entities(&self) -> &[EntityRecord] {
        &self.entities
    }

    pub fn relations(&self) -> &[RelationRecord] {
        &self.relations
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn is_augmented(&self) -> bool {
        self.augmented
    }

    /// Number of base (non-inverse) relations `J`.
    pub fn num_base_relations(&self) -> usize {
        if self.augmented {
            self.relations.len() / 2
        } else {
            self.relations.len()
        }
    }

    /// Partner relation of `rel` in an augmented graph.
    pub fn inverse_of(&self, rel: usize) -> usize {
        let j = self.num_base_relations();
        if rel < j {
            rel + j
        } else {
            rel - j
        }
    }

    pub fn contains(&self, t: &Triplet) -> bool {
        self.lookup.contains(t)
    }

    /// Indices into [`Self::triplets`] of edges ending at `entity`.
    pub fn incoming(&self, entity: usize) -> &[usize] {
        &self.incoming[entity]
    }

    pub fn outgoing(&self, entity: usize) -> &[usize] {
        &self.outgoing[entity]
    }

    pub fn entity_id(&self, name: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.name == name)
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relations.iter().position(|r| r.name == name)
    }

    /// Adds `(t, r+J, h)` for every `(h, r, t)` and doubles the relation set.
    pub fn augment_inverses(&self) -> Result<Self> {
        if self.augmented {
            return Err(KrlmError::Graph("graph is already inverse-augmented".into()));
        }
        let j = self.relations.len();
        let mut relations = self.relations.clone();
        for r in &self.relations {
            relations.push(RelationRecord {
                id: r.id + j,
                name: format!("{INVERSE_PREFIX}{}", r.name),
                description: r.description.clone(),
                is_inverse: true,
                base_id: r.id,
            });
        }
        let mut triplets = self.triplets.clone();
        triplets.extend(self.triplets.iter().map(|t| Triplet::new(t.tail, t.rel + j, t.head)));
        let (mut g, _) = Self::new(self.entities.clone(), relations, triplets)?;
        g.augmented = true;
        Ok(g)
    }

    /// Inverse of [`Self::augment_inverses`].
    pub fn strip_inverses(&self) -> Result<Self> {
        if !self.augmented {
            return Err(KrlmError::Graph("graph is not inverse-augmented".into()));
        }
        let j = self.num_base_relations();
        let relations = self.relations[..j].to_vec();
        let triplets = self.triplets.iter().copied().filter(|t| t.rel < j).collect();
        Ok(Self::new(self.entities.clone(), relations, triplets)?.0)
    }

    /// Message-passing edges `head → tail` typed by relation.
    pub fn edge_index(&self) -> EdgeIndex {
        let mut e = EdgeIndex::new();
        for t in &self.triplets {
            e.push(t.head, t.rel, t.tail);
        }
        e
    }

    /// Edge positions of `t` and its inverse partner, for removing a training
    /// query from its own message-passing graph.
    pub fn query_edge_positions(&self, t: &Triplet) -> Vec<usize> {
        let inv = Triplet::new(t.tail, self.inverse_of(t.rel), t.head);
        let mut out: Vec<usize> = self
            .outgoing(t.head)
            .iter()
            .chain(self.outgoing(t.tail))
            .copied()
            .filter(|&i| self.triplets[i] == *t || (self.augmented && self.triplets[i] == inv))
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Entities with no incident edge.
    pub fn isolated_entities(&self) -> usize {
        (0..self.entities.len())
            .filter(|&e| self.incoming[e].is_empty() && self.outgoing[e].is_empty())
            .count()
    }
}

/// `id<TAB>name<TAB>description` rows; dense ids follow declaration order.
#[derive(Debug, Clone, Default)]
pub struct Descriptions {
    pub rows: Vec<(String, String, String)>,
    by_key: HashMap<String, usize>,
    by_name: HashMap<String, usize>,
}

impl Descriptions {
    pub fn parse(path: &Path, text: &str) -> Result<Self> {
        let mut d = Self::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, '\t');
            let key = parts.next().unwrap_or("").trim().to_string();
            let name = parts.next().map(str::trim).unwrap_or("").to_string();
            let desc = parts.next().map(str::trim).unwrap_or("").to_string();
            if key.is_empty() {
                return Err(KrlmError::load(path, i + 1, "missing id"));
            }
            let name = if name.is_empty() { key.clone() } else { name };
            let idx = d.rows.len();
            if d.by_key.insert(key.clone(), idx).is_some() {
                return Err(KrlmError::load(path, i + 1, format!("duplicate description id `{key}`")));
            }
            d.by_name.entry(name.clone()).or_insert(idx);
            d.rows.push((key, name, desc));
        }
        Ok(d)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| KrlmError::io(path, e))?;
        Self::parse(path, &text)
    }

    /// Resolves a triplet-file field: declared id first, then name.
    pub fn resolve(&self, field: &str) -> Option<usize> {
        self.by_key
            .get(field)
            .or_else(|| self.by_name.get(field))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn entity_records(&self) -> Vec<EntityRecord> {
        self.rows
            .iter()
            .enumerate()
            .map(|(id, (_, name, description))| EntityRecord {
                id,
                name: name.clone(),
                description: description.clone(),
            })
            .collect()
    }

    pub fn relation_records(&self) -> Vec<RelationRecord> {
        self.rows
            .iter()
            .enumerate()
            .map(|(id, (_, name, description))| RelationRecord {
                id,
                name: name.clone(),
                description: description.clone(),
                is_inverse: false,
                base_id: id,
            })
            .collect()
    }
}

/// Reads `head<TAB>relation<TAB>tail` rows against the given vocabularies.
pub fn read_triplets(path: &Path, entities: &Descriptions, relations: &Descriptions) -> Result<Vec<Triplet>> {
    let text = fs::read_to_string(path).map_err(|e| KrlmError::io(path, e))?;
    parse_triplets(path, &text, entities, relations)
}

pub fn parse_triplets(
    path: &Path,
    text: &str,
    entities: &Descriptions,
    relations: &Descriptions,
) -> Result<Vec<Triplet>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').map(str::trim).collect();
        if f.len() != 3 {
            return Err(KrlmError::load(path, i + 1, format!("expected 3 fields, found {}", f.len())));
        }
        let ent = |s: &str| {
            entities
                .resolve(s)
                .ok_or_else(|| KrlmError::load(path, i + 1, format!("unknown entity `{s}`")))
        };
        let rel = relations
            .resolve(f[1])
            .ok_or_else(|| KrlmError::load(path, i + 1, format!("unknown relation `{}`", f[1])))?;
        out.push(Triplet::new(ent(f[0])?, rel, ent(f[2])?));
    }
    Ok(out)
}

/// Loads a graph without inverse augmentation.
pub fn load_graph(
    triplet_file: &Path,
    entity_desc_file: &Path,
    relation_desc_file: &Path,
) -> Result<(KnowledgeGraph, LoadReport)> {
    let ents = Descriptions::read(entity_desc_file)?;
    let rels = Descriptions::read(relation_desc_file)?;
    let triplets = read_triplets(triplet_file, &ents, &rels)?;
    let (kg, duplicates) = KnowledgeGraph::new(ents.entity_records(), rels.relation_records(), triplets)?;
    let report = LoadReport {
        entities: kg.num_entities(),
        relations: kg.num_relations(),
        triplets: kg.triplets().len(),
        duplicates,
    };
    Ok((kg, report))
}

/// Augmented graph plus the derived structures every forward pass needs.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub kg: KnowledgeGraph,
    pub relational: crate::relgraph::RelationalGraph,
    pub entity_edges: Arc<EdgeIndex>,
    pub relation_edges: Arc<EdgeIndex>,
}

impl GraphContext {
    /// Augments `kg` (if needed) and builds the relational graph.
    pub fn new(kg: KnowledgeGraph) -> Result<Self> {
        let kg = if kg.is_augmented() { kg } else { kg.augment_inverses()? };
        let relational = crate::relgraph::RelationalGraph::build(&kg)?;
        Ok(Self {
            entity_edges: Arc::new(kg.edge_index()),
            relation_edges: Arc::new(relational.edge_index()),
            relational,
            kg,
        })
    }

    /// Entity edges with `t` and its inverse removed (training queries must
    /// not see their own answer edge).
    pub fn edges_without(&self, t: &Triplet) -> Arc<EdgeIndex> {
        let drop = self.kg.query_edge_positions(t);
        if drop.is_empty() {
            Arc::clone(&self.entity_edges)
        } else {
            Arc::new(self.entity_edges.without(&drop))
        }
    }
}
