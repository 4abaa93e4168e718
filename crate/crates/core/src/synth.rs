//! Synthetic inductive datasets with planted logical rules.
//!
//! Entities carry a type and a Zipf popularity. Base relations connect a
//! domain type to a range type; the remaining relations are defined by rules
//! over them:
//!
//! - composition `r(x, z) ⇐ r1(x, y) ∧ r2(y, z)`
//! - inversion   `r(y, x) ⇐ r1(x, y)`
//!
//! A graph is a set of sampled base facts plus part of the facts the rules
//! derive from them; the other derived facts become held-out queries, so
//! every query is supported by a path in the graph. Train and test graphs
//! share the relation schema and have disjoint entities.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::error::{KrlmError, Result};
use crate::kg::{EntityRecord, KnowledgeGraph, LoadReport, RelationRecord, Triplet};

const TYPES: [&str; 12] = [
    "person",
    "film",
    "city",
    "country",
    "organization",
    "award",
    "genre",
    "language",
    "university",
    "sport team",
    "album",
    "company",
];

const VERBS: [&str; 16] = [
    "nominated for",
    "located in",
    "member of",
    "produced by",
    "written in",
    "released in",
    "founded by",
    "plays for",
    "studied at",
    "awarded",
    "performed by",
    "directed by",
    "born in",
    "citizen of",
    "affiliated with",
    "works for",
];

const SYLLABLES: [&str; 24] = [
    "ka", "lo", "ren", "vi", "mor", "ta", "sel", "du", "ne", "bri", "os", "fa", "gil", "um", "zer", "pa", "lin", "cho",
    "ma", "tor", "ise", "wen", "ba", "rak",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphShape {
    pub entities: usize,
    pub triplets: usize,
    pub queries: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub seed: u64,
    pub types: usize,
    pub base_relations: usize,
    pub composition_rules: usize,
    pub inverse_rules: usize,
    /// Zipf exponent of entity popularity within a type.
    pub zipf: f64,
    pub train: GraphShape,
    pub test: GraphShape,
}

impl SynthConfig {
    /// Same shape as the first GraIL FB15k-237 inductive split: 180
    /// relations, 1594/1093 entities, 4245/1993 graph triplets, 489
    /// validation and 411 test triplets.
    pub fn fb_v1_shape(seed: u64) -> Self {
        Self {
            seed,
            types: 8,
            base_relations: 120,
            composition_rules: 40,
            inverse_rules: 20,
            zipf: 1.0,
            train: GraphShape {
                entities: 1594,
                triplets: 4245,
                queries: 489,
            },
            test: GraphShape {
                entities: 1093,
                triplets: 1993,
                queries: 411,
            },
        }
    }

    pub fn num_relations(&self) -> usize {
        self.base_relations + self.composition_rules + self.inverse_rules
    }

    fn validate(&self) -> Result<()> {
        if self.types == 0 || self.types > TYPES.len() {
            return Err(KrlmError::Config(format!("types must be in 1..={}", TYPES.len())));
        }
        if self.base_relations == 0 {
            return Err(KrlmError::Config("at least one base relation is required".into()));
        }
        for s in [self.train, self.test] {
            if s.entities < 2 * self.types || s.triplets < s.entities {
                return Err(KrlmError::Config(format!("graph shape {s:?} is too small")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Rule {
    Compose(usize, usize),
    Invert(usize),
}

#[derive(Debug, Clone)]
struct Schema {
    /// `(domain, range)` per relation.
    signature: Vec<(usize, usize)>,
    names: Vec<String>,
    /// Rule defining relation `base_relations + i`.
    rules: Vec<Rule>,
}

fn schema(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Schema> {
    let mut signature = Vec::new();
    let mut names = Vec::new();
    for k in 0..cfg.base_relations {
        let (d, r) = (rng.random_range(0..cfg.types), rng.random_range(0..cfg.types));
        signature.push((d, r));
        names.push(format!("{} {} {}", TYPES[d], VERBS[k % VERBS.len()], TYPES[r]));
    }
    let mut rules = Vec::new();
    for c in 0..cfg.composition_rules {
        let r1 = rng.random_range(0..cfg.base_relations);
        let mid = signature[r1].1;
        let options: Vec<usize> = (0..cfg.base_relations).filter(|&k| signature[k].0 == mid).collect();
        let Some(&r2) = options.get(rng.random_range(0..options.len().max(1))) else {
            return Err(KrlmError::Config(format!("no base relation starts at type {}", TYPES[mid])));
        };
        signature.push((signature[r1].0, signature[r2].1));
        names.push(format!("{} linked to {} via {} ({c})", TYPES[signature[r1].0], TYPES[signature[r2].1], TYPES[mid]));
        rules.push(Rule::Compose(r1, r2));
    }
    for i in 0..cfg.inverse_rules {
        let r1 = rng.random_range(0..cfg.base_relations);
        let (d, r) = signature[r1];
        signature.push((r, d));
        names.push(format!("{} associated with {} ({i})", TYPES[r], TYPES[d]));
        rules.push(Rule::Invert(r1));
    }
    Ok(Schema {
        signature,
        names,
        rules,
    })
}

fn entity_name(rng: &mut ChaCha8Rng, taken: &mut HashSet<String>) -> String {
    loop {
        let word = |n: usize, rng: &mut ChaCha8Rng| {
            let s: String = (0..n).map(|_| SYLLABLES[rng.random_range(0..SYLLABLES.len())]).collect();
            let mut c = s.chars();
            c.next().map(|f| f.to_uppercase().chain(c).collect::<String>()).unwrap_or_default()
        };
        let a = rng.random_range(2..4);
        let name = format!("{} {}", word(a, rng), word(2, rng));
        if taken.insert(name.clone()) {
            return name;
        }
    }
}

struct Population {
    types: Vec<usize>,
    by_type: Vec<Vec<usize>>,
    pickers: Vec<WeightedIndex<f64>>,
}

impl Population {
    fn new(n: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut types: Vec<usize> = (0..n).map(|i| i % cfg.types).collect();
        types.shuffle(rng);
        let mut by_type = vec![Vec::new(); cfg.types];
        for (e, &t) in types.iter().enumerate() {
            by_type[t].push(e);
        }
        let mut pickers = Vec::with_capacity(cfg.types);
        for members in &mut by_type {
            members.shuffle(rng);
            let w: Vec<f64> = (1..=members.len()).map(|r| (r as f64).powf(-cfg.zipf)).collect();
            pickers.push(WeightedIndex::new(w).map_err(|e| KrlmError::Config(e.to_string()))?);
        }
        Ok(Self { types, by_type, pickers })
    }

    fn draw(&self, ty: usize, rng: &mut ChaCha8Rng) -> usize {
        self.by_type[ty][self.pickers[ty].sample(rng)]
    }
}

fn derive(schema: &Schema, base_rels: usize, base: &[Triplet]) -> BTreeMap<usize, Vec<Triplet>> {
    let mut by_rel: Vec<Vec<Triplet>> = vec![Vec::new(); base_rels];
    let mut out_of: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for t in base {
        by_rel[t.rel].push(*t);
        out_of.entry((t.rel, t.head)).or_default().push(t.tail);
    }
    let mut derived = BTreeMap::new();
    for (i, rule) in schema.rules.iter().enumerate() {
        let rel = base_rels + i;
        let mut facts = Vec::new();
        match *rule {
            Rule::Compose(r1, r2) => {
                for t in &by_rel[r1] {
                    for &z in out_of.get(&(r2, t.tail)).map_or(&[][..], Vec::as_slice) {
                        if z != t.head {
                            facts.push(Triplet::new(t.head, rel, z));
                        }
                    }
                }
            }
            Rule::Invert(r1) => facts.extend(by_rel[r1].iter().map(|t| Triplet::new(t.tail, rel, t.head))),
        }
        facts.sort_unstable_by_key(|t| (t.head, t.tail));
        facts.dedup();
        derived.insert(rel, facts);
    }
    derived
}

/// Balanced draw of `n` facts: rules take turns, each in random order.
fn round_robin(mut groups: Vec<Vec<Triplet>>, n: usize, rng: &mut ChaCha8Rng) -> Vec<Triplet> {
    for g in &mut groups {
        g.shuffle(rng);
    }
    let mut out = Vec::with_capacity(n);
    let mut depth = 0;
    while out.len() < n {
        let mut any = false;
        for g in &groups {
            if let Some(&t) = g.get(depth) {
                any = true;
                if out.len() < n {
                    out.push(t);
                }
            }
        }
        if !any {
            break;
        }
        depth += 1;
    }
    out
}

fn graph(
    cfg: &SynthConfig,
    schema: &Schema,
    shape: GraphShape,
    rng: &mut ChaCha8Rng,
    taken: &mut HashSet<String>,
) -> Result<Split> {
    let pop = Population::new(shape.entities, cfg, rng)?;
    let nb = cfg.base_relations;
    let mut base = Vec::new();
    let mut seen = HashSet::new();
    let mut add = |t: Triplet, base: &mut Vec<Triplet>| {
        if t.head != t.tail && seen.insert(t) {
            base.push(t);
        }
    };

    // Every entity gets at least one base fact.
    for e in 0..shape.entities {
        let ty = pop.types[e];
        let touching: Vec<usize> = (0..nb)
            .filter(|&k| schema.signature[k].0 == ty || schema.signature[k].1 == ty)
            .collect();
        if touching.is_empty() {
            continue;
        }
        let k = touching[rng.random_range(0..touching.len())];
        let (d, r) = schema.signature[k];
        let t = if d == ty && (r != ty || rng.random_bool(0.5)) {
            Triplet::new(e, k, pop.draw(r, rng))
        } else {
            Triplet::new(pop.draw(d, rng), k, e)
        };
        add(t, &mut base);
    }

    let mut derived;
    loop {
        derived = derive(schema, nb, &base);
        let available: usize = derived.values().map(Vec::len).sum();
        if available >= shape.triplets.saturating_sub(base.len()) + shape.queries {
            break;
        }
        if base.len() >= shape.triplets {
            return Err(KrlmError::Config(format!(
                "rules derive only {available} facts from {} base facts; need more density",
                base.len()
            )));
        }
        for _ in 0..25.min(shape.triplets - base.len()) {
            let k = rng.random_range(0..nb);
            let (d, r) = schema.signature[k];
            add(Triplet::new(pop.draw(d, rng), k, pop.draw(r, rng)), &mut base);
        }
    }

    let needed = shape.triplets - base.len() + shape.queries;
    let mut picked = round_robin(derived.into_values().collect(), needed, rng);
    picked.shuffle(rng);
    let queries = picked[..shape.queries].to_vec();
    let mut triplets = base;
    triplets.extend_from_slice(&picked[shape.queries..]);
    triplets.shuffle(rng);

    let entities = (0..shape.entities)
        .map(|id| {
            let name = entity_name(rng, taken);
            let description = format!("{name} is a {}.", TYPES[pop.types[id]]);
            EntityRecord { id, name, description }
        })
        .collect();
    let relations = schema
        .names
        .iter()
        .enumerate()
        .map(|(id, name)| RelationRecord {
            id,
            name: name.clone(),
            description: format!("relation from a {} to a {}", TYPES[schema.signature[id].0], TYPES[schema.signature[id].1]),
            is_inverse: false,
            base_id: id,
        })
        .collect();
    let (kg, duplicates) = KnowledgeGraph::new(entities, relations, triplets)?;
    debug_assert_eq!(duplicates, 0);
    let report = LoadReport {
        entities: kg.num_entities(),
        relations: kg.num_relations(),
        triplets: kg.triplets().len(),
        duplicates,
    };
    Split::new(kg, queries, report)
}

/// Generates the train and test splits.
pub fn generate(cfg: &SynthConfig, name: &str) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let schema = schema(cfg, &mut rng)?;
    let mut taken = HashSet::new();
    let train = graph(cfg, &schema, cfg.train, &mut rng, &mut taken)?;
    let test = graph(cfg, &schema, cfg.test, &mut rng, &mut taken)?;
    Ok(Dataset {
        name: name.to_string(),
        root: Default::default(),
        train,
        test,
    })
}
