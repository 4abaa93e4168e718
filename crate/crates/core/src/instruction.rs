//! KRL instruction assembly: PAA word-level embeddings, the instruction
//! template with its vocabulary block, and substitution of the four special
//! embeddings into the token stream.

use krlm_numerics::{ParamId, ParamStore, Real, Scope, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{KrlmError, Result};
use crate::kg::KnowledgeGraph;
use crate::nn::{table_rows, uniform_init, Linear};
use crate::tokenizer::{self, Tokenizer, BOS};

pub const DEFAULT_TEMPLATE: &str = include_str!("../resources/krl_template.txt");

/// Principal attribute aggregation: project token rows by `down`, pool
/// `[mean ‖ max ‖ min ‖ std]`, fuse by `fusion`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Paa {
    pub down: ParamId,
    pub fusion: ParamId,
}

impl Paa {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            down: store.add(format!("{name}.down"), uniform_init(rng, hidden, dim, hidden), true)?,
            fusion: store.add(format!("{name}.fusion"), uniform_init(rng, 4 * dim, dim, 4 * dim), true)?,
        })
    }

    /// `1 × d` embedding of the token sequence `ids` looked up in `table`.
    pub fn forward<T: Real>(&self, s: &Scope<T>, table: ParamId, ids: &[u32], what: &str) -> Result<Var> {
        if ids.is_empty() {
            return Err(KrlmError::EmptyTokenization(what.to_string()));
        }
        let t = s.tape();
        let rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tokens = table_rows(s, table, &rows)?;
        let x = t.matmul(tokens, s.var(self.down))?;
        let pooled = [t.mean_rows(x)?, t.max_rows(x)?, t.min_rows(x)?, t.std_rows(x)?];
        let cat = t.concat_cols(&pooled)?;
        Ok(t.matmul(cat, s.var(self.fusion))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    WordHead,
    StructHead,
    WordRel,
    StructRel,
}

impl Slot {
    fn marker(self) -> &'static str {
        match self {
            Slot::WordHead => "[W_EH]",
            Slot::StructHead => "[K_EH]",
            Slot::WordRel => "[W_RQ]",
            Slot::StructRel => "[K_RQ]",
        }
    }

    fn token(self) -> u32 {
        let name = match self {
            Slot::WordHead => tokenizer::SLOT_WORD_HEAD,
            Slot::StructHead => tokenizer::SLOT_STRUCT_HEAD,
            Slot::WordRel => tokenizer::SLOT_WORD_REL,
            Slot::StructRel => tokenizer::SLOT_STRUCT_REL,
        };
        Tokenizer::special_id(name).expect("slot tokens are specials")
    }

    const ALL: [Slot; 4] = [Slot::WordHead, Slot::StructHead, Slot::WordRel, Slot::StructRel];
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Text(String),
    Vocabulary,
    Slot(Slot),
}

/// Parsed template body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    pieces: Vec<Piece>,
}

impl Template {
    pub fn parse(text: &str) -> Result<Self> {
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        let body = body.join("\n");
        let body = body.trim_end();
        let mut pieces = Vec::new();
        let mut rest = body;
        loop {
            let next = Slot::ALL
                .iter()
                .map(|&s| (rest.find(s.marker()), Piece::Slot(s), s.marker().len()))
                .chain(std::iter::once((rest.find("{vocabulary}"), Piece::Vocabulary, "{vocabulary}".len())))
                .filter_map(|(pos, p, len)| pos.map(|pos| (pos, p, len)))
                .min_by_key(|(pos, _, _)| *pos);
            match next {
                Some((pos, p, len)) => {
                    if pos > 0 {
                        pieces.push(Piece::Text(rest[..pos].to_string()));
                    }
                    pieces.push(p);
                    rest = &rest[pos + len..];
                }
                None => {
                    if !rest.is_empty() {
                        pieces.push(Piece::Text(rest.to_string()));
                    }
                    break;
                }
            }
        }
        let n = pieces.len();
        if n < 2 || pieces[n - 2] != Piece::Slot(Slot::WordHead) || pieces[n - 1] != Piece::Slot(Slot::WordRel) {
            // A single space between the two closing slots is allowed and dropped below.
            let ok = n >= 3
                && pieces[n - 3] == Piece::Slot(Slot::WordHead)
                && matches!(&pieces[n - 2], Piece::Text(t) if t.trim().is_empty())
                && pieces[n - 1] == Piece::Slot(Slot::WordRel);
            if !ok {
                return Err(KrlmError::Invalid("template must end with [W_EH] [W_RQ]".into()));
            }
        }
        for s in Slot::ALL {
            if !pieces.contains(&Piece::Slot(s)) {
                return Err(KrlmError::Invalid(format!("template lacks {}", s.marker())));
            }
        }
        if !pieces.contains(&Piece::Vocabulary) {
            return Err(KrlmError::Invalid("template lacks {vocabulary}".into()));
        }
        Ok(Self { pieces })
    }

    pub fn default_template() -> Self {
        Self::parse(DEFAULT_TEMPLATE).expect("bundled template is valid")
    }

    /// All literal text, for building the tokenizer corpus.
    pub fn literal_text(&self) -> String {
        self.pieces
            .iter()
            .filter_map(|p| match p {
                Piece::Text(t) => Some(t.as_str()),
                _ => None,
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Token ids of an item's word format `name: description`, the description
/// truncated to `desc_tokens` tokens. An empty description leaves the name.
pub fn word_format_tokens(tok: &Tokenizer, name: &str, description: &str, desc_tokens: usize) -> Vec<u32> {
    if description.trim().is_empty() {
        return tok.encode(name);
    }
    let mut ids = tok.encode(&format!("{name}: "));
    let desc = tok.encode(description);
    ids.extend_from_slice(&desc[..desc.len().min(desc_tokens)]);
    ids
}

pub fn entity_tokens(tok: &Tokenizer, kg: &KnowledgeGraph, entity: usize, desc_tokens: usize) -> Vec<u32> {
    let e = &kg.entities()[entity];
    word_format_tokens(tok, &e.name, &e.description, desc_tokens)
}

pub fn relation_tokens(tok: &Tokenizer, kg: &KnowledgeGraph, rel: usize, desc_tokens: usize) -> Vec<u32> {
    let r = &kg.relations()[rel];
    word_format_tokens(tok, &r.name, &r.description, desc_tokens)
}

/// Token stream of one instruction with the slot positions marked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionLayout {
    pub tokens: Vec<u32>,
    pub slots: Vec<(usize, Slot)>,
}

impl InstructionLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabItem {
    Entity(usize),
    Relation(usize),
}

/// Vocabulary block: the head entity, the query relation, then entities in
/// `ranked` order (skipping the head) until `limit` items.
pub fn vocabulary_items(head: usize, rel: usize, ranked: &[usize], limit: usize) -> Vec<VocabItem> {
    let mut items = vec![VocabItem::Entity(head), VocabItem::Relation(rel)];
    items.extend(ranked.iter().filter(|&&e| e != head).map(|&e| VocabItem::Entity(e)));
    items.truncate(limit);
    items
}

pub fn build_layout(
    template: &Template,
    tok: &Tokenizer,
    kg: &KnowledgeGraph,
    items: &[VocabItem],
    desc_tokens: usize,
    max_len: usize,
) -> Result<InstructionLayout> {
    let mut tokens = vec![Tokenizer::special_id(BOS).expect("bos")];
    let mut slots = Vec::new();
    for (i, piece) in template.pieces.iter().enumerate() {
        match piece {
            Piece::Text(text) => {
                let between_slots = i > 0
                    && matches!(template.pieces[i - 1], Piece::Slot(_))
                    && matches!(template.pieces.get(i + 1), Some(Piece::Slot(_)));
                if !(between_slots && text.trim().is_empty()) {
                    tokens.extend(tok.encode(text));
                }
            }
            Piece::Slot(s) => {
                slots.push((tokens.len(), *s));
                tokens.push(s.token());
            }
            Piece::Vocabulary => {
                for (k, item) in items.iter().enumerate() {
                    if k > 0 {
                        tokens.extend(tok.encode("\n"));
                    }
                    tokens.extend(tok.encode("- "));
                    tokens.extend(match *item {
                        VocabItem::Entity(e) => entity_tokens(tok, kg, e, desc_tokens),
                        VocabItem::Relation(r) => relation_tokens(tok, kg, r, desc_tokens),
                    });
                }
            }
        }
    }
    if tokens.len() > max_len {
        return Err(KrlmError::InstructionOverflow {
            measured: tokens.len(),
            limit: max_len,
        });
    }
    Ok(InstructionLayout { tokens, slots })
}

/// Trainable maps from `d`-dim embeddings into the backbone's `F`-dim
/// stream, one for word-level and one for structural embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlotMaps {
    pub word: Linear,
    pub structural: Linear,
}

impl SlotMaps {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(Self {
            word: Linear::new(store, &format!("{name}.word"), dim, hidden, false, rng)?,
            structural: Linear::new(store, &format!("{name}.struct"), dim, hidden, false, rng)?,
        })
    }
}

/// The four `1 × d` vectors substituted into the slots.
#[derive(Debug, Clone, Copy)]
pub struct SlotInputs {
    pub word_head: Var,
    pub struct_head: Var,
    pub word_rel: Var,
    pub struct_rel: Var,
}

/// `m × F` instruction embeddings: text rows from `emb`, slot rows from the
/// mapped slot inputs.
pub fn assemble<T: Real>(
    s: &Scope<T>,
    layout: &InstructionLayout,
    emb: ParamId,
    maps: &SlotMaps,
    inputs: &SlotInputs,
) -> Result<Var> {
    let t = s.tape();
    let mapped = [
        maps.word.forward(s, inputs.word_head)?,
        maps.structural.forward(s, inputs.struct_head)?,
        maps.word.forward(s, inputs.word_rel)?,
        maps.structural.forward(s, inputs.struct_rel)?,
    ];
    let slot_var = |slot: Slot| match slot {
        Slot::WordHead => mapped[0],
        Slot::StructHead => mapped[1],
        Slot::WordRel => mapped[2],
        Slot::StructRel => mapped[3],
    };
    let mut parts = Vec::new();
    let mut start = 0;
    for &(pos, slot) in &layout.slots {
        if pos > start {
            let rows: Vec<usize> = layout.tokens[start..pos].iter().map(|&i| i as usize).collect();
            parts.push(table_rows(s, emb, &rows)?);
        }
        parts.push(slot_var(slot));
        start = pos + 1;
    }
    if start < layout.tokens.len() {
        let rows: Vec<usize> = layout.tokens[start..].iter().map(|&i| i as usize).collect();
        parts.push(table_rows(s, emb, &rows)?);
    }
    Ok(t.concat_rows(&parts)?)
}
