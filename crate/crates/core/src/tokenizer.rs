//! Deterministic subword tokenizer with byte fallback.
//!
//! Text is pre-split into maximal runs of whitespace and non-whitespace.
//! Each run is segmented by greedy longest match over the learned pieces;
//! anything not covered falls back to one token per UTF-8 byte, so every
//! string round-trips exactly.

use std::collections::HashMap;

use crate::error::{KrlmError, Result};

pub const SLOT_WORD_HEAD: &str = "<|w_eh|>";
pub const SLOT_STRUCT_HEAD: &str = "<|k_eh|>";
pub const SLOT_WORD_REL: &str = "<|w_rq|>";
pub const SLOT_STRUCT_REL: &str = "<|k_rq|>";
pub const BOS: &str = "<|bos|>";

pub const SPECIALS: [&str; 5] = [BOS, SLOT_WORD_HEAD, SLOT_STRUCT_HEAD, SLOT_WORD_REL, SLOT_STRUCT_REL];
const BYTE_BASE: u32 = SPECIALS.len() as u32;
const PIECE_BASE: u32 = BYTE_BASE + 256;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    pieces: Vec<String>,
    index: HashMap<String, u32>,
    max_piece_len: usize,
}

/// Splits into maximal runs of whitespace / non-whitespace characters.
pub fn pre_split(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev: Option<bool> = None;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if prev.is_some_and(|p| p != ws) {
            out.push(&text[start..i]);
            start = i;
        }
        prev = Some(ws);
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

impl Tokenizer {
    /// Learns up to `max_vocab` total tokens from `corpus`: specials, 256
    /// byte tokens, then the most frequent multi-byte runs (ties broken
    /// lexicographically, runs seen once are skipped).
    pub fn train<'a>(corpus: impl IntoIterator<Item = &'a str>, max_vocab: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in corpus {
            for run in pre_split(text) {
                if run.len() > 1 {
                    *counts.entry(run).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= 2).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let room = max_vocab.saturating_sub(PIECE_BASE as usize);
        Self::from_pieces(ranked.into_iter().take(room).map(|(s, _)| s.to_string()).collect())
    }

    fn from_pieces(pieces: Vec<String>) -> Self {
        let index = pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), PIECE_BASE + i as u32))
            .collect();
        let max_piece_len = pieces.iter().map(String::len).max().unwrap_or(0);
        Self {
            pieces,
            index,
            max_piece_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        PIECE_BASE as usize + self.pieces.len()
    }

    pub fn special_id(name: &str) -> Option<u32> {
        SPECIALS.iter().position(|&s| s == name).map(|i| i as u32)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for run in pre_split(text) {
            if let Some(&id) = self.index.get(run) {
                out.push(id);
                continue;
            }
            let mut i = 0;
            while i < run.len() {
                let rest = &run[i..];
                let mut matched = None;
                let mut len = rest.len().min(self.max_piece_len);
                while len > 1 {
                    if rest.is_char_boundary(len) {
                        if let Some(&id) = self.index.get(&rest[..len]) {
                            matched = Some((id, len));
                            break;
                        }
                    }
                    len -= 1;
                }
                match matched {
                    Some((id, len)) => {
                        out.push(id);
                        i += len;
                    }
                    None => {
                        let c = rest.chars().next().map_or(1, char::len_utf8);
                        out.extend(rest.as_bytes()[..c].iter().map(|&b| BYTE_BASE + b as u32));
                        i += c;
                    }
                }
            }
        }
        out
    }

    /// Concatenated bytes of the tokens; specials render as their names.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            if id < BYTE_BASE {
                out.extend_from_slice(SPECIALS[id as usize].as_bytes());
            } else if id < PIECE_BASE {
                out.push((id - BYTE_BASE) as u8);
            } else if let Some(p) = self.pieces.get((id - PIECE_BASE) as usize) {
                out.extend_from_slice(p.as_bytes());
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    /// Display form of one token, as written to the vocabulary file.
    pub fn token_text(&self, id: u32) -> String {
        if id < BYTE_BASE {
            SPECIALS[id as usize].to_string()
        } else if id < PIECE_BASE {
            format!("<0x{:02X}>", id - BYTE_BASE)
        } else {
            escape(&self.pieces[(id - PIECE_BASE) as usize])
        }
    }

    /// `token<TAB>id` per line.
    pub fn to_vocab_file(&self) -> String {
        let mut s = String::new();
        for id in 0..self.vocab_size() as u32 {
            s.push_str(&self.token_text(id));
            s.push('\t');
            s.push_str(&id.to_string());
            s.push('\n');
        }
        s
    }

    pub fn from_vocab_file(text: &str) -> Result<Self> {
        let bad = |line: usize, m: &str| KrlmError::Invalid(format!("vocabulary line {line}: {m}"));
        let mut pieces = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let (tok, id) = line.rsplit_once('\t').ok_or_else(|| bad(i + 1, "missing tab"))?;
            let id: u32 = id.parse().map_err(|_| bad(i + 1, "bad id"))?;
            if id != i as u32 {
                return Err(bad(i + 1, "ids must be dense and ordered"));
            }
            if id < BYTE_BASE {
                if tok != SPECIALS[id as usize] {
                    return Err(bad(i + 1, "unexpected special token"));
                }
            } else if id < PIECE_BASE {
                if tok != format!("<0x{:02X}>", id - BYTE_BASE) {
                    return Err(bad(i + 1, "unexpected byte token"));
                }
            } else {
                pieces.push(unescape(tok).ok_or_else(|| bad(i + 1, "bad escape"))?);
            }
        }
        Ok(Self::from_pieces(pieces))
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for (i, c) in s.chars().enumerate() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '<' if i == 0 => out.push_str("\\<"),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            out.push(match chars.next()? {
                '\\' => '\\',
                't' => '\t',
                'n' => '\n',
                'r' => '\r',
                '<' => '<',
                _ => return None,
            });
        } else {
            out.push(c);
        }
    }
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pre_split_alternates_runs() {
        assert_eq!(pre_split("ab  c\nd"), vec!["ab", "  ", "c", "\n", "d"]);
        assert!(pre_split("").is_empty());
    }

    #[test]
    fn vocab_file_round_trip() {
        let tok = Tokenizer::train(["<x> a\\b <x> a\\b tab\there tab\there"], 400);
        let back = Tokenizer::from_vocab_file(&tok.to_vocab_file()).unwrap();
        assert_eq!(tok, back);
    }
}
