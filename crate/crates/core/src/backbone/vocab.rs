//! Word-level vocabulary with byte fallback.
//!
//! Layout: fixed control tokens, then `[SEG]`, then the visual-prompt tokens
//! `<VP_1>..<VP_N>` reserved contiguously, then 256 byte tokens, then the
//! word list. Whitespace between two word-like tokens is implied by a single
//! space; any other spacing is spelled out with byte tokens, and `GLUE`
//! marks two word-like tokens written without a space. Decoding therefore
//! inverts encoding exactly.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const IMG: usize = 3;
pub const QUESTION: usize = 4;
pub const ANSWER: usize = 5;
pub const GLUE: usize = 6;
pub const SEG: usize = 7;
/// Id of `<VP_1>`; `<VP_i>` is `VP_BASE + i - 1`.
pub const VP_BASE: usize = 8;

pub const SEG_TEXT: &str = "[SEG]";

const CONTROL_NAMES: [&str; 8] = ["<pad>", "<bos>", "<eos>", "<img>", "<question>", "<answer>", "<glue>", SEG_TEXT];

/// Words with dedicated ids, covering the synthetic grammar and templates.
const WORDS: &[&str] = &[
    "the", "a", "an", "of", "in", "on", "at", "to", "is", "it", "and", "with", "this", "that", "there", "are",
    "Please", "please", "segment", "instance", "semantic", "mode", "Sure", "Can", "can", "you", "image",
    "picture", "describe", "Describe", "detail", "What", "what", "Which", "which", "color", "shape", "object",
    "objects", "region", "left", "right", "top", "bottom", "upper", "lower", "center", "middle", "side", "corner",
    "leftmost", "rightmost", "topmost", "bottommost", "largest", "smallest", "biggest", "small", "large", "medium",
    "big", "tiny", "red", "green", "blue", "yellow", "purple", "orange", "white", "cyan", "magenta", "gray",
    "square", "disk", "bar", "squares", "disks", "bars", "This", "visual", "prompt", "does", "not", "exist",
    "How", "how", "many", "one", "two", "three", "four", "five", "six", "zero", "answer", "Answer", "Question",
    "option", "options", "choose", "Choose", "correct", "letter", "The", "located", "near", "far", "from",
    "next", "beside", "above", "below", "between", "other", "same", "different", "mask", "masks", "marked",
    "by", "refer", "refers", "referred", "shown", "see", "there", "Is", "Are", "yes", "no", "Yes", "No",
    "noisy", "background", "textured", "filled", "solid", "colored", "lies", "sits", "appears", "part", "half",
    "area", "covers", "round", "thin", "wide", "tall", "flat", "edge", "its", "has", "have", "be", "or", "for",
    "all", "each", "every", "only", "also", "than", "closest", "nearest", "farthest", "highest", "lowest",
    "cat", "dog", "person", "car", "text", "word", "It", "There", "A", "B", "C", "D",
];

/// Tokenizer over the fixed vocabulary.
#[derive(Debug, Clone)]
pub struct Vocab {
    num_prompts: usize,
    word_ids: HashMap<&'static str, usize>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    WordLike,
    Byte,
}

impl Vocab {
    pub fn new(num_prompts: usize) -> Self {
        let mut word_ids = HashMap::new();
        let base = VP_BASE + num_prompts + 256;
        let mut next = base;
        for w in WORDS {
            if !word_ids.contains_key(w) {
                word_ids.insert(*w, next);
                next += 1;
            }
        }
        Self { num_prompts, word_ids }
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    /// Smallest vocabulary size that holds every id.
    pub fn min_size(&self) -> usize {
        self.byte_base() + 256 + self.word_ids.len()
    }

    pub fn byte_base(&self) -> usize {
        VP_BASE + self.num_prompts
    }

    pub fn vp_id(&self, index: usize) -> Result<usize> {
        if index == 0 || index > self.num_prompts {
            return Err(Error::data(format!(
                "visual prompt index {index} outside 1..={}",
                self.num_prompts
            )));
        }
        Ok(VP_BASE + index - 1)
    }

    /// Prompt index of a `<VP_i>` id.
    pub fn vp_index(&self, id: usize) -> Option<usize> {
        (VP_BASE..VP_BASE + self.num_prompts)
            .contains(&id)
            .then(|| id - VP_BASE + 1)
    }

    fn kind(&self, id: usize) -> Kind {
        let b = self.byte_base();
        if (b..b + 256).contains(&id) {
            Kind::Byte
        } else {
            Kind::WordLike
        }
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev: Option<Kind> = None;
        let mut pending_ws = String::new();
        let mut rest = text;
        while !rest.is_empty() {
            let c = rest.chars().next().unwrap();
            if c.is_whitespace() {
                pending_ws.push(c);
                rest = &rest[c.len_utf8()..];
                continue;
            }
            let (ids, kind, used) = self.next_piece(rest);
            match (prev, kind) {
                (Some(Kind::WordLike), Kind::WordLike) => {
                    if pending_ws.is_empty() {
                        out.push(GLUE);
                    } else if pending_ws != " " {
                        out.extend(pending_ws.bytes().map(|b| self.byte_base() + b as usize));
                    }
                }
                _ => out.extend(pending_ws.bytes().map(|b| self.byte_base() + b as usize)),
            }
            pending_ws.clear();
            out.extend(ids);
            prev = Some(kind);
            rest = &rest[used..];
        }
        out.extend(pending_ws.bytes().map(|b| self.byte_base() + b as usize));
        out
    }

    fn next_piece(&self, s: &str) -> (Vec<usize>, Kind, usize) {
        if s.starts_with(SEG_TEXT) {
            return (vec![SEG], Kind::WordLike, SEG_TEXT.len());
        }
        if let Some(after) = s.strip_prefix("<VP_") {
            let digits: String = after.chars().take_while(char::is_ascii_digit).collect();
            if !digits.is_empty() && after[digits.len()..].starts_with('>') {
                if let Ok(i) = digits.parse::<usize>() {
                    if let Ok(id) = self.vp_id(i) {
                        return (vec![id], Kind::WordLike, 4 + digits.len() + 1);
                    }
                }
            }
        }
        let alpha = s.bytes().take_while(u8::is_ascii_alphabetic).count();
        if alpha > 0 {
            let word = &s[..alpha];
            return match self.word_ids.get(word) {
                Some(&id) => (vec![id], Kind::WordLike, alpha),
                None => (
                    word.bytes().map(|b| self.byte_base() + b as usize).collect(),
                    Kind::Byte,
                    alpha,
                ),
            };
        }
        let c = s.chars().next().unwrap();
        let n = c.len_utf8();
        (
            s[..n].bytes().map(|b| self.byte_base() + b as usize).collect(),
            Kind::Byte,
            n,
        )
    }

    /// Inverse of [`encode`](Self::encode) for ids produced by it; control
    /// tokens other than `GLUE` are rendered by name.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut bytes: Vec<u8> = Vec::new();
        let mut prev: Option<Kind> = None;
        let mut glued = false;
        let names: HashMap<usize, &str> = self.word_ids.iter().map(|(w, &i)| (i, *w)).collect();
        for &id in ids {
            if id == GLUE {
                glued = true;
                continue;
            }
            let kind = self.kind(id);
            if kind == Kind::WordLike && prev == Some(Kind::WordLike) && !glued {
                bytes.push(b' ');
            }
            glued = false;
            match kind {
                Kind::Byte => bytes.push((id - self.byte_base()) as u8),
                Kind::WordLike => {
                    let piece = if let Some(i) = self.vp_index(id) {
                        format!("<VP_{i}>")
                    } else if id < CONTROL_NAMES.len() {
                        CONTROL_NAMES[id].to_string()
                    } else {
                        names.get(&id).map_or_else(|| format!("<unk:{id}>"), |w| w.to_string())
                    };
                    bytes.extend(piece.as_bytes());
                }
            }
            prev = Some(kind);
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}
