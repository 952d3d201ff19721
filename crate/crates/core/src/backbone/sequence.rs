use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::config::VisionAttention;
use super::vocab::{Vocab, ANSWER, BOS, EOS, IMG, QUESTION, SEG};
use crate::error::{Error, Result};

/// Paper-independent default cap on sequence length.
pub const DEFAULT_MAX_LEN: usize = 8192;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Vision,
    Text,
    SegSlot,
    PromptRef,
}

/// Interleaved vision/text ids with per-position roles.
///
/// `supervised[t]` marks positions whose token is a prediction target; the
/// next-token loss at row `t` is taken against `ids[t + 1]` whenever
/// `supervised[t + 1]` holds.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
    roles: Vec<Role>,
    supervised: Vec<bool>,
    vision_span: Range<usize>,
}

fn role_of(vocab: &Vocab, id: usize, in_vision: bool) -> Role {
    if in_vision {
        Role::Vision
    } else if id == SEG {
        Role::SegSlot
    } else if vocab.vp_index(id).is_some() {
        Role::PromptRef
    } else {
        Role::Text
    }
}

impl TokenSequence {
    pub fn new(vocab: &Vocab, ids: Vec<usize>, supervised: Vec<bool>, vision_span: Range<usize>) -> Result<Self> {
        if supervised.len() != ids.len() {
            return Err(Error::data("supervision flags must match ids"));
        }
        if vision_span.start > vision_span.end || vision_span.end > ids.len() {
            return Err(Error::data(format!(
                "vision span {vision_span:?} outside sequence of {}",
                ids.len()
            )));
        }
        for (t, &id) in ids.iter().enumerate() {
            if vision_span.contains(&t) != (id == IMG) {
                return Err(Error::data(format!(
                    "image placeholder at {t} does not match the vision span {vision_span:?}"
                )));
            }
        }
        let roles = ids
            .iter()
            .enumerate()
            .map(|(t, &id)| role_of(vocab, id, vision_span.contains(&t)))
            .collect();
        Ok(Self { ids, roles, supervised, vision_span })
    }

    /// Text-only sequence with no supervision.
    pub fn text(vocab: &Vocab, ids: Vec<usize>) -> Result<Self> {
        let n = ids.len();
        Self::new(vocab, ids, vec![false; n], 0..0)
    }

    /// `<bos> <img>×n_vision` followed by one `<question> q <answer> a <eos>`
    /// group per turn. Answers and their `<eos>` are supervised. When
    /// `open_question` is given the sequence ends with `<question> q <answer>`
    /// ready for generation.
    pub fn conversation(
        vocab: &Vocab,
        n_vision: usize,
        turns: &[(String, String)],
        open_question: Option<&str>,
    ) -> Result<Self> {
        let mut ids = vec![BOS];
        ids.extend(std::iter::repeat_n(IMG, n_vision));
        let mut sup = vec![false; ids.len()];
        for (q, a) in turns {
            push(&mut ids, &mut sup, &[QUESTION], false);
            push(&mut ids, &mut sup, &vocab.encode(q), false);
            push(&mut ids, &mut sup, &[ANSWER], false);
            push(&mut ids, &mut sup, &vocab.encode(a), true);
            push(&mut ids, &mut sup, &[EOS], true);
        }
        if let Some(q) = open_question {
            push(&mut ids, &mut sup, &[QUESTION], false);
            push(&mut ids, &mut sup, &vocab.encode(q), false);
            push(&mut ids, &mut sup, &[ANSWER], false);
        }
        Self::new(vocab, ids, sup, 1..1 + n_vision)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn supervised(&self) -> &[bool] {
        &self.supervised
    }

    pub fn vision_span(&self) -> Range<usize> {
        self.vision_span.clone()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, vocab: &Vocab, id: usize, supervised: bool) {
        if id == IMG {
            // a stray placeholder outside the block is treated as text
            self.roles.push(Role::Text);
        } else {
            self.roles.push(role_of(vocab, id, false));
        }
        self.ids.push(id);
        self.supervised.push(supervised);
    }

    pub fn seg_positions(&self) -> Vec<usize> {
        self.positions(Role::SegSlot)
    }

    pub fn positions(&self, role: Role) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == role)
            .map(|(t, _)| t)
            .collect()
    }

    /// Rows whose logits predict a supervised token, and those tokens.
    pub fn loss_targets(&self) -> (Vec<usize>, Vec<usize>) {
        let mut rows = Vec::new();
        let mut targets = Vec::new();
        for t in 0..self.ids.len().saturating_sub(1) {
            if self.supervised[t + 1] {
                rows.push(t);
                targets.push(self.ids[t + 1]);
            }
        }
        (rows, targets)
    }

    /// Drops tail tokens beyond `max_len`. The vision block is never cut.
    pub fn truncate(&self, max_len: usize) -> Result<Self> {
        if self.ids.len() <= max_len {
            return Ok(self.clone());
        }
        if self.vision_span.end > max_len {
            return Err(Error::config(format!(
                "vision block ends at {} which exceeds max length {max_len}",
                self.vision_span.end
            )));
        }
        Ok(Self {
            ids: self.ids[..max_len].to_vec(),
            roles: self.roles[..max_len].to_vec(),
            supervised: self.supervised[..max_len].to_vec(),
            vision_span: self.vision_span.clone(),
        })
    }
}

fn push(ids: &mut Vec<usize>, sup: &mut Vec<bool>, new: &[usize], s: bool) {
    ids.extend_from_slice(new);
    sup.extend(std::iter::repeat_n(s, new.len()));
}

/// `mask[i * len + j]` is true iff position `i` may attend to `j`.
pub fn build_attention_mask(seq: &TokenSequence, regime: VisionAttention) -> Vec<bool> {
    let n = seq.len();
    let span = seq.vision_span();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            let both_vision = span.contains(&i) && span.contains(&j);
            mask[i * n + j] = j <= i || (regime == VisionAttention::Full && both_vision);
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversation_layout() {
        let v = Vocab::new(8);
        let s = TokenSequence::conversation(&v, 4, &[("hi".into(), "cat-1 [SEG]".into())], None).unwrap();
        assert_eq!(s.vision_span(), 1..5);
        assert_eq!(s.ids()[0], BOS);
        assert_eq!(*s.ids().last().unwrap(), EOS);
        assert_eq!(s.seg_positions().len(), 1);
        let (rows, targets) = s.loss_targets();
        assert_eq!(targets.last(), Some(&EOS));
        assert_eq!(rows.len(), v.encode("cat-1 [SEG]").len() + 1);
    }

    #[test]
    fn truncation_keeps_vision() {
        let v = Vocab::new(8);
        let s = TokenSequence::conversation(&v, 4, &[("a b c".into(), "d e f".into())], None).unwrap();
        assert_eq!(s.truncate(100).unwrap(), s);
        let t = s.truncate(7).unwrap();
        assert_eq!(t.len(), 7);
        assert!(s.truncate(3).is_err());
    }
}
