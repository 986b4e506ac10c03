//! Character n-gram language model with add-k smoothing and begin/end
//! markers, for shallow-fusion decoding.

use std::collections::HashMap;

use crate::asr::Vocabulary;
use crate::errors::{Error, Result};

const ADD_K: f64 = 0.1;

/// ids 0..n_chars-1 are vocabulary characters; then end-of-sequence, then
/// the begin marker (context only, never predicted).
#[derive(Clone, Debug)]
pub struct CharLm {
    order: usize,
    n_chars: usize,
    /// context -> dense successor counts over n_chars + 1 (EOS) classes
    counts: HashMap<Vec<u16>, Vec<u32>>,
    chars: Vec<char>,
}

impl CharLm {
    pub fn order(&self) -> usize {
        self.order
    }

    fn eos(&self) -> u16 {
        self.n_chars as u16
    }

    fn bos(&self) -> u16 {
        self.n_chars as u16 + 1
    }

    fn char_id(&self, c: char) -> Result<u16> {
        self.chars
            .iter()
            .position(|&x| x == c)
            .map(|i| i as u16)
            .ok_or_else(|| Error::InvalidConfig(format!("symbol {c:?} not in LM alphabet")))
    }

    /// Smoothed log probability of `next` (a char id or EOS) given the last
    /// `order - 1` symbols.
    fn logp_next_ids(&self, context: &[u16], next: u16) -> f64 {
        let v = self.n_chars + 1; // predictable classes: chars + EOS
        let ctx = self.trim_context(context);
        let (count_next, count_ctx) = match self.counts.get(&ctx) {
            Some(row) => (row[next as usize] as f64, row.iter().sum::<u32>() as f64),
            None => (0.0, 0.0),
        };
        ((count_next + ADD_K) / (count_ctx + ADD_K * v as f64)).ln()
    }

    fn trim_context(&self, context: &[u16]) -> Vec<u16> {
        let need = self.order - 1;
        let mut ctx = Vec::with_capacity(need);
        for _ in context.len()..need {
            ctx.push(self.bos());
        }
        let start = context.len().saturating_sub(need);
        ctx.extend_from_slice(&context[start..]);
        ctx
    }

    /// Incremental score used during beam search (no end marker).
    pub fn logp_next(&self, context: &[char], next: char) -> Result<f64> {
        let ctx: Vec<u16> = context
            .iter()
            .map(|&c| self.char_id(c))
            .collect::<Result<_>>()?;
        Ok(self.logp_next_ids(&ctx, self.char_id(next)?))
    }

    /// Full sequence log probability: chain rule over every character plus
    /// the end marker.
    pub fn logp_sequence(&self, text: &str) -> Result<f64> {
        let ids: Vec<u16> = text.chars().map(|c| self.char_id(c)).collect::<Result<_>>()?;
        let mut total = 0.0;
        for (i, &id) in ids.iter().enumerate() {
            total += self.logp_next_ids(&ids[..i], id);
        }
        total += self.logp_next_ids(&ids, self.eos());
        Ok(total)
    }
}

/// Count n-grams of the given order over the transcripts; the vocabulary
/// fixes the smoothed alphabet so unseen symbols still receive mass.
pub fn train_char_ngram(
    transcripts: &[String],
    order: usize,
    vocab: &Vocabulary,
) -> Result<CharLm> {
    if order < 1 {
        return Err(Error::InvalidConfig("n-gram order must be at least 1".into()));
    }
    let chars: Vec<char> = (1..vocab.size())
        .map(|id| vocab.char_of(id).expect("non-blank ids decode"))
        .collect();
    let mut lm = CharLm {
        order,
        n_chars: chars.len(),
        counts: HashMap::new(),
        chars,
    };
    for text in transcripts {
        let ids: Vec<u16> = text
            .chars()
            .map(|c| lm.char_id(c))
            .collect::<Result<_>>()?;
        for i in 0..=ids.len() {
            let next = if i < ids.len() { ids[i] } else { lm.eos() };
            let ctx = lm.trim_context(&ids[..i]);
            let row = lm
                .counts
                .entry(ctx)
                .or_insert_with(|| vec![0u32; lm.n_chars + 1]);
            row[next as usize] += 1;
        }
    }
    Ok(lm)
}
