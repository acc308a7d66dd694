use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{AlopeError, Result};

pub const BOS: u32 = 256;
pub const PAD: u32 = 257;
const FIRST_MERGE: u32 = 258;
pub const MAX_VOCAB: usize = 4096;

/// Byte-level BPE. Ids 0..=255 are raw bytes, so any UTF-8 input encodes.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    #[serde(skip)]
    ranks: HashMap<(u32, u32), u32>,
}

impl Tokenizer {
    /// Bytes plus specials, no merges.
    pub fn bytes_only() -> Self {
        Tokenizer::default()
    }

    pub fn from_merges(merges: Vec<(u32, u32)>) -> Result<Self> {
        for (i, &(a, b)) in merges.iter().enumerate() {
            let id = FIRST_MERGE + i as u32;
            let ok = |t: u32| t < BOS || (t >= FIRST_MERGE && t < id);
            if !ok(a) || !ok(b) {
                return Err(AlopeError::Corrupt(format!("merge {i} refers to unknown token")));
            }
        }
        if FIRST_MERGE as usize + merges.len() > MAX_VOCAB {
            return Err(AlopeError::invalid(format!("vocabulary exceeds {MAX_VOCAB}")));
        }
        let ranks = merges.iter().enumerate().map(|(i, &p)| (p, i as u32)).collect();
        Ok(Tokenizer { merges, ranks })
    }

    /// Learns merges greedily: most frequent adjacent pair first, ties to the
    /// smallest pair; stops when no pair occurs twice.
    pub fn train<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        if !(FIRST_MERGE as usize..=MAX_VOCAB).contains(&vocab_size) {
            return Err(AlopeError::invalid(format!(
                "vocab size must be in [{FIRST_MERGE}, {MAX_VOCAB}], got {vocab_size}"
            )));
        }
        let mut words: Vec<Vec<u32>> = corpus
            .iter()
            .map(|s| s.as_ref().bytes().map(u32::from).collect())
            .collect();
        let mut merges = Vec::new();
        while FIRST_MERGE as usize + merges.len() < vocab_size {
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for w in &words {
                for p in w.windows(2) {
                    *counts.entry((p[0], p[1])).or_insert(0) += 1;
                }
            }
            let best = counts
                .into_iter()
                .filter(|&(_, c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then(pb.cmp(pa)));
            let Some((pair, _)) = best else { break };
            let id = FIRST_MERGE + merges.len() as u32;
            merges.push(pair);
            for w in &mut words {
                *w = replace_pair(w, pair, id);
            }
        }
        Tokenizer::from_merges(merges)
    }

    pub fn vocab_size(&self) -> usize {
        FIRST_MERGE as usize + self.merges.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    fn rank(&self, pair: (u32, u32)) -> Option<u32> {
        if self.ranks.len() != self.merges.len() {
            // Deserialized without the index.
            return self.merges.iter().position(|&p| p == pair).map(|i| i as u32);
        }
        self.ranks.get(&pair).copied()
    }

    /// BOS followed by the merged byte sequence of `text`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.bytes().map(u32::from).collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.rank((p[0], p[1])))
                .min();
            let Some(rank) = best else { break };
            ids = replace_pair(&ids, self.merges[rank as usize], FIRST_MERGE + rank);
        }
        let mut out = Vec::with_capacity(ids.len() + 1);
        out.push(BOS);
        out.extend(ids);
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            self.expand(id, &mut bytes);
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    fn expand(&self, id: u32, out: &mut Vec<u8>) {
        if id < BOS {
            out.push(id as u8);
        } else if id >= FIRST_MERGE {
            if let Some(&(a, b)) = self.merges.get((id - FIRST_MERGE) as usize) {
                self.expand(a, out);
                self.expand(b, out);
            }
        }
    }
}

fn replace_pair(ids: &[u32], pair: (u32, u32), id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

/// Shortens `ids` to `max_len` by dropping the middle: keeps the first
/// `head_keep` tokens and fills the rest from the tail, so the final token survives.
pub fn truncate_head_tail(ids: &[u32], max_len: usize, head_keep: usize) -> Vec<u32> {
    if ids.len() <= max_len {
        return ids.to_vec();
    }
    let head = head_keep.min(max_len.saturating_sub(1));
    let tail = max_len - head;
    let mut out = ids[..head].to_vec();
    out.extend_from_slice(&ids[ids.len() - tail..]);
    out
}
