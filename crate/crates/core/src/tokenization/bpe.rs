//! Byte-level BPE: training and greedy merge application.

use std::collections::HashMap;

use crate::error::{Error, Result};

use super::{BYTE_OFFSET, SPECIAL_COUNT};

/// Size of the base alphabet: the specials plus one token per byte value.
pub const ALPHABET_SIZE: usize = SPECIAL_COUNT + 256;

/// Splits text into pre-tokenization chunks. A chunk boundary is placed
/// before every whitespace run that follows non-whitespace, so leading
/// spaces stay attached to the following word (" cat").
pub(crate) fn chunks(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, ch) in text.char_indices() {
        let ws = ch.is_whitespace();
        if ws && !prev_ws && i > start {
            out.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        out.push(&text[start..]);
    }
    out
}

fn byte_symbols(chunk: &str) -> Vec<u32> {
    chunk.bytes().map(|b| b as u32 + BYTE_OFFSET).collect()
}

/// Learns merges until the text range reaches `target_text_size` ids or no
/// adjacent pair remains. Ties in pair frequency go to the smaller pair.
pub fn train_bpe(corpus: &[String], target_text_size: usize) -> Result<Vec<(u32, u32)>> {
    if target_text_size < ALPHABET_SIZE {
        return Err(Error::InvalidArgument(format!(
            "target text size {target_text_size} is below the base alphabet size {ALPHABET_SIZE}"
        )));
    }
    let wanted = target_text_size - ALPHABET_SIZE;
    if wanted == 0 {
        return Ok(Vec::new());
    }

    let mut word_counts: HashMap<&str, usize> = HashMap::new();
    for text in corpus {
        for c in chunks(text) {
            *word_counts.entry(c).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::InsufficientStatistics(
            "corpus has no text to learn merges from".into(),
        ));
    }
    let mut sorted: Vec<(&str, usize)> = word_counts.into_iter().collect();
    sorted.sort_unstable();
    let mut words: Vec<(Vec<u32>, usize)> =
        sorted.into_iter().map(|(w, n)| (byte_symbols(w), n)).collect();

    let mut merges = Vec::with_capacity(wanted);
    while merges.len() < wanted {
        let mut pair_counts: HashMap<(u32, u32), usize> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += n;
            }
        }
        let best = pair_counts
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((pair, _)) = best else { break };
        let new_id = (ALPHABET_SIZE + merges.len()) as u32;
        for (syms, _) in words.iter_mut() {
            merge_in_place(syms, pair, new_id);
        }
        merges.push(pair);
    }
    Ok(merges)
}

pub(crate) fn merge_in_place(syms: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    if syms.len() < 2 {
        return;
    }
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(new_id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}

/// Applies merges in rank order to one chunk.
pub(crate) fn encode_chunk(chunk: &str, ranks: &HashMap<(u32, u32), u32>) -> Vec<u32> {
    let mut syms = byte_symbols(chunk);
    loop {
        let best = syms
            .windows(2)
            .filter_map(|w| ranks.get(&(w[0], w[1])).map(|&r| (r, (w[0], w[1]))))
            .min();
        match best {
            Some((rank, pair)) => merge_in_place(&mut syms, pair, ALPHABET_SIZE as u32 + rank),
            None => return syms,
        }
    }
}
