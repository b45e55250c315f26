//! Beam search, trie-constrained beam search and all-candidate scoring.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{decoder_last_logits, encoder_forward, ModelParams, Patch};
use crate::tensor::{log_softmax, Mat};
use crate::tokenization::{UnifiedVocab, BOS, EOS};
use crate::{Error, Result};

/// Next-token logits given the tokens generated so far (BOS excluded).
pub trait SeqScorer {
    fn vocab_size(&self) -> usize;
    fn next_logits(&self, generated: &[u32]) -> Result<Vec<f64>>;
}

/// Scores continuations with a model and a fixed encoded source.
pub struct ModelScorer<'p> {
    params: &'p ModelParams,
    encoder_states: Mat,
}

impl<'p> ModelScorer<'p> {
    pub fn new(params: &'p ModelParams, text_ids: &[u32], patches: &[Patch]) -> Result<Self> {
        let encoder_states = encoder_forward(params, text_ids, patches)?;
        Ok(Self { params, encoder_states })
    }
}

impl SeqScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.params.config.vocab_total
    }

    fn next_logits(&self, generated: &[u32]) -> Result<Vec<f64>> {
        let mut prefix = Vec::with_capacity(generated.len() + 1);
        prefix.push(BOS);
        prefix.extend_from_slice(generated);
        decoder_last_logits(self.params, &self.encoder_states, &prefix)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub length_penalty: f64,
    /// Token ids that may never be generated.
    #[serde(default)]
    pub suppress: Vec<u32>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_size: 3, max_len: 30, length_penalty: 1.0, suppress: Vec::new() }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::InvalidArgument("beam size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidArgument("max length must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::InvalidArgument("length penalty must be finite".into()));
        }
        Ok(())
    }
}

/// `log_prob / len^penalty`, where `len` counts the closing EOS when present.
pub fn normalized_score(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(penalty)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    /// Generated ids, without the closing EOS.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
    /// No hypothesis finished within the length limit.
    pub truncated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrieNode {
    pub children: BTreeMap<u32, usize>,
    /// Set when a label ends here.
    pub label: Option<String>,
}

/// Prefix tree over tokenized labels. Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelTrie {
    nodes: Vec<TrieNode>,
}

impl LabelTrie {
    pub fn from_sequences<I>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Vec<u32>)>,
    {
        let mut trie = LabelTrie { nodes: vec![TrieNode::default()] };
        for (label, ids) in labels {
            if ids.is_empty() {
                return Err(Error::InvalidArgument(format!("label {label:?} has no tokens")));
            }
            if ids.contains(&EOS) {
                return Err(Error::InvalidArgument(format!("label {label:?} contains eos")));
            }
            let mut node = 0;
            for &t in &ids {
                node = match trie.nodes[node].children.get(&t) {
                    Some(&next) => next,
                    None => {
                        trie.nodes.push(TrieNode::default());
                        let next = trie.nodes.len() - 1;
                        trie.nodes[node].children.insert(t, next);
                        next
                    }
                };
            }
            match &trie.nodes[node].label {
                Some(existing) if *existing != label => {
                    return Err(Error::InvalidArgument(format!(
                        "labels {existing:?} and {label:?} share a token sequence"
                    )))
                }
                _ => trie.nodes[node].label = Some(label),
            }
        }
        if trie.nodes.len() == 1 {
            return Err(Error::InvalidArgument("label set is empty".into()));
        }
        Ok(trie)
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn node(&self, id: usize) -> &TrieNode {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Tokens allowed after reaching `node`: its children, plus EOS when a label ends there.
    pub fn allowed(&self, node: usize) -> Vec<u32> {
        let n = &self.nodes[node];
        let mut out: Vec<u32> = n.children.keys().copied().collect();
        if n.label.is_some() {
            out.push(EOS);
            out.sort_unstable();
        }
        out
    }

    /// Node reached by `tokens` from the root.
    pub fn walk(&self, tokens: &[u32]) -> Option<usize> {
        tokens.iter().try_fold(0, |node, t| self.nodes[node].children.get(t).copied())
    }

    /// All labels with their token sequences, in token order.
    pub fn labels(&self) -> Vec<(String, Vec<u32>)> {
        let mut out = Vec::new();
        let mut stack = vec![(0usize, Vec::new())];
        while let Some((node, path)) = stack.pop() {
            let n = &self.nodes[node];
            if let Some(l) = &n.label {
                out.push((l.clone(), path.clone()));
            }
            for (&t, &child) in n.children.iter().rev() {
                let mut p = path.clone();
                p.push(t);
                stack.push((child, p));
            }
        }
        out
    }

    pub fn depth(&self) -> usize {
        self.labels().iter().map(|(_, ids)| ids.len()).max().unwrap_or(0)
    }
}

/// Tokenizes each label and inserts it; repeated labels collapse.
pub fn build_trie(labels: &[String], vocab: &UnifiedVocab) -> Result<LabelTrie> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("label set is empty".into()));
    }
    let mut seqs = Vec::with_capacity(labels.len());
    for l in labels {
        if l.is_empty() {
            return Err(Error::InvalidArgument("empty label".into()));
        }
        seqs.push((l.clone(), vocab.encode_text(l)));
    }
    LabelTrie::from_sequences(seqs)
}

struct Hyp {
    tokens: Vec<u32>,
    log_prob: f64,
    node: usize,
}

struct Candidate {
    parent: usize,
    token: u32,
    log_prob: f64,
}

fn by_prob_then_ids(a_lp: f64, a: &[u32], b_lp: f64, b: &[u32]) -> Ordering {
    b_lp.total_cmp(&a_lp).then_with(|| a.cmp(b))
}

fn better(a: &Decoded, b: &Decoded) -> bool {
    by_prob_then_ids(a.score, &a.tokens, b.score, &b.tokens) == Ordering::Less
}

fn masked_log_probs(logits: &[f64], allowed: Option<&[u32]>, suppress: &[u32]) -> Vec<f64> {
    let mut row = match allowed {
        Some(ids) => {
            let mut r = vec![f64::NEG_INFINITY; logits.len()];
            for &i in ids {
                r[i as usize] = logits[i as usize];
            }
            r
        }
        None => logits.to_vec(),
    };
    for &s in suppress {
        if let Some(v) = row.get_mut(s as usize) {
            *v = f64::NEG_INFINITY;
        }
    }
    log_softmax(&row)
}

fn search(scorer: &dyn SeqScorer, config: &DecodeConfig, trie: Option<&LabelTrie>, max_len: usize) -> Result<Decoded> {
    config.validate()?;
    let vocab = scorer.vocab_size();
    let mut active = vec![Hyp { tokens: Vec::new(), log_prob: 0.0, node: 0 }];
    let mut finished: Vec<Decoded> = Vec::new();

    for _ in 0..max_len {
        let mut cands: Vec<Candidate> = Vec::new();
        for (hi, h) in active.iter().enumerate() {
            let logits = scorer.next_logits(&h.tokens)?;
            if logits.len() != vocab {
                return Err(Error::Shape(format!("scorer returned {} logits for vocab {vocab}", logits.len())));
            }
            let allowed = trie.map(|t| t.allowed(h.node));
            if let Some(ids) = &allowed {
                if let Some(&bad) = ids.iter().find(|&&i| i as usize >= vocab) {
                    return Err(Error::InvalidArgument(format!("label token {bad} outside vocab of {vocab}")));
                }
            }
            let lp = masked_log_probs(&logits, allowed.as_deref(), &config.suppress);
            // Per-beam top-k suffices for the global top-k.
            let mut ids: Vec<u32> = (0..vocab as u32).filter(|&t| lp[t as usize] > f64::NEG_INFINITY).collect();
            ids.sort_by(|&a, &b| lp[b as usize].total_cmp(&lp[a as usize]).then(a.cmp(&b)));
            ids.truncate(config.beam_size);
            cands.extend(ids.into_iter().map(|t| Candidate { parent: hi, token: t, log_prob: h.log_prob + lp[t as usize] }));
        }
        if cands.is_empty() {
            return Err(Error::InvalidArgument("every continuation is masked".into()));
        }
        let seq = |c: &Candidate| {
            let mut s = active[c.parent].tokens.clone();
            s.push(c.token);
            s
        };
        let mut keyed: Vec<(Vec<u32>, &Candidate)> = cands.iter().map(|c| (seq(c), c)).collect();
        keyed.sort_by(|(sa, a), (sb, b)| by_prob_then_ids(a.log_prob, sa, b.log_prob, sb));
        keyed.truncate(config.beam_size);

        let mut next = Vec::new();
        for (tokens, c) in keyed {
            if c.token == EOS {
                let mut t = tokens;
                let len = t.len();
                t.pop();
                finished.push(Decoded {
                    tokens: t,
                    log_prob: c.log_prob,
                    score: normalized_score(c.log_prob, len, config.length_penalty),
                    truncated: false,
                });
            } else {
                let node = match trie {
                    Some(tr) => tr.node(active[c.parent].node).children[&c.token],
                    None => 0,
                };
                next.push(Hyp { tokens, log_prob: c.log_prob, node });
            }
        }
        active = next;
        if active.is_empty() || finished.len() >= config.beam_size {
            break;
        }
    }

    if let Some(best) = finished.into_iter().reduce(|a, b| if better(&b, &a) { b } else { a }) {
        return Ok(best);
    }
    active
        .into_iter()
        .map(|h| {
            let score = normalized_score(h.log_prob, h.tokens.len(), config.length_penalty);
            Decoded { tokens: h.tokens, log_prob: h.log_prob, score, truncated: true }
        })
        .reduce(|a, b| if better(&b, &a) { b } else { a })
        .ok_or_else(|| Error::InvalidArgument("beam search produced no hypothesis".into()))
}

/// Length-normalized beam search over the full vocabulary. Ties go to the
/// lexicographically smaller id sequence.
pub fn beam_search(scorer: &dyn SeqScorer, config: &DecodeConfig) -> Result<Decoded> {
    search(scorer, config, None, config.max_len)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelDecoded {
    pub label: String,
    pub decoded: Decoded,
}

/// Beam search where only trie continuations keep their logits before the
/// log-softmax. The trie bounds the length, so `max_len` is raised to fit the
/// longest label and the result is always a label.
pub fn trie_beam_search(scorer: &dyn SeqScorer, trie: &LabelTrie, config: &DecodeConfig) -> Result<LabelDecoded> {
    let max_len = config.max_len.max(trie.depth() + 1);
    let decoded = search(scorer, config, Some(trie), max_len)?;
    assert!(!decoded.truncated, "constrained search always reaches a label");
    let node = trie.walk(&decoded.tokens).expect("constrained output follows the trie");
    let label = trie.node(node).label.clone().expect("constrained output ends on a label");
    Ok(LabelDecoded { label, decoded })
}

/// How per-step distributions are normalized when force-decoding candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CandidateNorm {
    /// Softmax over the whole vocabulary.
    Full,
    /// Softmax over the continuations the candidate set allows, as the trie search does.
    Constrained,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateScores {
    pub best: String,
    pub best_score: f64,
    /// Per candidate, in input order after deduplication.
    pub scores: Vec<(String, f64)>,
}

/// Sum of log-probabilities of `tokens` followed by EOS.
pub fn forced_log_prob(scorer: &dyn SeqScorer, tokens: &[u32], trie: Option<&LabelTrie>, suppress: &[u32]) -> Result<f64> {
    let mut total = 0.0;
    let mut node = 0;
    for i in 0..=tokens.len() {
        let next = tokens.get(i).copied().unwrap_or(EOS);
        let logits = scorer.next_logits(&tokens[..i])?;
        if next as usize >= logits.len() {
            return Err(Error::InvalidArgument(format!("token {next} outside vocab of {}", logits.len())));
        }
        let allowed = trie.map(|t| t.allowed(node));
        let lp = masked_log_probs(&logits, allowed.as_deref(), suppress);
        total += lp[next as usize];
        if let (Some(t), true) = (trie, i < tokens.len()) {
            node = t.node(node).children[&next];
        }
    }
    Ok(total)
}

/// Scores every candidate by forced decoding and returns the argmax; ties
/// go to the lexicographically smaller string.
pub fn all_candidate_search_ids(
    scorer: &dyn SeqScorer,
    candidates: &[(String, Vec<u32>)],
    length_penalty: f64,
    norm: CandidateNorm,
) -> Result<CandidateScores> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("candidate set is empty".into()));
    }
    let trie = LabelTrie::from_sequences(candidates.iter().cloned())?;
    let constraint = match norm {
        CandidateNorm::Full => None,
        CandidateNorm::Constrained => Some(&trie),
    };
    let mut scores: Vec<(String, f64)> = Vec::new();
    for (label, ids) in candidates {
        if scores.iter().any(|(l, _)| l == label) {
            continue;
        }
        let lp = forced_log_prob(scorer, ids, constraint, &[])?;
        scores.push((label.clone(), normalized_score(lp, ids.len() + 1, length_penalty)));
    }
    let (best, best_score) = scores
        .iter()
        .cloned()
        .reduce(|a, b| match b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)) {
            Ordering::Greater => b,
            _ => a,
        })
        .expect("nonempty");
    Ok(CandidateScores { best, best_score, scores })
}

pub fn all_candidate_search(
    scorer: &dyn SeqScorer,
    candidates: &[String],
    vocab: &UnifiedVocab,
    length_penalty: f64,
    norm: CandidateNorm,
) -> Result<CandidateScores> {
    let mut seqs = Vec::with_capacity(candidates.len());
    for c in candidates {
        let ids = vocab.encode_text(c);
        if ids.is_empty() {
            return Err(Error::InvalidArgument(format!("candidate {c:?} does not tokenize")));
        }
        seqs.push((c.clone(), ids));
    }
    all_candidate_search_ids(scorer, &seqs, length_penalty, norm)
}
