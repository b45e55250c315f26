use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uniseq_core::decoding::*;
use uniseq_core::model::{ModelConfig, ModelParams};
use uniseq_core::tensor::log_softmax;
use uniseq_core::tokenization::{UnifiedVocab, EOS};
use uniseq_core::Result;

/// Deterministic pseudo-random logits keyed by the prefix. The first `vocab`
/// entries do not depend on `extra`.
struct Stub {
    vocab: usize,
    extra: usize,
    seed: u64,
}

impl Stub {
    fn new(vocab: usize, seed: u64) -> Self {
        Self { vocab, extra: 0, seed }
    }
}

impl SeqScorer for Stub {
    fn vocab_size(&self) -> usize {
        self.vocab + self.extra
    }

    fn next_logits(&self, generated: &[u32]) -> Result<Vec<f64>> {
        let mut h = DefaultHasher::new();
        (self.seed, generated).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        let mut out: Vec<f64> = (0..self.vocab).map(|_| rng.gen_range(-3.0..3.0)).collect();
        out.extend((0..self.extra).map(|_| rng.gen_range(5.0..10.0)));
        Ok(out)
    }
}

/// Fixed logits per step, looked up by prefix.
struct Table(Vec<(Vec<u32>, Vec<f64>)>, usize);

impl SeqScorer for Table {
    fn vocab_size(&self) -> usize {
        self.1
    }

    fn next_logits(&self, generated: &[u32]) -> Result<Vec<f64>> {
        Ok(self.0.iter().find(|(p, _)| p == generated).map(|(_, l)| l.clone()).unwrap_or_else(|| vec![0.0; self.1]))
    }
}

fn seq_lp(s: &dyn SeqScorer, tokens: &[u32]) -> f64 {
    (0..tokens.len()).map(|i| log_softmax(&s.next_logits(&tokens[..i]).unwrap())[tokens[i] as usize]).sum()
}

fn cfg(beam: usize, max_len: usize, penalty: f64) -> DecodeConfig {
    DecodeConfig { beam_size: beam, max_len, length_penalty: penalty, suppress: Vec::new() }
}

fn vocab() -> UnifiedVocab {
    UnifiedVocab::new(300, 10, 10, Vec::new()).unwrap()
}

#[test]
fn yes_no_trie_has_two_root_children() {
    let t = build_trie(&["yes".into(), "no".into()], &vocab()).unwrap();
    assert_eq!(t.node(t.root()).children.len(), 2);
}

#[test]
fn shared_prefix_branches_once() {
    let v = vocab();
    let (a, b) = (v.encode_text("A B"), v.encode_text("A C"));
    let common = a.iter().zip(&b).take_while(|(x, y)| x == y).count();
    assert!(common >= 1);
    let t = build_trie(&["A B".into(), "A C".into()], &v).unwrap();
    assert_eq!(t.node(t.root()).children.len(), 1);
    let fork = t.walk(&a[..common]).unwrap();
    assert_eq!(t.node(fork).children.len(), 2);
    // One node per distinct prefix, plus the root.
    assert_eq!(t.node_count(), 1 + common + (a.len() - common) + (b.len() - common));
}

#[test]
fn duplicate_labels_collapse() {
    let v = vocab();
    let once = build_trie(&["cat".into(), "dog".into()], &v).unwrap();
    let twice = build_trie(&["cat".into(), "dog".into(), "cat".into()], &v).unwrap();
    assert_eq!(once, twice);
}

#[test]
fn empty_labels_are_rejected() {
    assert!(build_trie(&["a".into(), "".into()], &vocab()).is_err());
    assert!(build_trie(&[], &vocab()).is_err());
}

#[test]
fn trie_paths_spell_labels() {
    let v = vocab();
    let labels: Vec<String> = ["red circle", "red square", "blue", "blue triangle"].iter().map(|s| s.to_string()).collect();
    let t = build_trie(&labels, &v).unwrap();
    let mut got: Vec<(String, Vec<u32>)> = t.labels();
    got.sort();
    let mut want: Vec<(String, Vec<u32>)> = labels.iter().map(|l| (l.clone(), v.encode_text(l))).collect();
    want.sort();
    assert_eq!(got, want);
}

#[test]
fn config_is_validated() {
    let s = Stub::new(5, 0);
    assert!(beam_search(&s, &cfg(0, 3, 1.0)).is_err());
    assert!(beam_search(&s, &cfg(2, 0, 1.0)).is_err());
    assert_eq!(DecodeConfig::default().beam_size, 3);
}

fn greedy(s: &dyn SeqScorer, max_len: usize) -> (Vec<u32>, bool) {
    let mut out = Vec::new();
    for _ in 0..max_len {
        let l = s.next_logits(&out).unwrap();
        let best = (0..l.len()).fold(0, |b, i| if l[i] > l[b] { i } else { b }) as u32;
        if best == EOS {
            return (out, false);
        }
        out.push(best);
    }
    (out, true)
}

#[test]
fn beam_one_is_greedy() {
    for seed in 0..50 {
        let s = Stub::new(6, seed);
        let d = beam_search(&s, &cfg(1, 5, 1.0)).unwrap();
        let (tokens, truncated) = greedy(&s, 5);
        assert_eq!((d.tokens, d.truncated), (tokens, truncated));
    }
}

/// Every EOS-terminated sequence of at most `max_len` tokens.
fn exhaustive(s: &dyn SeqScorer, max_len: usize, penalty: f64) -> (Vec<u32>, f64) {
    let v = s.vocab_size() as u32;
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut frontier: Vec<Vec<u32>> = vec![vec![]];
    for len in 1..=max_len {
        let mut next = Vec::new();
        for p in &frontier {
            for t in 0..v {
                let mut q = p.clone();
                q.push(t);
                if t == EOS {
                    let score = seq_lp(s, &q) / (len as f64).powf(penalty);
                    let body = q[..q.len() - 1].to_vec();
                    let take = match &best {
                        None => true,
                        Some((bt, bs)) => score > *bs || (score == *bs && body < *bt),
                    };
                    if take {
                        best = Some((body, score));
                    }
                } else {
                    next.push(q);
                }
            }
        }
        frontier = next;
    }
    best.unwrap()
}

#[test]
fn wide_beam_matches_exhaustive_search() {
    for seed in 0..100 {
        for &penalty in &[0.0, 0.7, 1.0] {
            let s = Stub::new(3, seed);
            let d = beam_search(&s, &cfg(9, 2, penalty)).unwrap();
            let (tokens, score) = exhaustive(&s, 2, penalty);
            assert!(!d.truncated);
            assert_eq!(d.tokens, tokens, "seed {seed} penalty {penalty}");
            assert!((d.score - score).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_penalty_ranks_by_sum() {
    for seed in 0..20 {
        let s = Stub::new(4, seed);
        let d = beam_search(&s, &cfg(64, 3, 0.0)).unwrap();
        let mut full = d.tokens.clone();
        full.push(EOS);
        assert!((d.score - seq_lp(&s, &full)).abs() < 1e-12);
        assert_eq!(d.score, d.log_prob);
    }
}

#[test]
fn unfinished_search_reports_truncation() {
    // EOS is never the best continuation and is suppressed outright.
    let s = Stub::new(5, 1);
    let c = DecodeConfig { suppress: vec![EOS], ..cfg(2, 4, 1.0) };
    let d = beam_search(&s, &c).unwrap();
    assert!(d.truncated);
    assert_eq!(d.tokens.len(), 4);
}

#[test]
fn single_label_is_forced() {
    for seed in 0..10 {
        let s = Stub::new(20, seed);
        let t = LabelTrie::from_sequences([("A".to_string(), vec![7, 11])]).unwrap();
        let r = trie_beam_search(&s, &t, &cfg(3, 1, 1.0)).unwrap();
        assert_eq!(r.label, "A");
        assert_eq!(r.decoded.tokens, vec![7, 11]);
        // Each step has a single legal token, so its log-prob is zero.
        assert_eq!(r.decoded.log_prob, 0.0);
    }
}

#[test]
fn root_mask_keeps_only_children() {
    let t = LabelTrie::from_sequences([
        ("yes".to_string(), vec![10]),
        ("no".to_string(), vec![11]),
        ("maybe so".to_string(), vec![12, 13]),
    ])
    .unwrap();
    assert_eq!(t.allowed(t.root()), vec![10, 11, 12]);
    let after_yes = t.walk(&[10]).unwrap();
    assert_eq!(t.allowed(after_yes), vec![EOS]);
    // Single-step labels: the winning log-prob renormalizes over the three children.
    let s = Stub::new(20, 4);
    let r = trie_beam_search(&s, &t, &cfg(3, 5, 0.0)).unwrap();
    let l = s.next_logits(&[]).unwrap();
    let sub = log_softmax(&[l[10], l[11], l[12]]);
    let first = r.decoded.tokens[0] as usize - 10;
    assert!(r.decoded.log_prob <= sub[first] + 1e-12);
}

#[test]
fn constrained_search_ignores_better_illegal_token() {
    // Unconstrained greedy picks token 5; labels are [3] and [4, 6].
    let v = 8;
    let mut root = vec![0.0; v];
    root[5] = 9.0;
    root[3] = 1.0;
    root[4] = 2.0;
    let mut after3 = vec![0.0; v];
    after3[EOS as usize] = 0.5;
    after3[1] = 3.0;
    let mut after4 = vec![0.0; v];
    after4[6] = 1.0;
    let mut after46 = vec![0.0; v];
    after46[EOS as usize] = 2.0;
    let s = Table(vec![(vec![], root), (vec![3], after3), (vec![4], after4), (vec![4, 6], after46)], v);
    assert_eq!(greedy(&s, 1).0, vec![5]);
    let t = LabelTrie::from_sequences([("p".to_string(), vec![3]), ("q".to_string(), vec![4, 6])]).unwrap();

    // By hand, under the constrained normalization: root offers {3, 4}; each
    // later step has a single legal token.
    let lp_p = 1.0 - (1f64.exp() + 2f64.exp()).ln();
    let lp_q = 2.0 - (1f64.exp() + 2f64.exp()).ln();
    for &penalty in &[0.0, 1.0] {
        let (sp, sq) = (lp_p / 2f64.powf(penalty), lp_q / 3f64.powf(penalty));
        let want = if sp > sq { "p" } else { "q" };
        let r = trie_beam_search(&s, &t, &cfg(2, 4, penalty)).unwrap();
        assert_eq!(r.label, want);
        assert!((r.decoded.score - sp.max(sq)).abs() < 1e-12);
        let a = all_candidate_search_ids(&s, &t.labels(), penalty, CandidateNorm::Constrained).unwrap();
        assert_eq!(a.best, want);
    }
}

#[test]
fn one_candidate_scores_its_own_probability() {
    let s = Stub::new(12, 3);
    let r = all_candidate_search_ids(&s, &[("x".into(), vec![5, 6])], 1.0, CandidateNorm::Full).unwrap();
    assert_eq!(r.best, "x");
    assert!((r.best_score - seq_lp(&s, &[5, 6, EOS]) / 3.0).abs() < 1e-12);
}

#[test]
fn larger_probability_wins() {
    let v = 6;
    let mut root = vec![f64::NEG_INFINITY; v];
    root[4] = 0.3f64.ln();
    root[5] = 0.7f64.ln();
    let mut done = vec![f64::NEG_INFINITY; v];
    done[EOS as usize] = 0.0;
    let s = Table(vec![(vec![], root), (vec![4], done.clone()), (vec![5], done)], v);
    let r = all_candidate_search_ids(&s, &[("a".into(), vec![4]), ("b".into(), vec![5])], 1.0, CandidateNorm::Full).unwrap();
    assert_eq!(r.best, "b");
    assert!((r.scores[0].1 - 0.3f64.ln() / 2.0).abs() < 1e-12);
    assert!((r.scores[1].1 - 0.7f64.ln() / 2.0).abs() < 1e-12);
}

#[test]
fn ties_break_lexicographically() {
    let s = Table(vec![], 6);
    let r = all_candidate_search_ids(&s, &[("zeta".into(), vec![4]), ("alpha".into(), vec![5])], 1.0, CandidateNorm::Full).unwrap();
    assert_eq!(r.best, "alpha");
    let t = LabelTrie::from_sequences([("zeta".to_string(), vec![4]), ("alpha".to_string(), vec![5])]).unwrap();
    assert_eq!(trie_beam_search(&s, &t, &cfg(2, 3, 1.0)).unwrap().decoded.tokens, vec![4]);
}

#[test]
fn candidate_errors() {
    let s = Stub::new(300, 0);
    assert!(all_candidate_search(&s, &[], &vocab(), 1.0, CandidateNorm::Full).is_err());
    assert!(all_candidate_search(&s, &["ok".into(), "".into()], &vocab(), 1.0, CandidateNorm::Full).is_err());
    assert!(all_candidate_search(&s, &["ok".into()], &vocab(), 1.0, CandidateNorm::Full).is_ok());
}

#[test]
fn model_scorer_decodes_deterministically() {
    let p = ModelParams::init(&ModelConfig::toy(8, 16, 2, 1, 300), 5).unwrap();
    let s = ModelScorer::new(&p, &[10, 11, 12], &[]).unwrap();
    let c = DecodeConfig { suppress: vec![0, 1, 3], ..cfg(2, 4, 1.0) };
    let a = beam_search(&s, &c).unwrap();
    let b = beam_search(&s, &c).unwrap();
    assert_eq!(a, b);
    let t = build_trie(&["yes".into(), "no".into(), "maybe".into()], &vocab()).unwrap();
    let r = trie_beam_search(&s, &t, &c).unwrap();
    assert!(["yes", "no", "maybe"].contains(&r.label.as_str()));
}

fn random_labels(rng: &mut ChaCha8Rng, vocab: usize, n: usize, max_len: usize) -> Vec<(String, Vec<u32>)> {
    let mut out: Vec<(String, Vec<u32>)> = Vec::new();
    while out.len() < n {
        let len = rng.gen_range(1..=max_len);
        let ids: Vec<u32> = (0..len).map(|_| loop {
            let t = rng.gen_range(0..vocab as u32);
            if t != EOS {
                break t;
            }
        }).collect();
        if !out.iter().any(|(_, s)| *s == ids) {
            out.push((format!("{ids:?}"), ids));
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn constrained_output_is_a_label(seed in any::<u64>(), n in 1usize..20, vocab in 4usize..30, beam in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(&mut rng, vocab, n.min(vocab - 1), 5);
        let t = LabelTrie::from_sequences(labels.clone()).unwrap();
        let r = trie_beam_search(&Stub::new(vocab, seed), &t, &cfg(beam, 2, 0.7)).unwrap();
        prop_assert!(labels.iter().any(|(l, ids)| *l == r.label && *ids == r.decoded.tokens));
    }

    #[test]
    fn trie_search_equals_all_candidates_equals_brute_force(seed in any::<u64>(), n in 1usize..50, vocab in 4usize..30, penalty in prop::sample::select(vec![0.0, 0.7, 1.0])) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let labels = random_labels(&mut rng, vocab, n, 8);
        let s = Stub::new(vocab, seed);
        let t = LabelTrie::from_sequences(labels.clone()).unwrap();
        let r = trie_beam_search(&s, &t, &cfg(labels.len(), 1, penalty)).unwrap();
        let a = all_candidate_search_ids(&s, &labels, penalty, CandidateNorm::Constrained).unwrap();
        let brute = labels
            .iter()
            .map(|(l, ids)| (l.clone(), forced_log_prob(&s, ids, Some(&t), &[]).unwrap() / ((ids.len() + 1) as f64).powf(penalty)))
            .fold(None::<(String, f64)>, |b, c| match b {
                Some(b) if b.1 > c.1 || (b.1 == c.1 && b.0 < c.0) => Some(b),
                _ => Some(c),
            })
            .unwrap();
        prop_assert_eq!(&r.label, &brute.0);
        prop_assert_eq!(&a.best, &brute.0);
        prop_assert!((r.decoded.score - brute.1).abs() < 1e-9);
    }

    #[test]
    fn irrelevant_tokens_do_not_change_constrained_output(seed in any::<u64>(), n in 1usize..15, extra in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = random_labels(&mut rng, 12, n, 4);
        let t = LabelTrie::from_sequences(labels).unwrap();
        let base = Stub::new(12, seed);
        let wide = Stub { extra, ..Stub::new(12, seed) };
        let a = trie_beam_search(&base, &t, &cfg(3, 4, 1.0)).unwrap();
        let b = trie_beam_search(&wide, &t, &cfg(3, 4, 1.0)).unwrap();
        prop_assert_eq!(a.label, b.label);
        prop_assert!((a.decoded.score - b.decoded.score).abs() < 1e-9);
    }
}
