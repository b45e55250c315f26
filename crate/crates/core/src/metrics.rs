//! Evaluation metrics: accuracy, F1 variants, ROUGE-L, METEOR and CIDEr.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lowercase, trim and collapse runs of whitespace.
pub fn normalize_answer(s: &str) -> String {
    s.split_whitespace().map(str::to_lowercase).collect::<Vec<_>>().join(" ")
}

/// Word tokens for the text metrics: lowercase, every punctuation character
/// becomes its own token, whitespace separates the rest.
pub fn tokenize(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in s.chars() {
        if ch.is_whitespace() || !ch.is_alphanumeric() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        } else {
            word.extend(ch.to_lowercase());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

pub fn exact_match_accuracy(predictions: &[String], references: &[String]) -> Result<f64> {
    if predictions.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} references",
            predictions.len(),
            references.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions to score".into()));
    }
    let hits = predictions.iter().zip(references).filter(|(p, r)| normalize_answer(p) == normalize_answer(r)).count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    /// Instances of this class among the truths.
    pub n: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Report {
    pub n: usize,
    pub classes: Vec<ClassScore>,
    pub weighted: f64,
    pub macro_avg: f64,
}

/// One-vs-rest F1 for every class seen in either list, labels normalized
/// like accuracy. A class with no true positives scores 0.
pub fn f1_report(truths: &[String], predictions: &[String]) -> Result<F1Report> {
    if truths.len() != predictions.len() {
        return Err(Error::InvalidArgument(format!("{} truths for {} predictions", truths.len(), predictions.len())));
    }
    if truths.is_empty() {
        return Err(Error::InvalidArgument("no labels to score".into()));
    }
    let t: Vec<String> = truths.iter().map(|s| normalize_answer(s)).collect();
    let p: Vec<String> = predictions.iter().map(|s| normalize_answer(s)).collect();
    let universe: BTreeSet<&String> = t.iter().chain(&p).collect();
    let n = t.len();
    let mut classes = Vec::with_capacity(universe.len());
    for label in universe {
        let tp = t.iter().zip(&p).filter(|(a, b)| *a == label && *b == label).count();
        let n_true = t.iter().filter(|a| *a == label).count();
        let n_pred = p.iter().filter(|b| *b == label).count();
        let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
        let recall = if n_true == 0 { 0.0 } else { tp as f64 / n_true as f64 };
        let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        classes.push(ClassScore { label: label.clone(), n: n_true, precision, recall, f1 });
    }
    let weighted = classes.iter().map(|c| c.n as f64 / n as f64 * c.f1).sum();
    let macro_avg = classes.iter().map(|c| c.f1).sum::<f64>() / classes.len() as f64;
    Ok(F1Report { n, classes, weighted, macro_avg })
}

pub fn f1_weighted(truths: &[String], predictions: &[String]) -> Result<f64> {
    Ok(f1_report(truths, predictions)?.weighted)
}

pub fn f1_macro(truths: &[String], predictions: &[String]) -> Result<f64> {
    Ok(f1_report(truths, predictions)?.macro_avg)
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RougeL {
    pub score: f64,
    pub lcs: usize,
    /// Candidate and reference lengths.
    pub c: usize,
    pub r: usize,
    pub r_lcs: f64,
    pub p_lcs: f64,
    pub beta: f64,
    /// Set when either side has no tokens; the score is then 0.
    pub empty: bool,
}

/// `R_lcs = LCS/c`, `P_lcs = LCS/r`, `beta = P_lcs/R_lcs`.
pub fn rouge_l_tokens(candidate: &[String], reference: &[String]) -> RougeL {
    let (c, r) = (candidate.len(), reference.len());
    let lcs = lcs_len(candidate, reference);
    let zero = RougeL { score: 0.0, lcs, c, r, r_lcs: 0.0, p_lcs: 0.0, beta: 0.0, empty: c == 0 || r == 0 };
    if c == 0 || r == 0 || lcs == 0 {
        return zero;
    }
    let r_lcs = lcs as f64 / c as f64;
    let p_lcs = lcs as f64 / r as f64;
    let beta = p_lcs / r_lcs;
    let b2 = beta * beta;
    let score = (1.0 + b2) * r_lcs * p_lcs / (r_lcs + b2 * p_lcs);
    RougeL { score, r_lcs, p_lcs, beta, ..zero }
}

pub fn rouge_l(candidate: &str, reference: &str) -> RougeL {
    rouge_l_tokens(&tokenize(candidate), &tokenize(reference))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeteorParams {
    pub alpha: f64,
    pub gamma: f64,
    pub theta: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        Self { alpha: 0.9, gamma: 0.5, theta: 3.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meteor {
    pub score: f64,
    pub m: usize,
    pub chunks: usize,
    pub c: usize,
    pub r: usize,
    pub precision: f64,
    pub recall: f64,
    pub penalty: f64,
}

/// Exact-match alignment with the most matches, then the fewest chunks.
/// Returns `(matches, chunks)`.
pub fn align(candidate: &[String], reference: &[String]) -> (usize, usize) {
    struct Search<'a> {
        c: &'a [String],
        slots: Vec<Vec<usize>>,
        memo: HashMap<(usize, usize, Vec<u64>), (usize, usize)>,
    }
    impl Search<'_> {
        // `prev` is one past the reference index matched by the previous
        // candidate word, or 0 if that word was unmatched.
        fn best(&mut self, i: usize, prev: usize, used: &mut Vec<u64>) -> (usize, usize) {
            if i == self.c.len() {
                return (0, 0);
            }
            let key = (i, prev, used.clone());
            if let Some(&v) = self.memo.get(&key) {
                return v;
            }
            let mut best = self.best(i + 1, 0, used);
            for k in 0..self.slots[i].len() {
                let j = self.slots[i][k];
                if used[j / 64] >> (j % 64) & 1 == 1 {
                    continue;
                }
                used[j / 64] |= 1 << (j % 64);
                let (m, ch) = self.best(i + 1, j + 1, used);
                used[j / 64] &= !(1 << (j % 64));
                let ch = ch + usize::from(!(prev > 0 && prev == j));
                if m + 1 > best.0 || (m + 1 == best.0 && ch < best.1) {
                    best = (m + 1, ch);
                }
            }
            self.memo.insert(key, best);
            best
        }
    }
    let slots = candidate
        .iter()
        .map(|w| reference.iter().enumerate().filter(|(_, x)| *x == w).map(|(j, _)| j).collect())
        .collect();
    let mut s = Search { c: candidate, slots, memo: HashMap::new() };
    let mut used = vec![0u64; reference.len().div_ceil(64).max(1)];
    s.best(0, 0, &mut used)
}

pub fn meteor_tokens(candidate: &[String], reference: &[String], params: MeteorParams) -> Meteor {
    let (c, r) = (candidate.len(), reference.len());
    let (m, chunks) = align(candidate, reference);
    let mut out = Meteor { score: 0.0, m, chunks, c, r, precision: 0.0, recall: 0.0, penalty: 0.0 };
    if m == 0 {
        return out;
    }
    out.precision = m as f64 / c as f64;
    out.recall = m as f64 / r as f64;
    out.penalty = params.gamma * (chunks as f64 / m as f64).powf(params.theta);
    let (p, rc) = (out.precision, out.recall);
    out.score = (1.0 - out.penalty) * p * rc / (params.alpha * p + (1.0 - params.alpha) * rc);
    out
}

pub fn meteor(candidate: &str, reference: &str, params: MeteorParams) -> Meteor {
    meteor_tokens(&tokenize(candidate), &tokenize(reference), params)
}

pub fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cider {
    /// Mean over n of the per-n similarity, times 10.
    pub score: f64,
    /// Corpus mean of the per-n similarity, index 0 for unigrams.
    pub per_n: Vec<f64>,
    /// Per candidate reported score.
    pub per_candidate: Vec<f64>,
}

/// Smoothed inverse document frequency over reference sets:
/// `ln((1 + N) / (1 + df)) + 1`.
pub fn cider_idf(df: usize, docs: usize) -> f64 {
    ((1.0 + docs as f64) / (1.0 + df as f64)).ln() + 1.0
}

fn tfidf<'a>(counts: &HashMap<&'a [String], usize>, df: &HashMap<Vec<String>, usize>, docs: usize) -> HashMap<&'a [String], f64> {
    counts
        .iter()
        .map(|(g, &tf)| (*g, tf as f64 * cider_idf(df.get(*g).copied().unwrap_or(0), docs)))
        .collect()
}

fn cosine(a: &HashMap<&[String], f64>, b: &HashMap<&[String], f64>) -> f64 {
    let na = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, v)| b.get(g).map(|w| v * w)).sum();
    dot / (na * nb)
}

/// Each candidate is compared with its own reference set; document
/// frequencies count reference sets containing an n-gram.
pub fn cider_tokens(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n_max: usize) -> Result<Cider> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::InvalidArgument(format!("{} candidates for {} reference sets", candidates.len(), references.len())));
    }
    if references.iter().any(Vec::is_empty) {
        return Err(Error::InvalidArgument("every candidate needs at least one reference".into()));
    }
    if n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be at least 1".into()));
    }
    let docs = references.len();
    let mut per_n = vec![0.0; n_max];
    let mut per_candidate = vec![0.0; candidates.len()];
    for n in 1..=n_max {
        let mut df: HashMap<Vec<String>, usize> = HashMap::new();
        for set in references {
            let seen: BTreeSet<&[String]> = set.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g.to_vec()).or_insert(0) += 1;
            }
        }
        for (k, (cand, set)) in candidates.iter().zip(references).enumerate() {
            let gc = tfidf(&ngrams(cand, n), &df, docs);
            let sim = set.iter().map(|r| cosine(&gc, &tfidf(&ngrams(r, n), &df, docs))).sum::<f64>() / set.len() as f64;
            per_n[n - 1] += sim / candidates.len() as f64;
            per_candidate[k] += 10.0 * sim / n_max as f64;
        }
    }
    let score = 10.0 * per_n.iter().sum::<f64>() / n_max as f64;
    Ok(Cider { score, per_n, per_candidate })
}

pub fn cider(candidates: &[String], references: &[Vec<String>], n_max: usize) -> Result<Cider> {
    let c: Vec<Vec<String>> = candidates.iter().map(|s| tokenize(s)).collect();
    let r: Vec<Vec<Vec<String>>> = references.iter().map(|set| set.iter().map(|s| tokenize(s)).collect()).collect();
    cider_tokens(&c, &r, n_max)
}

/// Metric values keyed by stable names, plus the quantities behind them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: BTreeMap<String, f64>,
    pub details: EvalDetails,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalDetails {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<F1Report>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<Vec<RougeL>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub meteor: Option<Vec<Meteor>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cider: Option<Cider>,
}

/// Which metric family a task is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricSet {
    /// accuracy, f1_weighted, f1_macro
    Labels,
    /// rouge_l, meteor, cider
    Captions,
    /// rouge_l
    Summaries,
}

impl EvalReport {
    pub fn compute(set: MetricSet, predictions: &[String], references: &[String]) -> Result<Self> {
        if predictions.len() != references.len() {
            return Err(Error::InvalidArgument(format!("{} predictions for {} references", predictions.len(), references.len())));
        }
        if predictions.is_empty() {
            return Err(Error::InvalidArgument("empty corpus".into()));
        }
        let mut report = EvalReport { details: EvalDetails { n: predictions.len(), ..Default::default() }, ..Default::default() };
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        match set {
            MetricSet::Labels => {
                let f1 = f1_report(references, predictions)?;
                report.metrics.insert("accuracy".into(), exact_match_accuracy(predictions, references)?);
                report.metrics.insert("f1_weighted".into(), f1.weighted);
                report.metrics.insert("f1_macro".into(), f1.macro_avg);
                report.details.f1 = Some(f1);
            }
            MetricSet::Captions | MetricSet::Summaries => {
                let rl: Vec<RougeL> = predictions.iter().zip(references).map(|(p, r)| rouge_l(p, r)).collect();
                report.metrics.insert("rouge_l".into(), mean(&rl.iter().map(|x| x.score).collect::<Vec<_>>()));
                report.details.rouge_l = Some(rl);
                if set == MetricSet::Captions {
                    let mt: Vec<Meteor> =
                        predictions.iter().zip(references).map(|(p, r)| meteor(p, r, MeteorParams::default())).collect();
                    report.metrics.insert("meteor".into(), mean(&mt.iter().map(|x| x.score).collect::<Vec<_>>()));
                    report.details.meteor = Some(mt);
                    let refs: Vec<Vec<String>> = references.iter().map(|r| vec![r.clone()]).collect();
                    let c = cider(predictions, &refs, 4)?;
                    report.metrics.insert("cider".into(), c.score);
                    report.details.cider = Some(c);
                }
            }
        }
        Ok(report)
    }

    /// The metric map as a JSON object with the stable key names.
    pub fn metrics_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.metrics)?)
    }

    pub fn details_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.details)?)
    }
}
