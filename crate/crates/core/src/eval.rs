//! Surface metrics and graph-property bucketed reports.
//!
//! All metrics tokenize by whitespace; callers normalize text beforehand.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::GraphStats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{hyps} hypotheses but {refs} references")]
    LengthMismatch { hyps: usize, refs: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("bucket boundaries must be strictly increasing")]
    BadBoundaries,
}

fn check(hyps: usize, refs: usize) -> Result<(), EvalError> {
    if hyps != refs {
        return Err(EvalError::LengthMismatch { hyps, refs });
    }
    if refs == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(())
}

fn ngram_counts<T: Hash + Eq + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if n > 0 && items.len() >= n {
        for w in items.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// `(clipped matches, hypothesis n-grams, reference n-grams)`
fn overlap<T: Hash + Eq + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, h.values().sum(), r.values().sum())
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

/// Treatment of n-gram orders with zero matches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Smoothing {
    /// A zero match count makes the score zero.
    None,
    /// Replace a zero match count by the given epsilon.
    Epsilon(f64),
}

impl Default for Smoothing {
    fn default() -> Self {
        Smoothing::Epsilon(0.1)
    }
}

/// Corpus BLEU-4 with brevity penalty, in `[0, 100]`.
///
/// Orders for which the hypotheses contain no n-grams at all are left out
/// of the geometric mean. No unigram match at all scores 0 whatever the
/// smoothing.
pub fn bleu(hyps: &[&str], refs: &[&str], smoothing: Smoothing) -> Result<f64, EvalError> {
    check(hyps.len(), refs.len())?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (words(h), words(r));
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=4 {
            let (m, c, _) = overlap(&h, &r, n);
            matches[n - 1] += m;
            totals[n - 1] += c;
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 0..4 {
        if totals[n] == 0 {
            continue;
        }
        let m = match (matches[n], smoothing) {
            (0, Smoothing::None) => return Ok(0.0),
            (0, Smoothing::Epsilon(eps)) => eps,
            (m, _) => m as f64,
        };
        log_sum += (m / totals[n] as f64).ln();
        orders += 1;
    }
    let bp = if hyp_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / hyp_len as f64).exp() };
    Ok(100.0 * bp * (log_sum / orders as f64).exp())
}

pub const CHRF_CHAR_ORDER: usize = 6;
pub const CHRF_WORD_ORDER: usize = 2;
pub const CHRF_BETA: f64 = 2.0;

/// Corpus chrF++ in `[0, 100]`: character 1..6-grams of the text with
/// whitespace removed plus word 1..2-grams. Statistics are summed over the
/// corpus; precision and recall are averaged over orders with n-grams on
/// both sides, then combined into `F_beta` with `beta = 2`.
pub fn chrf_pp(hyps: &[&str], refs: &[&str]) -> Result<f64, EvalError> {
    check(hyps.len(), refs.len())?;
    let orders = CHRF_CHAR_ORDER + CHRF_WORD_ORDER;
    let mut stats = vec![(0usize, 0usize, 0usize); orders];
    for (h, r) in hyps.iter().zip(refs) {
        let hc: Vec<char> = h.chars().filter(|c| !c.is_whitespace()).collect();
        let rc: Vec<char> = r.chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=CHRF_CHAR_ORDER {
            let (m, a, b) = overlap(&hc, &rc, n);
            let s = &mut stats[n - 1];
            *s = (s.0 + m, s.1 + a, s.2 + b);
        }
        let (hw, rw) = (words(h), words(r));
        for n in 1..=CHRF_WORD_ORDER {
            let (m, a, b) = overlap(&hw, &rw, n);
            let s = &mut stats[CHRF_CHAR_ORDER + n - 1];
            *s = (s.0 + m, s.1 + a, s.2 + b);
        }
    }
    let (mut p, mut r, mut eff) = (0.0, 0.0, 0usize);
    for &(m, h, rf) in &stats {
        if h > 0 && rf > 0 {
            p += m as f64 / h as f64;
            r += m as f64 / rf as f64;
            eff += 1;
        }
    }
    if eff == 0 {
        return Ok(0.0);
    }
    let (p, r) = (p / eff as f64, r / eff as f64);
    let b2 = CHRF_BETA * CHRF_BETA;
    if p + r == 0.0 {
        return Ok(0.0);
    }
    Ok(100.0 * (1.0 + b2) * p * r / (b2 * p + r))
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean sentence-level LCS F1 over words, in `[0, 100]`.
pub fn rouge_l(hyps: &[&str], refs: &[&str]) -> Result<f64, EvalError> {
    check(hyps.len(), refs.len())?;
    let total: f64 = hyps
        .iter()
        .zip(refs)
        .map(|(h, r)| {
            let (h, r) = (words(h), words(r));
            let l = lcs_len(&h, &r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
            2.0 * p * rc / (p + rc)
        })
        .sum();
    Ok(100.0 * total / hyps.len() as f64)
}

/// Distinct word n-grams over all n-grams in the corpus; 0 when there are
/// none.
pub fn distinct_n(hyps: &[&str], n: usize) -> f64 {
    let mut seen = std::collections::HashSet::new();
    let mut total = 0usize;
    for h in hyps {
        let w = words(h);
        if n == 0 || w.len() < n {
            continue;
        }
        for g in w.windows(n) {
            total += 1;
            seen.insert(g.join(" "));
        }
    }
    if total == 0 {
        0.0
    } else {
        seen.len() as f64 / total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub count: usize,
    pub bleu: f64,
    pub chrf_pp: f64,
    pub rouge_l: f64,
    pub distinct_1: f64,
    pub distinct_2: f64,
}

impl MetricReport {
    pub fn compute(hyps: &[&str], refs: &[&str]) -> Result<Self, EvalError> {
        Ok(Self {
            count: hyps.len(),
            bleu: bleu(hyps, refs, Smoothing::default())?,
            chrf_pp: chrf_pp(hyps, refs)?,
            rouge_l: rouge_l(hyps, refs)?,
            distinct_1: distinct_n(hyps, 1),
            distinct_2: distinct_n(hyps, 2),
        })
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>10}", "metric", "value");
        for (k, v) in [
            ("BLEU", self.bleu),
            ("chrF++", self.chrf_pp),
            ("ROUGE-L", self.rouge_l),
            ("Distinct-1", self.distinct_1),
            ("Distinct-2", self.distinct_2),
        ] {
            let _ = writeln!(s, "{k:<12} {v:>10.2}");
        }
        let _ = writeln!(s, "{:<12} {:>10}", "sentences", self.count);
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphProperty {
    Size,
    Diameter,
    Reentrancies,
}

impl GraphProperty {
    pub fn of(self, s: &GraphStats) -> usize {
        match self {
            GraphProperty::Size => s.size,
            GraphProperty::Diameter => s.diameter,
            GraphProperty::Reentrancies => s.reentrancies,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GraphProperty::Size => "size",
            GraphProperty::Diameter => "diameter",
            GraphProperty::Reentrancies => "reentrancies",
        }
    }
}

impl std::str::FromStr for GraphProperty {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "size" => Ok(GraphProperty::Size),
            "diameter" => Ok(GraphProperty::Diameter),
            "reentrancies" => Ok(GraphProperty::Reentrancies),
            _ => Err(format!("unknown graph property `{s}` (expected size, diameter or reentrancies)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub property: GraphProperty,
    /// Exclusive lower bound; `None` is unbounded.
    pub above: Option<usize>,
    /// Inclusive upper bound; `None` is unbounded.
    pub up_to: Option<usize>,
    pub count: usize,
    pub score: f64,
}

impl Bucket {
    pub fn label(&self) -> String {
        match (self.above, self.up_to) {
            (None, Some(u)) => format!("<={u}"),
            (Some(a), Some(u)) => format!("{}-{u}", a + 1),
            (Some(a), None) => format!(">{a}"),
            (None, None) => "all".into(),
        }
    }
}

/// Partition examples by a graph property into `(-inf, b0], (b0, b1], ...,
/// (b_last, inf)` and score each non-empty bucket. Empty buckets are
/// omitted.
pub fn bucket_report<F>(
    stats: &[GraphStats],
    hyps: &[&str],
    refs: &[&str],
    property: GraphProperty,
    boundaries: &[usize],
    score: F,
) -> Result<Vec<Bucket>, EvalError>
where
    F: Fn(&[&str], &[&str]) -> Result<f64, EvalError>,
{
    check(hyps.len(), refs.len())?;
    if stats.len() != hyps.len() {
        return Err(EvalError::LengthMismatch { hyps: hyps.len(), refs: stats.len() });
    }
    if boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadBoundaries);
    }
    let mut out = Vec::new();
    for b in 0..=boundaries.len() {
        let above = b.checked_sub(1).map(|i| boundaries[i]);
        let up_to = boundaries.get(b).copied();
        let members: Vec<usize> = (0..stats.len())
            .filter(|&i| {
                let v = property.of(&stats[i]);
                above.is_none_or(|a| v > a) && up_to.is_none_or(|u| v <= u)
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let h: Vec<&str> = members.iter().map(|&i| hyps[i]).collect();
        let r: Vec<&str> = members.iter().map(|&i| refs[i]).collect();
        out.push(Bucket { property, above, up_to, count: members.len(), score: score(&h, &r)? });
    }
    Ok(out)
}

pub fn bucket_table(buckets: &[Bucket]) -> String {
    let mut s = String::new();
    if let Some(b) = buckets.first() {
        let _ = writeln!(s, "{:<12} {:>8} {:>10}", b.property.name(), "count", "score");
    }
    for b in buckets {
        let _ = writeln!(s, "{:<12} {:>8} {:>10.2}", b.label(), b.count, b.score);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_corpora_are_maximal() {
        let c = ["the cat sat on the mat", "a dog"];
        assert_eq!(bleu(&c, &c, Smoothing::None).unwrap(), 100.0);
        assert_eq!(chrf_pp(&c, &c).unwrap(), 100.0);
        assert_eq!(rouge_l(&c, &c).unwrap(), 100.0);
    }

    #[test]
    fn disjoint_corpora_score_zero() {
        assert_eq!(bleu(&["a b c"], &["d e f"], Smoothing::default()).unwrap(), 0.0);
        assert_eq!(chrf_pp(&["abc"], &["xyz"]).unwrap(), 0.0);
        assert_eq!(rouge_l(&["a b"], &["c d"]).unwrap(), 0.0);
    }

    #[test]
    fn lcs() {
        assert_eq!(lcs_len(&["a", "b", "c", "d"], &["a", "c", "d"]), 3);
        assert_eq!(lcs_len::<u8>(&[], &[1]), 0);
    }

    #[test]
    fn mismatched_lengths() {
        assert_eq!(bleu(&["a"], &[], Smoothing::None), Err(EvalError::LengthMismatch { hyps: 1, refs: 0 }));
        assert_eq!(rouge_l(&[], &[]), Err(EvalError::EmptyCorpus));
    }

    #[test]
    fn bucket_labels() {
        let b = |above, up_to| Bucket { property: GraphProperty::Size, above, up_to, count: 1, score: 0.0 };
        assert_eq!(b(None, Some(30)).label(), "<=30");
        assert_eq!(b(Some(30), Some(60)).label(), "31-60");
        assert_eq!(b(Some(60), None).label(), ">60");
    }
}
