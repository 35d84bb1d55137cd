//! Report metrics and the paired significance test.
//!
//! All metrics are higher-is-better and lie in `[0, 1]`:
//!
//! | field        | measures                                                     |
//! |--------------|--------------------------------------------------------------|
//! | `bleu`       | clipped n-gram precision (n ≤ 4) with brevity penalty         |
//! | `embed_f1`   | greedy cosine matching over static co-occurrence embeddings  |
//! | `semb`       | cosine between labeler finding vectors                       |
//! | `graph_comb` | mean of entity/attribute F1 and relation F1                  |
//! | `composite`  | unweighted mean of the four above                            |

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::synthcxr::{strip_eos, Grammar, ReportGraph};
use crate::{Error, Result};

/// Significance level for the one-sided test.
pub const ALPHA: f64 = 0.05;

/// Largest effective sample size for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub bleu: f64,
    pub embed_f1: f64,
    pub semb: f64,
    pub graph_comb: f64,
    pub composite: f64,
}

impl MetricVector {
    pub const NAMES: [&'static str; 5] = ["bleu", "embed_f1", "semb", "graph_comb", "composite"];

    pub fn from_base(bleu: f64, embed_f1: f64, semb: f64, graph_comb: f64) -> Result<Self> {
        let composite = composite_score([bleu, embed_f1, semb, graph_comb])?;
        Ok(Self {
            bleu,
            embed_f1,
            semb,
            graph_comb,
            composite,
        })
    }

    pub fn values(&self) -> [f64; 5] {
        [self.bleu, self.embed_f1, self.semb, self.graph_comb, self.composite]
    }

    pub fn from_values(v: [f64; 5]) -> Self {
        Self {
            bleu: v[0],
            embed_f1: v[1],
            semb: v[2],
            graph_comb: v[3],
            composite: v[4],
        }
    }

    /// Field-wise mean in slice order. Empty input gives all zeros.
    pub fn mean(rows: &[MetricVector]) -> MetricVector {
        let mut acc = [0.0; 5];
        for r in rows {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        if !rows.is_empty() {
            acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
        }
        Self::from_values(acc)
    }
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BleuScore {
    pub score: f64,
    /// Set when the candidate was empty and scored 0.
    pub empty_candidate: bool,
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut m = HashMap::new();
    for w in tokens.windows(n) {
        *m.entry(w).or_insert(0) += 1;
    }
    m
}

/// `(clipped matches, candidate n-grams)` for one order.
fn clipped_matches(candidate: &[usize], reference: &[usize], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

fn combine_bleu(matches: &[(usize, usize)], cand_len: usize, ref_len: usize) -> f64 {
    if matches.is_empty() || matches.iter().any(|&(m, _)| m == 0) {
        return 0.0;
    }
    let log_mean =
        matches.iter().map(|&(m, t)| (m as f64 / t as f64).ln()).sum::<f64>() / matches.len() as f64;
    let bp = (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp();
    bp * log_mean.exp()
}

/// Sentence BLEU without smoothing: geometric mean of clipped precisions for
/// `n = 1..=min(max_n, |candidate|)` times `exp(min(0, 1 − |ref|/|cand|))`.
/// Tokens after the first EOS are ignored.
pub fn bleu(candidate: &[usize], reference: &[usize], max_n: usize) -> BleuScore {
    let (c, r) = (strip_eos(candidate), strip_eos(reference));
    if c.is_empty() {
        return BleuScore {
            score: 0.0,
            empty_candidate: true,
        };
    }
    let orders = max_n.min(c.len());
    let matches: Vec<_> = (1..=orders).map(|n| clipped_matches(c, r, n)).collect();
    BleuScore {
        score: combine_bleu(&matches, c.len(), r.len()),
        empty_candidate: false,
    }
}

/// Corpus BLEU: clipped counts and lengths pooled over all pairs before the
/// precisions are formed.
pub fn corpus_bleu(pairs: &[(&[usize], &[usize])], max_n: usize) -> f64 {
    let mut matched = vec![(0usize, 0usize); max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, reference) in pairs {
        let (c, r) = (strip_eos(cand), strip_eos(reference));
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n.min(c.len()) {
            let (m, t) = clipped_matches(c, r, n);
            matched[n - 1].0 += m;
            matched[n - 1].1 += t;
        }
    }
    if cand_len == 0 {
        return 0.0;
    }
    let used: Vec<_> = matched.into_iter().take_while(|&(_, t)| t > 0).collect();
    combine_bleu(&used, cand_len, ref_len)
}

// ---------------------------------------------------------------------------
// Embedding F1
// ---------------------------------------------------------------------------

/// Static token embeddings from a positive-PMI co-occurrence matrix.
///
/// Co-occurrences are counted within a symmetric window of
/// [`StaticEmbeddings::WINDOW`] tokens inside each report (EOS stripped). The
/// PPMI matrix is eigendecomposed and each token is represented by its row of
/// `U_k · sqrt(λ_k)` over the `dim` largest positive eigenvalues, then
/// L2-normalized. Tokens that never occur keep a zero vector.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticEmbeddings {
    dim: usize,
    vectors: Vec<Vec<f64>>,
}

impl StaticEmbeddings {
    pub const WINDOW: usize = 2;
    pub const DEFAULT_DIM: usize = 16;

    pub fn from_reports<'a>(reports: impl IntoIterator<Item = &'a [usize]>, vocab_size: usize, dim: usize) -> Self {
        let mut counts = vec![0.0f64; vocab_size * vocab_size];
        for r in reports {
            let r = strip_eos(r);
            for (i, &a) in r.iter().enumerate() {
                for &b in &r[i + 1..(i + 1 + Self::WINDOW).min(r.len())] {
                    counts[a * vocab_size + b] += 1.0;
                    counts[b * vocab_size + a] += 1.0;
                }
            }
        }
        let row_sum: Vec<f64> = counts.chunks(vocab_size).map(|c| c.iter().sum()).collect();
        let total: f64 = row_sum.iter().sum();
        let ppmi = DMatrix::from_fn(vocab_size, vocab_size, |i, j| {
            let c = counts[i * vocab_size + j];
            if c == 0.0 {
                0.0
            } else {
                (c * total / (row_sum[i] * row_sum[j])).ln().max(0.0)
            }
        });
        let eig = SymmetricEigen::new(ppmi);
        let mut order: Vec<usize> = (0..vocab_size).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let keep: Vec<usize> = order.into_iter().take(dim).filter(|&k| eig.eigenvalues[k] > 0.0).collect();
        let vectors = (0..vocab_size)
            .map(|t| {
                let mut v: Vec<f64> = keep
                    .iter()
                    .map(|&k| eig.eigenvectors[(t, k)] * eig.eigenvalues[k].sqrt())
                    .collect();
                v.resize(dim, 0.0);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 && row_sum[t] > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                } else {
                    v.iter_mut().for_each(|x| *x = 0.0);
                }
                v
            })
            .collect();
        Self { dim, vectors }
    }

    /// Embeddings given explicitly, one row per token; rows are normalized.
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape("embedding rows differ in length".into()));
        }
        let vectors = vectors
            .into_iter()
            .map(|mut v| {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                v
            })
            .collect();
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn vector(&self, token: usize) -> Option<&[f64]> {
        self.vectors.get(token).map(Vec::as_slice)
    }

    /// Cosine clamped to `[0, 1]`; a token always matches itself with 1.
    pub fn similarity(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 1.0;
        }
        match (self.vectors.get(a), self.vectors.get(b)) {
            (Some(x), Some(y)) => x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>().clamp(0.0, 1.0),
            _ => 0.0,
        }
    }
}

/// Greedy-matching F1: precision averages each candidate token's best
/// similarity to the reference, recall the reverse.
pub fn embed_f1(candidate: &[usize], reference: &[usize], emb: &StaticEmbeddings) -> f64 {
    let (c, r) = (strip_eos(candidate), strip_eos(reference));
    if c.is_empty() || r.is_empty() {
        return 0.0;
    }
    let best = |from: &[usize], to: &[usize]| {
        from.iter()
            .map(|&a| to.iter().map(|&b| emb.similarity(a, b)).fold(0.0, f64::max))
            .sum::<f64>()
            / from.len() as f64
    };
    let p = best(c, r);
    let rc = best(r, c);
    if p + rc == 0.0 {
        0.0
    } else {
        2.0 * p * rc / (p + rc)
    }
}

// ---------------------------------------------------------------------------
// Label and graph metrics
// ---------------------------------------------------------------------------

/// Cosine between finding indicator vectors; two empty sets agree (1.0).
pub fn semb_score(candidate: &[usize], reference: &[usize], grammar: &Grammar) -> f64 {
    let a = grammar.label_findings(candidate);
    let b = grammar.label_findings(reference);
    let (na, nb) = (a.count(), b.count());
    match (na, nb) {
        (0, 0) => 1.0,
        (0, _) | (_, 0) => 0.0,
        _ => {
            let dot = a.bits().iter().zip(b.bits()).filter(|(x, y)| **x && **y).count();
            dot as f64 / ((na * nb) as f64).sqrt()
        }
    }
}

/// Set F1; two empty sets score 1.
pub fn set_f1<T: Ord>(candidate: &BTreeSet<T>, reference: &BTreeSet<T>) -> f64 {
    if candidate.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let tp = candidate.intersection(reference).count() as f64;
    if tp == 0.0 {
        return 0.0;
    }
    let p = tp / candidate.len() as f64;
    let r = tp / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean of entity/attribute F1 and relation F1. An empty graph matches only
/// another empty graph.
pub fn graph_f1(candidate: &ReportGraph, reference: &ReportGraph) -> f64 {
    match (candidate.is_empty(), reference.is_empty()) {
        (true, true) => 1.0,
        (true, false) | (false, true) => 0.0,
        _ => 0.5 * (set_f1(&candidate.entities, &reference.entities) + set_f1(&candidate.relations, &reference.relations)),
    }
}

pub fn graph_combined(candidate: &[usize], reference: &[usize], grammar: &Grammar) -> f64 {
    graph_f1(&grammar.extract_graph(candidate), &grammar.extract_graph(reference))
}

/// Unweighted mean of `(bleu, embed_f1, semb, graph_comb)`.
pub fn composite_score(base: [f64; 4]) -> Result<f64> {
    if let Some(v) = base.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Data(format!("metric value {v} outside [0, 1]")));
    }
    Ok(base.iter().sum::<f64>() / 4.0)
}

/// Scorer bundling the grammar and embeddings.
pub struct Scorer<'a> {
    pub grammar: &'a Grammar,
    pub embeddings: &'a StaticEmbeddings,
}

impl Scorer<'_> {
    pub fn score(&self, candidate: &[usize], reference: &[usize]) -> MetricVector {
        MetricVector::from_base(
            bleu(candidate, reference, 4).score,
            embed_f1(candidate, reference, self.embeddings),
            semb_score(candidate, reference, self.grammar),
            graph_combined(candidate, reference, self.grammar),
        )
        .expect("every base metric lies in [0, 1]")
    }
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PValueMethod {
    Exact,
    Normal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub w_plus: f64,
    pub n_effective: usize,
    pub p_value: f64,
    pub significant: bool,
    pub method: PValueMethod,
}

pub fn is_significant(p_value: f64) -> bool {
    p_value < ALPHA
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

/// One-sided Wilcoxon signed-rank test of `deltas > 0`.
///
/// Exact zeros are dropped. Without ties and with at most
/// [`EXACT_MAX_N`] remaining differences, `p = P(W ≥ W+)` under the exact
/// null (all `2^n` sign patterns equally likely); otherwise a normal
/// approximation with tie and continuity correction.
pub fn wilcoxon_one_sided(deltas: &[f64]) -> Result<SignificanceResult> {
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Data("non-finite paired difference".into()));
    }
    let nz: Vec<f64> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
    if nz.is_empty() {
        return Err(Error::DegenerateComparison);
    }
    let n = nz.len();
    let abs: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = nz.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    let mut sorted = abs.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut has_ties = false;
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        if j - i > 1 {
            has_ties = true;
            tie_term += t * t * t - t;
        }
        i = j;
    }

    let (p_value, method) = if !has_ties && n <= EXACT_MAX_N {
        (exact_upper_tail(n, w_plus.round() as usize), PValueMethod::Exact)
    } else {
        let nf = n as f64;
        let mean = nf * (nf + 1.0) / 4.0;
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        let z = (w_plus - mean - 0.5) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        (normal.sf(z).clamp(f64::MIN_POSITIVE, 1.0), PValueMethod::Normal)
    };
    Ok(SignificanceResult {
        w_plus,
        n_effective: n,
        p_value,
        significant: is_significant(p_value),
        method,
    })
}

/// `P(W ≥ w)` for the signed-rank statistic with untied ranks `1..=n`,
/// counting sign patterns by subset-sum dynamic programming.
fn exact_upper_tail(n: usize, w: usize) -> f64 {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    let tail: u64 = counts[w.min(max + 1)..].iter().sum();
    tail as f64 / (1u64 << n) as f64
}
