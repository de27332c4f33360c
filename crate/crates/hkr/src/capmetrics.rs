//! Caption evaluation metrics: BLEU-1..4, ROUGE-L, METEOR-lite, CIDEr-D,
//! plus uniqueness/length statistics and a wall-clock timing harness.
//!
//! METEOR-lite uses exact-match alignment only (no stemming or synonym
//! sets), so its absolute values are not comparable to full METEOR.
//! Scores live in [0,1] except CIDEr-D in [0,10]; any ×100-style display
//! is formatting, not a different scale.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{HkrError, Result};

pub type Tokens = Vec<usize>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub meteor_lite: f64,
    pub cider_d: f64,
    pub n_candidates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessStats {
    pub unique_fraction: f64,
    pub avg_length: f64,
}

fn ngram_counts(tokens: &[usize], n: usize) -> BTreeMap<&[usize], usize> {
    let mut counts: BTreeMap<&[usize], usize> = BTreeMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Modified n-gram precision components for one candidate: clipped match
/// count and total candidate n-grams, for order `n`.
fn clipped_counts(candidate: &[usize], references: &[Tokens], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let total: usize = cand.values().sum();
    let mut matched = 0usize;
    for (ngram, &count) in &cand {
        let max_ref = references
            .iter()
            .map(|r| ngram_counts(r, n).get(ngram).copied().unwrap_or(0))
            .max()
            .unwrap_or(0);
        matched += count.min(max_ref);
    }
    (matched, total)
}

/// Closest reference length (ties go to the shorter reference).
fn effective_ref_len(cand_len: usize, references: &[Tokens]) -> usize {
    let mut best = references[0].len();
    for r in references {
        let d = (r.len() as i64 - cand_len as i64).abs();
        let bd = (best as i64 - cand_len as i64).abs();
        if d < bd || (d == bd && r.len() < best) {
            best = r.len();
        }
    }
    best
}

/// Sentence BLEU-n: clipped modified n-gram precision, geometric mean
/// over orders 1..=n, brevity penalty, no smoothing.
pub fn bleu_n(candidate: &[usize], references: &[Tokens], n: usize) -> Result<f64> {
    if candidate.is_empty() {
        return Err(HkrError::InvalidArgument("empty candidate".into()));
    }
    if references.is_empty() || !(1..=4).contains(&n) {
        return Err(HkrError::InvalidArgument("need references and n in 1..4".into()));
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (matched, total) = clipped_counts(candidate, references, order);
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let precision = (log_sum / n as f64).exp();
    let r = effective_ref_len(candidate.len(), references) as f64;
    let c = candidate.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(precision * bp)
}

/// Corpus BLEU-n with corpus-level counts (matched and total n-grams
/// pooled over all candidates before taking precisions).
pub fn corpus_bleu_n(candidates: &[Tokens], references: &[Vec<Tokens>], n: usize) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(HkrError::InvalidArgument(
            "need equal nonempty candidate and reference lists".into(),
        ));
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let mut matched = 0usize;
        let mut total = 0usize;
        for (c, refs) in candidates.iter().zip(references) {
            let (m, t) = clipped_counts(c, refs, order);
            matched += m;
            total += t;
        }
        if matched == 0 || total == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let precision = (log_sum / n as f64).exp();
    let c_len: usize = candidates.iter().map(|c| c.len()).sum();
    let r_len: usize = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| effective_ref_len(c.len(), refs))
        .sum();
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    Ok(precision * bp)
}

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for &x in a {
        let mut prev = 0;
        for (j, &y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y { prev + 1 } else { dp[j + 1].max(dp[j]) };
            prev = cur;
        }
    }
    dp[b.len()]
}

/// ROUGE-L: LCS F-measure with β = 1.2, max over references.
pub fn rouge_l(candidate: &[usize], references: &[Tokens]) -> Result<f64> {
    if candidate.is_empty() {
        return Err(HkrError::InvalidArgument("empty candidate".into()));
    }
    let beta2 = 1.2f64 * 1.2;
    let mut best = 0.0f64;
    for r in references {
        if r.is_empty() {
            continue;
        }
        let lcs = lcs_len(candidate, r) as f64;
        if lcs == 0.0 {
            continue;
        }
        let p = lcs / candidate.len() as f64;
        let rec = lcs / r.len() as f64;
        let f = ((1.0 + beta2) * p * rec) / (rec + beta2 * p);
        best = best.max(f);
    }
    Ok(best)
}

/// In-order exact-match unigram alignment. Returns (matches, chunks):
/// each candidate token claims the first unused identical reference
/// token; chunks are maximal runs contiguous in both sequences.
fn align(candidate: &[usize], reference: &[usize]) -> (usize, usize) {
    let mut used = vec![false; reference.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (ci, &c) in candidate.iter().enumerate() {
        for (ri, &r) in reference.iter().enumerate() {
            if !used[ri] && r == c {
                used[ri] = true;
                pairs.push((ci, ri));
                break;
            }
        }
    }
    let matches = pairs.len();
    let mut chunks = 0usize;
    for (i, &(ci, ri)) in pairs.iter().enumerate() {
        if i == 0 || pairs[i - 1].0 + 1 != ci || pairs[i - 1].1 + 1 != ri {
            chunks += 1;
        }
    }
    (matches, chunks)
}

/// METEOR-lite: exact alignment, harmonic mean with recall weight 9,
/// fragmentation penalty 0.5·(chunks/matches)³, max over references.
pub fn meteor_lite(candidate: &[usize], references: &[Tokens]) -> Result<f64> {
    if candidate.is_empty() {
        return Err(HkrError::InvalidArgument("empty candidate".into()));
    }
    let mut best = 0.0f64;
    for r in references {
        if r.is_empty() {
            continue;
        }
        let (matches, chunks) = align(candidate, r);
        if matches == 0 {
            continue;
        }
        let m = matches as f64;
        let p = m / candidate.len() as f64;
        let rec = m / r.len() as f64;
        let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
        let penalty = 0.5 * (chunks as f64 / m).powi(3);
        best = best.max(f_mean * (1.0 - penalty));
    }
    Ok(best)
}

/// Per-image document frequencies for CIDEr-D, built from the reference
/// corpus: an n-gram counts once per image whose references contain it.
pub struct IdfTable {
    doc_freq: [BTreeMap<Tokens, f64>; 4],
    n_images: usize,
}

impl IdfTable {
    pub fn build(corpus_refs: &[Vec<Tokens>]) -> Result<IdfTable> {
        if corpus_refs.is_empty() {
            return Err(HkrError::InvalidArgument("empty IDF corpus".into()));
        }
        let mut doc_freq: [BTreeMap<Tokens, f64>; 4] = Default::default();
        for refs in corpus_refs {
            for n in 1..=4 {
                let mut seen: BTreeMap<Tokens, bool> = BTreeMap::new();
                for r in refs {
                    for (ngram, _) in ngram_counts(r, n) {
                        seen.entry(ngram.to_vec()).or_insert(true);
                    }
                }
                for ngram in seen.into_keys() {
                    *doc_freq[n - 1].entry(ngram).or_insert(0.0) += 1.0;
                }
            }
        }
        Ok(IdfTable { doc_freq, n_images: corpus_refs.len() })
    }

    /// Smoothed IDF: ln((N+1)/df), with df floored at 1 for unseen
    /// n-grams, so a singleton corpus still yields positive weights.
    fn idf(&self, n: usize, ngram: &[usize]) -> f64 {
        let df = self.doc_freq[n - 1].get(ngram).copied().unwrap_or(1.0).max(1.0);
        ((self.n_images as f64 + 1.0) / df).ln()
    }

    fn tfidf_vec(&self, tokens: &[usize], n: usize) -> (BTreeMap<Tokens, f64>, f64) {
        let mut vec: BTreeMap<Tokens, f64> = BTreeMap::new();
        for (ngram, count) in ngram_counts(tokens, n) {
            vec.insert(ngram.to_vec(), count as f64 * self.idf(n, ngram));
        }
        let norm = vec.values().map(|v| v * v).sum::<f64>().sqrt();
        (vec, norm)
    }
}

const CIDER_SIGMA: f64 = 6.0;

/// CIDEr-D for one candidate against its references: clipped TF-IDF
/// cosine per n-gram order 1..4 with a Gaussian length penalty (σ = 6),
/// averaged over orders and references, scaled ×10.
pub fn cider_d_single(candidate: &[usize], references: &[Tokens], idf: &IdfTable) -> Result<f64> {
    if candidate.is_empty() {
        return Err(HkrError::InvalidArgument("empty candidate".into()));
    }
    if references.is_empty() {
        return Err(HkrError::InvalidArgument("need at least one reference".into()));
    }
    let mut per_order = [0.0f64; 4];
    for n in 1..=4 {
        let (cand_vec, cand_norm) = idf.tfidf_vec(candidate, n);
        let mut acc = 0.0;
        for r in references {
            let (ref_vec, ref_norm) = idf.tfidf_vec(r, n);
            let mut sim = 0.0;
            for (ngram, &cv) in &cand_vec {
                if let Some(&rv) = ref_vec.get(ngram) {
                    sim += cv.min(rv) * rv;
                }
            }
            if cand_norm > 0.0 && ref_norm > 0.0 {
                sim /= cand_norm * ref_norm;
            } else {
                sim = 0.0;
            }
            let delta = candidate.len() as f64 - r.len() as f64;
            sim *= (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            acc += sim;
        }
        per_order[n - 1] = acc / references.len() as f64;
    }
    Ok(10.0 * per_order.iter().sum::<f64>() / 4.0)
}

/// Corpus CIDEr-D: mean of per-candidate scores.
pub fn cider_d(
    candidates: &[Tokens],
    references: &[Vec<Tokens>],
    corpus_refs_for_idf: &[Vec<Tokens>],
) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(HkrError::InvalidArgument(
            "need equal nonempty candidate and reference lists".into(),
        ));
    }
    let idf = IdfTable::build(corpus_refs_for_idf)?;
    let mut total = 0.0;
    for (c, refs) in candidates.iter().zip(references) {
        total += cider_d_single(c, refs, &idf)?;
    }
    Ok(total / candidates.len() as f64)
}

/// Full metric bundle over a candidate set. ROUGE-L, METEOR-lite, and
/// CIDEr-D are per-candidate means; BLEU uses corpus-level counts.
pub fn evaluate_captions(
    candidates: &[Tokens],
    references: &[Vec<Tokens>],
    corpus_refs_for_idf: &[Vec<Tokens>],
) -> Result<EvalResult> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(HkrError::InvalidArgument(
            "need equal nonempty candidate and reference lists".into(),
        ));
    }
    let mut bleu = [0.0f64; 4];
    for (i, b) in bleu.iter_mut().enumerate() {
        *b = corpus_bleu_n(candidates, references, i + 1)?;
    }
    let mut rouge = 0.0;
    let mut meteor = 0.0;
    for (c, refs) in candidates.iter().zip(references) {
        rouge += rouge_l(c, refs)?;
        meteor += meteor_lite(c, refs)?;
    }
    Ok(EvalResult {
        bleu,
        rouge_l: rouge / candidates.len() as f64,
        meteor_lite: meteor / candidates.len() as f64,
        cider_d: cider_d(candidates, references, corpus_refs_for_idf)?,
        n_candidates: candidates.len(),
    })
}

/// Exact-sequence uniqueness against the training captions, plus average
/// pre-EOS token length.
pub fn uniqueness_stats(
    candidates: &[Tokens],
    training_captions: &[Tokens],
) -> Result<UniquenessStats> {
    if candidates.is_empty() {
        return Err(HkrError::InvalidArgument("empty candidate set".into()));
    }
    let training: std::collections::HashSet<&Tokens> = training_captions.iter().collect();
    let unique = candidates.iter().filter(|c| !training.contains(c)).count();
    let total_len: usize = candidates
        .iter()
        .map(|c| c.iter().take_while(|&&t| t != crate::datagen::EOS).count())
        .sum();
    Ok(UniquenessStats {
        unique_fraction: unique as f64 / candidates.len() as f64,
        avg_length: total_len as f64 / candidates.len() as f64,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TimingReport {
    pub train_ms_per_epoch: f64,
    pub infer_ms_per_iteration: f64,
}

/// Median over `iterations` wall-clock measurements of `f`.
pub fn median_ms<F: FnMut()>(iterations: usize, mut f: F) -> f64 {
    assert!(iterations >= 1);
    let mut times: Vec<f64> = (0..iterations)
        .map(|_| {
            let start = std::time::Instant::now();
            f();
            start.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    }
}
