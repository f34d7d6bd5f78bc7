//! Corpus-level BLEU-1..4 and ROUGE-L F-measure over token-id sequences.
//!
//! BLEU uses modified (clipped) n-gram precisions aggregated over the corpus,
//! a brevity penalty on corpus lengths, and add-1 smoothing on the aggregated
//! n-gram counts for orders n >= 2 (order 1 is left unsmoothed). Scores are
//! reported in [0, 1]; multiply by 100 for display. Single reference per
//! candidate.

use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("candidate and reference lists must be equal-length and non-empty")]
    EmptyOrMismatched,
    #[error("reference {index} is empty")]
    EmptyReference { index: usize },
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Evaluation summary for a corpus.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ScoreReport {
    pub bleu: [f64; 4],
    pub rouge_l: f64,
    pub n_samples: usize,
}

/// Corpus-level BLEU-1..4 with add-1 smoothing for orders n >= 2.
///
/// Returns `[BLEU-1, BLEU-2, BLEU-3, BLEU-4]` where BLEU-k combines the
/// precisions of orders 1..=k under a geometric mean and the corpus brevity
/// penalty. An empty candidate corpus (zero total length) scores 0.
pub fn bleu(candidates: &[Vec<u32>], references: &[Vec<u32>]) -> Result<[f64; 4]> {
    bleu_with_smoothing(candidates, references, true)
}

/// As [`bleu`], with the add-1 smoothing made optional (the unsmoothed mode
/// exists for sensitivity checks; any order with zero matches then scores 0).
pub fn bleu_with_smoothing(
    candidates: &[Vec<u32>],
    references: &[Vec<u32>],
    smoothed: bool,
) -> Result<[f64; 4]> {
    const MAX_N: usize = 4;
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(MetricsError::EmptyOrMismatched);
    }
    for (i, r) in references.iter().enumerate() {
        if r.is_empty() {
            return Err(MetricsError::EmptyReference { index: i });
        }
    }
    let mut matched = [0u64; MAX_N + 1];
    let mut total = [0u64; MAX_N + 1];
    let cand_len: usize = candidates.iter().map(Vec::len).sum();
    let ref_len: usize = references.iter().map(Vec::len).sum();
    for (cand, reference) in candidates.iter().zip(references) {
        for n in 1..=MAX_N {
            let cg = ngram_counts(cand, n);
            let rg = ngram_counts(reference, n);
            total[n] += cand.len().saturating_sub(n - 1) as u64;
            for (gram, count) in &cg {
                matched[n] += (*count).min(rg.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let mut out = [0.0; MAX_N];
    if cand_len == 0 {
        return Ok(out);
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    for k in 1..=MAX_N {
        let mut log_sum = 0.0;
        let mut zero = false;
        for n in 1..=k {
            let (m, t) = if n >= 2 && smoothed {
                ((matched[n] + 1) as f64, (total[n] + 1) as f64)
            } else {
                (matched[n] as f64, total[n] as f64)
            };
            if m == 0.0 || t == 0.0 {
                zero = true;
                break;
            }
            log_sum += (m / t).ln();
        }
        out[k - 1] = if zero {
            0.0
        } else {
            bp * (log_sum / k as f64).exp()
        };
    }
    Ok(out)
}

fn ngram_counts(seq: &[u32], n: usize) -> HashMap<&[u32], u64> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for window in seq.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-L F-measure for one candidate/reference pair.
///
/// `P = lcs/|cand|` (0 for an empty candidate), `R = lcs/|ref|`,
/// `F = 2PR/(P+R)` (0 when both are zero).
pub fn rouge_l(candidate: &[u32], reference: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(MetricsError::EmptyReference { index: 0 });
    }
    let l = lcs_len(candidate, reference) as f64;
    let p = if candidate.is_empty() {
        0.0
    } else {
        l / candidate.len() as f64
    };
    let r = l / reference.len() as f64;
    Ok(if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    })
}

/// Mean ROUGE-L over a corpus of pairs.
pub fn rouge_l_corpus(candidates: &[Vec<u32>], references: &[Vec<u32>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(MetricsError::EmptyOrMismatched);
    }
    let mut sum = 0.0;
    for (i, (c, r)) in candidates.iter().zip(references).enumerate() {
        if r.is_empty() {
            return Err(MetricsError::EmptyReference { index: i });
        }
        sum += rouge_l(c, r)?;
    }
    Ok(sum / candidates.len() as f64)
}

/// Runs both metrics over a corpus.
pub fn score_corpus(candidates: &[Vec<u32>], references: &[Vec<u32>]) -> Result<ScoreReport> {
    Ok(ScoreReport {
        bleu: bleu(candidates, references)?,
        rouge_l: rouge_l_corpus(candidates, references)?,
        n_samples: candidates.len(),
    })
}

fn lcs_len(a: &[u32], b: &[u32]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &av in a {
        for (j, &bv) in b.iter().enumerate() {
            cur[j + 1] = if av == bv {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// The 10-pair evaluation fixture used by the acceptance suite, together
/// with hand-oracle expectations computed independently before this module
/// was written.
pub mod fixture {
    /// (candidate, reference) pairs.
    pub fn pairs() -> Vec<(Vec<u32>, Vec<u32>)> {
        vec![
            (vec![5, 6, 7, 8], vec![5, 6, 7, 8]),
            (vec![10, 11], vec![12, 13]),
            (vec![5, 6, 7, 8], vec![5, 6, 9, 8]),
            (vec![5, 7, 9], vec![5, 6, 7, 8, 9]),
            (vec![], vec![4, 5]),
            (vec![4, 5, 6], vec![4, 5]),
            (vec![9, 9, 9], vec![9]),
            (vec![4, 5, 6, 7, 8], vec![4, 5, 6, 7, 9]),
            (vec![6, 5, 4], vec![4, 5, 6]),
            (vec![4, 4, 5, 5], vec![4, 5, 4, 5]),
        ]
    }

    /// Corpus BLEU-1..4 of [`pairs`], from the independent oracle.
    pub const CORPUS_BLEU: [f64; 4] = [
        0.749_618_072_627_543_65,
        0.561_760_704_172_069_25,
        0.477_872_157_145_186_77,
        0.479_428_582_086_686_98,
    ];

    /// Mean ROUGE-L of [`pairs`], from the independent oracle.
    pub const CORPUS_ROUGE_L: f64 = 0.568_333_333_333_333_25;
}
