//! BLEU, ROUGE-L, micro-averaged clinical-efficacy scores and saliency
//! localization.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{ObservationLabels, N_KINDS};
use crate::error::{Error, Result};

/// A score plus whether it came from a degenerate (empty) input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub value: f64,
    pub degenerate: bool,
}

impl Scored {
    fn ok(value: f64) -> Self {
        Self {
            value,
            degenerate: false,
        }
    }

    fn degenerate() -> Self {
        Self {
            value: 0.0,
            degenerate: true,
        }
    }
}

fn ngram_counts<T: Eq + std::hash::Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped n-gram matches and candidate n-gram total for one pair.
pub fn clipped_matches<T: Eq + std::hash::Hash + Clone>(
    candidate: &[T],
    reference: &[T],
    n: usize,
) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refc = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Corpus-level BLEU-n: pooled clipped precisions for orders 1..=n,
/// geometric mean, brevity penalty `exp(1 − r/c)` when `c < r`.
pub fn corpus_bleu<T: Eq + std::hash::Hash + Clone>(pairs: &[(&[T], &[T])], n: usize) -> Scored {
    assert!(n >= 1, "BLEU order must be at least 1");
    let c: usize = pairs.iter().map(|(cand, _)| cand.len()).sum();
    let r: usize = pairs.iter().map(|(_, reference)| reference.len()).sum();
    if c == 0 {
        return Scored::degenerate();
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (m, t) = pairs.iter().fold((0, 0), |(m, t), (cand, reference)| {
            let (mk, tk) = clipped_matches(cand, reference, k);
            (m + mk, t + tk)
        });
        if m == 0 || t == 0 {
            return Scored::ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let bp = if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    Scored::ok(bp * (log_sum / n as f64).exp())
}

/// BLEU-n of a single candidate/reference pair.
pub fn bleu_n<T: Eq + std::hash::Hash + Clone>(
    candidate: &[T],
    reference: &[T],
    n: usize,
) -> Scored {
    corpus_bleu(&[(candidate, reference)], n)
}

/// Length of the longest common subsequence.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA2: f64 = 1.2;

/// LCS F-measure `(1+β²)PR / (R + β²P)`.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> Scored {
    if candidate.is_empty() || reference.is_empty() {
        return Scored::degenerate();
    }
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return Scored::ok(0.0);
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    Scored::ok((1.0 + ROUGE_BETA2) * p * r / (r + ROUGE_BETA2 * p))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn prf_from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Prf {
        precision,
        recall,
        f1,
    }
}

/// Precision/recall/F1 pooled over every (sample, kind) pair.
pub fn micro_ce(predicted: &[ObservationLabels], reference: &[ObservationLabels]) -> Result<Prf> {
    if predicted.len() != reference.len() {
        return Err(Error::Contract(format!(
            "{} predicted label sets for {} references",
            predicted.len(),
            reference.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, r) in predicted.iter().zip(reference) {
        for k in 0..N_KINDS {
            match (p.0[k], r.0[k]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    Ok(prf_from_counts(tp, fp, fn_))
}

/// `(recall, precision)` of `pred` against `truth`; recall is `None` when
/// `truth` is empty.
pub fn saliency_localization(pred: &[usize], truth: &[usize]) -> (Option<f64>, f64) {
    let hits = pred.iter().filter(|i| truth.contains(i)).count();
    let recall = (!truth.is_empty()).then(|| hits as f64 / truth.len() as f64);
    (recall, ratio(hits, pred.len()))
}

/// Fixed-key summary of one evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub ce_precision: f64,
    pub ce_recall: f64,
    pub ce_f1: f64,
    pub sal_recall: f64,
    pub sal_precision: f64,
    pub n_samples: usize,
    /// Names of metrics computed from degenerate (empty) inputs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub degenerate: Vec<String>,
}

/// One evaluated sample: tokenized candidate and reference words, their
/// labels, and optionally predicted and true salient patches.
#[derive(Clone, Debug, Default)]
pub struct EvalItem {
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    pub predicted_labels: ObservationLabels,
    pub reference_labels: ObservationLabels,
    pub salient: Option<Vec<usize>>,
    pub lesion_patches: Vec<usize>,
}

pub fn evaluate(items: &[EvalItem]) -> Result<MetricReport> {
    let pairs: Vec<(&[String], &[String])> = items
        .iter()
        .map(|i| (i.candidate.as_slice(), i.reference.as_slice()))
        .collect();
    let mut degenerate = Vec::new();
    let mut bleu = [0.0; 4];
    for (n, b) in bleu.iter_mut().enumerate() {
        let s = corpus_bleu(&pairs, n + 1);
        if s.degenerate {
            degenerate.push(format!("bleu{}", n + 1));
        }
        *b = s.value;
    }
    let rouges: Vec<Scored> = items
        .iter()
        .map(|i| rouge_l(&i.candidate, &i.reference))
        .collect();
    if rouges.iter().any(|s| s.degenerate) {
        degenerate.push("rougeL".into());
    }
    let rouge = if rouges.is_empty() {
        0.0
    } else {
        rouges.iter().map(|s| s.value).sum::<f64>() / rouges.len() as f64
    };
    let pred: Vec<ObservationLabels> = items.iter().map(|i| i.predicted_labels).collect();
    let refs: Vec<ObservationLabels> = items.iter().map(|i| i.reference_labels).collect();
    let ce = micro_ce(&pred, &refs)?;
    let (mut rec, mut n_rec, mut prec, mut n_prec) = (0.0, 0usize, 0.0, 0usize);
    for i in items {
        if let Some(s) = &i.salient {
            let (r, p) = saliency_localization(s, &i.lesion_patches);
            if let Some(r) = r {
                rec += r;
                n_rec += 1;
                prec += p;
                n_prec += 1;
            }
        }
    }
    Ok(MetricReport {
        bleu1: bleu[0],
        bleu2: bleu[1],
        bleu3: bleu[2],
        bleu4: bleu[3],
        rouge_l: rouge,
        ce_precision: ce.precision,
        ce_recall: ce.recall,
        ce_f1: ce.f1,
        sal_recall: if n_rec == 0 { 0.0 } else { rec / n_rec as f64 },
        sal_precision: if n_prec == 0 {
            0.0
        } else {
            prec / n_prec as f64
        },
        n_samples: items.len(),
        degenerate,
    })
}
