// SPDX-License-Identifier: MIT OR Apache-2.0

//! Task metrics: binary QA scores and caption hallucination ratios.
//!
//! The hallucination ratios follow the printed formulas: `C_S` counts
//! hallucinated objects over mentioned objects and `C_I` counts sentences
//! with a hallucination over all sentences, both pooled over the corpus.
//! Much of the literature swaps those subscripts.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::synth::Vocab;

/// Confusion counts with `yes` as the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BinaryOutcomes {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl BinaryOutcomes {
    pub fn record(&mut self, predicted: bool, truth: bool) {
        match (predicted, truth) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut o = Self::default();
        for (p, t) in pairs {
            o.record(p, t);
        }
        o
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Accuracy, precision, recall and F1. Undefined ratios are reported as 0.
pub fn binary_metrics(o: &BinaryOutcomes) -> Result<BinaryMetrics> {
    let total = o.total();
    if total == 0 {
        return Err(invalid("outcomes", "no predictions"));
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(o.tp, o.tp + o.fp);
    let recall = ratio(o.tp, o.tp + o.fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(BinaryMetrics {
        accuracy: (o.tp + o.tn) as f64 / total as f64,
        precision,
        recall,
        f1,
    })
}

/// Object classes named anywhere in `tokens`.
pub fn extract_objects(tokens: &[usize], vocab: &Vocab) -> BTreeSet<usize> {
    tokens.iter().filter_map(|&t| vocab.object_class(t)).collect()
}

/// Splits on the period token. A trailing fragment without a period counts
/// as a sentence; the stop token and anything after it are dropped.
pub fn sentences<'a>(tokens: &'a [usize], vocab: &Vocab) -> Vec<&'a [usize]> {
    let end = tokens.iter().position(|&t| t == vocab.stop()).unwrap_or(tokens.len());
    let mut out = Vec::new();
    let mut start = 0;
    for (i, &t) in tokens[..end].iter().enumerate() {
        if t == vocab.period() {
            out.push(&tokens[start..=i]);
            start = i + 1;
        }
    }
    if start < end {
        out.push(&tokens[start..end]);
    }
    out
}

/// One generated caption judged against its image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionJudgment {
    pub mentioned: BTreeSet<usize>,
    pub ground_truth: BTreeSet<usize>,
    pub hallucinated: BTreeSet<usize>,
    /// Per sentence: does it name an absent object?
    pub sentence_flags: Vec<bool>,
}

impl CaptionJudgment {
    pub fn new(tokens: &[usize], ground_truth: BTreeSet<usize>, vocab: &Vocab) -> Self {
        let sentences = sentences(tokens, vocab);
        let body: Vec<usize> = sentences.iter().flat_map(|s| s.iter().copied()).collect();
        let mentioned = extract_objects(&body, vocab);
        let hallucinated = mentioned.difference(&ground_truth).copied().collect();
        let sentence_flags = sentences
            .iter()
            .map(|s| extract_objects(s, vocab).iter().any(|c| !ground_truth.contains(c)))
            .collect();
        Self {
            mentioned,
            ground_truth,
            hallucinated,
            sentence_flags,
        }
    }
}

/// Corpus-pooled hallucination ratios. A ratio is `None` when its
/// denominator is empty.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Chair {
    pub c_s: Option<f64>,
    pub c_i: Option<f64>,
    pub n_captions: usize,
    pub n_mentioned: usize,
    pub n_hallucinated: usize,
    pub n_sentences: usize,
    pub n_flagged_sentences: usize,
}

pub fn chair(judgments: &[CaptionJudgment]) -> Chair {
    let mut c = Chair {
        n_captions: judgments.len(),
        ..Chair::default()
    };
    for j in judgments {
        c.n_mentioned += j.mentioned.len();
        c.n_hallucinated += j.hallucinated.len();
        c.n_sentences += j.sentence_flags.len();
        c.n_flagged_sentences += j.sentence_flags.iter().filter(|f| **f).count();
    }
    let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    c.c_s = ratio(c.n_hallucinated, c.n_mentioned);
    c.c_i = ratio(c.n_flagged_sentences, c.n_sentences);
    c
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}
