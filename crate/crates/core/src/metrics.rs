//! Corpus BLEU-4, perplexity, emotion accuracy and the ablation table.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DecoderVariant;

const MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-4 on a 0–100 scale: clipped n-gram precisions for
/// n = 1..4 pooled over the corpus, geometric mean with uniform weights and
/// the brevity penalty. No smoothing, so any zero precision gives 0.
pub fn bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Dimension(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if references.is_empty() {
        return Err(Error::Contract("BLEU needs at least one reference".into()));
    }
    if let Some(i) = references.iter().position(Vec::is_empty) {
        return Err(Error::Contract(format!("reference {i} is empty")));
    }
    let mut matched = [0usize; MAX_ORDER];
    let mut total = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let ref_counts = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                matched[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
                total[n - 1] += count;
            }
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_precision: f64 = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (m as f64 / t as f64).ln())
        .sum::<f64>()
        / MAX_ORDER as f64;
    let brevity = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * brevity * log_precision.exp())
}

/// `exp(total_nll / tokens)`.
pub fn perplexity(total_nll: f64, tokens: usize) -> Result<f64> {
    if tokens == 0 {
        return Err(Error::Contract("perplexity over an empty corpus".into()));
    }
    let ppl = (total_nll / tokens as f64).exp();
    if !ppl.is_finite() {
        return Err(Error::NonFinite { op: "perplexity" });
    }
    Ok(ppl)
}

/// Fraction of positions where `predicted == gold`.
pub fn accuracy(predicted: &[usize], gold: &[usize]) -> Result<f64> {
    if predicted.len() != gold.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predicted.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::Contract("accuracy over an empty corpus".into()));
    }
    let hits = predicted.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Which metrics an evaluation computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MetricSet {
    pub acc: bool,
    pub bleu: bool,
    pub ppl: bool,
}

impl MetricSet {
    pub const ALL: MetricSet = MetricSet {
        acc: true,
        bleu: true,
        ppl: true,
    };

    /// Parses a comma-separated list such as `acc,bleu`.
    pub fn parse(list: &str) -> Result<Self> {
        let mut set = MetricSet {
            acc: false,
            bleu: false,
            ppl: false,
        };
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match name {
                "acc" => set.acc = true,
                "bleu" => set.bleu = true,
                "ppl" => set.ppl = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown metric {other:?}; expected acc, bleu or ppl"
                    )))
                }
            }
        }
        if !(set.acc || set.bleu || set.ppl) {
            return Err(Error::Config("no metrics requested".into()));
        }
        Ok(set)
    }
}

/// One evaluation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub variant: DecoderVariant,
    pub step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bleu: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ppl: Option<f64>,
}

impl MetricReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("reports serialize")
    }
}

/// One report per variant, in the canonical variant order.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<MetricReport>,
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"))
}

impl AblationReport {
    /// Orders `reports` by variant; every variant must appear exactly once.
    pub fn new(reports: Vec<MetricReport>) -> Result<Self> {
        let mut rows = Vec::with_capacity(DecoderVariant::ALL.len());
        for variant in DecoderVariant::ALL {
            let mut matching = reports.iter().filter(|r| r.variant == variant);
            let row = matching
                .next()
                .ok_or_else(|| Error::MissingVariant(variant.name().to_string()))?;
            if matching.next().is_some() {
                return Err(Error::Config(format!("variant {variant} given more than once")));
            }
            rows.push(row.clone());
        }
        Ok(Self { rows })
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>8} {:>8} {:>10}\n", "variant", "acc", "bleu", "ppl");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>8} {:>8} {:>10}",
                r.variant.name(),
                cell(r.acc, 4),
                cell(r.bleu, 2),
                cell(r.ppl, 2)
            );
        }
        out
    }

    /// Tab-separated rows with a header, full precision.
    pub fn to_tsv(&self) -> String {
        let full = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        let mut out = String::from("variant\tstep\tacc\tbleu\tppl\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.variant.name(),
                r.step,
                full(r.acc),
                full(r.bleu),
                full(r.ppl)
            );
        }
        out
    }
}
