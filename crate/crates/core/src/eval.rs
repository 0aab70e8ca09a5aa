//! Exact-match accuracy and ROUGE-1/2/L F1.
//!
//! Corpus scores are means of per-example scores.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of positions where the hypothesis equals the reference.
pub fn exact_match<T: PartialEq>(refs: &[T], hyps: &[T]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::contract(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::contract("exact match over an empty list"));
    }
    let hits = refs.iter().zip(hyps).filter(|(r, h)| r == h).count();
    Ok(hits as f64 / refs.len() as f64)
}

fn f1(overlap: usize, hyp_total: usize, ref_total: usize) -> f64 {
    if overlap == 0 || hyp_total == 0 || ref_total == 0 {
        return 0.0;
    }
    let p = overlap as f64 / hyp_total as f64;
    let r = overlap as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-n F1 with clipped n-gram counts; 0 when either side has no n-grams.
pub fn rouge_n<T: AsRef<str>>(reference: &[T], hypothesis: &[T], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("ROUGE-n needs n ≥ 1"));
    }
    let r = ngram_counts(reference, n);
    let h = ngram_counts(hypothesis, n);
    let overlap = h.iter().map(|(g, c)| (*c).min(r.get(g).copied().unwrap_or(0))).sum();
    Ok(f1(overlap, h.values().sum(), r.values().sum()))
}

/// Longest common subsequence length.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (k, y) in b.iter().enumerate() {
            cur[k + 1] = if x == y { prev[k] + 1 } else { cur[k].max(prev[k + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 from the longest common subsequence.
pub fn rouge_l<T: AsRef<str>>(reference: &[T], hypothesis: &[T]) -> f64 {
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    f1(lcs_len(&r, &h), h.len(), r.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Exact,
    Rouge,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub reference: String,
    pub hypothesis: String,
    pub correct: bool,
    pub rouge_1: f64,
    pub rouge_2: f64,
    pub rouge_l: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub metric: Metric,
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exact_match: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rouge_l: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub summary: EvalSummary,
}

fn mean(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    v.sum::<f64>() / n as f64
}

impl EvalReport {
    /// Scores aligned reference/hypothesis strings; `tokenize` splits each for
    /// ROUGE and exact comparison.
    pub fn compute(
        refs: &[String],
        hyps: &[String],
        metric: Metric,
        tokenize: impl Fn(&str) -> Vec<String>,
    ) -> Result<Self> {
        let ref_toks: Vec<Vec<String>> = refs.iter().map(|s| tokenize(s)).collect();
        let hyp_toks: Vec<Vec<String>> = hyps.iter().map(|s| tokenize(s)).collect();
        let accuracy = exact_match(&ref_toks, &hyp_toks)?;
        let mut records = Vec::with_capacity(refs.len());
        for (k, (r, h)) in ref_toks.iter().zip(&hyp_toks).enumerate() {
            records.push(EvalRecord {
                reference: refs[k].clone(),
                hypothesis: hyps[k].clone(),
                correct: r == h,
                rouge_1: rouge_n(r, h, 1)?,
                rouge_2: rouge_n(r, h, 2)?,
                rouge_l: rouge_l(r, h),
            });
        }
        let n = records.len();
        let summary = match metric {
            Metric::Exact => EvalSummary {
                metric,
                count: n,
                exact_match: Some(accuracy),
                rouge_1: None,
                rouge_2: None,
                rouge_l: None,
            },
            Metric::Rouge => EvalSummary {
                metric,
                count: n,
                exact_match: None,
                rouge_1: Some(mean(records.iter().map(|r| r.rouge_1), n)),
                rouge_2: Some(mean(records.iter().map(|r| r.rouge_2), n)),
                rouge_l: Some(mean(records.iter().map(|r| r.rouge_l), n)),
            },
        };
        Ok(EvalReport { records, summary })
    }

    /// Per-example CSV with the columns of the chosen metric.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Data(format!("writing report: {e}"));
        match self.summary.metric {
            Metric::Exact => {
                w.write_record(["index", "reference", "hypothesis", "correct"]).map_err(csv_err)?;
                for (k, r) in self.records.iter().enumerate() {
                    w.write_record([&(k + 1).to_string(), &r.reference, &r.hypothesis, &r.correct.to_string()])
                        .map_err(csv_err)?;
                }
            }
            Metric::Rouge => {
                w.write_record(["index", "reference", "hypothesis", "rouge_1", "rouge_2", "rouge_l"])
                    .map_err(csv_err)?;
                for (k, r) in self.records.iter().enumerate() {
                    w.write_record([
                        &(k + 1).to_string(),
                        &r.reference,
                        &r.hypothesis,
                        &r.rouge_1.to_string(),
                        &r.rouge_2.to_string(),
                        &r.rouge_l.to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        let bytes = w.into_inner().map_err(|e| Error::Data(format!("writing report: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields"))
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }
}

/// Output strings from a reference or hypothesis file: the last TAB field of
/// each line, or the `output` of a JSON decode record. Blank lines are skipped.
pub fn read_outputs(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            let v: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: n + 1,
                message: e.to_string(),
            })?;
            let s = v.get("output").and_then(|o| o.as_str()).ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                line: n + 1,
                message: "record has no string `output`".into(),
            })?;
            out.push(s.to_string());
        } else {
            out.push(line.rsplit('\t').next().unwrap_or("").to_string());
        }
    }
    Ok(out)
}
