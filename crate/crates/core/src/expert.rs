//! Stand-in expert inference engine.
//!
//! Each disease is scored with a smoothed naive-Bayes log-likelihood of the
//! observed findings:
//!
//! ```text
//! score(d) = Σ_{f ∈ pos} ln(ε + FREQ(d,f)) + Σ_{f ∈ neg} ln(ε + 1 − FREQ(d,f))
//! ```
//!
//! with ε = 1e-3. A present demographic finding that the disease never shows
//! (FREQ = 0) excludes the disease outright. The top-k surviving diseases are
//! kept and their raw scores are softmax-normalized among themselves.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;

pub const SMOOTHING: f64 = 1e-3;
pub const DEFAULT_DDX_TOP_K: usize = 5;

/// Score of an excluded disease.
pub const EXCLUDED: f64 = f64::NEG_INFINITY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdxEntry {
    pub disease: String,
    pub p: f64,
}

/// Ranked `(disease, probability)` pairs summing to one.
///
/// `raw_scores` runs parallel to `entries` when the differential came from
/// the expert engine and is empty otherwise.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DifferentialDiagnosis {
    pub entries: Vec<DdxEntry>,
    pub raw_scores: Vec<f64>,
}

impl DifferentialDiagnosis {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, disease: &str) -> bool {
        self.entries.iter().any(|e| e.disease == disease)
    }

    pub fn probability(&self, disease: &str) -> f64 {
        self.entries
            .iter()
            .find(|e| e.disease == disease)
            .map_or(0.0, |e| e.p)
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.p).sum()
    }

    /// Highest-probability disease; ties go to the smaller id.
    pub fn argmax(&self) -> Option<&str> {
        self.entries
            .iter()
            .max_by(|a, b| a.p.total_cmp(&b.p).then_with(|| b.disease.cmp(&a.disease)))
            .map(|e| e.disease.as_str())
    }
}

/// Log-likelihood score of one disease by index. Callers guarantee the
/// indices are valid and `pos`/`neg` are disjoint.
pub(crate) fn score_indices(kb: &KnowledgeBase, disease: usize, pos: &[usize], neg: &[usize]) -> f64 {
    let findings = kb.findings();
    let mut score = 0.0;
    for &f in pos {
        let freq = kb.freq(disease, f);
        if freq == 0.0 && findings[f].is_demographic() {
            return EXCLUDED;
        }
        score += (SMOOTHING + freq).ln();
    }
    for &f in neg {
        score += (SMOOTHING + 1.0 - kb.freq(disease, f)).ln();
    }
    score
}

pub(crate) fn resolve_findings<S: AsRef<str>>(
    kb: &KnowledgeBase,
    pos: &[S],
    neg: &[S],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let pos: Vec<usize> = pos
        .iter()
        .map(|f| kb.finding_index(f.as_ref()))
        .collect::<Result<_>>()?;
    let neg: Vec<usize> = neg
        .iter()
        .map(|f| kb.finding_index(f.as_ref()))
        .collect::<Result<_>>()?;
    check_disjoint(kb, &pos, &neg)?;
    Ok((pos, neg))
}

fn check_disjoint(kb: &KnowledgeBase, pos: &[usize], neg: &[usize]) -> Result<()> {
    let pos_set: HashSet<usize> = pos.iter().copied().collect();
    match neg.iter().find(|f| pos_set.contains(f)) {
        Some(&f) => Err(Error::Overlap(kb.findings()[f].id.clone())),
        None => Ok(()),
    }
}

/// Score disease `disease` against present findings `pos` and explicitly
/// absent findings `neg`. Returns [`EXCLUDED`] for a hard demographic
/// exclusion.
pub fn score_disease<S: AsRef<str>>(
    kb: &KnowledgeBase,
    disease: &str,
    pos: &[S],
    neg: &[S],
) -> Result<f64> {
    let d = kb.disease_index(disease)?;
    let (pos, neg) = resolve_findings(kb, pos, neg)?;
    Ok(score_indices(kb, d, &pos, &neg))
}

/// Numerically stable softmax. Excluded (−∞) scores map to probability 0.
pub fn softmax_normalize(scores: &[f64]) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Empty("softmax input"));
    }
    if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::NotNormalizable("score is NaN or +inf".into()));
    }
    let max = scores
        .iter()
        .copied()
        .filter(|s| s.is_finite())
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoFiniteScore);
    }
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Differential over the `k` best-scoring diseases.
pub fn expert_inference<S: AsRef<str>>(
    kb: &KnowledgeBase,
    pos: &[S],
    neg: &[S],
    k: usize,
) -> Result<DifferentialDiagnosis> {
    let (pos, neg) = resolve_findings(kb, pos, neg)?;
    infer_indices(kb, &pos, &neg, k)
}

pub(crate) fn infer_indices(
    kb: &KnowledgeBase,
    pos: &[usize],
    neg: &[usize],
    k: usize,
) -> Result<DifferentialDiagnosis> {
    if k == 0 {
        return Err(Error::Config("ddx top-k must be at least 1".into()));
    }
    let diseases = kb.diseases();
    let mut scored: Vec<(usize, f64)> = (0..diseases.len())
        .map(|d| (d, score_indices(kb, d, pos, neg)))
        .filter(|(_, s)| s.is_finite())
        .collect();
    if scored.is_empty() {
        return Err(Error::EmptyDifferential);
    }
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| diseases[a.0].id.cmp(&diseases[b.0].id))
    });
    scored.truncate(k);

    let raw: Vec<f64> = scored.iter().map(|&(_, s)| s).collect();
    let probs = softmax_normalize(&raw)?;

    let mut ddx = DifferentialDiagnosis::default();
    for ((d, s), p) in scored.into_iter().zip(probs) {
        // far-behind diseases can underflow to zero mass
        if p > 0.0 {
            ddx.entries.push(DdxEntry {
                disease: diseases[d].id.clone(),
                p,
            });
            ddx.raw_scores.push(s);
        }
    }
    Ok(ddx)
}
