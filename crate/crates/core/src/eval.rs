//! Top-k accuracy and target-disease-in-top-k metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::CaseSet;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::expert;
use crate::kb::KnowledgeBase;
use crate::model::{self, encode_findings, Mode, ModelParameters};
use crate::simulate::ClinicalCase;

/// Number of ranked entries kept in each per-case record.
pub const RECORD_DEPTH: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TruthMode {
    /// Most probable disease of the case's label.
    #[default]
    Argmax,
    /// The disease a simulated case was generated from. Cases without one
    /// fall back to the label argmax.
    SeedDisease,
}

/// Argmax of the case's differential, ties to the smaller disease id.
pub fn truth_label(case: &ClinicalCase) -> Result<String> {
    case.ddx
        .argmax()
        .map(str::to_string)
        .ok_or(Error::Empty("differential"))
}

pub fn truth_for(case: &ClinicalCase, mode: TruthMode) -> Result<String> {
    match (mode, &case.seed_disease) {
        (TruthMode::SeedDisease, Some(d)) => Ok(d.clone()),
        _ => truth_label(case),
    }
}

/// Fraction of cases whose truth is among the first `k` predictions.
pub fn top_k_accuracy<S: AsRef<str>>(predictions: &[Vec<S>], truths: &[S], k: usize) -> Result<f64> {
    if predictions.len() != truths.len() {
        return Err(Error::LengthMismatch(predictions.len(), truths.len()));
    }
    if predictions.is_empty() {
        return Err(Error::Empty("predictions"));
    }
    let hits = predictions
        .iter()
        .zip(truths)
        .filter(|(p, t)| p.iter().take(k).any(|d| d.as_ref() == t.as_ref()))
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Fraction of ranked lists containing `target` within the first `k`.
pub fn target_in_top_k<S: AsRef<str>>(predictions: &[Vec<S>], target: &str, k: usize) -> f64 {
    if predictions.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .filter(|p| p.iter().take(k).any(|d| d.as_ref() == target))
        .count();
    hits as f64 / predictions.len() as f64
}

/// A ranked differential with the number of input findings the diagnoser
/// could not use.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub ranked: Vec<(String, f64)>,
    pub skipped: usize,
}

/// Anything that turns observed findings into a ranked differential.
pub trait Diagnoser: Sync {
    fn diagnose(&self, pos: &BTreeSet<String>, neg: &BTreeSet<String>) -> Result<Ranking>;
}

/// The trained model, run without dropout. Ranks every disease.
pub struct ModelDiagnoser<'a>(pub &'a ModelParameters);

impl Diagnoser for ModelDiagnoser<'_> {
    fn diagnose(&self, pos: &BTreeSet<String>, neg: &BTreeSet<String>) -> Result<Ranking> {
        let p = self.0;
        let enc = encode_findings(&p.vocab, pos, neg);
        let out = model::forward(p, &enc.input, Mode::Infer)?;
        Ok(Ranking {
            ranked: model::rank(&p.vocab, &out, p.dims.diseases),
            skipped: enc.skipped,
        })
    }
}

/// The expert engine, keeping its `k` best diseases.
pub struct ExpertDiagnoser<'a> {
    pub kb: &'a KnowledgeBase,
    pub k: usize,
}

impl Diagnoser for ExpertDiagnoser<'_> {
    fn diagnose(&self, pos: &BTreeSet<String>, neg: &BTreeSet<String>) -> Result<Ranking> {
        let known = |s: &BTreeSet<String>| -> Vec<usize> {
            s.iter().filter_map(|f| self.kb.finding_index(f).ok()).collect()
        };
        let (p, n) = (known(pos), known(neg));
        let skipped = pos.len() + neg.len() - p.len() - n.len();
        let ranked = match expert::infer_indices(self.kb, &p, &n, self.k) {
            Ok(ddx) => ddx.entries.into_iter().map(|e| (e.disease, e.p)).collect(),
            Err(Error::EmptyDifferential) => Vec::new(),
            Err(e) => return Err(e),
        };
        Ok(Ranking { ranked, skipped })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub id: String,
    pub truth: String,
    /// 1-based rank of the truth in the diagnoser's full ranking.
    pub truth_rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_rank: Option<usize>,
    pub top: Vec<(String, f64)>,
    /// Hit flags, parallel to the report's `ks`.
    pub hits: Vec<bool>,
    pub skipped_findings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub ks: Vec<usize>,
    pub n_cases: usize,
    pub truth: TruthMode,
    pub accuracy: BTreeMap<usize, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_disease: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_in_top_k: Option<BTreeMap<usize, f64>>,
    pub skipped_findings: usize,
    pub cases_with_skips: usize,
    pub records: Vec<CaseOutcome>,
}

impl EvalReport {
    /// Recompute top-k accuracy from the per-case records.
    pub fn recompute_accuracy(&self, k: usize) -> f64 {
        let hits = self
            .records
            .iter()
            .filter(|r| r.truth_rank.is_some_and(|rank| rank <= k))
            .count();
        hits as f64 / self.records.len() as f64
    }
}

/// Evaluate `diagnoser` over `cases` at every cutoff in `ks`.
pub fn evaluate(
    diagnoser: &dyn Diagnoser,
    variant: &str,
    cases: &CaseSet,
    ks: &[usize],
    truth: TruthMode,
    target: Option<&str>,
    exec: Execution,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Empty("evaluation case set"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("k values must be positive".into()));
    }
    let outcomes: Vec<Result<(Ranking, String)>> = exec.map_slice(&cases.cases, |c| {
        let ranking = diagnoser.diagnose(&c.pos, &c.neg)?;
        Ok((ranking, truth_for(c, truth)?))
    });

    let mut predictions = Vec::with_capacity(cases.len());
    let mut truths = Vec::with_capacity(cases.len());
    let mut records = Vec::with_capacity(cases.len());
    let mut skipped_findings = 0;
    let mut cases_with_skips = 0;
    for (case, outcome) in cases.cases.iter().zip(outcomes) {
        let (ranking, truth_id) = outcome?;
        let ids: Vec<String> = ranking.ranked.iter().map(|(d, _)| d.clone()).collect();
        let rank_of = |d: &str| ids.iter().position(|x| x == d).map(|i| i + 1);
        skipped_findings += ranking.skipped;
        cases_with_skips += usize::from(ranking.skipped > 0);
        records.push(CaseOutcome {
            id: case.id.clone(),
            truth: truth_id.clone(),
            truth_rank: rank_of(&truth_id),
            target_rank: target.and_then(rank_of),
            top: ranking.ranked.iter().take(RECORD_DEPTH).cloned().collect(),
            hits: ks.iter().map(|&k| ids.iter().take(k).any(|d| *d == truth_id)).collect(),
            skipped_findings: ranking.skipped,
        });
        predictions.push(ids);
        truths.push(truth_id);
    }
    if skipped_findings > 0 {
        log::warn!(
            "{variant}: skipped {skipped_findings} unknown finding occurrence(s) in {cases_with_skips} case(s)"
        );
    }

    let mut accuracy = BTreeMap::new();
    for &k in ks {
        accuracy.insert(k, top_k_accuracy(&predictions, &truths, k)?);
    }
    let target_in = target.map(|t| {
        ks.iter()
            .map(|&k| (k, target_in_top_k(&predictions, t, k)))
            .collect()
    });

    Ok(EvalReport {
        variant: variant.to_string(),
        ks: ks.to_vec(),
        n_cases: cases.len(),
        truth,
        accuracy,
        target_disease: target.map(str::to_string),
        target_in_top_k: target_in,
        skipped_findings,
        cases_with_skips,
        records,
    })
}

pub fn evaluate_model(
    p: &ModelParameters,
    cases: &CaseSet,
    ks: &[usize],
    truth: TruthMode,
    target: Option<&str>,
    exec: Execution,
) -> Result<EvalReport> {
    evaluate(&ModelDiagnoser(p), "model", cases, ks, truth, target, exec)
}

/// Human-readable table: one row per k, one column per report.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut ks: BTreeSet<usize> = BTreeSet::new();
    for r in reports {
        ks.extend(r.ks.iter().copied());
    }
    let width = reports
        .iter()
        .map(|r| r.variant.len())
        .max()
        .unwrap_or(0)
        .max(8);
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "metric");
    for r in reports {
        let _ = write!(out, " {:>width$}", r.variant);
    }
    out.push('\n');

    let row = |out: &mut String, label: String, get: &dyn Fn(&EvalReport) -> Option<f64>| {
        let _ = write!(out, "{label:<16}");
        for r in reports {
            match get(r) {
                Some(v) => {
                    let _ = write!(out, " {:>width$}", format!("{:.1}%", 100.0 * v));
                }
                None => {
                    let _ = write!(out, " {:>width$}", "-");
                }
            }
        }
        out.push('\n');
    };
    for &k in &ks {
        row(&mut out, format!("top-{k}"), &|r| r.accuracy.get(&k).copied());
    }
    let targets: BTreeSet<&str> = reports.iter().filter_map(|r| r.target_disease.as_deref()).collect();
    for t in targets {
        for &k in &ks {
            row(&mut out, format!("{t}@{k}"), &|r| {
                if r.target_disease.as_deref() != Some(t) {
                    return None;
                }
                r.target_in_top_k.as_ref().and_then(|m| m.get(&k).copied())
            });
        }
    }
    let _ = write!(out, "{:<16}", "cases");
    for r in reports {
        let _ = write!(out, " {:>width$}", r.n_cases);
    }
    out.push('\n');
    out
}
