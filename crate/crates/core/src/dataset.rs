//! Case files, vocabularies and train/test splits.
//!
//! A case file holds one JSON object per line:
//!
//! ```json
//! {"id":"sim-0","pos":["cough","fever"],"neg":["rash"],"ddx":[{"disease":"flu","p":0.9},{"disease":"cold","p":0.1}],"source":"expert_sim","seed_disease":"flu"}
//! ```
//!
//! Probabilities are written in shortest round-trip form, so reading back a
//! written file reproduces every value bit for bit.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{DdxEntry, DifferentialDiagnosis};
use crate::kb::KnowledgeBase;
use crate::rng;
use crate::simulate::{CaseSource, ClinicalCase};

const SPLIT_STREAM_TAG: u64 = 0x5350_4c54; // "SPLT"

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CaseSet {
    pub cases: Vec<ClinicalCase>,
    pub provenance: Vec<String>,
}

impl CaseSet {
    pub fn new(cases: Vec<ClinicalCase>) -> Result<Self> {
        check_unique_ids(&cases)?;
        Ok(Self { cases, provenance: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }
}

fn check_unique_ids(cases: &[ClinicalCase]) -> Result<()> {
    let mut seen = HashSet::new();
    for c in cases {
        if !seen.insert(c.id.as_str()) {
            return Err(Error::DuplicateCase(c.id.clone()));
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaseRecord {
    id: String,
    pos: Vec<String>,
    neg: Vec<String>,
    ddx: Vec<DdxEntry>,
    source: CaseSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed_disease: Option<String>,
}

/// Normalize non-negative weights into a differential. Entries are ranked
/// by descending probability, ties by ascending disease id; zero weights
/// are dropped.
pub fn normalize_ddx<S: AsRef<str>>(weights: &[(S, f64)]) -> Result<DifferentialDiagnosis> {
    let mut seen = HashSet::new();
    for (d, w) in weights {
        if !w.is_finite() || *w < 0.0 {
            return Err(Error::NotNormalizable(format!(
                "weight {w} for `{}` is not a non-negative number",
                d.as_ref()
            )));
        }
        if !seen.insert(d.as_ref()) {
            return Err(Error::NotNormalizable(format!("duplicate disease `{}`", d.as_ref())));
        }
    }
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    if total <= 0.0 {
        return Err(Error::NotNormalizable("all weights are zero".into()));
    }
    Ok(ranked(weights.iter().map(|(d, w)| (d.as_ref(), w / total))))
}

fn ranked<'a>(entries: impl Iterator<Item = (&'a str, f64)>) -> DifferentialDiagnosis {
    let mut entries: Vec<DdxEntry> = entries
        .filter(|(_, p)| *p > 0.0)
        .map(|(d, p)| DdxEntry { disease: d.to_string(), p })
        .collect();
    entries.sort_by(|a, b| b.p.total_cmp(&a.p).then_with(|| a.disease.cmp(&b.disease)));
    DifferentialDiagnosis { entries, raw_scores: Vec::new() }
}

fn record_to_case(rec: CaseRecord) -> std::result::Result<ClinicalCase, String> {
    let pos: BTreeSet<String> = rec.pos.into_iter().collect();
    let neg: BTreeSet<String> = rec.neg.into_iter().collect();
    if let Some(f) = pos.intersection(&neg).next() {
        return Err(format!("finding `{f}` is both present and absent"));
    }
    let weights: Vec<(&str, f64)> = rec.ddx.iter().map(|e| (e.disease.as_str(), e.p)).collect();
    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    // already-normalized labels are kept verbatim so files round-trip exactly
    let ddx = if (total - 1.0).abs() <= 1e-12 && weights.iter().all(|(_, w)| w.is_finite() && *w >= 0.0) {
        let mut seen = HashSet::new();
        if let Some((d, _)) = weights.iter().find(|(d, _)| !seen.insert(*d)) {
            return Err(format!("differential weights are not normalizable: duplicate disease `{d}`"));
        }
        ranked(weights.into_iter())
    } else {
        normalize_ddx(&weights).map_err(|e| e.to_string())?
    };
    Ok(ClinicalCase {
        id: rec.id,
        pos,
        neg,
        ddx,
        source: rec.source,
        seed_disease: rec.seed_disease,
    })
}

/// Parse a line-delimited case document. Blank lines are ignored.
pub fn read_cases(text: &str) -> Result<CaseSet> {
    let mut cases = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaseRecord = serde_json::from_str(line).map_err(|e| Error::CaseLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let case = record_to_case(rec).map_err(|message| Error::CaseLine { line: line_no, message })?;
        if !seen.insert(case.id.clone()) {
            return Err(Error::CaseLine {
                line: line_no,
                message: format!("duplicate case id `{}`", case.id),
            });
        }
        cases.push(case);
    }
    Ok(CaseSet { cases, provenance: Vec::new() })
}

pub fn read_cases_file(path: impl AsRef<Path>) -> Result<CaseSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut set = read_cases(&text)?;
    set.provenance.push(
        path.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string()),
    );
    Ok(set)
}

pub fn write_case(case: &ClinicalCase) -> String {
    let rec = CaseRecord {
        id: case.id.clone(),
        pos: case.pos.iter().cloned().collect(),
        neg: case.neg.iter().cloned().collect(),
        ddx: case.ddx.entries.clone(),
        source: case.source,
        seed_disease: case.seed_disease.clone(),
    };
    serde_json::to_string(&rec).expect("case record serializes")
}

/// Serialize a case set, one record per line with a trailing newline.
pub fn write_cases(cases: &[ClinicalCase]) -> String {
    let mut out = String::new();
    for c in cases {
        out.push_str(&write_case(c));
        out.push('\n');
    }
    out
}

/// Concatenate case sets, preserving order and provenance.
pub fn merge(sets: &[CaseSet]) -> Result<CaseSet> {
    let cases: Vec<ClinicalCase> = sets.iter().flat_map(|s| s.cases.iter().cloned()).collect();
    check_unique_ids(&cases)?;
    Ok(CaseSet {
        cases,
        provenance: sets.iter().flat_map(|s| s.provenance.iter().cloned()).collect(),
    })
}

/// Seeded shuffle, then the first `⌊fraction·N⌋` cases go to training.
pub fn split_train_test(cs: &CaseSet, train_fraction: f64, seed: u64) -> Result<(CaseSet, CaseSet)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    if cs.len() < 2 {
        return Err(Error::Config("need at least two cases to split".into()));
    }
    let mut order: Vec<usize> = (0..cs.len()).collect();
    order.shuffle(&mut rng::stream(rng::derive_seed(seed, SPLIT_STREAM_TAG), 0));
    let n_train = (train_fraction * cs.len() as f64 + 1e-9).floor() as usize;
    let pick = |idx: &[usize]| CaseSet {
        cases: idx.iter().map(|&i| cs.cases[i].clone()).collect(),
        provenance: cs.provenance.clone(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

/// Canonical index assignment for findings and diseases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    findings: Vec<String>,
    diseases: Vec<String>,
    demographic_ids: BTreeSet<String>,
    mutex_groups: BTreeMap<String, String>,
    finding_index: HashMap<String, usize>,
    disease_index: HashMap<String, usize>,
    /// Vocabulary indices of demographic findings, ascending.
    demographics: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabularyRepr {
    findings: Vec<String>,
    diseases: Vec<String>,
    demographic_ids: BTreeSet<String>,
    mutex_groups: BTreeMap<String, String>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::new(r.findings, r.diseases, r.demographic_ids, r.mutex_groups)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            findings: v.findings,
            diseases: v.diseases,
            demographic_ids: v.demographic_ids,
            mutex_groups: v.mutex_groups,
        }
    }
}

impl Vocabulary {
    pub fn new(
        findings: Vec<String>,
        diseases: Vec<String>,
        demographic_ids: BTreeSet<String>,
        mutex_groups: BTreeMap<String, String>,
    ) -> Result<Self> {
        let index = |ids: &[String], what: &str| -> Result<HashMap<String, usize>> {
            let mut map = HashMap::with_capacity(ids.len());
            for (i, id) in ids.iter().enumerate() {
                if map.insert(id.clone(), i).is_some() {
                    return Err(Error::Vocabulary(format!("duplicate {what} `{id}` in vocabulary")));
                }
            }
            Ok(map)
        };
        let finding_index = index(&findings, "finding")?;
        let disease_index = index(&diseases, "disease")?;
        if let Some(d) = demographic_ids.iter().find(|d| !finding_index.contains_key(*d)) {
            return Err(Error::Vocabulary(format!("demographic id `{d}` is not a vocabulary finding")));
        }
        let demographics = findings
            .iter()
            .enumerate()
            .filter(|(_, f)| demographic_ids.contains(*f))
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            findings,
            diseases,
            demographic_ids,
            mutex_groups,
            finding_index,
            disease_index,
            demographics,
        })
    }

    pub fn findings(&self) -> &[String] {
        &self.findings
    }

    pub fn diseases(&self) -> &[String] {
        &self.diseases
    }

    pub fn demographic_ids(&self) -> &BTreeSet<String> {
        &self.demographic_ids
    }

    pub fn mutex_group(&self, finding: &str) -> Option<&str> {
        self.mutex_groups.get(finding).map(String::as_str)
    }

    pub fn finding_index(&self, id: &str) -> Option<usize> {
        self.finding_index.get(id).copied()
    }

    pub fn disease_index(&self, id: &str) -> Option<usize> {
        self.disease_index.get(id).copied()
    }

    pub fn is_demographic(&self, finding: usize) -> bool {
        self.demographics.binary_search(&finding).is_ok()
    }

    /// Position of a demographic finding among the demographic rows.
    pub fn demographic_slot(&self, finding: usize) -> Option<usize> {
        self.demographics.binary_search(&finding).ok()
    }

    /// Vocabulary finding indices of the demographic findings.
    pub fn demographics(&self) -> &[usize] {
        &self.demographics
    }

    pub fn n_findings(&self) -> usize {
        self.findings.len()
    }

    pub fn n_diseases(&self) -> usize {
        self.diseases.len()
    }

    pub fn n_demographics(&self) -> usize {
        self.demographics.len()
    }
}

/// Build the finding and disease universes.
///
/// Findings are every finding mentioned by a case (plus all KB findings when
/// a KB is supplied), intersected with `restrict_to` when given. Diseases are
/// every disease named in a differential. Both are sorted by id.
pub fn build_vocabulary(
    sets: &[&CaseSet],
    kb: Option<&KnowledgeBase>,
    restrict_to: Option<&BTreeSet<String>>,
) -> Result<Vocabulary> {
    let mut findings: BTreeSet<String> = BTreeSet::new();
    let mut diseases: BTreeSet<String> = BTreeSet::new();
    for set in sets {
        for case in &set.cases {
            findings.extend(case.pos.iter().cloned());
            findings.extend(case.neg.iter().cloned());
            diseases.extend(case.ddx.entries.iter().map(|e| e.disease.clone()));
        }
    }
    if let Some(kb) = kb {
        findings.extend(kb.findings().iter().map(|f| f.id.clone()));
    }
    if let Some(keep) = restrict_to {
        findings.retain(|f| keep.contains(f));
    }
    if diseases.is_empty() {
        return Err(Error::Vocabulary("no diseases found in the case sets".into()));
    }

    let mut demographic_ids = BTreeSet::new();
    let mut mutex_groups = BTreeMap::new();
    if let Some(kb) = kb {
        for f in kb.findings() {
            if !findings.contains(&f.id) {
                continue;
            }
            if f.is_demographic() {
                demographic_ids.insert(f.id.clone());
            }
            if let Some(g) = &f.mutex_group {
                mutex_groups.insert(f.id.clone(), g.clone());
            }
        }
    }
    Vocabulary::new(
        findings.into_iter().collect(),
        diseases.into_iter().collect(),
        demographic_ids,
        mutex_groups,
    )
}
