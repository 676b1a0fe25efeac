//! Expert knowledge base: diseases, findings and disease–finding frequencies.
//!
//! The on-disk form is a JSON document with three arrays:
//!
//! ```json
//! {
//!   "diseases":    [{"id": "flu", "name": "Influenza"}],
//!   "findings":    [{"id": "fever", "name": "Fever", "kind": "clinical"},
//!                   {"id": "male", "name": "Male", "kind": "demographic", "mutex_group": "sex"}],
//!   "frequencies": [{"disease": "flu", "finding": "fever", "freq": 0.8}]
//! }
//! ```
//!
//! Unknown fields are rejected. A pair missing from `frequencies` has
//! frequency exactly zero.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diseases with fewer nonzero clinical findings than this get a warning
/// from [`validate_knowledge_base`]; case simulation elicits at least five.
pub const DEFAULT_MIN_FINDINGS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FindingKind {
    Demographic,
    Clinical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Finding {
    pub id: String,
    pub name: String,
    pub kind: FindingKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mutex_group: Option<String>,
}

impl Finding {
    pub fn is_demographic(&self) -> bool {
        self.kind == FindingKind::Demographic
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Disease {
    pub id: String,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyEntry {
    pub disease: String,
    pub finding: String,
    pub freq: f64,
}

/// The unchecked document form of a knowledge base.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KbDocument {
    pub diseases: Vec<Disease>,
    pub findings: Vec<Finding>,
    pub frequencies: Vec<FrequencyEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Issue {
    pub severity: Severity,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{tag}: {}: {}", self.location, self.message)
    }
}

/// Result of checking a knowledge base. Valid iff there are no errors;
/// warnings never make a document invalid.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty() && self.warnings.is_empty()
    }

    fn error(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.errors.push(Issue {
            severity: Severity::Error,
            location: location.into(),
            message: message.into(),
        });
    }

    fn warning(&mut self, location: impl Into<String>, message: impl Into<String>) {
        self.warnings.push(Issue {
            severity: Severity::Warning,
            location: location.into(),
            message: message.into(),
        });
    }

    pub fn issues(&self) -> impl Iterator<Item = &Issue> {
        self.errors.iter().chain(self.warnings.iter())
    }
}

impl KbDocument {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(Error::from_json)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("knowledge base serializes")
    }

    /// Check every invariant, collecting all violations rather than
    /// stopping at the first.
    pub fn validate(&self, min_findings: usize) -> ValidationReport {
        let mut report = ValidationReport::default();

        let mut disease_ids = HashSet::new();
        for (i, d) in self.diseases.iter().enumerate() {
            let loc = format!("diseases[{i}]");
            if d.id.is_empty() {
                report.error(&loc, "empty disease id");
            } else if !disease_ids.insert(d.id.as_str()) {
                report.error(&loc, format!("duplicate disease id `{}`", d.id));
            }
        }

        let mut finding_ids = HashMap::new();
        for (i, f) in self.findings.iter().enumerate() {
            let loc = format!("findings[{i}]");
            if f.id.is_empty() {
                report.error(&loc, "empty finding id");
            } else if finding_ids.insert(f.id.as_str(), f).is_some() {
                report.error(&loc, format!("duplicate finding id `{}`", f.id));
            }
            if f.is_demographic() && f.mutex_group.is_none() {
                report.error(
                    &loc,
                    format!("demographic finding `{}` without mutex_group", f.id),
                );
            }
        }

        let mut seen_pairs = HashSet::new();
        let mut nonzero_clinical: HashMap<&str, usize> = HashMap::new();
        for (i, e) in self.frequencies.iter().enumerate() {
            let loc = format!("frequencies[{i}]");
            if !(0.0..=1.0).contains(&e.freq) {
                report.error(
                    &loc,
                    format!("frequency out of range: {} not in [0, 1]", e.freq),
                );
            }
            let known_disease = disease_ids.contains(e.disease.as_str());
            if !known_disease {
                report.error(&loc, format!("dangling disease reference `{}`", e.disease));
            }
            let finding = finding_ids.get(e.finding.as_str());
            if finding.is_none() {
                report.error(&loc, format!("dangling finding reference `{}`", e.finding));
            }
            if !seen_pairs.insert((e.disease.as_str(), e.finding.as_str())) {
                report.error(
                    &loc,
                    format!("duplicate frequency entry ({}, {})", e.disease, e.finding),
                );
            }
            if let Some(f) = finding {
                if known_disease && !f.is_demographic() && e.freq > 0.0 {
                    *nonzero_clinical.entry(e.disease.as_str()).or_default() += 1;
                }
            }
        }

        for (i, d) in self.diseases.iter().enumerate() {
            let n = nonzero_clinical.get(d.id.as_str()).copied().unwrap_or(0);
            if n < min_findings {
                report.warning(
                    format!("diseases[{i}]"),
                    format!(
                        "insufficient findings for simulation: `{}` has {n} nonzero clinical finding(s), expected at least {min_findings}",
                        d.id
                    ),
                );
            }
        }

        report
    }
}

/// A validated, immutable knowledge base.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    diseases: Vec<Disease>,
    findings: Vec<Finding>,
    disease_index: HashMap<String, usize>,
    finding_index: HashMap<String, usize>,
    /// Dense `diseases × findings` frequency table, row-major by disease.
    freq: Vec<f64>,
}

impl KnowledgeBase {
    pub fn from_document(doc: KbDocument) -> Result<Self> {
        let report = doc.validate(0);
        if let Some(first) = report.errors.first() {
            return Err(Error::InvalidKb(format!("{}: {}", first.location, first.message)));
        }

        let disease_index: HashMap<String, usize> = doc
            .diseases
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.clone(), i))
            .collect();
        let finding_index: HashMap<String, usize> = doc
            .findings
            .iter()
            .enumerate()
            .map(|(i, f)| (f.id.clone(), i))
            .collect();

        let n_findings = doc.findings.len();
        let mut freq = vec![0.0; doc.diseases.len() * n_findings];
        for e in &doc.frequencies {
            let d = disease_index[&e.disease];
            let f = finding_index[&e.finding];
            freq[d * n_findings + f] = e.freq;
        }

        Ok(Self {
            diseases: doc.diseases,
            findings: doc.findings,
            disease_index,
            finding_index,
            freq,
        })
    }

    /// Serialize back to document form. Zero frequencies are omitted and
    /// entries are ordered by (disease, finding) declaration order.
    pub fn to_document(&self) -> KbDocument {
        let mut frequencies = Vec::new();
        for (d, disease) in self.diseases.iter().enumerate() {
            for (f, finding) in self.findings.iter().enumerate() {
                let v = self.freq(d, f);
                if v != 0.0 {
                    frequencies.push(FrequencyEntry {
                        disease: disease.id.clone(),
                        finding: finding.id.clone(),
                        freq: v,
                    });
                }
            }
        }
        KbDocument {
            diseases: self.diseases.clone(),
            findings: self.findings.clone(),
            frequencies,
        }
    }

    pub fn to_json(&self) -> String {
        self.to_document().to_json()
    }

    pub fn diseases(&self) -> &[Disease] {
        &self.diseases
    }

    pub fn findings(&self) -> &[Finding] {
        &self.findings
    }

    pub fn disease_index(&self, id: &str) -> Result<usize> {
        self.disease_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownDisease(id.to_string()))
    }

    pub fn finding_index(&self, id: &str) -> Result<usize> {
        self.finding_index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownFinding(id.to_string()))
    }

    pub fn has_finding(&self, id: &str) -> bool {
        self.finding_index.contains_key(id)
    }

    /// Frequency by index. Panics on out-of-range indices.
    #[inline]
    pub fn freq(&self, disease: usize, finding: usize) -> f64 {
        self.freq[disease * self.findings.len() + finding]
    }

    /// FREQ(d, f) by id; absent pairs are 0.
    pub fn frequency(&self, disease: &str, finding: &str) -> Result<f64> {
        let d = self.disease_index(disease)?;
        let f = self.finding_index(finding)?;
        Ok(self.freq(d, f))
    }

    /// Clinical findings linked to `disease`, by descending frequency with
    /// ascending id as tie-break. Zero-frequency findings are excluded.
    pub fn sorted_findings(&self, disease: &str) -> Result<Vec<&str>> {
        let d = self.disease_index(disease)?;
        Ok(self
            .sorted_finding_indices(d)
            .into_iter()
            .map(|f| self.findings[f].id.as_str())
            .collect())
    }

    pub(crate) fn sorted_finding_indices(&self, disease: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.findings.len())
            .filter(|&f| !self.findings[f].is_demographic() && self.freq(disease, f) > 0.0)
            .collect();
        out.sort_by(|&a, &b| {
            self.freq(disease, b)
                .total_cmp(&self.freq(disease, a))
                .then_with(|| self.findings[a].id.cmp(&self.findings[b].id))
        });
        out
    }

    /// Demographic finding indices in ascending id order.
    pub(crate) fn demographic_indices(&self) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.findings.len())
            .filter(|&f| self.findings[f].is_demographic())
            .collect();
        out.sort_by(|&a, &b| self.findings[a].id.cmp(&self.findings[b].id));
        out
    }

    pub fn is_simulable(&self, disease: usize) -> bool {
        (0..self.findings.len())
            .any(|f| !self.findings[f].is_demographic() && self.freq(disease, f) > 0.0)
    }
}

/// Parse and validate a knowledge-base document.
pub fn parse_knowledge_base(text: &str) -> Result<KnowledgeBase> {
    KnowledgeBase::from_document(KbDocument::from_json(text)?)
}

/// Re-check a knowledge base, including the simulation-readiness warning
/// for diseases with fewer than `min_findings` nonzero clinical findings.
pub fn validate_knowledge_base(kb: &KnowledgeBase, min_findings: usize) -> ValidationReport {
    kb.to_document().validate(min_findings)
}
