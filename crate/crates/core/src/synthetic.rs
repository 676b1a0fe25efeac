//! Synthetic knowledge bases and assessment-style cases for experiments.
//!
//! A *separable* KB gives every disease a few exclusive clinical findings at
//! high frequency, plus links to a shared pool of background findings and a
//! demographic profile over two mutex groups (sex, age bracket).

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::normalize_ddx;
use crate::error::Result;
use crate::kb::{Disease, Finding, FindingKind, FrequencyEntry, KbDocument, KnowledgeBase};
use crate::rng;
use crate::simulate::{simulate_case, CaseSource, ClinicalCase, SimConfig};

pub const SEX_VALUES: [&str; 2] = ["female", "male"];
pub const AGE_VALUES: [&str; 4] = ["age_child", "age_young", "age_middle", "age_senior"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeparableKbSpec {
    pub diseases: usize,
    pub exclusive_per_disease: usize,
    pub exclusive_freq: (f64, f64),
    pub background_findings: usize,
    pub background_per_disease: usize,
    pub background_freq: (f64, f64),
    /// Fraction of diseases restricted to one sex.
    pub sex_specific: f64,
    pub seed: u64,
}

impl Default for SeparableKbSpec {
    fn default() -> Self {
        Self {
            diseases: 20,
            exclusive_per_disease: 3,
            exclusive_freq: (0.7, 0.95),
            background_findings: 10,
            background_per_disease: 4,
            background_freq: (0.05, 0.5),
            sex_specific: 0.3,
            seed: 0,
        }
    }
}

pub fn disease_id(i: usize) -> String {
    format!("d{i:02}")
}

pub fn exclusive_finding_id(disease: usize, j: usize) -> String {
    format!("f{disease:02}_{j}")
}

pub fn background_finding_id(i: usize) -> String {
    format!("bg{i:02}")
}

/// Build a separable KB document from `spec`.
pub fn separable_kb_document(spec: &SeparableKbSpec) -> KbDocument {
    let mut rng = rng::stream(rng::derive_seed(spec.seed, 0x4b42), 0);
    let mut doc = KbDocument::default();

    for v in SEX_VALUES {
        doc.findings.push(Finding {
            id: v.into(),
            name: v.into(),
            kind: FindingKind::Demographic,
            mutex_group: Some("sex".into()),
        });
    }
    for v in AGE_VALUES {
        doc.findings.push(Finding {
            id: v.into(),
            name: v.replace('_', " "),
            kind: FindingKind::Demographic,
            mutex_group: Some("age".into()),
        });
    }
    for i in 0..spec.background_findings {
        let id = background_finding_id(i);
        doc.findings.push(Finding {
            id: id.clone(),
            name: format!("background finding {i}"),
            kind: FindingKind::Clinical,
            mutex_group: None,
        });
    }

    let freq = |doc: &mut KbDocument, d: &str, f: &str, v: f64| {
        doc.frequencies.push(FrequencyEntry { disease: d.into(), finding: f.into(), freq: v });
    };

    for d in 0..spec.diseases {
        let did = disease_id(d);
        doc.diseases.push(Disease { id: did.clone(), name: format!("disease {d}") });

        for j in 0..spec.exclusive_per_disease {
            let fid = exclusive_finding_id(d, j);
            doc.findings.push(Finding {
                id: fid.clone(),
                name: format!("finding {j} of disease {d}"),
                kind: FindingKind::Clinical,
                mutex_group: None,
            });
            let v = rng.gen_range(spec.exclusive_freq.0..=spec.exclusive_freq.1);
            freq(&mut doc, &did, &fid, round3(v));
        }

        let mut bg: Vec<usize> = (0..spec.background_findings).collect();
        bg.shuffle(&mut rng);
        bg.truncate(spec.background_per_disease);
        bg.sort_unstable();
        for b in bg {
            let v = rng.gen_range(spec.background_freq.0..=spec.background_freq.1);
            freq(&mut doc, &did, &background_finding_id(b), round3(v));
        }

        let roll: f64 = rng.gen();
        let (female, male) = if roll < spec.sex_specific / 2.0 {
            (1.0, 0.0)
        } else if roll < spec.sex_specific {
            (0.0, 1.0)
        } else {
            (0.5, 0.5)
        };
        for (v, f) in [("female", female), ("male", male)] {
            if f > 0.0 {
                freq(&mut doc, &did, v, f);
            }
        }

        // contiguous run of plausible age brackets
        let len = rng.gen_range(1..=AGE_VALUES.len());
        let start = rng.gen_range(0..=AGE_VALUES.len() - len);
        for a in AGE_VALUES.iter().skip(start).take(len) {
            freq(&mut doc, &did, a, round3(1.0 / len as f64));
        }
    }
    doc
}

pub fn separable_kb(spec: &SeparableKbSpec) -> KnowledgeBase {
    KnowledgeBase::from_document(separable_kb_document(spec)).expect("generated KB is valid")
}

fn round3(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Cases of a disease absent from the KB, shaped like assessment data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NovelDiseaseSpec {
    pub disease: String,
    /// Out-of-KB findings carried by every case.
    pub exclusive_findings: usize,
    /// KB diseases whose presentation the novel disease imitates.
    pub mimics: Vec<String>,
    pub cases: usize,
    pub seed: u64,
}

impl Default for NovelDiseaseSpec {
    fn default() -> Self {
        Self {
            disease: "novel".into(),
            exclusive_findings: 5,
            mimics: Vec::new(),
            cases: 50,
            seed: 0,
        }
    }
}

pub fn novel_finding_id(j: usize) -> String {
    format!("nv_{j}")
}

/// Each case carries every novel finding, plus the KB-visible presentation
/// of a case simulated from one of the mimicked diseases. Labels are
/// one-hot on the novel disease.
pub fn novel_disease_cases(kb: &KnowledgeBase, spec: &NovelDiseaseSpec) -> Result<Vec<ClinicalCase>> {
    let mimics: Vec<String> = if spec.mimics.is_empty() {
        kb.diseases().iter().map(|d| d.id.clone()).collect()
    } else {
        spec.mimics.clone()
    };
    let novel: BTreeSet<String> = (0..spec.exclusive_findings).map(novel_finding_id).collect();
    let label = normalize_ddx(&[(spec.disease.as_str(), 1.0)])?;
    let cfg = SimConfig::default();
    let seed = rng::derive_seed(spec.seed, 0x4e56);
    (0..spec.cases)
        .map(|i| {
            let mut rng = rng::stream(seed, i as u64);
            let mimic = &mimics[rng.gen_range(0..mimics.len())];
            let base = simulate_case(kb, mimic, &mut rng, &cfg)?;
            let mut pos = base.pos;
            pos.extend(novel.iter().cloned());
            Ok(ClinicalCase {
                id: format!("{}-{i}", spec.disease),
                pos,
                neg: base.neg,
                ddx: label.clone(),
                source: CaseSource::Assessment,
                seed_disease: Some(spec.disease.clone()),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::validate_knowledge_base;

    #[test]
    fn generated_kb_is_valid_and_sized() {
        let kb = separable_kb(&SeparableKbSpec::default());
        assert_eq!(kb.diseases().len(), 20);
        let clinical = kb.findings().iter().filter(|f| !f.is_demographic()).count();
        assert_eq!(clinical, 70);
        let demo = kb.findings().iter().filter(|f| f.is_demographic()).count();
        assert_eq!(demo, 6);
        assert!(validate_knowledge_base(&kb, 3).is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SeparableKbSpec { seed: 4, ..Default::default() };
        assert_eq!(separable_kb_document(&spec), separable_kb_document(&spec));
    }

    #[test]
    fn novel_cases_carry_novel_findings() {
        let kb = separable_kb(&SeparableKbSpec::default());
        let cases = novel_disease_cases(&kb, &NovelDiseaseSpec { cases: 5, ..Default::default() }).unwrap();
        assert_eq!(cases.len(), 5);
        for c in &cases {
            assert!((0..5).all(|j| c.pos.contains(&novel_finding_id(j))));
            assert_eq!(c.ddx.argmax(), Some("novel"));
        }
    }
}
