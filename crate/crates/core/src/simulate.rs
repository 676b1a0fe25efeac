//! Clinical case simulation from a knowledge base.
//!
//! For a seed disease `y` a case is built in three passes:
//!
//! 1. **Demographics.** Each demographic finding (ascending id) still in the
//!    candidate pool is included with probability `FREQ(y,f)`; including one
//!    removes the rest of its mutex group from the pool.
//! 2. **Budget.** `L = uniform_int(5, min(|F*|, cap)) + |demographics|`, where
//!    `F*` is the frequency-sorted list of clinical findings linked to `y`.
//! 3. **Elicitation.** Walk `F*` once. A finding with `FREQ ≥ pos_threshold`
//!    becomes present with probability `FREQ`; a rarer one becomes explicitly
//!    absent when a uniform draw exceeds `neg_gate`. Stop once more than `L`
//!    findings are elicited or the list is exhausted.
//!
//! The case is then labeled with the expert engine's differential.

use std::collections::{BTreeSet, VecDeque};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::expert::{self, DifferentialDiagnosis, DEFAULT_DDX_TOP_K};
use crate::kb::KnowledgeBase;
use crate::rng::{self, Rng};

const SIM_STREAM_TAG: u64 = 0x5349_4d55; // "SIMU"
const MIN_ELICITED: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub cases_total: usize,
    pub min_cases_per_disease: usize,
    pub seed: u64,
    pub ddx_top_k: usize,
    pub pos_threshold: f64,
    pub neg_gate: f64,
    pub max_findings_cap: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            cases_total: 1000,
            min_cases_per_disease: 50,
            seed: 0,
            ddx_top_k: DEFAULT_DDX_TOP_K,
            pos_threshold: 0.2,
            neg_gate: 0.75,
            max_findings_cap: 40,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cases_total == 0 {
            return Err(Error::Config("cases_total must be at least 1".into()));
        }
        if self.ddx_top_k == 0 {
            return Err(Error::Config("ddx_top_k must be at least 1".into()));
        }
        if self.max_findings_cap == 0 {
            return Err(Error::Config("max_findings_cap must be at least 1".into()));
        }
        for (name, v) in [("pos_threshold", self.pos_threshold), ("neg_gate", self.neg_gate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseSource {
    ExpertSim,
    Assessment,
    Vignette,
}

/// Present findings, explicitly absent findings and a soft label.
#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalCase {
    pub id: String,
    pub pos: BTreeSet<String>,
    pub neg: BTreeSet<String>,
    pub ddx: DifferentialDiagnosis,
    pub source: CaseSource,
    pub seed_disease: Option<String>,
}

/// Drop from `pool` every finding that shares a mutex group with any
/// finding in `selected`, including the selected findings themselves.
/// Survivors keep their order.
pub fn remove_mutex<'a, S: AsRef<str>>(
    kb: &KnowledgeBase,
    pool: &[&'a str],
    selected: &[S],
) -> Result<Vec<&'a str>> {
    let pool_idx: Vec<usize> = pool
        .iter()
        .map(|f| kb.finding_index(f))
        .collect::<Result<_>>()?;
    let selected: Vec<usize> = selected
        .iter()
        .map(|f| kb.finding_index(f.as_ref()))
        .collect::<Result<_>>()?;
    let keep = remove_mutex_indices(kb, pool_idx.iter().copied(), &selected);
    let keep: BTreeSet<usize> = keep.into_iter().collect();
    Ok(pool
        .iter()
        .zip(&pool_idx)
        .filter(|(_, i)| keep.contains(i))
        .map(|(f, _)| *f)
        .collect())
}

fn remove_mutex_indices(
    kb: &KnowledgeBase,
    pool: impl IntoIterator<Item = usize>,
    selected: &[usize],
) -> Vec<usize> {
    let findings = kb.findings();
    let groups: BTreeSet<&str> = selected
        .iter()
        .filter_map(|&f| findings[f].mutex_group.as_deref())
        .collect();
    pool.into_iter()
        .filter(|f| !selected.contains(f))
        .filter(|&f| {
            findings[f]
                .mutex_group
                .as_deref()
                .is_none_or(|g| !groups.contains(g))
        })
        .collect()
}

/// Generate one case seeded by disease `disease`.
pub fn simulate_case(
    kb: &KnowledgeBase,
    disease: &str,
    rng: &mut Rng,
    cfg: &SimConfig,
) -> Result<ClinicalCase> {
    let y = kb.disease_index(disease)?;
    let (pos, neg, ddx) = simulate_indices(kb, y, rng, cfg)?;
    let findings = kb.findings();
    Ok(ClinicalCase {
        id: String::new(),
        pos: pos.iter().map(|&f| findings[f].id.clone()).collect(),
        neg: neg.iter().map(|&f| findings[f].id.clone()).collect(),
        ddx,
        source: CaseSource::ExpertSim,
        seed_disease: Some(disease.to_string()),
    })
}

fn simulate_indices(
    kb: &KnowledgeBase,
    y: usize,
    rng: &mut Rng,
    cfg: &SimConfig,
) -> Result<(Vec<usize>, Vec<usize>, DifferentialDiagnosis)> {
    let sorted = kb.sorted_finding_indices(y);
    if sorted.is_empty() {
        return Err(Error::Unsimulable(kb.diseases()[y].id.clone()));
    }

    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();

    let demographics = kb.demographic_indices();
    let mut pool = demographics.clone();
    for f in demographics {
        if pool.contains(&f) && rng.gen::<f64>() < kb.freq(y, f) {
            pos.push(f);
            pool = remove_mutex_indices(kb, pool, &pos);
        }
    }

    let hi = sorted.len().min(cfg.max_findings_cap);
    let lo = MIN_ELICITED.min(hi);
    let budget = rng.gen_range(lo..=hi) + pos.len();

    let mut pool: VecDeque<usize> = remove_mutex_indices(kb, sorted, &pos).into();
    while pos.len() + neg.len() <= budget {
        let Some(f) = pool.pop_front() else { break };
        let freq = kb.freq(y, f);
        if freq >= cfg.pos_threshold {
            if rng.gen::<f64>() < freq {
                pos.push(f);
                pool = remove_mutex_indices(kb, pool, &pos).into();
            }
        } else if rng.gen::<f64>() > cfg.neg_gate {
            neg.push(f);
        }
    }

    let ddx = expert::infer_indices(kb, &pos, &neg, cfg.ddx_top_k)?;
    Ok((pos, neg, ddx))
}

/// Diseases that can seed a case: at least one nonzero clinical finding.
pub fn simulable_diseases(kb: &KnowledgeBase) -> Vec<usize> {
    (0..kb.diseases().len()).filter(|&d| kb.is_simulable(d)).collect()
}

/// Generate `cfg.cases_total` cases: first `min_cases_per_disease` for each
/// simulable disease (in declaration order), then uniformly drawn diseases.
pub fn simulate_dataset(kb: &KnowledgeBase, cfg: &SimConfig) -> Result<Vec<ClinicalCase>> {
    simulate_dataset_with(kb, cfg, Execution::default())
}

pub fn simulate_dataset_with(
    kb: &KnowledgeBase,
    cfg: &SimConfig,
    exec: Execution,
) -> Result<Vec<ClinicalCase>> {
    cfg.validate()?;
    let pool = simulable_diseases(kb);
    if pool.is_empty() {
        return Err(Error::Config("knowledge base has no simulable disease".into()));
    }
    let quota = pool.len() * cfg.min_cases_per_disease;
    if cfg.cases_total < quota {
        return Err(Error::Config(format!(
            "cases_total {} is below {} simulable diseases x {} minimum cases",
            cfg.cases_total,
            pool.len(),
            cfg.min_cases_per_disease
        )));
    }

    let seed = rng::derive_seed(cfg.seed, SIM_STREAM_TAG);
    let diseases = kb.diseases();
    let findings = kb.findings();
    let cases = exec.map_range(cfg.cases_total, |i| {
        let mut rng = rng::stream(seed, i as u64);
        let y = if i < quota {
            pool[i / cfg.min_cases_per_disease]
        } else {
            pool[rng.gen_range(0..pool.len())]
        };
        simulate_indices(kb, y, &mut rng, cfg).map(|(pos, neg, ddx)| ClinicalCase {
            id: format!("sim-{i}"),
            pos: pos.iter().map(|&f| findings[f].id.clone()).collect(),
            neg: neg.iter().map(|&f| findings[f].id.clone()).collect(),
            ddx,
            source: CaseSource::ExpertSim,
            seed_disease: Some(diseases[y].id.clone()),
        })
    });
    cases.into_iter().collect()
}
