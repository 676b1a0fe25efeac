//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::Rng;

use ddx::dataset::Vocabulary;
use ddx::kb::{Disease, Finding, FindingKind, FrequencyEntry, KbDocument};
use ddx::model::{forward, init_parameters, Mode, ModelInput, ModelParameters};
use ddx::trainer::{backward, Example};
use ddx::Execution;

pub const EPS: f64 = 1e-3;

/// Expert differential computed straight from the document: naive scoring,
/// full sort, truncation, plain softmax. Excluded diseases are dropped.
pub fn brute_force_ddx(doc: &KbDocument, pos: &[&str], neg: &[&str], k: usize) -> Vec<(String, f64)> {
    let freq: HashMap<(&str, &str), f64> = doc
        .frequencies
        .iter()
        .map(|e| ((e.disease.as_str(), e.finding.as_str()), e.freq))
        .collect();
    let demographic: BTreeSet<&str> = doc
        .findings
        .iter()
        .filter(|f| f.kind == FindingKind::Demographic)
        .map(|f| f.id.as_str())
        .collect();
    let mut scored = Vec::new();
    'disease: for d in &doc.diseases {
        let mut s = 0.0;
        for f in pos {
            let v = freq.get(&(d.id.as_str(), *f)).copied().unwrap_or(0.0);
            if v == 0.0 && demographic.contains(f) {
                continue 'disease;
            }
            s += (EPS + v).ln();
        }
        for f in neg {
            let v = freq.get(&(d.id.as_str(), *f)).copied().unwrap_or(0.0);
            s += (EPS + 1.0 - v).ln();
        }
        scored.push((d.id.clone(), s));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    let z: f64 = scored.iter().map(|(_, s)| s.exp()).sum();
    scored.into_iter().map(|(d, s)| (d, s.exp() / z)).collect()
}

/// Random KB with `n_demo` demographic findings in one mutex group.
/// Frequencies are drawn from a coarse grid so exact zeros and ties occur.
pub fn random_kb_doc(rng: &mut impl Rng, diseases: usize, findings: usize, n_demo: usize) -> KbDocument {
    let mut doc = KbDocument::default();
    for i in 0..findings {
        let demo = i < n_demo;
        doc.findings.push(Finding {
            id: format!("f{i}"),
            name: format!("finding {i}"),
            kind: if demo { FindingKind::Demographic } else { FindingKind::Clinical },
            mutex_group: demo.then(|| "group".to_string()),
        });
    }
    for d in 0..diseases {
        doc.diseases.push(Disease { id: format!("d{d}"), name: format!("disease {d}") });
        for i in 0..findings {
            let v = f64::from(rng.gen_range(0..=10u8)) / 10.0;
            if v > 0.0 {
                doc.frequencies.push(FrequencyEntry {
                    disease: format!("d{d}"),
                    finding: format!("f{i}"),
                    freq: v,
                });
            }
        }
    }
    doc
}

/// Every disjoint (pos, neg) assignment over `ids`: 3^n of them.
pub fn all_assignments(ids: &[String]) -> Vec<(Vec<&str>, Vec<&str>)> {
    let n = ids.len();
    let mut out = Vec::with_capacity(3usize.pow(n as u32));
    for code in 0..3usize.pow(n as u32) {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        let mut c = code;
        for id in ids {
            match c % 3 {
                1 => pos.push(id.as_str()),
                2 => neg.push(id.as_str()),
                _ => {}
            }
            c /= 3;
        }
        out.push((pos, neg));
    }
    out
}

/// KL(p ‖ q) evaluated directly, with q given as log-probabilities.
pub fn kl_oracle(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, lq)| pi * (pi / lq.exp()).ln())
        .sum()
}

pub fn random_distribution(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..n)
        .map(|_| if rng.gen_bool(0.25) { 0.0 } else { rng.gen_range(0.01..1.0) })
        .collect();
    if w.iter().all(|&x| x == 0.0) {
        w[rng.gen_range(0..n)] = 1.0;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Small model (K ≤ 6 findings, L ≤ 4 diseases, D ≤ 8) with every
/// parameter uniform in [-1, 1], plus a short batch of random cases.
pub fn random_small_model(rng: &mut impl Rng) -> (ModelParameters, Vec<Example>) {
    let k = rng.gen_range(1..=6);
    let l = rng.gen_range(2..=4);
    let d = rng.gen_range(1..=8);
    let n_demo = rng.gen_range(0..=k.min(2));
    let findings: Vec<String> = (0..k).map(|i| format!("x{i}")).collect();
    let diseases: Vec<String> = (0..l).map(|j| format!("y{j}")).collect();
    let demo: BTreeSet<String> = findings[..n_demo].iter().cloned().collect();
    let vocab = Vocabulary::new(findings, diseases, demo, BTreeMap::new()).unwrap();
    let mut p = init_parameters(&vocab, d, rng.gen(), None).unwrap();
    for i in 0..p.weights.len() {
        p.weights.set(i, rng.gen_range(-1.0..=1.0));
    }
    let batch = (0..rng.gen_range(1..=3))
        .map(|_| Example { input: random_input(rng, &p), target: random_distribution(rng, l) })
        .collect();
    (p, batch)
}

pub fn random_input(rng: &mut impl Rng, p: &ModelParameters) -> ModelInput {
    let mut x = ModelInput::default();
    for i in 0..p.dims.findings {
        if let Some(slot) = p.vocab.demographic_slot(i) {
            if rng.gen_bool(0.5) {
                x.demo.push(slot);
            }
            continue;
        }
        match rng.gen_range(0..3) {
            1 => x.pos_clinical.push(i),
            2 => x.neg_clinical.push(i),
            _ => {}
        }
    }
    x
}

pub fn mean_loss(p: &ModelParameters, batch: &[Example]) -> f64 {
    batch
        .iter()
        .map(|ex| kl_oracle(&ex.target, &forward(p, &ex.input, Mode::Infer).unwrap()))
        .sum::<f64>()
        / batch.len() as f64
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

/// Largest relative error between the analytic gradient and central
/// differences with step `h`, over every parameter coordinate.
pub fn gradient_check(p: &ModelParameters, batch: &[Example], h: f64) -> (f64, usize) {
    let analytic = backward(p, batch, None, Execution::Sequential).unwrap().grads;
    let mut worst = 0.0f64;
    let mut q = p.clone();
    for i in 0..p.weights.len() {
        let w = p.weights.get(i);
        q.weights.set(i, w + h);
        let up = mean_loss(&q, batch);
        q.weights.set(i, w - h);
        let down = mean_loss(&q, batch);
        q.weights.set(i, w);
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic.get(i), numeric));
    }
    (worst, p.weights.len())
}
