//! Embedding-bag diagnosis model.
//!
//! ```text
//! rows  = E[2i] for present clinical finding i, E[2i+1] for absent ones
//! h     = mean(dropout(rows))                      (zero vector if no rows)
//! lf    = log_softmax(hᵀW + b)
//! ld    = log_softmax(Σ_{m ∈ demo} P[m])           (zero logits if no demo)
//! g(x)  = log_softmax(lf + ld)
//! ```
//!
//! `E` is `[2K × D]`, `W` is `[D × L]`, `b` is `[L]` and the demographic
//! prior table `P` is `[M × L]`. All blocks are flat row-major `f64`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Vocabulary;
use crate::error::{Error, Result};
use crate::expert::DifferentialDiagnosis;
use crate::kb::KnowledgeBase;
use crate::rng::{self, Rng};

pub const DEFAULT_DIM: usize = 1024;
pub const INIT_RANGE: f64 = 0.05;
/// Initial prior logit for a (demographic, disease) pair the KB rules out.
pub const MASK: f64 = -30.0;

const INIT_STREAM_TAG: u64 = 0x494e_4954; // "INIT"

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    /// K: vocabulary findings.
    pub findings: usize,
    /// L: diseases.
    pub diseases: usize,
    /// D: embedding width.
    pub dim: usize,
    /// M: demographic findings.
    pub demographics: usize,
}

impl Dims {
    pub fn of(vocab: &Vocabulary, dim: usize) -> Self {
        Self {
            findings: vocab.n_findings(),
            diseases: vocab.n_diseases(),
            dim,
            demographics: vocab.n_demographics(),
        }
    }
}

/// The four parameter blocks. Also used for gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    pub finding_embeddings: Vec<f64>,
    pub projection: Vec<f64>,
    pub bias: Vec<f64>,
    pub demographic_embeddings: Vec<f64>,
}

impl Tensors {
    pub fn zeros(d: Dims) -> Self {
        Self {
            finding_embeddings: vec![0.0; 2 * d.findings * d.dim],
            projection: vec![0.0; d.dim * d.diseases],
            bias: vec![0.0; d.diseases],
            demographic_embeddings: vec![0.0; d.demographics * d.diseases],
        }
    }

    pub fn blocks(&self) -> [&[f64]; 4] {
        [
            &self.finding_embeddings,
            &self.projection,
            &self.bias,
            &self.demographic_embeddings,
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [
            &mut self.finding_embeddings,
            &mut self.projection,
            &mut self.bias,
            &mut self.demographic_embeddings,
        ]
    }

    pub fn len(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat coordinate view across all blocks, in block order.
    pub fn get(&self, mut i: usize) -> f64 {
        for b in self.blocks() {
            if i < b.len() {
                return b[i];
            }
            i -= b.len();
        }
        panic!("coordinate out of range")
    }

    pub fn set(&mut self, mut i: usize, v: f64) {
        for b in self.blocks_mut() {
            if i < b.len() {
                b[i] = v;
                return;
            }
            i -= b.len();
        }
        panic!("coordinate out of range")
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub vocab: Vocabulary,
    pub dims: Dims,
    pub weights: Tensors,
}

/// Observed findings by vocabulary index. `demo` holds demographic slots
/// (rows of the prior table), not vocabulary indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ModelInput {
    pub pos_clinical: Vec<usize>,
    pub neg_clinical: Vec<usize>,
    pub demo: Vec<usize>,
}

impl ModelInput {
    fn rows(&self) -> Vec<usize> {
        self.pos_clinical
            .iter()
            .map(|&i| 2 * i)
            .chain(self.neg_clinical.iter().map(|&i| 2 * i + 1))
            .collect()
    }

    fn check(&self, d: Dims) -> Result<()> {
        if let Some(i) = self.pos_clinical.iter().chain(&self.neg_clinical).find(|&&i| i >= d.findings) {
            return Err(Error::Index(format!("finding {i} >= {}", d.findings)));
        }
        if let Some(m) = self.demo.iter().find(|&&m| m >= d.demographics) {
            return Err(Error::Index(format!("demographic slot {m} >= {}", d.demographics)));
        }
        if let Some(i) = self.pos_clinical.iter().find(|i| self.neg_clinical.contains(i)) {
            return Err(Error::Index(format!("finding {i} is both present and absent")));
        }
        Ok(())
    }
}

/// Result of mapping case findings onto a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub input: ModelInput,
    /// Findings absent from the vocabulary, which were dropped.
    pub skipped: usize,
}

/// Map finding ids onto model indices. Out-of-vocabulary findings are
/// skipped and counted; absent demographics carry no embedding and are
/// ignored.
pub fn encode_findings<I, J, S, T>(vocab: &Vocabulary, pos: I, neg: J) -> Encoded
where
    I: IntoIterator<Item = S>,
    J: IntoIterator<Item = T>,
    S: AsRef<str>,
    T: AsRef<str>,
{
    let mut input = ModelInput::default();
    let mut skipped = 0;
    for f in pos {
        match vocab.finding_index(f.as_ref()) {
            Some(i) => match vocab.demographic_slot(i) {
                Some(m) => input.demo.push(m),
                None => input.pos_clinical.push(i),
            },
            None => skipped += 1,
        }
    }
    for f in neg {
        match vocab.finding_index(f.as_ref()) {
            Some(i) if !vocab.is_demographic(i) => input.neg_clinical.push(i),
            Some(_) => {}
            None => skipped += 1,
        }
    }
    for v in [&mut input.pos_clinical, &mut input.neg_clinical, &mut input.demo] {
        v.sort_unstable();
        v.dedup();
    }
    if skipped > 0 {
        log::debug!("skipped {skipped} out-of-vocabulary finding(s)");
    }
    Encoded { input, skipped }
}

/// Dense target distribution over the vocabulary's diseases.
pub fn encode_target(vocab: &Vocabulary, ddx: &DifferentialDiagnosis) -> Result<Vec<f64>> {
    let mut target = vec![0.0; vocab.n_diseases()];
    for e in &ddx.entries {
        let j = vocab.disease_index(&e.disease).ok_or_else(|| {
            Error::Vocabulary(format!("case references disease `{}` outside vocabulary", e.disease))
        })?;
        target[j] += e.p;
    }
    Ok(target)
}

/// Random initialization: embeddings, projection and bias uniform in
/// `[-0.05, 0.05]`; demographic priors zero except [`MASK`] where the KB
/// gives the (disease, demographic) pair frequency zero.
pub fn init_parameters(
    vocab: &Vocabulary,
    dim: usize,
    seed: u64,
    kb: Option<&KnowledgeBase>,
) -> Result<ModelParameters> {
    if dim == 0 {
        return Err(Error::Config("embedding dimension must be at least 1".into()));
    }
    let dims = Dims::of(vocab, dim);
    let mut w = Tensors::zeros(dims);
    let mut rng = rng::stream(rng::derive_seed(seed, INIT_STREAM_TAG), 0);
    for block in [&mut w.finding_embeddings, &mut w.projection, &mut w.bias] {
        for v in block.iter_mut() {
            *v = rng.gen_range(-INIT_RANGE..=INIT_RANGE);
        }
    }

    if let Some(kb) = kb {
        let l = dims.diseases;
        for (slot, &fi) in vocab.demographics().iter().enumerate() {
            let Ok(kf) = kb.finding_index(&vocab.findings()[fi]) else { continue };
            for (j, disease) in vocab.diseases().iter().enumerate() {
                if let Ok(kd) = kb.disease_index(disease) {
                    if kb.freq(kd, kf) == 0.0 {
                        w.demographic_embeddings[slot * l + j] = MASK;
                    }
                }
            }
        }
    }

    Ok(ModelParameters { vocab: vocab.clone(), dims, weights: w })
}

pub fn log_softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter().map(|x| x - lse).collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    log_softmax(v).into_iter().map(f64::exp).collect()
}

/// Per-element inverted-dropout scales for one case: 0 with probability
/// `rate`, `1/(1-rate)` otherwise. Laid out `[rows × D]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMask(pub Vec<f64>);

impl DropoutMask {
    pub fn sample(n_rows: usize, dim: usize, rate: f64, rng: &mut Rng) -> Self {
        let keep = 1.0 / (1.0 - rate);
        DropoutMask(
            (0..n_rows * dim)
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect(),
        )
    }
}

pub enum Mode<'a> {
    Infer,
    Train { dropout_rate: f64, rng: &'a mut Rng },
}

/// Intermediate values of one forward pass, kept for backprop.
pub(crate) struct Trace {
    pub rows: Vec<usize>,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub out: Vec<f64>,
}

impl ModelParameters {
    pub(crate) fn trace(&self, x: &ModelInput, mask: Option<&DropoutMask>) -> Trace {
        let Dims { dim, diseases: l, .. } = self.dims;
        let w = &self.weights;
        let rows = x.rows();

        let mut h = vec![0.0; dim];
        if !rows.is_empty() {
            for (j, &r) in rows.iter().enumerate() {
                let emb = &w.finding_embeddings[r * dim..(r + 1) * dim];
                match mask {
                    Some(m) => {
                        let scale = &m.0[j * dim..(j + 1) * dim];
                        for ((acc, e), s) in h.iter_mut().zip(emb).zip(scale) {
                            *acc += e * s;
                        }
                    }
                    None => {
                        for (acc, e) in h.iter_mut().zip(emb) {
                            *acc += e;
                        }
                    }
                }
            }
            let inv = 1.0 / rows.len() as f64;
            h.iter_mut().for_each(|v| *v *= inv);
        }

        let mut z = w.bias.clone();
        for (d, &hd) in h.iter().enumerate() {
            if hd != 0.0 {
                let row = &w.projection[d * l..(d + 1) * l];
                for (zj, wj) in z.iter_mut().zip(row) {
                    *zj += hd * wj;
                }
            }
        }

        let mut u = vec![0.0; l];
        for &m in &x.demo {
            for (uj, pj) in u.iter_mut().zip(&w.demographic_embeddings[m * l..(m + 1) * l]) {
                *uj += pj;
            }
        }

        let lf = log_softmax(&z);
        let ld = log_softmax(&u);
        let s: Vec<f64> = lf.iter().zip(&ld).map(|(a, b)| a + b).collect();
        let out = log_softmax(&s);
        Trace { rows, h, z, u, out }
    }
}

/// Log-probabilities over the vocabulary's diseases.
pub fn forward(p: &ModelParameters, x: &ModelInput, mode: Mode<'_>) -> Result<Vec<f64>> {
    x.check(p.dims)?;
    let mask = match mode {
        Mode::Infer => None,
        Mode::Train { dropout_rate, rng } => {
            if !(0.0..1.0).contains(&dropout_rate) {
                return Err(Error::Config(format!("dropout rate {dropout_rate} not in [0, 1)")));
            }
            Some(DropoutMask::sample(
                x.pos_clinical.len() + x.neg_clinical.len(),
                p.dims.dim,
                dropout_rate,
                rng,
            ))
        }
    };
    Ok(p.trace(x, mask.as_ref()).out)
}

/// The `k` most probable diseases, ties by ascending disease id.
pub fn predict_topk(p: &ModelParameters, x: &ModelInput, k: usize) -> Result<Vec<(String, f64)>> {
    let out = forward(p, x, Mode::Infer)?;
    Ok(rank(&p.vocab, &out, k))
}

pub(crate) fn rank(vocab: &Vocabulary, logprobs: &[f64], k: usize) -> Vec<(String, f64)> {
    let diseases = vocab.diseases();
    let mut order: Vec<usize> = (0..logprobs.len()).collect();
    order.sort_by(|&a, &b| {
        logprobs[b]
            .total_cmp(&logprobs[a])
            .then_with(|| diseases[a].cmp(&diseases[b]))
    });
    order
        .into_iter()
        .take(k)
        .map(|j| (diseases[j].clone(), logprobs[j].exp()))
        .collect()
}

/// One case's contribution to the batch gradient.
pub(crate) struct CaseGrad {
    pub loss: f64,
    pub rows: Vec<usize>,
    pub h: Vec<f64>,
    pub g_z: Vec<f64>,
    pub g_u: Vec<f64>,
    /// ∂loss/∂h divided by the number of pooled rows.
    pub g_row: Vec<f64>,
    pub demo: Vec<usize>,
}

/// KL(target ‖ exp(logprobs)); zero-probability targets contribute nothing.
pub fn kl_divergence(target: &[f64], logprobs: &[f64]) -> f64 {
    target
        .iter()
        .zip(logprobs)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, q)| p * (p.ln() - q))
        .sum()
}

/// Gradient of `x - lse(x)` given upstream gradient `g`.
fn log_softmax_backward(x: &[f64], g: &[f64]) -> Vec<f64> {
    let total: f64 = g.iter().sum();
    softmax(x).iter().zip(g).map(|(s, gi)| gi - s * total).collect()
}

impl ModelParameters {
    pub(crate) fn case_grad(&self, x: &ModelInput, target: &[f64], mask: Option<&DropoutMask>) -> CaseGrad {
        let Dims { dim, diseases: l, .. } = self.dims;
        let t = self.trace(x, mask);
        let loss = kl_divergence(target, &t.out);

        let g_out: Vec<f64> = target.iter().map(|p| -p).collect();
        let lf = log_softmax(&t.z);
        let ld = log_softmax(&t.u);
        let s: Vec<f64> = lf.iter().zip(&ld).map(|(a, b)| a + b).collect();
        let g_s = log_softmax_backward(&s, &g_out);
        let g_z = log_softmax_backward(&t.z, &g_s);
        let g_u = log_softmax_backward(&t.u, &g_s);

        let mut g_row = vec![0.0; dim];
        if !t.rows.is_empty() {
            let inv = 1.0 / t.rows.len() as f64;
            let w = &self.weights.projection;
            for (d, gd) in g_row.iter_mut().enumerate() {
                let row = &w[d * l..(d + 1) * l];
                *gd = row.iter().zip(&g_z).map(|(a, b)| a * b).sum::<f64>() * inv;
            }
        }

        CaseGrad {
            loss,
            rows: t.rows,
            h: t.h,
            g_z,
            g_u,
            g_row,
            demo: x.demo.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Vocabulary;
    use approx::assert_abs_diff_eq;
    use std::collections::{BTreeMap, BTreeSet};

    fn vocab(findings: &[&str], diseases: &[&str], demo: &[&str]) -> Vocabulary {
        Vocabulary::new(
            findings.iter().map(|s| s.to_string()).collect(),
            diseases.iter().map(|s| s.to_string()).collect(),
            demo.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    fn zeroed(v: &Vocabulary, dim: usize) -> ModelParameters {
        let dims = Dims::of(v, dim);
        ModelParameters { vocab: v.clone(), dims, weights: Tensors::zeros(dims) }
    }

    #[test]
    fn zero_parameters_give_uniform() {
        let v = vocab(&["a", "b", "male"], &["x", "y", "z"], &["male"]);
        let p = zeroed(&v, 4);
        let x = encode_findings(&v, ["a", "male"], ["b"]).input;
        let out = forward(&p, &x, Mode::Infer).unwrap();
        for o in out {
            assert_abs_diff_eq!(o, (1.0f64 / 3.0).ln(), epsilon = 1e-15);
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let v = vocab(&["a", "b"], &["x", "y"], &[]);
        let p = init_parameters(&v, 8, 5, None).unwrap();
        let q = init_parameters(&v, 8, 5, None).unwrap();
        assert_eq!(p, q);
        assert!(p.weights.finding_embeddings.iter().all(|w| w.abs() <= INIT_RANGE));
        assert_ne!(p, init_parameters(&v, 8, 6, None).unwrap());
    }

    #[test]
    fn init_without_kb_has_zero_priors() {
        let v = vocab(&["a", "f", "m"], &["x", "y"], &["f", "m"]);
        let p = init_parameters(&v, 4, 1, None).unwrap();
        assert!(p.weights.demographic_embeddings.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn init_masks_impossible_pairs() {
        let kb = crate::kb::parse_knowledge_base(
            r#"{"diseases":[{"id":"pregnancy","name":"P"},{"id":"flu","name":"F"}],
                "findings":[{"id":"male","name":"M","kind":"demographic","mutex_group":"sex"},
                            {"id":"nausea","name":"N","kind":"clinical"}],
                "frequencies":[{"disease":"flu","finding":"male","freq":0.5},
                               {"disease":"pregnancy","finding":"nausea","freq":0.7}]}"#,
        )
        .unwrap();
        let v = vocab(&["male", "nausea"], &["flu", "pregnancy"], &["male"]);
        let p = init_parameters(&v, 4, 1, Some(&kb)).unwrap();
        assert_eq!(p.weights.demographic_embeddings, vec![0.0, MASK]);

        let x = encode_findings(&v, ["male", "nausea"], [] as [&str; 0]).input;
        let out = forward(&p, &x, Mode::Infer).unwrap();
        assert!(out[1].exp() < 1e-12 * out[0].exp());
    }

    #[test]
    fn infer_equals_train_without_dropout() {
        let v = vocab(&["a", "b", "c"], &["x", "y"], &[]);
        let p = init_parameters(&v, 16, 3, None).unwrap();
        let x = encode_findings(&v, ["a", "c"], ["b"]).input;
        let mut rng = rng::stream(1, 0);
        let infer = forward(&p, &x, Mode::Infer).unwrap();
        let train = forward(&p, &x, Mode::Train { dropout_rate: 0.0, rng: &mut rng }).unwrap();
        assert_eq!(infer, train);
    }

    #[test]
    fn out_of_range_index() {
        let v = vocab(&["a"], &["x"], &[]);
        let p = init_parameters(&v, 2, 0, None).unwrap();
        let x = ModelInput { pos_clinical: vec![3], ..Default::default() };
        assert!(matches!(forward(&p, &x, Mode::Infer), Err(Error::Index(_))));
    }

    #[test]
    fn encoding_skips_unknown() {
        let v = vocab(&["a", "male"], &["x"], &["male"]);
        let e = encode_findings(&v, ["a", "male", "zzz"], ["male", "yyy"]);
        assert_eq!(e.skipped, 2);
        assert_eq!(e.input.pos_clinical, vec![0]);
        assert_eq!(e.input.demo, vec![0]);
        assert!(e.input.neg_clinical.is_empty());
    }

    #[test]
    fn topk_uniform_tie_break() {
        let v = vocab(&["a"], &["d3", "d1", "d2", "d0"], &[]);
        let p = zeroed(&v, 2);
        let top = predict_topk(&p, &ModelInput::default(), 3).unwrap();
        let ids: Vec<&str> = top.iter().map(|(d, _)| d.as_str()).collect();
        assert_eq!(ids, ["d0", "d1", "d2"]);
        for (_, pr) in &top {
            assert_abs_diff_eq!(*pr, 0.25, epsilon = 1e-15);
        }
        let all = predict_topk(&p, &ModelInput::default(), 4).unwrap();
        assert_abs_diff_eq!(all.iter().map(|(_, p)| p).sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn kl_examples() {
        let lp = [0.5f64.ln(), 0.5f64.ln()];
        assert_abs_diff_eq!(kl_divergence(&[1.0, 0.0], &lp), 2f64.ln(), epsilon = 1e-12);
        let lp = [0.75f64.ln(), 0.25f64.ln()];
        let expect = 0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln();
        assert_abs_diff_eq!(kl_divergence(&[0.5, 0.5], &lp), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(expect, 0.143841, epsilon = 1e-6);
    }
}
