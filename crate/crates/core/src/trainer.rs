//! Minibatch Adam on the KL soft-label loss.
//!
//! Per-case forward/backward work inside a batch runs through
//! [`Execution`]; contributions are always reduced in batch order so the
//! result does not depend on the thread count.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::CaseSet;
use crate::error::{Error, Result};
use crate::eval::{self, TruthMode};
use crate::exec::Execution;
use crate::model::{self, encode_findings, encode_target, DropoutMask, ModelInput, ModelParameters, Tensors};
use crate::rng;

const SHUFFLE_STREAM_TAG: u64 = 0x5348_5546; // "SHUF"
const DROPOUT_STREAM_TAG: u64 = 0x4452_4f50; // "DROP"

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            batch_size: 512,
            epochs: 15,
            dropout_rate: 0.7,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} not in [0, 1)", self.dropout_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Adam moment accumulators and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensors,
    pub v: Tensors,
    pub t: u64,
}

impl AdamState {
    pub fn new(p: &ModelParameters) -> Self {
        Self {
            m: Tensors::zeros(p.dims),
            v: Tensors::zeros(p.dims),
            t: 0,
        }
    }
}

/// An encoded training case: model input and dense soft-label target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: ModelInput,
    pub target: Vec<f64>,
}

/// KL divergence from the model distribution to the target.
pub fn kl_loss(target: &[f64], logprobs: &[f64]) -> f64 {
    model::kl_divergence(target, logprobs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backward {
    pub grads: Tensors,
    /// Mean KL loss over the batch.
    pub loss: f64,
    pub(crate) loss_sum: f64,
}

/// Mean gradient of the KL loss over `batch`. `masks`, when given, holds one
/// dropout mask per case.
pub fn backward(
    p: &ModelParameters,
    batch: &[Example],
    masks: Option<&[DropoutMask]>,
    exec: Execution,
) -> Result<Backward> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    if let Some(m) = masks {
        if m.len() != batch.len() {
            return Err(Error::Config(format!("{} masks for {} cases", m.len(), batch.len())));
        }
    }
    let dims = p.dims;
    for ex in batch {
        if ex.target.len() != dims.diseases {
            return Err(Error::Index(format!(
                "target has {} entries, model has {} diseases",
                ex.target.len(),
                dims.diseases
            )));
        }
    }
    let (d, l) = (dims.dim, dims.diseases);
    let cases = exec.map_range(batch.len(), |i| {
        p.case_grad(&batch[i].input, &batch[i].target, masks.map(|m| &m[i]))
    });
    let scale = 1.0 / batch.len() as f64;

    let mut g = Tensors::zeros(dims);

    // projection: one output row per embedding coordinate, cases summed in order
    exec.for_each_chunk_mut(&mut g.projection, l, |row, out| {
        for c in &cases {
            let hd = c.h[row];
            if hd != 0.0 {
                for (o, gz) in out.iter_mut().zip(&c.g_z) {
                    *o += hd * gz;
                }
            }
        }
        out.iter_mut().for_each(|o| *o *= scale);
    });

    for (i, c) in cases.iter().enumerate() {
        for (b, gz) in g.bias.iter_mut().zip(&c.g_z) {
            *b += gz;
        }
        for &m in &c.demo {
            for (o, gu) in g.demographic_embeddings[m * l..(m + 1) * l].iter_mut().zip(&c.g_u) {
                *o += gu;
            }
        }
        for (j, &r) in c.rows.iter().enumerate() {
            let out = &mut g.finding_embeddings[r * d..(r + 1) * d];
            match masks {
                Some(ms) => {
                    let mask = &ms[i].0[j * d..(j + 1) * d];
                    for ((o, gr), s) in out.iter_mut().zip(&c.g_row).zip(mask) {
                        *o += gr * s;
                    }
                }
                None => {
                    for (o, gr) in out.iter_mut().zip(&c.g_row) {
                        *o += gr;
                    }
                }
            }
        }
    }
    for block in [&mut g.bias, &mut g.demographic_embeddings, &mut g.finding_embeddings] {
        block.iter_mut().for_each(|v| *v *= scale);
    }

    let loss_sum: f64 = cases.iter().map(|c| c.loss).sum();
    Ok(Backward {
        grads: g,
        loss: loss_sum * scale,
        loss_sum,
    })
}

type AdamChunk<'a> = (&'a mut [f64], &'a mut [f64], &'a mut [f64], &'a [f64]);

/// One bias-corrected Adam update.
pub fn adam_step(p: &mut ModelParameters, g: &Tensors, s: &mut AdamState, cfg: &TrainConfig) {
    adam_step_with(p, g, s, cfg, Execution::Sequential)
}

pub fn adam_step_with(
    p: &mut ModelParameters,
    g: &Tensors,
    s: &mut AdamState,
    cfg: &TrainConfig,
    exec: Execution,
) {
    s.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let bc1 = 1.0 - b1.powi(s.t as i32);
    let bc2 = 1.0 - b2.powi(s.t as i32);
    let (lr, eps) = (cfg.learning_rate, cfg.adam_eps);

    let params = p.weights.blocks_mut();
    let ms = s.m.blocks_mut();
    let vs = s.v.blocks_mut();
    for (((w, gr), m), v) in params.into_iter().zip(g.blocks()).zip(ms).zip(vs) {
        const CHUNK: usize = 4096;
        let mut chunks: Vec<AdamChunk> = w
            .chunks_mut(CHUNK)
            .zip(m.chunks_mut(CHUNK))
            .zip(v.chunks_mut(CHUNK))
            .zip(gr.chunks(CHUNK))
            .map(|(((w, m), v), g)| (w, m, v, g))
            .collect();
        exec.for_each_chunk_mut(&mut chunks, 1, |_, part| {
            for (w, m, v, g) in part.iter_mut() {
                for i in 0..w.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    w[i] -= lr * mhat / (vhat.sqrt() + eps);
                }
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Holdout top-k accuracy, when a holdout set was supplied.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout: Option<BTreeMap<usize, f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub steps: u64,
    /// Out-of-vocabulary findings dropped while encoding the training set.
    pub skipped_findings: usize,
}

impl TrainHistory {
    /// Plain-text log: one line per epoch.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!("epoch {} loss {:.9}", e.epoch, e.mean_loss));
            if let Some(h) = &e.holdout {
                for (k, acc) in h {
                    out.push_str(&format!(" top{k} {acc:.6}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Encode a case set against the model's vocabulary.
pub fn encode_cases(p: &ModelParameters, cases: &CaseSet) -> Result<(Vec<Example>, usize)> {
    let mut skipped = 0;
    let mut out = Vec::with_capacity(cases.len());
    for c in &cases.cases {
        let enc = encode_findings(&p.vocab, &c.pos, &c.neg);
        skipped += enc.skipped;
        out.push(Example {
            input: enc.input,
            target: encode_target(&p.vocab, &c.ddx)?,
        });
    }
    Ok((out, skipped))
}

/// Holdout metrics reported after each epoch.
pub const HOLDOUT_KS: [usize; 3] = [1, 3, 5];

pub fn train(
    p0: ModelParameters,
    train_set: &CaseSet,
    cfg: &TrainConfig,
    holdout: Option<&CaseSet>,
) -> Result<(ModelParameters, TrainHistory)> {
    train_with(p0, train_set, cfg, holdout.map(|h| (h, TruthMode::Argmax)), Execution::default())
}

pub fn train_with(
    p0: ModelParameters,
    train_set: &CaseSet,
    cfg: &TrainConfig,
    holdout: Option<(&CaseSet, TruthMode)>,
    exec: Execution,
) -> Result<(ModelParameters, TrainHistory)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut p = p0;
    let (examples, skipped) = encode_cases(&p, train_set)?;
    if skipped > 0 {
        log::warn!("skipped {skipped} out-of-vocabulary finding occurrence(s) in the training set");
    }

    let mut state = AdamState::new(&p);
    let mut history = TrainHistory { skipped_findings: skipped, ..Default::default() };
    let shuffle_seed = rng::derive_seed(cfg.seed, SHUFFLE_STREAM_TAG);
    let dropout_seed = rng::derive_seed(cfg.seed, DROPOUT_STREAM_TAG);
    let n = examples.len();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(shuffle_seed, epoch as u64));

        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let step = state.t;
            let masks = (cfg.dropout_rate > 0.0).then(|| {
                let step_seed = rng::derive_seed(dropout_seed, step);
                exec.map_range(batch.len(), |i| {
                    let x = &batch[i].input;
                    DropoutMask::sample(
                        x.pos_clinical.len() + x.neg_clinical.len(),
                        p.dims.dim,
                        cfg.dropout_rate,
                        &mut rng::stream(step_seed, i as u64),
                    )
                })
            });
            let bw = backward(&p, &batch, masks.as_deref(), exec)?;
            loss_sum += bw.loss_sum;
            adam_step_with(&mut p, &bw.grads, &mut state, cfg, exec);
        }

        let holdout_acc = match holdout {
            Some((h, truth)) if !h.is_empty() => {
                let report = eval::evaluate_model(&p, h, &HOLDOUT_KS, truth, None, exec)?;
                Some(report.accuracy)
            }
            _ => None,
        };
        let stats = EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / n as f64,
            holdout: holdout_acc,
        };
        log::info!("epoch {} mean loss {:.6}", stats.epoch, stats.mean_loss);
        history.epochs.push(stats);
    }
    history.steps = state.t;
    Ok((p, history))
}
