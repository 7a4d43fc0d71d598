//! Fine-tuning: BCE on the fused logit minus an entropy bonus on batch
//! prototype usage, optimized with plain SGD under cosine-annealed
//! learning rates.
//!
//! loss = mean BCE - lambda_u * (H(mean query assignment) + H(mean
//! history assignment)). The usage term couples examples, so a batch is
//! processed forward-all, then backward-each with the usage gradient
//! folded into every assignment's upstream.

use rayon::prelude::*;

use crate::encoder::{encode_backward, encode_sequence, EmbedMode, Encoded};
use crate::error::{Error, Result};
use crate::fusion::{bce_grad, bce_with_logit, sigmoid, FusionCache};
use crate::linalg::axpy;
use crate::metrics::{auprc, auroc};
use crate::model::ModelState;
use crate::optim::{cosine_lr, sgd_step};
use crate::pipeline::PreparedExample;
use crate::prototypes::{
    align, align_backward, entropy, usage_entropy_grad, usage_regularizer, weigh, weigh_backward,
    AssignKind, Assignment,
};
use crate::rng::{derive_seed, rng_from_seed};

/// Everything one example's forward pass produces; caches feed the
/// matching backward call.
#[derive(Debug, Clone)]
pub struct ExampleForward {
    pub logit: f64,
    pub alphas: Vec<f64>,
    pub weights: Vec<f64>,
    pub query_assignment: Assignment,
    pub history_assignments: Vec<Assignment>,
    enc: Encoded,
    fusion: FusionCache,
}

impl ExampleForward {
    pub fn probability(&self) -> f64 {
        sigmoid(self.logit)
    }
}

pub fn forward_example(model: &ModelState, ex: &PreparedExample) -> Result<ExampleForward> {
    let enc = encode_sequence(&model.tables, &model.backbone, &ex.query, EmbedMode::Full)?;
    let query_assignment = model.bank.assign(&enc.pooled, AssignKind::Query);
    let mut history_assignments = Vec::with_capacity(ex.chunks.len());
    let mut alphas = Vec::with_capacity(ex.chunks.len());
    for c in &ex.chunks {
        let a = model.bank.assign(&c.vector, AssignKind::History);
        alphas.push(align(&query_assignment, &a));
        history_assignments.push(a);
    }
    let weights = if alphas.is_empty() {
        Vec::new()
    } else {
        weigh(&alphas, model.bank.t_s)
    };
    let chunk_refs: Vec<&[f64]> = ex.chunks.iter().map(|c| c.vector.as_slice()).collect();
    let (logit, fusion) = model.fusion.forward(&enc.pooled, &chunk_refs, &weights)?;
    Ok(ExampleForward {
        logit,
        alphas,
        weights,
        query_assignment,
        history_assignments,
        enc,
        fusion,
    })
}

/// Backward for one example. `dlogit` is d loss / d logit (already
/// including any 1/batch factor); `dprobs_*_usage` carry the usage
/// entropy term's gradient, one vector shared by all members of each
/// group. Chunk vectors come from the frozen retriever and receive no
/// gradient.
pub fn backward_example(
    model: &ModelState,
    fwd: &ExampleForward,
    dlogit: f64,
    dprobs_query_usage: &[f64],
    dprobs_history_usage: &[f64],
    grads: &mut ModelState,
) {
    let l = model.bank.len();
    let d = model.config.d;
    let zeros_l = vec![0.0; l];

    let (dq_fusion, dweights) = model.fusion.backward(dlogit, &fwd.fusion, &mut grads.fusion);
    let mut dprobs_q = dprobs_query_usage.to_vec();
    if !fwd.weights.is_empty() {
        let dalphas = weigh_backward(&fwd.weights, &dweights, model.bank.t_s);
        for (i, a_i) in fwd.history_assignments.iter().enumerate() {
            let mut dlog_probs_i = vec![0.0; l];
            align_backward(
                &fwd.query_assignment,
                a_i,
                dalphas[i],
                &mut dprobs_q,
                &mut dlog_probs_i,
            );
            let mut dx_discard = vec![0.0; d];
            model.bank.assign_backward(
                a_i,
                dprobs_history_usage,
                &dlog_probs_i,
                &mut dx_discard,
                &mut grads.bank.p,
            );
        }
    }
    let mut dq = dq_fusion;
    model.bank.assign_backward(
        &fwd.query_assignment,
        &dprobs_q,
        &zeros_l,
        &mut dq,
        &mut grads.bank.p,
    );
    encode_backward(
        &model.tables,
        &model.backbone,
        &fwd.enc,
        Some(&dq),
        None,
        &mut grads.tables,
        &mut grads.backbone,
    );
}

/// One batch: loss value plus parameter gradients accumulated into
/// `grads`. Forward and backward run per example in parallel; gradient
/// partials are reduced in example order so results are reproducible.
pub fn batch_loss_and_grads(
    model: &ModelState,
    batch: &[&PreparedExample],
    lambda_u: f64,
    grads: &mut ModelState,
) -> Result<BatchStep> {
    assert!(!batch.is_empty(), "empty batch");
    let fwds: Vec<ExampleForward> = batch
        .par_iter()
        .map(|ex| forward_example(model, ex))
        .collect::<Result<_>>()?;
    let b = batch.len() as f64;
    let queries: Vec<Assignment> = fwds.iter().map(|f| f.query_assignment.clone()).collect();
    let history: Vec<Assignment> = fwds
        .iter()
        .flat_map(|f| f.history_assignments.iter().cloned())
        .collect();
    let usage = usage_regularizer(&queries, &history);
    let bce: f64 = fwds
        .iter()
        .zip(batch)
        .map(|(f, ex)| bce_with_logit(f.logit, ex.label))
        .sum::<f64>()
        / b;
    let loss = bce - lambda_u * usage.value;

    let dprobs_query_usage = usage_entropy_grad(&usage.mean_query, queries.len(), -lambda_u);
    let dprobs_history_usage = match &usage.mean_history {
        Some(m) => usage_entropy_grad(m, history.len(), -lambda_u),
        None => vec![0.0; model.bank.len()],
    };
    let partials: Vec<ModelState> = fwds
        .par_iter()
        .zip(batch)
        .map(|(fwd, ex)| {
            let mut g = model.zeros_like();
            backward_example(
                model,
                fwd,
                bce_grad(fwd.logit, ex.label) / b,
                &dprobs_query_usage,
                &dprobs_history_usage,
                &mut g,
            );
            g
        })
        .collect();
    for p in partials {
        for ((_, dst), (_, src)) in grads.tensors_mut().into_iter().zip(p.tensors()) {
            axpy(&mut dst.data, 1.0, &src.data);
        }
    }
    Ok(BatchStep {
        loss,
        bce,
        usage_value: usage.value,
        sum_query_probs: usage.mean_query.iter().map(|v| v * b).collect(),
        sum_history_probs: usage
            .mean_history
            .map(|m| m.iter().map(|v| v * history.len() as f64).collect()),
        n_history: history.len(),
    })
}

#[derive(Debug, Clone)]
pub struct BatchStep {
    pub loss: f64,
    pub bce: f64,
    pub usage_value: f64,
    sum_query_probs: Vec<f64>,
    sum_history_probs: Option<Vec<f64>>,
    n_history: usize,
}

/// Apply accumulated gradients with plain SGD (no momentum) and clear
/// them for the next batch.
pub fn apply_sgd(model: &mut ModelState, grads: &mut ModelState, lr: f64) {
    for ((name, p), (gname, g)) in model.tensors_mut().into_iter().zip(grads.tensors_mut()) {
        debug_assert_eq!(name, gname);
        sgd_step(p, g, lr);
        g.data.iter_mut().for_each(|v| *v = 0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_u: f64,
    /// Epochs without validation AUROC improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 75,
            batch_size: 32,
            lr: 0.05,
            lambda_u: 0.005,
            patience: 3,
            seed: 0,
        }
    }
}

/// One CSV row per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
    pub val_auprc: f64,
    /// Entropy of the epoch-mean query / history assignment.
    pub h_query_usage: f64,
    pub h_history_usage: f64,
    pub lr: f64,
}

pub fn write_epoch_csv(path: &std::path::Path, rows: &[EpochLog]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_auroc,val_auprc,H_qbar,H_hbar,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_auroc, r.val_auprc, r.h_query_usage, r.h_history_usage, r.lr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Best model by validation AUROC, or the last completed epoch's
    /// model when training aborted on divergence.
    pub model: ModelState,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_auroc: f64,
    pub stopped_early: bool,
    pub diverged: bool,
}

/// Mean sigmoid score per example, in input order.
pub fn score_examples(model: &ModelState, examples: &[PreparedExample]) -> Result<Vec<f64>> {
    examples
        .par_iter()
        .map(|ex| forward_example(model, ex).map(|f| f.probability()))
        .collect()
}

/// Divergence test: a non-finite batch loss, or an epoch mean more than
/// 10x above the first epoch's (plus one to keep tiny baselines from
/// tripping it), aborts and returns the last completed epoch's model.
fn diverged(epoch_loss: f64, first_loss: f64) -> bool {
    !epoch_loss.is_finite() || epoch_loss > 10.0 * (first_loss.abs() + 1.0)
}

pub fn train(
    mut model: ModelState,
    train_set: &[PreparedExample],
    val_set: &[PreparedExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("train and validation sets must be non-empty".into()));
    }
    let val_labels: Vec<u8> = val_set.iter().map(|e| e.label).collect();
    let mut grads = model.zeros_like();
    let mut log = Vec::new();
    let mut best: Option<(usize, f64, ModelState)> = None;
    let mut last_good = model.clone();
    let mut first_loss = f64::NAN;
    let mut bad_epochs = 0usize;
    let mut stopped_early = false;
    let mut did_diverge = false;

    for epoch in 0..cfg.max_epochs {
        let lr = cosine_lr(cfg.lr, epoch, cfg.max_epochs);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_from_seed(derive_seed(cfg.seed, epoch as u64)));

        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let l = model.bank.len();
        let mut query_prob_sum = vec![0.0; l];
        let mut history_prob_sum = vec![0.0; l];
        let mut n_query = 0usize;
        let mut n_history = 0usize;
        let mut non_finite = false;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let step = batch_loss_and_grads(&model, &batch, cfg.lambda_u, &mut grads)?;
            if !step.loss.is_finite() {
                non_finite = true;
                break;
            }
            apply_sgd(&mut model, &mut grads, lr);
            epoch_loss += step.loss;
            batches += 1;
            axpy(&mut query_prob_sum, 1.0, &step.sum_query_probs);
            n_query += batch.len();
            if let Some(h) = &step.sum_history_probs {
                axpy(&mut history_prob_sum, 1.0, h);
                n_history += step.n_history;
            }
        }
        let epoch_loss = if batches > 0 { epoch_loss / batches as f64 } else { f64::NAN };
        if epoch == 0 {
            first_loss = epoch_loss;
        }
        if non_finite || diverged(epoch_loss, first_loss) {
            did_diverge = true;
            model = last_good;
            break;
        }

        let scores = score_examples(&model, val_set)?;
        let val_auroc = auroc(&scores, &val_labels)?;
        let val_auprc = auprc(&scores, &val_labels)?;
        let mean_q: Vec<f64> = query_prob_sum.iter().map(|v| v / n_query as f64).collect();
        let h_query_usage = entropy(&mean_q);
        let h_history_usage = if n_history > 0 {
            let mean_h: Vec<f64> = history_prob_sum.iter().map(|v| v / n_history as f64).collect();
            entropy(&mean_h)
        } else {
            0.0
        };
        log.push(EpochLog {
            epoch,
            train_loss: epoch_loss,
            val_auroc,
            val_auprc,
            h_query_usage,
            h_history_usage,
            lr,
        });
        last_good = model.clone();

        let improved = best.as_ref().map_or(true, |(_, b, _)| val_auroc > *b);
        if improved {
            best = Some((epoch, val_auroc, model.clone()));
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_epoch, best_val_auroc, best_model) = match best {
        Some((e, v, m)) if !did_diverge => (e, v, m),
        Some((e, v, _)) => (e, v, model),
        None => (0, f64::NAN, model),
    };
    Ok(TrainOutcome {
        model: best_model,
        log,
        best_epoch,
        best_val_auroc,
        stopped_early,
        diverged: did_diverge,
    })
}
