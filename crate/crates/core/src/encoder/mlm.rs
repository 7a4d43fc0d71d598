//! Masked-concept pretraining. Only the categorical embedding components
//! feed the backbone here; value and time components stay out of the
//! pretraining objective and are learned during fine-tuning.

use rand::Rng;

use crate::error::Result;
use crate::linalg::{softmax_with_log, Mat};
use crate::optim::AdamW;
use crate::rng::{derive_seed, rng_from_seed};

use super::masking::{apply_masking, plan_masking, MaskingPlan};
use super::{
    encode_backward, encode_sequence, EmbedMode, EmbeddingTables, SequenceEncoder, TokenInput,
};

/// Linear decoder from token vectors to concept logits.
#[derive(Debug, Clone)]
pub struct MlmHead {
    pub w: Mat, // vocab x d
    pub b: Mat, // 1 x vocab
}

impl MlmHead {
    pub fn new(vocab_size: usize, d: usize, rng: &mut impl Rng) -> Self {
        MlmHead {
            w: Mat::uniform_init(vocab_size, d, rng),
            b: Mat::zeros(1, vocab_size),
        }
    }

    pub fn zeros_like(&self) -> Self {
        MlmHead {
            w: self.w.zeros_like(),
            b: self.b.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![("mlm/w".into(), &self.w), ("mlm/b".into(), &self.b)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        vec![("mlm/w".into(), &mut self.w), ("mlm/b".into(), &mut self.b)]
    }
}

/// Cross-entropy over the masked positions of one corrupted sequence.
/// Accumulates gradients scaled by `scale` and returns the example loss
/// (mean over its masked positions).
#[allow(clippy::too_many_arguments)]
pub fn mlm_example_loss(
    tables: &EmbeddingTables,
    encoder: &SequenceEncoder,
    head: &MlmHead,
    masked_tokens: &[TokenInput],
    plan: &MaskingPlan,
    scale: f64,
    tgrads: &mut EmbeddingTables,
    egrads: &mut SequenceEncoder,
    hgrads: &mut MlmHead,
) -> Result<f64> {
    assert!(!plan.targets.is_empty(), "plan has no masked positions");
    let enc = encode_sequence(tables, encoder, masked_tokens, EmbedMode::Categorical)?;
    // CLS pooling prepends one position; targets index the raw sequence.
    let offset = enc.token_vecs.rows - masked_tokens.len();

    let n_t = plan.targets.len() as f64;
    let mut loss = 0.0;
    let mut dtokens = Mat::zeros(enc.token_vecs.rows, enc.token_vecs.cols);
    for t in &plan.targets {
        let h = enc.token_vecs.row(offset + t.position);
        let mut logits = head.w.matvec(h);
        for (l, bias) in logits.iter_mut().zip(head.b.row(0)) {
            *l += bias;
        }
        let (probs, log_probs) = softmax_with_log(&logits);
        loss -= log_probs[t.original as usize] / n_t;

        let mut dlogits = probs;
        dlogits[t.original as usize] -= 1.0;
        let s = scale / n_t;
        hgrads.w.add_outer(&dlogits, h, s);
        for (g, dl) in hgrads.b.row_mut(0).iter_mut().zip(&dlogits) {
            *g += s * dl;
        }
        let dh = head.w.matvec_t(&dlogits);
        for (g, d) in dtokens.row_mut(offset + t.position).iter_mut().zip(&dh) {
            *g += s * d;
        }
    }
    encode_backward(tables, encoder, &enc, None, Some(&dtokens), tgrads, egrads);
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct MlmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for MlmTrainConfig {
    fn default() -> Self {
        MlmTrainConfig {
            steps: 200,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

/// AdamW pretraining over a corpus of token sequences. Returns the
/// per-step batch losses.
pub fn pretrain_mlm(
    tables: &mut EmbeddingTables,
    encoder: &mut SequenceEncoder,
    head: &mut MlmHead,
    sequences: &[Vec<TokenInput>],
    vocab_size: u32,
    cfg: &MlmTrainConfig,
) -> Result<Vec<f64>> {
    assert!(!sequences.is_empty(), "no pretraining sequences");
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut t_m = tables.zeros_like();
    let mut t_v = tables.zeros_like();
    let mut e_m = encoder.zeros_like();
    let mut e_v = encoder.zeros_like();
    let mut h_m = head.zeros_like();
    let mut h_v = head.zeros_like();

    let mut sampler = rng_from_seed(derive_seed(cfg.seed, 0x9e37));
    let mut losses = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let mut tg = tables.zeros_like();
        let mut eg = encoder.zeros_like();
        let mut hg = head.zeros_like();

        // Plan the whole batch first so each contributing example can be
        // weighted equally in the gradient.
        let mut batch: Vec<(usize, MaskingPlan)> = Vec::with_capacity(cfg.batch_size);
        for i in 0..cfg.batch_size {
            let idx = sampler.gen_range(0..sequences.len());
            let ids: Vec<u32> = sequences[idx].iter().map(|t| t.concept_id).collect();
            let mut salt = (step * cfg.batch_size + i) as u64;
            let mut plan = plan_masking(&ids, vocab_size, derive_seed(cfg.seed, salt));
            // A short sequence can draw zero masked positions; redraw so
            // every batch slot contributes.
            while plan.targets.is_empty() {
                salt = salt.wrapping_add(0x10_0000);
                plan = plan_masking(&ids, vocab_size, derive_seed(cfg.seed, salt));
            }
            batch.push((idx, plan));
        }

        let scale = 1.0 / batch.len() as f64;
        let mut step_loss = 0.0;
        for (idx, plan) in &batch {
            let mut corrupted = sequences[*idx].clone();
            apply_masking(&mut corrupted, plan);
            step_loss += scale
                * mlm_example_loss(
                    tables, encoder, head, &corrupted, plan, scale, &mut tg, &mut eg, &mut hg,
                )?;
        }
        losses.push(step_loss);

        opt.begin_step();
        apply_adamw(&opt, tables.tensors_mut(), tg.tensors(), t_m.tensors_mut(), t_v.tensors_mut());
        apply_adamw(
            &opt,
            encoder.tensors_mut("backbone"),
            eg.tensors("backbone"),
            e_m.tensors_mut("backbone"),
            e_v.tensors_mut("backbone"),
        );
        apply_adamw(&opt, head.tensors_mut(), hg.tensors(), h_m.tensors_mut(), h_v.tensors_mut());
    }
    Ok(losses)
}

fn apply_adamw(
    opt: &AdamW,
    params: Vec<(String, &mut Mat)>,
    grads: Vec<(String, &Mat)>,
    m: Vec<(String, &mut Mat)>,
    v: Vec<(String, &mut Mat)>,
) {
    for (((p, g), mm), vv) in params.into_iter().zip(grads).zip(m).zip(v) {
        debug_assert_eq!(p.0, g.0);
        opt.update(p.1, g.1, mm.1, vv.1);
    }
}
