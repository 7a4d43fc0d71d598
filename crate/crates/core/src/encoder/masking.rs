//! Masked-token planning for pretraining.
//!
//! Every non-special position is selected independently with probability
//! 0.15. A selected position is replaced by the MASK token 80% of the
//! time, by a random non-reserved concept 10% of the time, and kept
//! unchanged 10% of the time; the original id is always the label.

use rand::Rng;

use crate::rng::rng_from_seed;
use crate::timeline::vocab::{CLS, PAD};

use super::{draw_random_concept, TokenInput};

pub const MASK_PROB: f64 = 0.15;
const MASK_SPLIT: f64 = 0.8;
const RANDOM_SPLIT: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    Mask,
    Random(u32),
    Keep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskTarget {
    pub position: usize,
    pub original: u32,
    pub action: MaskAction,
}

#[derive(Debug, Clone, Default)]
pub struct MaskingPlan {
    pub targets: Vec<MaskTarget>,
}

/// Decide which positions to corrupt. PAD and CLS positions are never
/// selected. Deterministic in (ids, vocab_size, seed).
pub fn plan_masking(concept_ids: &[u32], vocab_size: u32, seed: u64) -> MaskingPlan {
    let mut rng = rng_from_seed(seed);
    let mut targets = Vec::new();
    for (position, &id) in concept_ids.iter().enumerate() {
        if id == PAD || id == CLS {
            continue;
        }
        if !rng.gen_bool(MASK_PROB) {
            continue;
        }
        let u: f64 = rng.gen();
        let action = if u < MASK_SPLIT {
            MaskAction::Mask
        } else if u < RANDOM_SPLIT {
            MaskAction::Random(draw_random_concept(vocab_size, &mut rng))
        } else {
            MaskAction::Keep
        };
        targets.push(MaskTarget {
            position,
            original: id,
            action,
        });
    }
    MaskingPlan { targets }
}

/// Corrupt concept ids in place according to the plan. Value, time, and
/// the other id components are untouched.
pub fn apply_masking(tokens: &mut [TokenInput], plan: &MaskingPlan) {
    for t in &plan.targets {
        match t.action {
            MaskAction::Mask => tokens[t.position].concept_id = crate::timeline::vocab::MASK,
            MaskAction::Random(id) => tokens[t.position].concept_id = id,
            MaskAction::Keep => {}
        }
    }
}
