//! Shared prototype bank. Query and history-chunk embeddings are softly
//! assigned to the same L prototypes at different temperatures; the
//! cross-entropy between a query's assignment and a chunk's assignment
//! scores how relevant the chunk is, and a batch-level usage entropy
//! keeps the bank from collapsing onto a few prototypes.
//!
//! Numerical ground rules: softmax always subtracts the max before
//! exponentiating, and log-probabilities come from the log-sum-exp form,
//! never from `log(probs)`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, softmax_backward, softmax_with_log, Mat};

pub const DEFAULT_PROTOTYPES: usize = 128;
pub const DEFAULT_T_QUERY: f64 = 0.05;
pub const DEFAULT_T_HISTORY: f64 = 0.2;
pub const DEFAULT_T_SELECT: f64 = 0.15;

/// Which temperature an assignment was computed with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignKind {
    Query,
    History,
}

#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub p: Mat, // L x d
    pub t_q: f64,
    pub t_h: f64,
    pub t_s: f64,
}

/// Soft assignment of one embedding to the bank, with everything the
/// backward pass needs.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    kind: AssignKind,
    x: Vec<f64>,
}

impl PrototypeBank {
    pub fn new(l: usize, d: usize, t_q: f64, t_h: f64, t_s: f64, rng: &mut impl Rng) -> Result<Self> {
        if l == 0 || d == 0 {
            return Err(Error::Config("prototype bank needs L >= 1 and d >= 1".into()));
        }
        if !(t_q > 0.0 && t_h > 0.0 && t_s > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if t_q >= t_h {
            return Err(Error::Config(format!(
                "query temperature {t_q} must be sharper than history temperature {t_h}"
            )));
        }
        Ok(PrototypeBank {
            p: Mat::uniform_init(l, d, rng),
            t_q,
            t_h,
            t_s,
        })
    }

    pub fn with_defaults(l: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        PrototypeBank::new(l, d, DEFAULT_T_QUERY, DEFAULT_T_HISTORY, DEFAULT_T_SELECT, rng)
    }

    pub fn len(&self) -> usize {
        self.p.rows
    }

    pub fn is_empty(&self) -> bool {
        self.p.rows == 0
    }

    /// Same shapes and temperatures, zero prototypes; holds gradients.
    pub fn zeros_like(&self) -> Self {
        PrototypeBank {
            p: self.p.zeros_like(),
            t_q: self.t_q,
            t_h: self.t_h,
            t_s: self.t_s,
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![("bank/p".to_string(), &self.p)]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        vec![("bank/p".to_string(), &mut self.p)]
    }

    fn temperature(&self, kind: AssignKind) -> f64 {
        match kind {
            AssignKind::Query => self.t_q,
            AssignKind::History => self.t_h,
        }
    }

    /// pi = softmax(x P^T / T).
    pub fn assign(&self, x: &[f64], kind: AssignKind) -> Assignment {
        assert_eq!(x.len(), self.p.cols, "embedding width mismatch");
        let t = self.temperature(kind);
        let logits: Vec<f64> = (0..self.p.rows).map(|l| dot(x, self.p.row(l)) / t).collect();
        let (probs, log_probs) = softmax_with_log(&logits);
        Assignment {
            probs,
            log_probs,
            kind,
            x: x.to_vec(),
        }
    }

    /// Backward of `assign` for combined upstream gradients on probs and
    /// log-probs. Accumulates into `dx` and `pgrads`.
    pub fn assign_backward(
        &self,
        a: &Assignment,
        dprobs: &[f64],
        dlog_probs: &[f64],
        dx: &mut [f64],
        pgrads: &mut Mat,
    ) {
        let t = self.temperature(a.kind);
        // dz from the probs path.
        let mut dz = softmax_backward(&a.probs, dprobs);
        // dz from the log-probs path: dz_m += dlp_m - pi_m * sum(dlp).
        let sum_dlp: f64 = dlog_probs.iter().sum();
        for m in 0..dz.len() {
            dz[m] += dlog_probs[m] - a.probs[m] * sum_dlp;
        }
        for m in 0..dz.len() {
            let s = dz[m] / t;
            axpy(dx, s, self.p.row(m));
            axpy(pgrads.row_mut(m), s, &a.x);
        }
    }
}

/// Alignment score: cross-entropy of a chunk's assignment under the
/// query's assignment, alpha = -sum_l pi_q(l) * log pi_i(l).
pub fn align(query: &Assignment, chunk: &Assignment) -> f64 {
    debug_assert_eq!(query.probs.len(), chunk.log_probs.len());
    -dot(&query.probs, &chunk.log_probs)
}

/// Accumulates d(alpha)/d(pi_q) and d(alpha)/d(log pi_i) scaled by `dalpha`.
pub fn align_backward(
    query: &Assignment,
    chunk: &Assignment,
    dalpha: f64,
    dprobs_q: &mut [f64],
    dlog_probs_i: &mut [f64],
) {
    axpy(dprobs_q, -dalpha, &chunk.log_probs);
    axpy(dlog_probs_i, -dalpha, &query.probs);
}

/// Chunk weights: w = softmax(-alpha / T_s). Lower alignment cost means
/// higher weight.
pub fn weigh(alphas: &[f64], t_s: f64) -> Vec<f64> {
    let neg: Vec<f64> = alphas.iter().map(|a| -a / t_s).collect();
    softmax_with_log(&neg).0
}

/// d(loss)/d(alphas) given d(loss)/d(weights).
pub fn weigh_backward(weights: &[f64], dweights: &[f64], t_s: f64) -> Vec<f64> {
    softmax_backward(weights, dweights)
        .into_iter()
        .map(|dz| -dz / t_s)
        .collect()
}

/// Shannon entropy with the 0 ln 0 = 0 convention.
pub fn entropy(p: &[f64]) -> f64 {
    p.iter()
        .map(|&x| if x > 0.0 { -x * x.ln() } else { 0.0 })
        .sum()
}

/// Batch usage summary for the entropy regularizer.
#[derive(Debug, Clone)]
pub struct UsageSummary {
    pub mean_query: Vec<f64>,
    /// None when the batch retrieved zero history chunks.
    pub mean_history: Option<Vec<f64>>,
    /// H(mean_query) + H(mean_history), or H(mean_query) alone.
    pub value: f64,
    pub history_absent: bool,
}

/// Mean assignments over the batch and the summed entropy. Only real
/// retrieved chunks participate; a batch with none falls back to the
/// query term alone and flags it.
pub fn usage_regularizer(queries: &[Assignment], history: &[Assignment]) -> UsageSummary {
    assert!(!queries.is_empty(), "usage regularizer needs >= 1 query");
    let l = queries[0].probs.len();
    let mut mean_query = vec![0.0; l];
    for a in queries {
        axpy(&mut mean_query, 1.0 / queries.len() as f64, &a.probs);
    }
    let mut value = entropy(&mean_query);
    let mean_history = if history.is_empty() {
        None
    } else {
        let mut m = vec![0.0; l];
        for a in history {
            axpy(&mut m, 1.0 / history.len() as f64, &a.probs);
        }
        value += entropy(&m);
        Some(m)
    };
    UsageSummary {
        history_absent: mean_history.is_none(),
        mean_query,
        mean_history,
        value,
    }
}

/// Per-member gradient of H(mean) w.r.t. each contributing `probs`
/// vector, scaled by `dvalue`. The same vector applies to every member
/// of the group because the mean weights them equally.
pub fn usage_entropy_grad(mean: &[f64], group_size: usize, dvalue: f64) -> Vec<f64> {
    let b = group_size as f64;
    mean.iter()
        .map(|&m| {
            if m > 0.0 {
                -dvalue * (m.ln() + 1.0) / b
            } else {
                0.0
            }
        })
        .collect()
}
