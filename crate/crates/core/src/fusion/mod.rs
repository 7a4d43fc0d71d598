//! Evidence fusion: a small transformer over one query slot plus up to M
//! weighted evidence slots, pooled into a single risk logit.
//!
//! Slot 0 carries the query representation unweighted; slot j >= 1 carries
//! w_j * c_j for the j-th retrieved chunk in similarity order. Only slots
//! that actually hold evidence are constructed, so absent slots cannot
//! influence the logit. Each slot adds a learned position vector before
//! the transformer stack; chunk vectors are treated as constants (the
//! retriever stays frozen), so backward returns gradients for the query
//! and the scalar weights only.

pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::attention::{ln_backward, ln_forward, TransformerBlock};
use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FusionPooling {
    Mean,
    QuerySlot,
}

pub const DEFAULT_FUSION_LAYERS: usize = 2;
pub const DEFAULT_FUSION_HEADS: usize = 4;

#[derive(Debug, Clone)]
pub struct FusionNet {
    /// One learned position vector per slot, (M + 1) x d.
    pub slot_pos: Mat,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln_g: Mat,
    pub final_ln_b: Mat,
    pub head_w: Mat,
    pub head_b: Mat,
    pub heads: usize,
    pub pooling: FusionPooling,
}

impl FusionNet {
    pub fn new(
        d: usize,
        m_retrieved: usize,
        layers: usize,
        heads: usize,
        pooling: FusionPooling,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("fusion needs at least one layer".into()));
        }
        if d % heads != 0 {
            return Err(Error::Config(format!(
                "width {d} not divisible by {heads} fusion heads"
            )));
        }
        let mut g = Mat::zeros(1, d);
        g.fill(1.0);
        Ok(FusionNet {
            slot_pos: Mat::uniform_init(m_retrieved + 1, d, rng),
            blocks: (0..layers).map(|_| TransformerBlock::new(d, rng)).collect(),
            final_ln_g: g,
            final_ln_b: Mat::zeros(1, d),
            head_w: Mat::uniform_init(1, d, rng),
            head_b: Mat::zeros(1, 1),
            heads,
            pooling,
        })
    }

    pub fn d(&self) -> usize {
        self.slot_pos.cols
    }

    /// Capacity in evidence slots (excludes the query slot).
    pub fn max_slots(&self) -> usize {
        self.slot_pos.rows - 1
    }

    pub fn zeros_like(&self) -> Self {
        FusionNet {
            slot_pos: self.slot_pos.zeros_like(),
            blocks: self.blocks.iter().map(TransformerBlock::zeros_like).collect(),
            final_ln_g: self.final_ln_g.zeros_like(),
            final_ln_b: self.final_ln_b.zeros_like(),
            head_w: self.head_w.zeros_like(),
            head_b: self.head_b.zeros_like(),
            heads: self.heads,
            pooling: self.pooling,
        }
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Mat)> {
        let mut out = vec![(format!("{prefix}/slot_pos"), &self.slot_pos)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.tensors(&format!("{prefix}/block{i}")));
        }
        out.push((format!("{prefix}/final_ln_g"), &self.final_ln_g));
        out.push((format!("{prefix}/final_ln_b"), &self.final_ln_b));
        out.push((format!("{prefix}/head_w"), &self.head_w));
        out.push((format!("{prefix}/head_b"), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Mat)> {
        let mut out = vec![(format!("{prefix}/slot_pos"), &mut self.slot_pos)];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.extend(b.tensors_mut(&format!("{prefix}/block{i}")));
        }
        out.push((format!("{prefix}/final_ln_g"), &mut self.final_ln_g));
        out.push((format!("{prefix}/final_ln_b"), &mut self.final_ln_b));
        out.push((format!("{prefix}/head_w"), &mut self.head_w));
        out.push((format!("{prefix}/head_b"), &mut self.head_b));
        out
    }

    /// Fuse a query vector with weighted evidence vectors into a logit.
    /// `chunks` and `weights` run in similarity order and may be shorter
    /// than the slot capacity; they must have equal length.
    pub fn forward(
        &self,
        query: &[f64],
        chunks: &[&[f64]],
        weights: &[f64],
    ) -> Result<(f64, FusionCache)> {
        let d = self.d();
        if query.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "query width {} vs fusion width {d}",
                query.len()
            )));
        }
        if chunks.len() != weights.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} chunks vs {} weights",
                chunks.len(),
                weights.len()
            )));
        }
        if chunks.len() > self.max_slots() {
            return Err(Error::DimensionMismatch(format!(
                "{} chunks exceed {} evidence slots",
                chunks.len(),
                self.max_slots()
            )));
        }
        let rows = 1 + chunks.len();
        let mut x = Mat::zeros(rows, d);
        for (k, (xi, pi)) in x.row_mut(0).iter_mut().zip(self.slot_pos.row(0)).enumerate() {
            *xi = query[k] + pi;
        }
        for (j, (c, &w)) in chunks.iter().zip(weights).enumerate() {
            if c.len() != d {
                return Err(Error::DimensionMismatch(format!(
                    "chunk width {} vs fusion width {d}",
                    c.len()
                )));
            }
            let pos = self.slot_pos.row(j + 1);
            for (k, xi) in x.row_mut(j + 1).iter_mut().enumerate() {
                *xi = w * c[k] + pos[k];
            }
        }

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x;
        for b in &self.blocks {
            let (next, cache) = b.forward(&cur, self.heads, false);
            block_caches.push(cache);
            cur = next;
        }
        let mut normed = Mat::zeros(rows, d);
        let mut ln_xhat = Mat::zeros(rows, d);
        let mut ln_inv = vec![0.0; rows];
        for i in 0..rows {
            let (y, xhat, inv) =
                ln_forward(cur.row(i), self.final_ln_g.row(0), self.final_ln_b.row(0));
            normed.row_mut(i).copy_from_slice(&y);
            ln_xhat.row_mut(i).copy_from_slice(&xhat);
            ln_inv[i] = inv;
        }
        let pooled: Vec<f64> = match self.pooling {
            FusionPooling::Mean => (0..d)
                .map(|k| (0..rows).map(|i| normed.row(i)[k]).sum::<f64>() / rows as f64)
                .collect(),
            FusionPooling::QuerySlot => normed.row(0).to_vec(),
        };
        let logit = crate::linalg::dot(self.head_w.row(0), &pooled) + self.head_b.row(0)[0];
        Ok((
            logit,
            FusionCache {
                chunks: chunks.iter().map(|c| c.to_vec()).collect(),
                block_caches,
                ln_xhat,
                ln_inv,
                pooled,
            },
        ))
    }

    /// Backward pass; accumulates parameter gradients into `grads` and
    /// returns (d query, d weights). Chunk vectors are constants.
    pub fn backward(&self, dlogit: f64, cache: &FusionCache, grads: &mut FusionNet) -> (Vec<f64>, Vec<f64>) {
        let d = self.d();
        let rows = cache.ln_xhat.rows;

        grads.head_b.row_mut(0)[0] += dlogit;
        for (g, p) in grads.head_w.row_mut(0).iter_mut().zip(&cache.pooled) {
            *g += dlogit * p;
        }
        let mut dnormed = Mat::zeros(rows, d);
        match self.pooling {
            FusionPooling::Mean => {
                for i in 0..rows {
                    for (dn, w) in dnormed.row_mut(i).iter_mut().zip(self.head_w.row(0)) {
                        *dn = dlogit * w / rows as f64;
                    }
                }
            }
            FusionPooling::QuerySlot => {
                for (dn, w) in dnormed.row_mut(0).iter_mut().zip(self.head_w.row(0)) {
                    *dn = dlogit * w;
                }
            }
        }

        let mut dcur = Mat::zeros(rows, d);
        for i in 0..rows {
            let dx = ln_backward(
                dnormed.row(i),
                cache.ln_xhat.row(i),
                cache.ln_inv[i],
                self.final_ln_g.row(0),
                grads.final_ln_g.row_mut(0),
                grads.final_ln_b.row_mut(0),
            );
            dcur.row_mut(i).copy_from_slice(&dx);
        }
        for (i, (b, bc)) in self.blocks.iter().zip(&cache.block_caches).enumerate().rev() {
            dcur = b.backward(&dcur, bc, self.heads, false, &mut grads.blocks[i]);
        }

        for i in 0..rows {
            for (g, dx) in grads.slot_pos.row_mut(i).iter_mut().zip(dcur.row(i)) {
                *g += dx;
            }
        }
        let dquery = dcur.row(0).to_vec();
        let dweights: Vec<f64> = cache
            .chunks
            .iter()
            .enumerate()
            .map(|(j, c)| crate::linalg::dot(dcur.row(j + 1), c))
            .collect();
        (dquery, dweights)
    }
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    chunks: Vec<Vec<f64>>,
    block_caches: Vec<crate::encoder::attention::BlockCache>,
    ln_xhat: Mat,
    ln_inv: Vec<f64>,
    pooled: Vec<f64>,
}

/// Binary cross-entropy on a raw logit, stable for large magnitudes:
/// max(l, 0) - l * y + ln(1 + exp(-|l|)).
pub fn bce_with_logit(logit: f64, label: u8) -> f64 {
    let y = f64::from(label);
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// d loss / d logit = sigmoid(logit) - y.
pub fn bce_grad(logit: f64, label: u8) -> f64 {
    sigmoid(logit) - f64::from(label)
}

pub fn sigmoid(logit: f64) -> f64 {
    if logit >= 0.0 {
        1.0 / (1.0 + (-logit).exp())
    } else {
        let e = logit.exp();
        e / (1.0 + e)
    }
}
