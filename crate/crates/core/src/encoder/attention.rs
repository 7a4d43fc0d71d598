//! Pre-norm transformer block shared by the sequence backbone and the
//! fusion head. Forward passes return explicit caches; backward passes
//! consume them and accumulate parameter gradients into a zeroed mirror
//! of the block, so every layer stays finite-difference checkable.

use rand::Rng;

use crate::linalg::{axpy, dot, softmax_backward, softmax_with_log, Mat};

const LN_EPS: f64 = 1e-5;
/// FFN hidden width as a multiple of the model width.
const FFN_MULT: usize = 4;
const ROTARY_BASE: f64 = 10_000.0;

/// Per-vector layer norm. Returns (y, xhat, inv_sigma).
pub fn ln_forward(x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mu) * inv).collect();
    let y: Vec<f64> = xhat
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(h, (g, b))| h * g + b)
        .collect();
    (y, xhat, inv)
}

/// Backward of layer norm; accumulates dgamma/dbeta and returns dx.
pub fn ln_backward(
    dy: &[f64],
    xhat: &[f64],
    inv: f64,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let n = dy.len() as f64;
    let mut dxhat = vec![0.0; dy.len()];
    for i in 0..dy.len() {
        dgamma[i] += dy[i] * xhat[i];
        dbeta[i] += dy[i];
        dxhat[i] = dy[i] * gamma[i];
    }
    let mean_dxhat = dxhat.iter().sum::<f64>() / n;
    let mean_dxhat_xhat = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / n;
    dxhat
        .iter()
        .zip(xhat)
        .map(|(dh, h)| inv * (dh - mean_dxhat - h * mean_dxhat_xhat))
        .collect()
}

/// Rotate query/key pairs in place by position-dependent angles.
fn rotary_apply(vecs: &mut Mat, heads: usize, inverse: bool) {
    let dh = vecs.cols / heads;
    for pos in 0..vecs.rows {
        let row = vecs.row_mut(pos);
        for h in 0..heads {
            let base = h * dh;
            for i in 0..dh / 2 {
                let theta = ROTARY_BASE.powf(-2.0 * i as f64 / dh as f64);
                let mut angle = pos as f64 * theta;
                if inverse {
                    angle = -angle;
                }
                let (sin, cos) = angle.sin_cos();
                let a = row[base + 2 * i];
                let b = row[base + 2 * i + 1];
                row[base + 2 * i] = a * cos - b * sin;
                row[base + 2 * i + 1] = a * sin + b * cos;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub ln1_g: Mat,
    pub ln1_b: Mat,
    pub wq: Mat,
    pub bq: Mat,
    pub wk: Mat,
    pub bk: Mat,
    pub wv: Mat,
    pub bv: Mat,
    pub wo: Mat,
    pub bo: Mat,
    pub ln2_g: Mat,
    pub ln2_b: Mat,
    pub ffn_w1: Mat,
    pub ffn_b1: Mat,
    pub ffn_w2: Mat,
    pub ffn_b2: Mat,
}

/// Activations retained by `forward` for the matching `backward` call.
#[derive(Debug, Clone)]
pub struct BlockCache {
    xhat1: Mat,
    inv1: Vec<f64>,
    x1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
    xhat2: Mat,
    inv2: Vec<f64>,
    x2: Mat,
    ha: Mat,
}

impl TransformerBlock {
    pub fn new(d: usize, rng: &mut impl Rng) -> Self {
        TransformerBlock {
            ln1_g: ones(d),
            ln1_b: Mat::zeros(1, d),
            wq: Mat::uniform_init(d, d, rng),
            bq: Mat::zeros(1, d),
            wk: Mat::uniform_init(d, d, rng),
            bk: Mat::zeros(1, d),
            wv: Mat::uniform_init(d, d, rng),
            bv: Mat::zeros(1, d),
            wo: Mat::uniform_init(d, d, rng),
            bo: Mat::zeros(1, d),
            ln2_g: ones(d),
            ln2_b: Mat::zeros(1, d),
            ffn_w1: Mat::uniform_init(FFN_MULT * d, d, rng),
            ffn_b1: Mat::zeros(1, FFN_MULT * d),
            ffn_w2: Mat::uniform_init(d, FFN_MULT * d, rng),
            ffn_b2: Mat::zeros(1, d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        TransformerBlock {
            ln1_g: self.ln1_g.zeros_like(),
            ln1_b: self.ln1_b.zeros_like(),
            wq: self.wq.zeros_like(),
            bq: self.bq.zeros_like(),
            wk: self.wk.zeros_like(),
            bk: self.bk.zeros_like(),
            wv: self.wv.zeros_like(),
            bv: self.bv.zeros_like(),
            wo: self.wo.zeros_like(),
            bo: self.bo.zeros_like(),
            ln2_g: self.ln2_g.zeros_like(),
            ln2_b: self.ln2_b.zeros_like(),
            ffn_w1: self.ffn_w1.zeros_like(),
            ffn_b1: self.ffn_b1.zeros_like(),
            ffn_w2: self.ffn_w2.zeros_like(),
            ffn_b2: self.ffn_b2.zeros_like(),
        }
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Mat)> {
        vec![
            (format!("{prefix}/ln1_g"), &self.ln1_g),
            (format!("{prefix}/ln1_b"), &self.ln1_b),
            (format!("{prefix}/wq"), &self.wq),
            (format!("{prefix}/bq"), &self.bq),
            (format!("{prefix}/wk"), &self.wk),
            (format!("{prefix}/bk"), &self.bk),
            (format!("{prefix}/wv"), &self.wv),
            (format!("{prefix}/bv"), &self.bv),
            (format!("{prefix}/wo"), &self.wo),
            (format!("{prefix}/bo"), &self.bo),
            (format!("{prefix}/ln2_g"), &self.ln2_g),
            (format!("{prefix}/ln2_b"), &self.ln2_b),
            (format!("{prefix}/ffn_w1"), &self.ffn_w1),
            (format!("{prefix}/ffn_b1"), &self.ffn_b1),
            (format!("{prefix}/ffn_w2"), &self.ffn_w2),
            (format!("{prefix}/ffn_b2"), &self.ffn_b2),
        ]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Mat)> {
        vec![
            (format!("{prefix}/ln1_g"), &mut self.ln1_g),
            (format!("{prefix}/ln1_b"), &mut self.ln1_b),
            (format!("{prefix}/wq"), &mut self.wq),
            (format!("{prefix}/bq"), &mut self.bq),
            (format!("{prefix}/wk"), &mut self.wk),
            (format!("{prefix}/bk"), &mut self.bk),
            (format!("{prefix}/wv"), &mut self.wv),
            (format!("{prefix}/bv"), &mut self.bv),
            (format!("{prefix}/wo"), &mut self.wo),
            (format!("{prefix}/bo"), &mut self.bo),
            (format!("{prefix}/ln2_g"), &mut self.ln2_g),
            (format!("{prefix}/ln2_b"), &mut self.ln2_b),
            (format!("{prefix}/ffn_w1"), &mut self.ffn_w1),
            (format!("{prefix}/ffn_b1"), &mut self.ffn_b1),
            (format!("{prefix}/ffn_w2"), &mut self.ffn_w2),
            (format!("{prefix}/ffn_b2"), &mut self.ffn_b2),
        ]
    }

    /// Full pre-norm block: x + MHA(LN(x)), then + FFN(LN(.)).
    pub fn forward(&self, x: &Mat, heads: usize, rotary: bool) -> (Mat, BlockCache) {
        let n = x.rows;
        let d = x.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut xhat1 = Mat::zeros(n, d);
        let mut inv1 = vec![0.0; n];
        let mut x1 = Mat::zeros(n, d);
        for i in 0..n {
            let (y, xh, inv) = ln_forward(x.row(i), self.ln1_g.row(0), self.ln1_b.row(0));
            x1.row_mut(i).copy_from_slice(&y);
            xhat1.row_mut(i).copy_from_slice(&xh);
            inv1[i] = inv;
        }

        let mut q = Mat::zeros(n, d);
        let mut k = Mat::zeros(n, d);
        let mut v = Mat::zeros(n, d);
        for i in 0..n {
            let xi = x1.row(i);
            let mut qi = self.wq.matvec(xi);
            axpy(&mut qi, 1.0, self.bq.row(0));
            q.row_mut(i).copy_from_slice(&qi);
            let mut ki = self.wk.matvec(xi);
            axpy(&mut ki, 1.0, self.bk.row(0));
            k.row_mut(i).copy_from_slice(&ki);
            let mut vi = self.wv.matvec(xi);
            axpy(&mut vi, 1.0, self.bv.row(0));
            v.row_mut(i).copy_from_slice(&vi);
        }
        if rotary {
            rotary_apply(&mut q, heads, false);
            rotary_apply(&mut k, heads, false);
        }

        let mut probs = Vec::with_capacity(heads);
        let mut ctx = Mat::zeros(n, d);
        for h in 0..heads {
            let base = h * dh;
            let mut p = Mat::zeros(n, n);
            for i in 0..n {
                let qi = &q.row(i)[base..base + dh];
                let scores: Vec<f64> = (0..n)
                    .map(|j| dot(qi, &k.row(j)[base..base + dh]) * scale)
                    .collect();
                let (pi, _) = softmax_with_log(&scores);
                for j in 0..n {
                    let aij = pi[j];
                    let vj = &v.row(j)[base..base + dh];
                    let c = &mut ctx.row_mut(i)[base..base + dh];
                    for (cv, vv) in c.iter_mut().zip(vj) {
                        *cv += aij * vv;
                    }
                }
                p.row_mut(i).copy_from_slice(&pi);
            }
            probs.push(p);
        }

        let mut xm = Mat::zeros(n, d);
        for i in 0..n {
            let mut attn = self.wo.matvec(ctx.row(i));
            axpy(&mut attn, 1.0, self.bo.row(0));
            axpy(&mut attn, 1.0, x.row(i));
            xm.row_mut(i).copy_from_slice(&attn);
        }

        let mut xhat2 = Mat::zeros(n, d);
        let mut inv2 = vec![0.0; n];
        let mut x2 = Mat::zeros(n, d);
        let mut ha = Mat::zeros(n, FFN_MULT * d);
        let mut out = Mat::zeros(n, d);
        for i in 0..n {
            let (y, xh, inv) = ln_forward(xm.row(i), self.ln2_g.row(0), self.ln2_b.row(0));
            x2.row_mut(i).copy_from_slice(&y);
            xhat2.row_mut(i).copy_from_slice(&xh);
            inv2[i] = inv;

            let mut h1 = self.ffn_w1.matvec(&y);
            axpy(&mut h1, 1.0, self.ffn_b1.row(0));
            for z in h1.iter_mut() {
                *z = z.tanh();
            }
            ha.row_mut(i).copy_from_slice(&h1);
            let mut f = self.ffn_w2.matvec(&h1);
            axpy(&mut f, 1.0, self.ffn_b2.row(0));
            axpy(&mut f, 1.0, xm.row(i));
            out.row_mut(i).copy_from_slice(&f);
        }

        let cache = BlockCache {
            xhat1,
            inv1,
            x1,
            q,
            k,
            v,
            probs,
            ctx,
            xhat2,
            inv2,
            x2,
            ha,
        };
        (out, cache)
    }

    /// Backward through the block; accumulates into `grads`, returns dx.
    pub fn backward(
        &self,
        dout: &Mat,
        cache: &BlockCache,
        heads: usize,
        rotary: bool,
        grads: &mut TransformerBlock,
    ) -> Mat {
        let n = dout.rows;
        let d = dout.cols;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // FFN sub-block: out = xm + W2 tanh(W1 x2 + b1) + b2.
        let mut dxm = dout.clone();
        for i in 0..n {
            let df = dout.row(i);
            grads.ffn_b2.row_mut(0).iter_mut().zip(df).for_each(|(g, x)| *g += x);
            grads.ffn_w2.add_outer(df, cache.ha.row(i), 1.0);
            let dha = self.ffn_w2.matvec_t(df);
            let mut dh1 = vec![0.0; dha.len()];
            for (z, (g, a)) in dh1.iter_mut().zip(dha.iter().zip(cache.ha.row(i))) {
                *z = g * (1.0 - a * a);
            }
            grads
                .ffn_b1
                .row_mut(0)
                .iter_mut()
                .zip(&dh1)
                .for_each(|(g, x)| *g += x);
            grads.ffn_w1.add_outer(&dh1, cache.x2.row(i), 1.0);
            let dx2 = self.ffn_w1.matvec_t(&dh1);
            let dxm_i = ln_backward(
                &dx2,
                cache.xhat2.row(i),
                cache.inv2[i],
                self.ln2_g.row(0),
                grads.ln2_g.row_mut(0),
                grads.ln2_b.row_mut(0),
            );
            axpy(dxm.row_mut(i), 1.0, &dxm_i);
        }

        // Attention sub-block: xm = x + Wo ctx + bo.
        let mut dx = dxm.clone();
        let mut dctx = Mat::zeros(n, d);
        for i in 0..n {
            let da = dxm.row(i);
            grads.bo.row_mut(0).iter_mut().zip(da).for_each(|(g, x)| *g += x);
            grads.wo.add_outer(da, cache.ctx.row(i), 1.0);
            let dc = self.wo.matvec_t(da);
            dctx.row_mut(i).copy_from_slice(&dc);
        }

        let mut dq = Mat::zeros(n, d);
        let mut dk = Mat::zeros(n, d);
        let mut dv = Mat::zeros(n, d);
        for h in 0..heads {
            let base = h * dh;
            let p = &cache.probs[h];
            for i in 0..n {
                let dci = &dctx.row(i)[base..base + dh];
                let mut dprob = vec![0.0; n];
                for j in 0..n {
                    dprob[j] = dot(dci, &cache.v.row(j)[base..base + dh]);
                    let aij = p.row(i)[j];
                    let dvj = &mut dv.row_mut(j)[base..base + dh];
                    for (g, c) in dvj.iter_mut().zip(dci) {
                        *g += aij * c;
                    }
                }
                let dscore = softmax_backward(p.row(i), &dprob);
                for j in 0..n {
                    let s = dscore[j] * scale;
                    let kj = &cache.k.row(j)[base..base + dh];
                    let dqi = &mut dq.row_mut(i)[base..base + dh];
                    for (g, kv) in dqi.iter_mut().zip(kj) {
                        *g += s * kv;
                    }
                }
                let qi: Vec<f64> = cache.q.row(i)[base..base + dh].to_vec();
                for j in 0..n {
                    let s = dscore[j] * scale;
                    let dkj = &mut dk.row_mut(j)[base..base + dh];
                    for (g, qv) in dkj.iter_mut().zip(&qi) {
                        *g += s * qv;
                    }
                }
            }
        }
        if rotary {
            // The rotation is orthogonal per position, so its adjoint is the
            // inverse rotation.
            rotary_apply(&mut dq, heads, true);
            rotary_apply(&mut dk, heads, true);
        }

        for i in 0..n {
            let x1i = cache.x1.row(i);
            let mut dx1 = vec![0.0; d];
            let dqi = dq.row(i);
            grads.bq.row_mut(0).iter_mut().zip(dqi).for_each(|(g, x)| *g += x);
            grads.wq.add_outer(dqi, x1i, 1.0);
            axpy(&mut dx1, 1.0, &self.wq.matvec_t(dqi));
            let dki = dk.row(i);
            grads.bk.row_mut(0).iter_mut().zip(dki).for_each(|(g, x)| *g += x);
            grads.wk.add_outer(dki, x1i, 1.0);
            axpy(&mut dx1, 1.0, &self.wk.matvec_t(dki));
            let dvi = dv.row(i);
            grads.bv.row_mut(0).iter_mut().zip(dvi).for_each(|(g, x)| *g += x);
            grads.wv.add_outer(dvi, x1i, 1.0);
            axpy(&mut dx1, 1.0, &self.wv.matvec_t(dvi));

            let dx_i = ln_backward(
                &dx1,
                cache.xhat1.row(i),
                cache.inv1[i],
                self.ln1_g.row(0),
                grads.ln1_g.row_mut(0),
                grads.ln1_b.row_mut(0),
            );
            axpy(dx.row_mut(i), 1.0, &dx_i);
        }
        dx
    }
}

fn ones(d: usize) -> Mat {
    let mut m = Mat::zeros(1, d);
    m.fill(1.0);
    m
}
