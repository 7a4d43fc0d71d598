//! Event embedding and sequence encoding.
//!
//! Each event is embedded as the sum of six components: concept, numeric
//! value (a tiny value net, or a learned null vector when absent), a
//! Time2Vec encoding of the scaled inter-event delta, visit order, care
//! stage, and event type. A sequence of embedded events is pooled either
//! by a per-token feed-forward bag or by a stack of bidirectional
//! transformer blocks. All passes are hand-written in f64 with explicit
//! backward functions so gradients can be verified by finite differences.

pub mod attention;
pub mod masking;
pub mod mlm;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, norm, Mat};
use crate::timeline::vocab::{CLS, RESERVED_LEN, UNK};
use crate::timeline::{compute_deltas, CareStage, EventType, TimeDeltaScaler, TimelineEvent};

use attention::{ln_backward, ln_forward, BlockCache, TransformerBlock};

/// One encoder input position: ids plus the pre-scaled time delta.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenInput {
    pub concept_id: u32,
    pub numeric_value: Option<f64>,
    pub delta_scaled: f64,
    pub stage_idx: usize,
    pub visit_order: u32,
    pub type_idx: usize,
}

/// Build encoder inputs for a contiguous slice of events. Deltas are
/// computed within the slice, so the same events always encode the same
/// way regardless of surrounding context.
pub fn token_inputs(events: &[TimelineEvent], scaler: &TimeDeltaScaler) -> Vec<TokenInput> {
    let deltas = compute_deltas(events, scaler);
    events
        .iter()
        .zip(deltas)
        .map(|(e, delta_scaled)| TokenInput {
            concept_id: e.concept_id,
            numeric_value: e.numeric_value,
            delta_scaled,
            stage_idx: e.care_stage.index(),
            visit_order: e.visit_order,
            type_idx: e.event_type.index(),
        })
        .collect()
}

/// Which embedding components participate. Pretraining drops the value
/// and time components and keeps only the categorical ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedMode {
    Full,
    Categorical,
}

#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub concept: Mat,    // vocab x d
    pub stage: Mat,      // 6 x d
    pub visit: Mat,      // v_max x d
    pub event_type: Mat, // 14 x d
    pub null_value: Mat, // 1 x d
    pub value_w1: Mat,   // hidden x 1
    pub value_b1: Mat,   // 1 x hidden
    pub value_w2: Mat,   // d x hidden
    pub value_b2: Mat,   // 1 x d
    pub t2v_omega: Mat,  // 1 x d
    pub t2v_phi: Mat,    // 1 x d
}

impl EmbeddingTables {
    pub fn new(
        vocab_size: usize,
        d: usize,
        v_max: usize,
        value_hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        EmbeddingTables {
            concept: Mat::uniform_init(vocab_size, d, rng),
            stage: Mat::uniform_init(CareStage::COUNT, d, rng),
            visit: Mat::uniform_init(v_max, d, rng),
            event_type: Mat::uniform_init(EventType::COUNT, d, rng),
            null_value: Mat::uniform_init(1, d, rng),
            value_w1: Mat::uniform_init(value_hidden, 1, rng),
            value_b1: Mat::zeros(1, value_hidden),
            value_w2: Mat::uniform_init(d, value_hidden, rng),
            value_b2: Mat::zeros(1, d),
            t2v_omega: Mat::uniform_init(1, d, rng),
            t2v_phi: Mat::uniform_init(1, d, rng),
        }
    }

    pub fn d(&self) -> usize {
        self.concept.cols
    }

    pub fn zeros_like(&self) -> Self {
        EmbeddingTables {
            concept: self.concept.zeros_like(),
            stage: self.stage.zeros_like(),
            visit: self.visit.zeros_like(),
            event_type: self.event_type.zeros_like(),
            null_value: self.null_value.zeros_like(),
            value_w1: self.value_w1.zeros_like(),
            value_b1: self.value_b1.zeros_like(),
            value_w2: self.value_w2.zeros_like(),
            value_b2: self.value_b2.zeros_like(),
            t2v_omega: self.t2v_omega.zeros_like(),
            t2v_phi: self.t2v_phi.zeros_like(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        vec![
            ("tables/concept".into(), &self.concept),
            ("tables/stage".into(), &self.stage),
            ("tables/visit".into(), &self.visit),
            ("tables/type".into(), &self.event_type),
            ("tables/null_value".into(), &self.null_value),
            ("tables/value_w1".into(), &self.value_w1),
            ("tables/value_b1".into(), &self.value_b1),
            ("tables/value_w2".into(), &self.value_w2),
            ("tables/value_b2".into(), &self.value_b2),
            ("tables/t2v_omega".into(), &self.t2v_omega),
            ("tables/t2v_phi".into(), &self.t2v_phi),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        vec![
            ("tables/concept".into(), &mut self.concept),
            ("tables/stage".into(), &mut self.stage),
            ("tables/visit".into(), &mut self.visit),
            ("tables/type".into(), &mut self.event_type),
            ("tables/null_value".into(), &mut self.null_value),
            ("tables/value_w1".into(), &mut self.value_w1),
            ("tables/value_b1".into(), &mut self.value_b1),
            ("tables/value_w2".into(), &mut self.value_w2),
            ("tables/value_b2".into(), &mut self.value_b2),
            ("tables/t2v_omega".into(), &mut self.t2v_omega),
            ("tables/t2v_phi".into(), &mut self.t2v_phi),
        ]
    }

    fn visit_row(&self, visit_order: u32) -> usize {
        (visit_order as usize).min(self.visit.rows - 1)
    }

    /// Sum of the active components for one token.
    pub fn embed(&self, tok: &TokenInput, mode: EmbedMode) -> Vec<f64> {
        let d = self.d();
        let mut e = self.concept.row(tok.concept_id as usize).to_vec();
        axpy(&mut e, 1.0, self.stage.row(tok.stage_idx));
        axpy(&mut e, 1.0, self.visit.row(self.visit_row(tok.visit_order)));
        axpy(&mut e, 1.0, self.event_type.row(tok.type_idx));
        if mode == EmbedMode::Full {
            match tok.numeric_value {
                Some(x) => {
                    let h = self.value_hidden_act(x);
                    let mut v = self.value_w2.matvec(&h);
                    axpy(&mut v, 1.0, self.value_b2.row(0));
                    axpy(&mut e, 1.0, &v);
                }
                None => axpy(&mut e, 1.0, self.null_value.row(0)),
            }
            let t = time2vec(self.t2v_omega.row(0), self.t2v_phi.row(0), tok.delta_scaled);
            axpy(&mut e, 1.0, &t);
        }
        debug_assert_eq!(e.len(), d);
        e
    }

    fn value_hidden_act(&self, x: f64) -> Vec<f64> {
        (0..self.value_w1.rows)
            .map(|j| (self.value_w1.row(j)[0] * x + self.value_b1.row(0)[j]).tanh())
            .collect()
    }

    /// Accumulate d(loss)/d(tables) for one token given d(loss)/d(embedding).
    pub fn embed_backward(
        &self,
        tok: &TokenInput,
        mode: EmbedMode,
        de: &[f64],
        grads: &mut EmbeddingTables,
    ) {
        axpy(grads.concept.row_mut(tok.concept_id as usize), 1.0, de);
        axpy(grads.stage.row_mut(tok.stage_idx), 1.0, de);
        axpy(grads.visit.row_mut(self.visit_row(tok.visit_order)), 1.0, de);
        axpy(grads.event_type.row_mut(tok.type_idx), 1.0, de);
        if mode == EmbedMode::Full {
            match tok.numeric_value {
                Some(x) => {
                    let h = self.value_hidden_act(x);
                    axpy(grads.value_b2.row_mut(0), 1.0, de);
                    grads.value_w2.add_outer(de, &h, 1.0);
                    let dh = self.value_w2.matvec_t(de);
                    for j in 0..h.len() {
                        let dpre = dh[j] * (1.0 - h[j] * h[j]);
                        grads.value_b1.row_mut(0)[j] += dpre;
                        grads.value_w1.row_mut(j)[0] += dpre * x;
                    }
                }
                None => axpy(grads.null_value.row_mut(0), 1.0, de),
            }
            let tau = tok.delta_scaled;
            let omega = self.t2v_omega.row(0);
            let phi = self.t2v_phi.row(0);
            let go = grads.t2v_omega.row_mut(0);
            go[0] += tau * de[0];
            for i in 1..omega.len() {
                go[i] += (omega[i] * tau + phi[i]).cos() * tau * de[i];
            }
            let gp = grads.t2v_phi.row_mut(0);
            gp[0] += de[0];
            for i in 1..phi.len() {
                gp[i] += (omega[i] * tau + phi[i]).cos() * de[i];
            }
        }
    }
}

/// Component 0 is linear in tau; components 1.. are sinusoidal.
pub fn time2vec(omega: &[f64], phi: &[f64], tau: f64) -> Vec<f64> {
    let mut out = vec![0.0; omega.len()];
    out[0] = omega[0] * tau + phi[0];
    for i in 1..omega.len() {
        out[i] = (omega[i] * tau + phi[i]).sin();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EncoderKind {
    Bag,
    Attention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Pooling {
    Mean,
    Cls,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceEncoderConfig {
    pub kind: EncoderKind,
    pub layers: usize,
    pub heads: usize,
    pub pooling: Pooling,
    pub rotary: bool,
}

impl SequenceEncoderConfig {
    pub fn bag() -> Self {
        SequenceEncoderConfig {
            kind: EncoderKind::Bag,
            layers: 0,
            heads: 0,
            pooling: Pooling::Mean,
            rotary: false,
        }
    }

    pub fn attention(layers: usize, heads: usize) -> Self {
        SequenceEncoderConfig {
            kind: EncoderKind::Attention,
            layers,
            heads,
            pooling: Pooling::Mean,
            rotary: false,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.kind == EncoderKind::Attention {
            if self.layers == 0 {
                return Err(Error::Config("attention encoder needs >= 1 layer".into()));
            }
            if self.heads == 0 || d % self.heads != 0 {
                return Err(Error::Config(format!(
                    "model width {d} is not divisible by {} heads",
                    self.heads
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SequenceEncoder {
    pub config: SequenceEncoderConfig,
    pub bag_w: Mat,
    pub bag_b: Mat,
    pub blocks: Vec<TransformerBlock>,
    pub final_ln_g: Mat,
    pub final_ln_b: Mat,
}

impl SequenceEncoder {
    pub fn new(config: SequenceEncoderConfig, d: usize, rng: &mut impl Rng) -> Result<Self> {
        config.validate(d)?;
        let enc = match config.kind {
            EncoderKind::Bag => SequenceEncoder {
                config,
                bag_w: Mat::uniform_init(d, d, rng),
                bag_b: Mat::zeros(1, d),
                blocks: Vec::new(),
                final_ln_g: Mat::zeros(0, 0),
                final_ln_b: Mat::zeros(0, 0),
            },
            EncoderKind::Attention => {
                let blocks = (0..config.layers)
                    .map(|_| TransformerBlock::new(d, rng))
                    .collect();
                let mut g = Mat::zeros(1, d);
                g.fill(1.0);
                SequenceEncoder {
                    config,
                    bag_w: Mat::zeros(0, 0),
                    bag_b: Mat::zeros(0, 0),
                    blocks,
                    final_ln_g: g,
                    final_ln_b: Mat::zeros(1, d),
                }
            }
        };
        Ok(enc)
    }

    pub fn zeros_like(&self) -> Self {
        SequenceEncoder {
            config: self.config,
            bag_w: self.bag_w.zeros_like(),
            bag_b: self.bag_b.zeros_like(),
            blocks: self.blocks.iter().map(|b| b.zeros_like()).collect(),
            final_ln_g: self.final_ln_g.zeros_like(),
            final_ln_b: self.final_ln_b.zeros_like(),
        }
    }

    pub fn tensors(&self, prefix: &str) -> Vec<(String, &Mat)> {
        match self.config.kind {
            EncoderKind::Bag => vec![
                (format!("{prefix}/bag_w"), &self.bag_w),
                (format!("{prefix}/bag_b"), &self.bag_b),
            ],
            EncoderKind::Attention => {
                let mut out = Vec::new();
                for (i, b) in self.blocks.iter().enumerate() {
                    out.extend(b.tensors(&format!("{prefix}/block{i}")));
                }
                out.push((format!("{prefix}/final_ln_g"), &self.final_ln_g));
                out.push((format!("{prefix}/final_ln_b"), &self.final_ln_b));
                out
            }
        }
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Mat)> {
        match self.config.kind {
            EncoderKind::Bag => vec![
                (format!("{prefix}/bag_w"), &mut self.bag_w),
                (format!("{prefix}/bag_b"), &mut self.bag_b),
            ],
            EncoderKind::Attention => {
                let mut out = Vec::new();
                for (i, b) in self.blocks.iter_mut().enumerate() {
                    out.extend(b.tensors_mut(&format!("{prefix}/block{i}")));
                }
                out.push((format!("{prefix}/final_ln_g"), &mut self.final_ln_g));
                out.push((format!("{prefix}/final_ln_b"), &mut self.final_ln_b));
                out
            }
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EncodeCache {
    tokens: Vec<TokenInput>,
    mode: EmbedMode,
    embedded: Mat,
    bag_h: Option<Mat>,
    block_caches: Vec<BlockCache>,
    final_ln: Option<(Mat, Vec<f64>)>,
}

/// Result of encoding one sequence, retaining what backward needs.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub pooled: Vec<f64>,
    pub token_vecs: Mat,
    pub(crate) cache: EncodeCache,
}

/// Encode a padded-free token sequence. PAD positions are excluded from
/// attention and pooling by construction: callers pass only real tokens,
/// and an empty slice (an all-PAD window) is an error.
pub fn encode_sequence(
    tables: &EmbeddingTables,
    encoder: &SequenceEncoder,
    tokens: &[TokenInput],
    mode: EmbedMode,
) -> Result<Encoded> {
    if tokens.is_empty() {
        return Err(Error::EmptySequence(
            "no real tokens to encode (all positions are padding)".into(),
        ));
    }
    let d = tables.d();
    encoder.config.validate(d)?;

    // CLS pooling reads the first position, so a learned pseudo-token is
    // prepended. Its embedding is a sum of learned rows only.
    let mut all_tokens: Vec<TokenInput> = Vec::with_capacity(tokens.len() + 1);
    if encoder.config.pooling == Pooling::Cls {
        all_tokens.push(cls_token());
    }
    all_tokens.extend_from_slice(tokens);

    let n = all_tokens.len();
    let mut embedded = Mat::zeros(n, d);
    for (i, tok) in all_tokens.iter().enumerate() {
        embedded.row_mut(i).copy_from_slice(&tables.embed(tok, mode));
    }

    let (token_vecs, bag_h, block_caches, final_ln) = match encoder.config.kind {
        EncoderKind::Bag => {
            let mut h = Mat::zeros(n, d);
            for i in 0..n {
                let mut pre = encoder.bag_w.matvec(embedded.row(i));
                axpy(&mut pre, 1.0, encoder.bag_b.row(0));
                for z in pre.iter_mut() {
                    *z = z.tanh();
                }
                h.row_mut(i).copy_from_slice(&pre);
            }
            (h.clone(), Some(h), Vec::new(), None)
        }
        EncoderKind::Attention => {
            let mut x = embedded.clone();
            let mut caches = Vec::with_capacity(encoder.blocks.len());
            for block in &encoder.blocks {
                let (next, cache) =
                    block.forward(&x, encoder.config.heads, encoder.config.rotary);
                caches.push(cache);
                x = next;
            }
            let mut xhat = Mat::zeros(n, d);
            let mut inv = vec![0.0; n];
            let mut out = Mat::zeros(n, d);
            for i in 0..n {
                let (y, xh, iv) =
                    ln_forward(x.row(i), encoder.final_ln_g.row(0), encoder.final_ln_b.row(0));
                out.row_mut(i).copy_from_slice(&y);
                xhat.row_mut(i).copy_from_slice(&xh);
                inv[i] = iv;
            }
            (out, None, caches, Some((xhat, inv)))
        }
    };

    let pooled = match encoder.config.pooling {
        Pooling::Mean => {
            let mut p = vec![0.0; d];
            for i in 0..n {
                axpy(&mut p, 1.0 / n as f64, token_vecs.row(i));
            }
            p
        }
        Pooling::Cls => token_vecs.row(0).to_vec(),
    };

    Ok(Encoded {
        pooled,
        token_vecs,
        cache: EncodeCache {
            tokens: all_tokens,
            mode,
            embedded,
            bag_h,
            block_caches,
            final_ln,
        },
    })
}

fn cls_token() -> TokenInput {
    TokenInput {
        concept_id: CLS,
        numeric_value: None,
        delta_scaled: 0.0,
        stage_idx: CareStage::Static.index(),
        visit_order: 0,
        type_idx: EventType::Special.index(),
    }
}

/// Backward through pooling, the encoder stack, and the embedding sum.
/// `dpooled` and `dtokens` are both optional so the MLM path (per-token
/// gradients only) and the retrieval/fusion path (pooled gradient only)
/// share one implementation.
pub fn encode_backward(
    tables: &EmbeddingTables,
    encoder: &SequenceEncoder,
    enc: &Encoded,
    dpooled: Option<&[f64]>,
    dtokens: Option<&Mat>,
    tgrads: &mut EmbeddingTables,
    egrads: &mut SequenceEncoder,
) {
    let cache = &enc.cache;
    let n = cache.embedded.rows;
    let d = cache.embedded.cols;

    let mut dtok = Mat::zeros(n, d);
    if let Some(dp) = dpooled {
        match encoder.config.pooling {
            Pooling::Mean => {
                for i in 0..n {
                    axpy(dtok.row_mut(i), 1.0 / n as f64, dp);
                }
            }
            Pooling::Cls => axpy(dtok.row_mut(0), 1.0, dp),
        }
    }
    if let Some(dt) = dtokens {
        assert_eq!(dt.rows, n);
        for i in 0..n {
            axpy(dtok.row_mut(i), 1.0, dt.row(i));
        }
    }

    let dembedded = match encoder.config.kind {
        EncoderKind::Bag => {
            let h = cache.bag_h.as_ref().expect("bag cache");
            let mut de = Mat::zeros(n, d);
            for i in 0..n {
                let mut dpre = vec![0.0; d];
                for (z, (g, a)) in dpre.iter_mut().zip(dtok.row(i).iter().zip(h.row(i))) {
                    *z = g * (1.0 - a * a);
                }
                egrads
                    .bag_b
                    .row_mut(0)
                    .iter_mut()
                    .zip(&dpre)
                    .for_each(|(g, x)| *g += x);
                egrads.bag_w.add_outer(&dpre, cache.embedded.row(i), 1.0);
                de.row_mut(i)
                    .copy_from_slice(&encoder.bag_w.matvec_t(&dpre));
            }
            de
        }
        EncoderKind::Attention => {
            let (xhat, inv) = cache.final_ln.as_ref().expect("final ln cache");
            let mut dx = Mat::zeros(n, d);
            for i in 0..n {
                let di = ln_backward(
                    dtok.row(i),
                    xhat.row(i),
                    inv[i],
                    encoder.final_ln_g.row(0),
                    egrads.final_ln_g.row_mut(0),
                    egrads.final_ln_b.row_mut(0),
                );
                dx.row_mut(i).copy_from_slice(&di);
            }
            for (block, (cache_b, gblock)) in encoder
                .blocks
                .iter()
                .zip(cache.block_caches.iter().zip(egrads.blocks.iter_mut()))
                .rev()
            {
                dx = block.backward(&dx, cache_b, encoder.config.heads, encoder.config.rotary, gblock);
            }
            dx
        }
    };

    for (i, tok) in cache.tokens.iter().enumerate() {
        tables.embed_backward(tok, cache.mode, dembedded.row(i), tgrads);
    }
}

/// Encode a chunk with the frozen retriever and unit-normalize the
/// pooled vector.
pub fn retriever_encode(
    tables: &EmbeddingTables,
    encoder: &SequenceEncoder,
    tokens: &[TokenInput],
) -> Result<Vec<f64>> {
    let enc = encode_sequence(tables, encoder, tokens, EmbedMode::Full)?;
    let nrm = norm(&enc.pooled);
    if !(nrm > 0.0) {
        return Err(Error::DegenerateEmbedding(format!(
            "pooled vector has norm {nrm}"
        )));
    }
    Ok(enc.pooled.iter().map(|x| x / nrm).collect())
}

/// Uniform over the non-reserved vocabulary, for MLM random replacement.
pub(crate) fn draw_random_concept(vocab_size: u32, rng: &mut impl Rng) -> u32 {
    if vocab_size > RESERVED_LEN {
        rng.gen_range(RESERVED_LEN..vocab_size)
    } else {
        UNK
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::dot;
    use crate::rng::rng_from_seed;

    fn tok(concept: u32) -> TokenInput {
        TokenInput {
            concept_id: concept,
            numeric_value: None,
            delta_scaled: 0.0,
            stage_idx: CareStage::Icu.index(),
            visit_order: 1,
            type_idx: EventType::Lab.index(),
        }
    }

    fn zero_tables(vocab: usize, d: usize) -> EmbeddingTables {
        let mut rng = rng_from_seed(0);
        let mut t = EmbeddingTables::new(vocab, d, 8, 4, &mut rng);
        for (_, m) in t.tensors_mut() {
            m.fill(0.0);
        }
        t
    }

    #[test]
    fn zero_tables_embed_to_zero() {
        let t = zero_tables(40, 4);
        let e = t.embed(&tok(30), EmbedMode::Full);
        assert_eq!(e, vec![0.0; 4]);
    }

    #[test]
    fn concept_rows_are_isolated() {
        let mut t = zero_tables(40, 4);
        t.concept.row_mut(30).copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.embed(&tok(30), EmbedMode::Full), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.embed(&tok(31), EmbedMode::Full), vec![0.0; 4]);
    }

    #[test]
    fn embedding_is_sum_of_six_components() {
        let d = 4;
        let mut t = zero_tables(40, d);
        t.concept.row_mut(35).copy_from_slice(&[0.1, 0.2, 0.3, 0.4]);
        t.stage
            .row_mut(CareStage::Icu.index())
            .copy_from_slice(&[0.01, 0.02, 0.03, 0.04]);
        t.visit.row_mut(2).copy_from_slice(&[1.0, 1.0, 1.0, 1.0]);
        t.event_type
            .row_mut(EventType::Lab.index())
            .copy_from_slice(&[0.5, 0.5, 0.5, 0.5]);
        t.null_value.row_mut(0).copy_from_slice(&[-1.0, -1.0, -1.0, -1.0]);
        t.t2v_omega.row_mut(0).copy_from_slice(&[2.0, 1.0, 0.5, 0.25]);
        t.t2v_phi.row_mut(0).copy_from_slice(&[0.1, 0.0, 0.2, 0.3]);

        let tau = 0.25;
        let input = TokenInput {
            concept_id: 35,
            numeric_value: None,
            delta_scaled: tau,
            stage_idx: CareStage::Icu.index(),
            visit_order: 2,
            type_idx: EventType::Lab.index(),
        };
        let e = t.embed(&input, EmbedMode::Full);
        let t2v = [
            2.0 * tau + 0.1,
            (1.0 * tau).sin(),
            (0.5 * tau + 0.2).sin(),
            (0.25 * tau + 0.3).sin(),
        ];
        for i in 0..d {
            let expect = [0.1, 0.2, 0.3, 0.4][i] + [0.01, 0.02, 0.03, 0.04][i] + 1.0 + 0.5 - 1.0
                + t2v[i];
            assert!((e[i] - expect).abs() < 1e-12, "component {i}");
        }
    }

    #[test]
    fn time2vec_at_tau_zero_is_phase_only() {
        let omega = [3.0, 5.0, 7.0];
        let phi = [0.4, 0.5, 0.6];
        let out = time2vec(&omega, &phi, 0.0);
        assert!((out[0] - 0.4).abs() < 1e-15);
        assert!((out[1] - 0.5f64.sin()).abs() < 1e-15);
        assert!((out[2] - 0.6f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn categorical_mode_ignores_value_and_time() {
        let mut rng = rng_from_seed(5);
        let t = EmbeddingTables::new(40, 8, 8, 4, &mut rng);
        let mut a = tok(30);
        a.numeric_value = Some(2.5);
        a.delta_scaled = 0.9;
        let mut b = tok(30);
        b.numeric_value = None;
        b.delta_scaled = 0.0;
        assert_eq!(t.embed(&a, EmbedMode::Categorical), t.embed(&b, EmbedMode::Categorical));
        assert_ne!(t.embed(&a, EmbedMode::Full), t.embed(&b, EmbedMode::Full));
    }

    #[test]
    fn visit_order_clamps_to_last_row() {
        let mut rng = rng_from_seed(6);
        let t = EmbeddingTables::new(40, 8, 4, 4, &mut rng);
        let mut a = tok(30);
        a.visit_order = 3;
        let mut b = tok(30);
        b.visit_order = 99;
        assert_eq!(t.embed(&a, EmbedMode::Full), t.embed(&b, EmbedMode::Full));
        let mut c = tok(30);
        c.visit_order = 2;
        assert_ne!(t.embed(&a, EmbedMode::Full), t.embed(&c, EmbedMode::Full));
    }

    #[test]
    fn seeded_init_is_deterministic() {
        let a = EmbeddingTables::new(40, 8, 8, 4, &mut rng_from_seed(9));
        let b = EmbeddingTables::new(40, 8, 8, 4, &mut rng_from_seed(9));
        let c = EmbeddingTables::new(40, 8, 8, 4, &mut rng_from_seed(10));
        assert_eq!(a.concept.data, b.concept.data);
        assert_ne!(a.concept.data, c.concept.data);
        let bound = 1.0 / (8f64).sqrt();
        assert!(a.concept.data.iter().all(|x| x.abs() <= bound));
    }

    fn bag_encoder(d: usize, seed: u64) -> SequenceEncoder {
        SequenceEncoder::new(SequenceEncoderConfig::bag(), d, &mut rng_from_seed(seed)).unwrap()
    }

    #[test]
    fn bag_mean_is_repeat_invariant() {
        let mut rng = rng_from_seed(12);
        let t = EmbeddingTables::new(40, 8, 8, 4, &mut rng);
        let enc = bag_encoder(8, 13);
        let one = encode_sequence(&t, &enc, &[tok(30)], EmbedMode::Full).unwrap();
        let three = encode_sequence(&t, &enc, &[tok(30), tok(30), tok(30)], EmbedMode::Full).unwrap();
        for (a, b) in one.pooled.iter().zip(&three.pooled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_sees_only_real_tokens() {
        // A chunk materialized as [e, PAD, PAD] encodes identically to [e]:
        // padding is excluded from both attention and pooling.
        let mut rng = rng_from_seed(14);
        let t = EmbeddingTables::new(40, 8, 8, 4, &mut rng);
        let enc = SequenceEncoder::new(
            SequenceEncoderConfig::attention(1, 2),
            8,
            &mut rng_from_seed(15),
        )
        .unwrap();
        let real = [tok(30)];
        let a = encode_sequence(&t, &enc, &real, EmbedMode::Full).unwrap();
        let b = encode_sequence(&t, &enc, &real, EmbedMode::Full).unwrap();
        assert_eq!(a.pooled, b.pooled);
        assert_eq!(a.token_vecs.rows, 1);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let mut rng = rng_from_seed(16);
        let t = EmbeddingTables::new(40, 8, 8, 4, &mut rng);
        let enc = bag_encoder(8, 17);
        let err = match encode_sequence(&t, &enc, &[], EmbedMode::Full) {
            Err(e) => e,
            Ok(_) => panic!("expected empty-sequence error"),
        };
        assert!(err.to_string().contains("empty sequence"));
    }

    #[test]
    fn width_must_divide_into_heads() {
        let err = SequenceEncoder::new(
            SequenceEncoderConfig::attention(1, 4),
            6,
            &mut rng_from_seed(18),
        )
        .unwrap_err();
        assert!(err.to_string().contains("divisible"));
    }

    #[test]
    fn cls_pooling_reads_first_position() {
        let mut rng = rng_from_seed(19);
        let t = EmbeddingTables::new(40, 8, 8, 4, &mut rng);
        let mut cfg = SequenceEncoderConfig::attention(1, 2);
        cfg.pooling = Pooling::Cls;
        let enc = SequenceEncoder::new(cfg, 8, &mut rng_from_seed(20)).unwrap();
        let e = encode_sequence(&t, &enc, &[tok(30), tok(31)], EmbedMode::Full).unwrap();
        // CLS prepended: 2 real tokens -> 3 positions.
        assert_eq!(e.token_vecs.rows, 3);
        assert_eq!(e.pooled, e.token_vecs.row(0).to_vec());
    }

    #[test]
    fn retriever_encode_returns_unit_vectors() {
        let mut rng = rng_from_seed(21);
        let t = EmbeddingTables::new(40, 8, 8, 4, &mut rng);
        let enc = SequenceEncoder::new(
            SequenceEncoderConfig::attention(1, 2),
            8,
            &mut rng_from_seed(22),
        )
        .unwrap();
        let v = retriever_encode(&t, &enc, &[tok(30), tok(31), tok(35)]).unwrap();
        assert!((norm(&v) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_model_yields_degenerate_embedding_error() {
        let t = zero_tables(40, 8);
        let mut enc = bag_encoder(8, 23);
        for (_, m) in enc.tensors_mut("backbone") {
            m.fill(0.0);
        }
        let err = retriever_encode(&t, &enc, &[tok(30)]).unwrap_err();
        assert!(err.to_string().contains("degenerate embedding"));
    }

    /// Full-stack finite-difference check at toy size: embedding tables
    /// and every encoder parameter, probe loss = <pooled, probe>.
    fn check_encode_gradients(cfg: SequenceEncoderConfig, mode: EmbedMode) {
        let d = 4;
        let vocab = 36;
        let tables = EmbeddingTables::new(vocab, d, 4, 3, &mut rng_from_seed(31));
        let encoder = SequenceEncoder::new(cfg, d, &mut rng_from_seed(32)).unwrap();
        let tokens = vec![
            TokenInput {
                concept_id: 30,
                numeric_value: Some(0.7),
                delta_scaled: 0.2,
                stage_idx: CareStage::Icu.index(),
                visit_order: 1,
                type_idx: EventType::Lab.index(),
            },
            TokenInput {
                concept_id: 31,
                numeric_value: None,
                delta_scaled: 0.5,
                stage_idx: CareStage::Hosp.index(),
                visit_order: 2,
                type_idx: EventType::Medication.index(),
            },
            tok(33),
        ];
        let probe: Vec<f64> = (0..d).map(|i| 0.3 + 0.1 * i as f64).collect();

        let loss = |t: &EmbeddingTables, e: &SequenceEncoder| -> f64 {
            let enc = encode_sequence(t, e, &tokens, mode).unwrap();
            dot(&enc.pooled, &probe)
        };

        let enc = encode_sequence(&tables, &encoder, &tokens, mode).unwrap();
        let mut tg = tables.zeros_like();
        let mut eg = encoder.zeros_like();
        encode_backward(&tables, &encoder, &enc, Some(&probe), None, &mut tg, &mut eg);

        let h = 1e-6;
        for ti in 0..tables.tensors().len() {
            let name = tables.tensors()[ti].0.clone();
            let len = tables.tensors()[ti].1.data.len();
            for idx in [0, len / 2, len - 1] {
                let mut tp = tables.clone();
                tp.tensors_mut()[ti].1.data[idx] += h;
                let mut tm = tables.clone();
                tm.tensors_mut()[ti].1.data[idx] -= h;
                let num = (loss(&tp, &encoder) - loss(&tm, &encoder)) / (2.0 * h);
                let got = tg.tensors()[ti].1.data[idx];
                let rel = (got - num).abs() / num.abs().max(1.0);
                assert!(rel < 1e-6, "{name}[{idx}]: {got} vs {num}");
            }
        }
        for ei in 0..encoder.tensors("e").len() {
            let name = encoder.tensors("e")[ei].0.clone();
            let len = encoder.tensors("e")[ei].1.data.len();
            for idx in [0, len / 2, len - 1] {
                let mut ep = encoder.clone();
                ep.tensors_mut("e")[ei].1.data[idx] += h;
                let mut em = encoder.clone();
                em.tensors_mut("e")[ei].1.data[idx] -= h;
                let num = (loss(&tables, &ep) - loss(&tables, &em)) / (2.0 * h);
                let got = eg.tensors("e")[ei].1.data[idx];
                let rel = (got - num).abs() / num.abs().max(1.0);
                assert!(rel < 1e-6, "{name}[{idx}]: {got} vs {num}");
            }
        }
    }

    #[test]
    fn bag_encode_gradients_match_finite_differences() {
        check_encode_gradients(SequenceEncoderConfig::bag(), EmbedMode::Full);
    }

    #[test]
    fn attention_encode_gradients_match_finite_differences() {
        check_encode_gradients(SequenceEncoderConfig::attention(2, 2), EmbedMode::Full);
    }

    #[test]
    fn cls_categorical_gradients_match_finite_differences() {
        let mut cfg = SequenceEncoderConfig::attention(1, 2);
        cfg.pooling = Pooling::Cls;
        check_encode_gradients(cfg, EmbedMode::Categorical);
    }
}
