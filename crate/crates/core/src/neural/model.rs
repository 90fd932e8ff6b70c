use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::layers::{add_row, gelu, gelu_grad, layer_norm, layer_norm_backward, log_softmax_at, softmax_in_place, LnCache};
use super::ModelConfig;
use crate::baseline::{sigmoid, softplus};
use crate::error::{Error, Result};
use crate::labels::LabelVector;
use crate::tokenizer::TokenSequence;

const INIT_STD: f64 = 0.02;
/// Sequences per gradient work unit. Fixed so summation order (and hence
/// the result) does not depend on the thread count.
const GRAD_CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum TensorKind {
    Weight,
    Bias,
    Gain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl BlockParams {
    fn zeros(c: &ModelConfig) -> Self {
        let (e, h) = (c.embed_dim, c.hidden_dim);
        Self {
            ln1_gain: Array1::zeros(e),
            ln1_bias: Array1::zeros(e),
            wq: Array2::zeros((e, e)),
            bq: Array1::zeros(e),
            wk: Array2::zeros((e, e)),
            bk: Array1::zeros(e),
            wv: Array2::zeros((e, e)),
            bv: Array1::zeros(e),
            wo: Array2::zeros((e, e)),
            bo: Array1::zeros(e),
            ln2_gain: Array1::zeros(e),
            ln2_bias: Array1::zeros(e),
            w1: Array2::zeros((e, h)),
            b1: Array1::zeros(h),
            w2: Array2::zeros((h, e)),
            b2: Array1::zeros(e),
        }
    }
}

macro_rules! block_tensors {
    ($b:expr, $conv1:ident, $conv2:ident) => {{
        use TensorKind::*;
        let BlockParams {
            ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo, ln2_gain, ln2_bias, w1, b1, w2, b2,
        } = $b;
        [
            ("ln1_gain", Gain, $conv1(ln1_gain)),
            ("ln1_bias", Bias, $conv1(ln1_bias)),
            ("wq", Weight, $conv2(wq)),
            ("bq", Bias, $conv1(bq)),
            ("wk", Weight, $conv2(wk)),
            ("bk", Bias, $conv1(bk)),
            ("wv", Weight, $conv2(wv)),
            ("bv", Bias, $conv1(bv)),
            ("wo", Weight, $conv2(wo)),
            ("bo", Bias, $conv1(bo)),
            ("ln2_gain", Gain, $conv1(ln2_gain)),
            ("ln2_bias", Bias, $conv1(ln2_bias)),
            ("w1", Weight, $conv2(w1)),
            ("b1", Bias, $conv1(b1)),
            ("w2", Weight, $conv2(w2)),
            ("b2", Bias, $conv1(b2)),
        ]
    }};
}

/// Every trainable tensor of the encoder. Also used as the gradient and
/// optimizer-moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub token_embedding: Array2<f64>,
    pub position_embedding: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub final_ln_gain: Array1<f64>,
    pub final_ln_bias: Array1<f64>,
    /// e x v
    pub mlm_head: Array2<f64>,
    /// e x l
    pub cls_head: Array2<f64>,
}

fn s1(a: &Array1<f64>) -> (&[f64], Vec<usize>) {
    (a.as_slice().expect("contiguous"), vec![a.len()])
}
fn s2(a: &Array2<f64>) -> (&[f64], Vec<usize>) {
    (a.as_slice().expect("contiguous"), a.shape().to_vec())
}
fn m1(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}
fn m2(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("contiguous")
}

impl Params {
    pub fn zeros(c: &ModelConfig) -> Self {
        Self {
            token_embedding: Array2::zeros((c.vocab_size, c.embed_dim)),
            position_embedding: Array2::zeros((c.context_width, c.embed_dim)),
            blocks: (0..c.num_blocks).map(|_| BlockParams::zeros(c)).collect(),
            final_ln_gain: Array1::zeros(c.embed_dim),
            final_ln_bias: Array1::zeros(c.embed_dim),
            mlm_head: Array2::zeros((c.embed_dim, c.vocab_size)),
            cls_head: Array2::zeros((c.embed_dim, c.num_labels)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|(_, t)| t.fill(0.0));
        z
    }

    pub(crate) fn described(&self) -> Vec<(String, TensorKind, &[f64], Vec<usize>)> {
        let mut out = vec![];
        let (t, sh) = s2(&self.token_embedding);
        out.push(("token_embedding".to_string(), TensorKind::Weight, t, sh));
        let (t, sh) = s2(&self.position_embedding);
        out.push(("position_embedding".to_string(), TensorKind::Weight, t, sh));
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, kind, (t, sh)) in block_tensors!(b, s1, s2) {
                out.push((format!("blocks.{i}.{name}"), kind, t, sh));
            }
        }
        let (t, sh) = s1(&self.final_ln_gain);
        out.push(("final_ln_gain".to_string(), TensorKind::Gain, t, sh));
        let (t, sh) = s1(&self.final_ln_bias);
        out.push(("final_ln_bias".to_string(), TensorKind::Bias, t, sh));
        let (t, sh) = s2(&self.mlm_head);
        out.push(("mlm_head".to_string(), TensorKind::Weight, t, sh));
        let (t, sh) = s2(&self.cls_head);
        out.push(("cls_head".to_string(), TensorKind::Weight, t, sh));
        out
    }

    pub(crate) fn described_mut(&mut self) -> Vec<(String, TensorKind, &mut [f64])> {
        let mut out = vec![];
        out.push(("token_embedding".to_string(), TensorKind::Weight, m2(&mut self.token_embedding)));
        out.push(("position_embedding".to_string(), TensorKind::Weight, m2(&mut self.position_embedding)));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, kind, t) in block_tensors!(b, m1, m2) {
                out.push((format!("blocks.{i}.{name}"), kind, t));
            }
        }
        out.push(("final_ln_gain".to_string(), TensorKind::Gain, m1(&mut self.final_ln_gain)));
        out.push(("final_ln_bias".to_string(), TensorKind::Bias, m1(&mut self.final_ln_bias)));
        out.push(("mlm_head".to_string(), TensorKind::Weight, m2(&mut self.mlm_head)));
        out.push(("cls_head".to_string(), TensorKind::Weight, m2(&mut self.cls_head)));
        out
    }

    /// Named flat views in declaration order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        self.described().into_iter().map(|(n, _, t, _)| (n, t)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.described_mut().into_iter().map(|(n, _, t)| (n, t)).collect()
    }

    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.described().into_iter().map(|(n, _, _, s)| (n, s)).collect()
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_scaled(&mut self, other: &Params, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// First tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
            .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub params: Params,
}

/// Masked-LM supervision for one sequence: original ids at selected positions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MlmTarget {
    pub positions: Vec<usize>,
    pub targets: Vec<u32>,
}

#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    Mlm(&'a [MlmTarget]),
    Multilabel(&'a [LabelVector]),
}

struct BlockCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    u: Array2<f64>,
    gact: Array2<f64>,
}

/// Intermediates of one forward pass, consumed by backward.
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
}

/// Mean cross-entropy of `logits` rows (one row per sequence position)
/// over `masked_positions` only.
pub fn loss_mlm(logits: &Array2<f64>, target_ids: &[u32], masked_positions: &[usize]) -> Result<f64> {
    if masked_positions.is_empty() {
        return Err(Error::NoMaskedPositions);
    }
    if target_ids.len() != masked_positions.len() {
        return Err(Error::invalid("targets and masked positions differ in length"));
    }
    let total: f64 = masked_positions
        .iter()
        .zip(target_ids)
        .map(|(&p, &t)| -log_softmax_at(logits.row(p), t as usize))
        .sum();
    Ok(total / masked_positions.len() as f64)
}

/// Unweighted mean over classes of sigmoid binary cross-entropy.
pub fn loss_multilabel(logits: &[f64], labels: &LabelVector) -> f64 {
    let y = labels.as_f64();
    logits
        .iter()
        .zip(y.iter())
        .map(|(&z, &yi)| softplus(z) - yi * z)
        .sum::<f64>()
        / logits.len() as f64
}

impl EncoderModel {
    /// Normal(0, 0.02) weights and embeddings, unit gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = Params::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for (_, kind, t) in params.described_mut() {
            match kind {
                TensorKind::Weight => t.iter_mut().for_each(|v| *v = normal.sample(&mut rng)),
                TensorKind::Gain => t.fill(1.0),
                TensorKind::Bias => t.fill(0.0),
            }
        }
        Ok(Self { config, params })
    }

    /// Re-draws the classification head only.
    pub fn reinit_cls_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        self.params.cls_head.mapv_inplace(|_| normal.sample(&mut rng));
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.len() > self.config.context_width {
            return Err(Error::SequenceTooLong {
                len: ids.len(),
                max: self.config.context_width,
            });
        }
        if ids.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embedding plus positional encoding for each position.
    pub fn embed(&self, ids: &[u32]) -> Result<Array2<f64>> {
        self.check_ids(ids)?;
        let mut x = self.params.position_embedding.slice(s![..ids.len(), ..]).to_owned();
        for (t, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(t);
            row += &self.params.token_embedding.row(id as usize);
        }
        Ok(x)
    }

    /// Runs the blocks and final layer norm on an embedded sequence. Keys at
    /// positions `>= active` receive `-inf` attention scores.
    pub fn forward_embedded(&self, x0: &Array2<f64>, active: usize) -> (Array2<f64>, ForwardCache) {
        let cfg = &self.config;
        let len = x0.nrows();
        let active = active.clamp(1, len);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let eps = cfg.layer_norm_eps;
        let mut x = x0.clone();
        let mut caches = Vec::with_capacity(cfg.num_blocks);
        for bp in &self.params.blocks {
            let (a, ln1) = layer_norm(&x, &bp.ln1_gain, &bp.ln1_bias, eps);
            let q = add_row(a.dot(&bp.wq), &bp.bq);
            let k = add_row(a.dot(&bp.wk), &bp.bk);
            let v = add_row(a.dot(&bp.wv), &bp.bv);
            let mut ctx = Array2::zeros((len, cfg.embed_dim));
            let mut probs = Vec::with_capacity(cfg.num_heads);
            for hd in 0..cfg.num_heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
                for mut row in scores.rows_mut() {
                    for j in active..len {
                        row[j] += f64::NEG_INFINITY;
                    }
                    softmax_in_place(row.as_slice_mut().expect("contiguous"));
                }
                ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
                probs.push(scores);
            }
            let x1 = &x + &add_row(ctx.dot(&bp.wo), &bp.bo);
            let (b, ln2) = layer_norm(&x1, &bp.ln2_gain, &bp.ln2_bias, eps);
            let u = add_row(b.dot(&bp.w1), &bp.b1);
            let gact = u.mapv(gelu);
            x = &x1 + &add_row(gact.dot(&bp.w2), &bp.b2);
            caches.push(BlockCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                ln2,
                b,
                u,
                gact,
            });
        }
        let (out, final_ln) = layer_norm(&x, &self.params.final_ln_gain, &self.params.final_ln_bias, eps);
        (
            out,
            ForwardCache {
                blocks: caches,
                final_ln,
            },
        )
    }

    /// Final encodings (`len x e`) of one sequence.
    pub fn encode_sequence(&self, seq: &TokenSequence) -> Result<Array2<f64>> {
        let x0 = self.embed(&seq.ids)?;
        Ok(self.forward_embedded(&x0, seq.attention_length).0)
    }

    /// Encodes every sequence of a batch (in parallel).
    pub fn forward_encode(&self, batch: &[TokenSequence]) -> Result<Vec<Array2<f64>>> {
        batch.par_iter().map(|s| self.encode_sequence(s)).collect()
    }

    /// `X W_mlm`.
    pub fn mlm_logits(&self, encodings: &Array2<f64>) -> Array2<f64> {
        encodings.dot(&self.params.mlm_head)
    }

    /// `e_cls W_cls` with `e_cls` the first row of the encodings.
    pub fn cls_logits(&self, encodings: &Array2<f64>) -> Vec<f64> {
        encodings.row(0).dot(&self.params.cls_head).to_vec()
    }

    pub fn predict_logits(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        Ok(self.cls_logits(&self.encode_sequence(seq)?))
    }

    pub fn predict_proba(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        Ok(self.predict_logits(seq)?.into_iter().map(sigmoid).collect())
    }

    /// Backward from `d loss / d X` to `d loss / d x0`. Parameter gradients
    /// are accumulated into `grads` when given.
    pub fn backward_embedded(
        &self,
        cache: &ForwardCache,
        d_out: &Array2<f64>,
        mut grads: Option<&mut Params>,
    ) -> Array2<f64> {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let p = &self.params;
        let mut scratch_g = Array1::zeros(cfg.embed_dim);
        let mut scratch_b = Array1::zeros(cfg.embed_dim);
        let (dg, db) = match grads.as_deref_mut() {
            Some(g) => (&mut g.final_ln_gain, &mut g.final_ln_bias),
            None => (&mut scratch_g, &mut scratch_b),
        };
        let mut dx = layer_norm_backward(d_out, &cache.final_ln, &p.final_ln_gain, dg, db);

        for (bi, (bp, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let want = grads.is_some();
            let mut scratch = None;
            let g: &mut BlockParams = match grads.as_deref_mut() {
                Some(g) => &mut g.blocks[bi],
                None => scratch.insert(BlockParams::zeros(cfg)),
            };

            // feed-forward
            if want {
                general_mat_mul(1.0, &bc.gact.t(), &dx, 1.0, &mut g.w2);
                g.b2 += &dx.sum_axis(Axis(0));
            }
            let mut du = dx.dot(&bp.w2.t());
            Zip::from(&mut du).and(&bc.u).for_each(|d, &u| *d *= gelu_grad(u));
            if want {
                general_mat_mul(1.0, &bc.b.t(), &du, 1.0, &mut g.w1);
                g.b1 += &du.sum_axis(Axis(0));
            }
            let db_ = du.dot(&bp.w1.t());
            let dx1 = dx + layer_norm_backward(&db_, &bc.ln2, &bp.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);

            // attention
            if want {
                general_mat_mul(1.0, &bc.ctx.t(), &dx1, 1.0, &mut g.wo);
                g.bo += &dx1.sum_axis(Axis(0));
            }
            let dctx = dx1.dot(&bp.wo.t());
            let len = dx1.nrows();
            let mut dq = Array2::zeros((len, cfg.embed_dim));
            let mut dk = Array2::zeros((len, cfg.embed_dim));
            let mut dv = Array2::zeros((len, cfg.embed_dim));
            for hd in 0..cfg.num_heads {
                let cols = s![.., hd * dh..(hd + 1) * dh];
                let probs = &bc.probs[hd];
                let dctx_h = dctx.slice(cols);
                dv.slice_mut(cols).assign(&probs.t().dot(&dctx_h));
                let mut ds = dctx_h.dot(&bc.v.slice(cols).t());
                Zip::from(ds.rows_mut()).and(probs.rows()).for_each(|mut d, pr| {
                    let dot = d.dot(&pr);
                    Zip::from(&mut d).and(&pr).for_each(|x, &pv| *x = pv * (*x - dot) * scale);
                });
                dq.slice_mut(cols).assign(&ds.dot(&bc.k.slice(cols)));
                dk.slice_mut(cols).assign(&ds.t().dot(&bc.q.slice(cols)));
            }
            if want {
                general_mat_mul(1.0, &bc.a.t(), &dq, 1.0, &mut g.wq);
                general_mat_mul(1.0, &bc.a.t(), &dk, 1.0, &mut g.wk);
                general_mat_mul(1.0, &bc.a.t(), &dv, 1.0, &mut g.wv);
                g.bq += &dq.sum_axis(Axis(0));
                g.bk += &dk.sum_axis(Axis(0));
                g.bv += &dv.sum_axis(Axis(0));
            }
            let mut da = dq.dot(&bp.wq.t());
            general_mat_mul(1.0, &dk, &bp.wk.t(), 1.0, &mut da);
            general_mat_mul(1.0, &dv, &bp.wv.t(), 1.0, &mut da);
            dx = dx1 + layer_norm_backward(&da, &bc.ln1, &bp.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
        }
        dx
    }

    /// Loss contribution and (optionally) gradients of one sequence.
    /// `weight` scales the sequence's loss and gradient.
    fn sequence_loss(
        &self,
        seq: &TokenSequence,
        target: SeqTarget<'_>,
        weight: f64,
        grads: Option<&mut Params>,
    ) -> Result<f64> {
        let x0 = self.embed(&seq.ids)?;
        let (enc, cache) = self.forward_embedded(&x0, seq.attention_length);
        let mut d_enc = Array2::zeros(enc.dim());
        let loss;
        let want = grads.is_some();
        let mut grads = grads;
        match target {
            SeqTarget::Mlm(t) => {
                if t.positions.iter().any(|&p| p >= enc.nrows()) {
                    return Err(Error::invalid("masked position outside sequence"));
                }
                let rows = enc.select(Axis(0), &t.positions);
                let mut logits = rows.dot(&self.params.mlm_head);
                let mut total = 0.0;
                for (mut row, &tgt) in logits.rows_mut().into_iter().zip(&t.targets) {
                    total -= log_softmax_at(row.view(), tgt as usize);
                    if want {
                        softmax_in_place(row.as_slice_mut().expect("contiguous"));
                        row[tgt as usize] -= 1.0;
                        row *= weight;
                    }
                }
                loss = total * weight;
                if let Some(g) = grads.as_deref_mut() {
                    general_mat_mul(1.0, &rows.t(), &logits, 1.0, &mut g.mlm_head);
                    let d_rows = logits.dot(&self.params.mlm_head.t());
                    for (r, &p) in t.positions.iter().enumerate() {
                        let mut dst = d_enc.row_mut(p);
                        dst += &d_rows.row(r);
                    }
                }
            }
            SeqTarget::Labels(labels) => {
                let logits = self.cls_logits(&enc);
                loss = loss_multilabel(&logits, labels) * weight;
                if let Some(g) = grads.as_deref_mut() {
                    let l = logits.len() as f64;
                    let y = labels.as_f64();
                    let dz = Array1::from_iter(
                        logits.iter().zip(y.iter()).map(|(&z, &yi)| (sigmoid(z) - yi) * weight / l),
                    );
                    let e_cls = enc.row(0);
                    for (i, &ev) in e_cls.iter().enumerate() {
                        let mut row = g.cls_head.row_mut(i);
                        row.scaled_add(ev, &dz);
                    }
                    d_enc.row_mut(0).assign(&self.params.cls_head.dot(&dz));
                }
            }
        }
        if let Some(g) = grads {
            let dx0 = self.backward_embedded(&cache, &d_enc, Some(g));
            for (t, &id) in seq.ids.iter().enumerate() {
                let mut row = g.token_embedding.row_mut(id as usize);
                row += &dx0.row(t);
                let mut prow = g.position_embedding.row_mut(t);
                prow += &dx0.row(t);
            }
        }
        Ok(loss)
    }

    fn targets<'a>(&self, batch: &[TokenSequence], objective: Objective<'a>) -> Result<(Vec<SeqTarget<'a>>, f64)> {
        match objective {
            Objective::Mlm(t) => {
                if t.len() != batch.len() {
                    return Err(Error::invalid("one MLM target per sequence required"));
                }
                let masked: usize = t.iter().map(|x| x.positions.len()).sum();
                if masked == 0 {
                    return Err(Error::NoMaskedPositions);
                }
                if t.iter().any(|x| x.positions.len() != x.targets.len()) {
                    return Err(Error::invalid("targets and masked positions differ in length"));
                }
                Ok((t.iter().map(SeqTarget::Mlm).collect(), 1.0 / masked as f64))
            }
            Objective::Multilabel(l) => {
                if l.len() != batch.len() || batch.is_empty() {
                    return Err(Error::invalid("one label vector per sequence required"));
                }
                Ok((l.iter().map(SeqTarget::Labels).collect(), 1.0 / batch.len() as f64))
            }
        }
    }

    /// Batch loss: mean cross-entropy over all masked positions, or mean
    /// multi-label BCE over sequences.
    pub fn loss(&self, batch: &[TokenSequence], objective: Objective<'_>) -> Result<f64> {
        let (targets, weight) = self.targets(batch, objective)?;
        let parts: Vec<f64> = batch
            .par_iter()
            .zip(targets.par_iter())
            .map(|(s, t)| self.sequence_loss(s, *t, weight, None))
            .collect::<Result<_>>()?;
        Ok(parts.iter().sum())
    }

    /// Loss and exact gradients for every parameter.
    pub fn backward(&self, batch: &[TokenSequence], objective: Objective<'_>) -> Result<(f64, Params)> {
        let (targets, weight) = self.targets(batch, objective)?;
        let chunks: Vec<(f64, Params)> = batch
            .par_chunks(GRAD_CHUNK)
            .zip(targets.par_chunks(GRAD_CHUNK))
            .map(|(seqs, tgts)| {
                let mut g = Params::zeros(&self.config);
                let mut loss = 0.0;
                for (s, t) in seqs.iter().zip(tgts) {
                    loss += self.sequence_loss(s, *t, weight, Some(&mut g))?;
                }
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        let mut iter = chunks.into_iter();
        let (mut loss, mut grads) = iter.next().expect("non-empty batch");
        for (l, g) in iter {
            loss += l;
            grads.add_scaled(&g, 1.0);
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFiniteGradient(name));
        }
        Ok((loss, grads))
    }

    /// Target-class logit and its gradient with respect to the embedded
    /// input `x0` (token embedding + positional encoding).
    pub fn class_logit_input_grad(&self, x0: &Array2<f64>, active: usize, class: usize) -> (f64, Array2<f64>) {
        let (enc, cache) = self.forward_embedded(x0, active);
        let logit = enc.row(0).dot(&self.params.cls_head.column(class));
        let mut d_enc = Array2::zeros(enc.dim());
        d_enc.row_mut(0).assign(&self.params.cls_head.column(class));
        (logit, self.backward_embedded(&cache, &d_enc, None))
    }

    pub fn class_logit(&self, x0: &Array2<f64>, active: usize, class: usize) -> f64 {
        let (enc, _) = self.forward_embedded(x0, active);
        enc.row(0).dot(&self.params.cls_head.column(class))
    }

    /// Positional table tiled `new_width / n` times; everything else is
    /// shared unchanged.
    pub fn extend_context(&self, new_width: usize) -> Result<EncoderModel> {
        let old = self.config.context_width;
        if new_width == 0 || new_width % old != 0 {
            return Err(Error::invalid(format!(
                "new context width {new_width} is not a positive multiple of {old}"
            )));
        }
        let copies = new_width / old;
        let mut out = self.clone();
        let views: Vec<_> = (0..copies).map(|_| self.params.position_embedding.view()).collect();
        out.params.position_embedding =
            ndarray::concatenate(Axis(0), &views).expect("identical shapes concatenate");
        out.config.context_width = new_width;
        Ok(out)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }
}

#[derive(Debug, Clone, Copy)]
enum SeqTarget<'a> {
    Mlm(&'a MlmTarget),
    Labels(&'a LabelVector),
}
