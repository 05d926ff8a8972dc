use serde::{Deserialize, Serialize};

use super::dire::zeros_embedding;
use super::head::{self, exposure_backward, Embedding};
use super::{mask_grad, Block, BlockMut, ForwardTrace, Masks, ModelSpec, TraceDetail};
use crate::datagen::Datapoint;
use crate::error::Result;
use crate::numerics::{matvec_into, outer_acc, sigmoid, tmatvec_acc, Matrix};
use crate::scalar::Scalar;

/// Parameters of the two neural baselines.
///
/// Feed-forward: `x = [u_1 .. u_n, q]`, two sigmoid layers, then a linear map
/// back to the multimodal space. Recurrent: a sigmoid RNN over the exposures
/// whose last state is joined with `q` and passed through one sigmoid layer
/// and the same linear map. `w_in` is the first layer (`W1`) for the
/// feed-forward net and the input-to-hidden map for the RNN.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams<T> {
    pub embedding: Embedding<T>,
    pub exposures: usize,
    pub w_in: Matrix<T>,
    pub w_rec: Option<Matrix<T>>,
    pub b_in: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    pub w3: Matrix<T>,
    pub b3: Vec<T>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MlpTrace<T> {
    /// Feed-forward: the concatenated input. Recurrent: empty.
    pub input: Vec<T>,
    /// Feed-forward: `[h1]`. Recurrent: `h_1 .. h_n`. Sigmoid outputs before dropout.
    pub states: Vec<Vec<T>>,
    /// Input to the second layer (after dropout, with `q` appended for the RNN).
    pub layer2_input: Vec<T>,
    pub h2: Vec<T>,
    pub h2_dropped: Vec<T>,
}

impl<T: Scalar> MlpParams<T> {
    pub(crate) fn zeros(spec: &ModelSpec, embedding: Embedding<T>, recurrent: bool) -> Self {
        let m = spec.multimodal_dim;
        let h = spec.hidden;
        let (w_in, w_rec, w2) = if recurrent {
            (Matrix::zeros(m, h), Some(Matrix::zeros(h, h)), Matrix::zeros(h + m, h))
        } else {
            (Matrix::zeros((spec.exposures + 1) * m, h), None, Matrix::zeros(h, h))
        };
        Self {
            embedding,
            exposures: spec.exposures,
            w_in,
            w_rec,
            b_in: vec![T::zero(); h],
            w2,
            b2: vec![T::zero(); h],
            w3: Matrix::zeros(h, m),
            b3: vec![T::zero(); m],
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_in.cols()
    }

    fn zeros_like(&self) -> Self {
        Self {
            embedding: zeros_embedding(&self.embedding),
            exposures: self.exposures,
            w_in: Matrix::zeros(self.w_in.rows(), self.w_in.cols()),
            w_rec: self.w_rec.as_ref().map(|w| Matrix::zeros(w.rows(), w.cols())),
            b_in: vec![T::zero(); self.b_in.len()],
            w2: Matrix::zeros(self.w2.rows(), self.w2.cols()),
            b2: vec![T::zero(); self.b2.len()],
            w3: Matrix::zeros(self.w3.rows(), self.w3.cols()),
            b3: vec![T::zero(); self.b3.len()],
        }
    }

    pub(crate) fn blocks(&self) -> Vec<Block<'_, T>> {
        let mut out = self.embedding.blocks();
        out.push(Block { name: "W1", shape: self.w_in.shape(), data: self.w_in.as_slice() });
        if let Some(w) = &self.w_rec {
            out.push(Block { name: "W_h", shape: w.shape(), data: w.as_slice() });
        }
        out.push(Block { name: "b1", shape: (1, self.b_in.len()), data: &self.b_in });
        out.push(Block { name: "W2", shape: self.w2.shape(), data: self.w2.as_slice() });
        out.push(Block { name: "b2", shape: (1, self.b2.len()), data: &self.b2 });
        out.push(Block { name: "W3", shape: self.w3.shape(), data: self.w3.as_slice() });
        out.push(Block { name: "b3", shape: (1, self.b3.len()), data: &self.b3 });
        out
    }

    pub(crate) fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>> {
        let mut out = self.embedding.blocks_mut();
        let s = self.w_in.shape();
        out.push(BlockMut { name: "W1", shape: s, data: self.w_in.as_mut_slice() });
        if let Some(w) = &mut self.w_rec {
            let s = w.shape();
            out.push(BlockMut { name: "W_h", shape: s, data: w.as_mut_slice() });
        }
        let n = self.b_in.len();
        out.push(BlockMut { name: "b1", shape: (1, n), data: &mut self.b_in });
        let s = self.w2.shape();
        out.push(BlockMut { name: "W2", shape: s, data: self.w2.as_mut_slice() });
        let n = self.b2.len();
        out.push(BlockMut { name: "b2", shape: (1, n), data: &mut self.b2 });
        let s = self.w3.shape();
        out.push(BlockMut { name: "W3", shape: s, data: self.w3.as_mut_slice() });
        let n = self.b3.len();
        out.push(BlockMut { name: "b3", shape: (1, n), data: &mut self.b3 });
        out
    }
}

/// `sigmoid(W^T x + b)`
fn layer<T: Scalar>(w: &Matrix<T>, x: &[T], b: &[T]) -> Vec<T> {
    let mut a = b.to_vec();
    tmatvec_acc(w, x, &mut a);
    a.iter_mut().for_each(|v| *v = sigmoid(*v));
    a
}

fn embed_exposures<T: Scalar>(
    emb: &Embedding<T>,
    dp: &Datapoint<T>,
    masks: &mut Masks<'_, T>,
    log: &mut Vec<Vec<T>>,
) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(dp.exposures.len());
    for e in &dp.exposures {
        let mut u = emb.exposure(e.image.as_slice(), e.attribute.as_slice());
        masks.apply(&mut u, log)?;
        out.push(u);
    }
    Ok(out)
}

/// Second sigmoid layer, dropout, linear output map and scoring head.
#[allow(clippy::too_many_arguments)]
fn finish<T: Scalar>(
    p: &MlpParams<T>,
    dp: &Datapoint<T>,
    masks: &mut Masks<'_, T>,
    mut log: Vec<Vec<T>>,
    exposures: Vec<Vec<T>>,
    query: Vec<T>,
    input: Vec<T>,
    states: Vec<Vec<T>>,
    layer2_input: Vec<T>,
) -> Result<ForwardTrace<T>> {
    let h2 = layer(&p.w2, &layer2_input, &p.b2);
    let mut h2_dropped = h2.clone();
    masks.apply(&mut h2_dropped, &mut log)?;
    let mut comparison = p.b3.clone();
    tmatvec_acc(&p.w3, &h2_dropped, &mut comparison);
    let scored = head::score(&comparison, &dp.candidates, &p.embedding.v, dp.gold);
    Ok(ForwardTrace {
        exposures,
        query,
        comparison,
        mapped_candidates: scored.mapped,
        scores: scored.scores,
        distribution: scored.distribution,
        loss: scored.loss,
        gold: dp.gold,
        masks: log,
        detail: TraceDetail::Mlp(MlpTrace { input, states, layer2_input, h2, h2_dropped }),
        fingerprint: None,
    })
}

pub(super) fn forward_ff<T: Scalar>(
    p: &MlpParams<T>,
    dp: &Datapoint<T>,
    masks: &mut Masks<'_, T>,
) -> Result<ForwardTrace<T>> {
    let mut log = Vec::new();
    let exposures = embed_exposures(&p.embedding, dp, masks, &mut log)?;
    let query = p.embedding.query_of(dp);
    let mut input: Vec<T> = exposures.concat();
    input.extend_from_slice(&query);
    let h1 = layer(&p.w_in, &input, &p.b_in);
    let mut h1_dropped = h1.clone();
    masks.apply(&mut h1_dropped, &mut log)?;
    finish(p, dp, masks, log, exposures, query, input, vec![h1], h1_dropped)
}

pub(super) fn forward_rnn<T: Scalar>(
    p: &MlpParams<T>,
    dp: &Datapoint<T>,
    masks: &mut Masks<'_, T>,
) -> Result<ForwardTrace<T>> {
    let w_rec = p.w_rec.as_ref().expect("recurrent parameters");
    let mut log = Vec::new();
    let exposures = embed_exposures(&p.embedding, dp, masks, &mut log)?;
    let query = p.embedding.query_of(dp);
    let mut states: Vec<Vec<T>> = Vec::with_capacity(exposures.len());
    for u in &exposures {
        let mut a = p.b_in.clone();
        tmatvec_acc(&p.w_in, u, &mut a);
        if let Some(prev) = states.last() {
            tmatvec_acc(w_rec, prev, &mut a);
        }
        a.iter_mut().for_each(|v| *v = sigmoid(*v));
        states.push(a);
    }
    let mut layer2_input = states.last().expect("at least one exposure").clone();
    masks.apply(&mut layer2_input, &mut log)?;
    layer2_input.extend_from_slice(&query);
    finish(p, dp, masks, log, exposures, query, Vec::new(), states, layer2_input)
}

/// Shared tail of both backward passes: scoring head, `W3`, the second
/// layer. Returns the gradient and the gradient of `layer2_input`.
fn backward_tail<T: Scalar>(p: &MlpParams<T>, dp: &Datapoint<T>, tr: &ForwardTrace<T>, t: &MlpTrace<T>) -> (MlpParams<T>, Vec<T>) {
    let mut g = p.zeros_like();
    let dout = head::score_backward(&tr.comparison, &tr.mapped_candidates, &tr.distribution, tr.gold, &dp.candidates, &mut g.embedding.v);
    outer_acc(&mut g.w3, &t.h2_dropped, &dout);
    for (b, d) in g.b3.iter_mut().zip(&dout) {
        *b += *d;
    }
    let mut dh2 = vec![T::zero(); t.h2.len()];
    matvec_into(&p.w3, &dout, &mut dh2);
    mask_grad(&tr.masks, dp.exposures.len() + 1, &mut dh2);
    let da2: Vec<T> = dh2.iter().zip(&t.h2).map(|(&d, &h)| d * h * (T::one() - h)).collect();
    outer_acc(&mut g.w2, &t.layer2_input, &da2);
    for (b, d) in g.b2.iter_mut().zip(&da2) {
        *b += *d;
    }
    let mut dx = vec![T::zero(); t.layer2_input.len()];
    matvec_into(&p.w2, &da2, &mut dx);
    (g, dx)
}

fn exposures_backward<T: Scalar>(g: &mut MlpParams<T>, dp: &Datapoint<T>, masks: &[Vec<T>], du: &mut [Vec<T>]) {
    for (i, e) in dp.exposures.iter().enumerate() {
        mask_grad(masks, i, &mut du[i]);
        exposure_backward(&mut g.embedding.v, &mut g.embedding.a, e.image.as_slice(), e.attribute.as_slice(), &du[i]);
    }
}

pub(super) fn backward_ff<T: Scalar>(p: &MlpParams<T>, dp: &Datapoint<T>, tr: &ForwardTrace<T>, t: &MlpTrace<T>) -> MlpParams<T> {
    let n = dp.exposures.len();
    let m = p.embedding.dim();
    let (mut g, mut dh1) = backward_tail(p, dp, tr, t);
    mask_grad(&tr.masks, n, &mut dh1);
    let h1 = &t.states[0];
    let da1: Vec<T> = dh1.iter().zip(h1).map(|(&d, &h)| d * h * (T::one() - h)).collect();
    outer_acc(&mut g.w_in, &t.input, &da1);
    for (b, d) in g.b_in.iter_mut().zip(&da1) {
        *b += *d;
    }
    let mut dx = vec![T::zero(); t.input.len()];
    matvec_into(&p.w_in, &da1, &mut dx);
    let mut du: Vec<Vec<T>> = dx.chunks(m).map(<[T]>::to_vec).collect();
    let dq = du.pop().expect("query block");
    Embedding::query_backward(&mut g.embedding, dp, &dq);
    exposures_backward(&mut g, dp, &tr.masks, &mut du);
    g
}

pub(super) fn backward_rnn<T: Scalar>(p: &MlpParams<T>, dp: &Datapoint<T>, tr: &ForwardTrace<T>, t: &MlpTrace<T>) -> MlpParams<T> {
    let n = dp.exposures.len();
    let hdim = p.hidden();
    let w_rec = p.w_rec.as_ref().expect("recurrent parameters");
    let (mut g, dx) = backward_tail(p, dp, tr, t);
    let mut dh = dx[..hdim].to_vec();
    Embedding::query_backward(&mut g.embedding, dp, &dx[hdim..]);
    mask_grad(&tr.masks, n, &mut dh);

    let mut du = vec![vec![T::zero(); p.embedding.dim()]; n];
    for i in (0..n).rev() {
        let h = &t.states[i];
        let da: Vec<T> = dh.iter().zip(h).map(|(&d, &hv)| d * hv * (T::one() - hv)).collect();
        outer_acc(&mut g.w_in, &tr.exposures[i], &da);
        for (b, d) in g.b_in.iter_mut().zip(&da) {
            *b += *d;
        }
        matvec_into(&p.w_in, &da, &mut du[i]);
        dh = vec![T::zero(); hdim];
        if i > 0 {
            outer_acc(g.w_rec.as_mut().expect("recurrent gradient"), &t.states[i - 1], &da);
            matvec_into(w_rec, &da, &mut dh);
        }
    }
    exposures_backward(&mut g, dp, &tr.masks, &mut du);
    g
}
