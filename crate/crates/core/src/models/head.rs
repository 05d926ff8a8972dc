use serde::{Deserialize, Serialize};

use super::{Block, BlockMut, ModelSpec};
use crate::datagen::Datapoint;
use crate::error::{mismatch, Error, Result};
use crate::numerics::{axpy, dot_slice, outer_acc, softmax_into, tmatvec_acc, Matrix, Vector};
use crate::scalar::Scalar;

/// Input-side maps into the multimodal space, each stored `(input_dim x m)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding<T> {
    pub v: Matrix<T>,
    pub a: Matrix<T>,
    pub c: Matrix<T>,
}

/// Second image/attribute matrix set of the two-matrix variants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputMaps<T> {
    pub v: Matrix<T>,
    pub a: Matrix<T>,
}

impl<T: Scalar> Embedding<T> {
    pub(crate) fn zeros(spec: &ModelSpec) -> Self {
        let m = spec.multimodal_dim;
        Self {
            v: Matrix::zeros(spec.image_dim, m),
            a: Matrix::zeros(spec.attribute_dim, m),
            c: Matrix::zeros(spec.noun_dim, m),
        }
    }

    pub fn dim(&self) -> usize {
        self.v.cols()
    }

    /// `V^T image + A^T attribute`
    pub fn exposure(&self, image: &[T], attribute: &[T]) -> Vec<T> {
        embed_pair(&self.v, &self.a, image, attribute)
    }

    /// `C^T noun + A^T a1 + A^T a2`, evaluated as `A^T (a1 + a2)` so that it
    /// is exactly symmetric in the two attributes.
    pub fn query(&self, noun: &[T], a1: &[T], a2: &[T]) -> Vec<T> {
        let mut q = vec![T::zero(); self.dim()];
        tmatvec_acc(&self.c, noun, &mut q);
        let both: Vec<T> = a1.iter().zip(a2).map(|(&x, &y)| x + y).collect();
        tmatvec_acc(&self.a, &both, &mut q);
        q
    }

    /// Checked form of [`Embedding::exposure`].
    pub fn embed_exposure(&self, image: &Vector<T>, attribute: &Vector<T>) -> Result<Vector<T>> {
        check("embed_exposure: image", self.v.rows(), image.dim())?;
        check("embed_exposure: attribute", self.a.rows(), attribute.dim())?;
        Ok(self.exposure(image.as_slice(), attribute.as_slice()).into())
    }

    /// Checked form of [`Embedding::query`].
    pub fn embed_query(&self, noun: &Vector<T>, a1: &Vector<T>, a2: &Vector<T>) -> Result<Vector<T>> {
        check("embed_query: noun", self.c.rows(), noun.dim())?;
        check("embed_query: a1", self.a.rows(), a1.dim())?;
        check("embed_query: a2", self.a.rows(), a2.dim())?;
        Ok(self.query(noun.as_slice(), a1.as_slice(), a2.as_slice()).into())
    }

    pub(crate) fn query_of(&self, dp: &Datapoint<T>) -> Vec<T> {
        self.query(
            dp.query.noun.as_slice(),
            dp.query.attrs[0].as_slice(),
            dp.query.attrs[1].as_slice(),
        )
    }

    /// Accumulates the gradient of `q` into `C` and `A`.
    pub(crate) fn query_backward(grad: &mut Self, dp: &Datapoint<T>, dq: &[T]) {
        outer_acc(&mut grad.c, dp.query.noun.as_slice(), dq);
        outer_acc(&mut grad.a, dp.query.attrs[0].as_slice(), dq);
        outer_acc(&mut grad.a, dp.query.attrs[1].as_slice(), dq);
    }

    pub(crate) fn blocks(&self) -> Vec<Block<'_, T>> {
        vec![
            Block { name: "V", shape: self.v.shape(), data: self.v.as_slice() },
            Block { name: "A", shape: self.a.shape(), data: self.a.as_slice() },
            Block { name: "C", shape: self.c.shape(), data: self.c.as_slice() },
        ]
    }

    pub(crate) fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>> {
        let (vs, as_, cs) = (self.v.shape(), self.a.shape(), self.c.shape());
        vec![
            BlockMut { name: "V", shape: vs, data: self.v.as_mut_slice() },
            BlockMut { name: "A", shape: as_, data: self.a.as_mut_slice() },
            BlockMut { name: "C", shape: cs, data: self.c.as_mut_slice() },
        ]
    }
}

impl<T: Scalar> OutputMaps<T> {
    pub(crate) fn zeros(spec: &ModelSpec) -> Self {
        let m = spec.multimodal_dim;
        Self {
            v: Matrix::zeros(spec.image_dim, m),
            a: Matrix::zeros(spec.attribute_dim, m),
        }
    }

    pub fn exposure(&self, image: &[T], attribute: &[T]) -> Vec<T> {
        embed_pair(&self.v, &self.a, image, attribute)
    }

    pub(crate) fn blocks(&self) -> Vec<Block<'_, T>> {
        vec![
            Block { name: "V_out", shape: self.v.shape(), data: self.v.as_slice() },
            Block { name: "A_out", shape: self.a.shape(), data: self.a.as_slice() },
        ]
    }

    pub(crate) fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>> {
        let (vs, as_) = (self.v.shape(), self.a.shape());
        vec![
            BlockMut { name: "V_out", shape: vs, data: self.v.as_mut_slice() },
            BlockMut { name: "A_out", shape: as_, data: self.a.as_mut_slice() },
        ]
    }
}

fn check(op: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(mismatch(op, expected, found))
    }
}

fn embed_pair<T: Scalar>(v: &Matrix<T>, a: &Matrix<T>, image: &[T], attribute: &[T]) -> Vec<T> {
    let mut u = vec![T::zero(); v.cols()];
    tmatvec_acc(v, image, &mut u);
    tmatvec_acc(a, attribute, &mut u);
    u
}

/// Gradient of an embedded exposure into its image and attribute matrices.
pub(crate) fn exposure_backward<T: Scalar>(
    dv: &mut Matrix<T>,
    da: &mut Matrix<T>,
    image: &[T],
    attribute: &[T],
    du: &[T],
) {
    outer_acc(dv, image, du);
    outer_acc(da, attribute, du);
}

pub(crate) struct Scored<T> {
    pub mapped: Vec<Vec<T>>,
    pub scores: Vec<T>,
    pub distribution: Vec<T>,
    pub loss: T,
}

/// Maps the candidates with `v`, scores them against `probe`, and returns the
/// softmax distribution with the cross-entropy loss of `gold`.
pub(crate) fn score<T: Scalar>(probe: &[T], candidates: &[Vector<T>], v: &Matrix<T>, gold: usize) -> Scored<T> {
    let mapped: Vec<Vec<T>> = candidates
        .iter()
        .map(|c| {
            let mut d = vec![T::zero(); v.cols()];
            tmatvec_acc(v, c.as_slice(), &mut d);
            d
        })
        .collect();
    let scores: Vec<T> = mapped.iter().map(|d| dot_slice(probe, d)).collect();
    let mut distribution = vec![T::zero(); scores.len()];
    softmax_into(&scores, &mut distribution);
    let max = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + scores.iter().map(|&s| (s - max).exp()).sum::<T>().ln();
    Scored {
        mapped,
        scores: scores.clone(),
        distribution,
        loss: lse - scores[gold],
    }
}

/// Backward through the scoring head. Accumulates into `dv` and returns the
/// gradient of the comparison vector.
pub(crate) fn score_backward<T: Scalar>(
    probe: &[T],
    mapped: &[Vec<T>],
    distribution: &[T],
    gold: usize,
    candidates: &[Vector<T>],
    dv: &mut Matrix<T>,
) -> Vec<T> {
    let mut dprobe = vec![T::zero(); probe.len()];
    for (j, (d, c)) in mapped.iter().zip(candidates).enumerate() {
        let mut dscore = distribution[j];
        if j == gold {
            dscore -= T::one();
        }
        axpy(dscore, d, &mut dprobe);
        let dd: Vec<T> = probe.iter().map(|&p| p * dscore).collect();
        outer_acc(dv, c.as_slice(), &dd);
    }
    dprobe
}

/// Probability distribution over `candidates` for a comparison vector `r`.
pub fn score_candidates<T: Scalar>(
    r: &Vector<T>,
    candidates: &[Vector<T>],
    v: &Matrix<T>,
) -> Result<Vector<T>> {
    if candidates.is_empty() {
        return Err(Error::Empty("score_candidates"));
    }
    if r.dim() != v.cols() {
        return Err(mismatch("score_candidates: r", v.cols(), r.dim()));
    }
    for c in candidates {
        if c.dim() != v.rows() {
            return Err(mismatch("score_candidates: candidate", v.rows(), c.dim()));
        }
    }
    Ok(score(r.as_slice(), candidates, v, 0).distribution.into())
}
