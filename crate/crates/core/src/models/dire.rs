use serde::{Deserialize, Serialize};

use super::head::{self, exposure_backward, Embedding, OutputMaps};
use super::{as_vectors, mask_grad, Block, BlockMut, ForwardTrace, GateMode, Masks, Probe, TraceDetail};
use crate::datagen::Datapoint;
use crate::error::Result;
use crate::library::{retrieve_slices, Gate, GateParams, InsertionStep, Library};
use crate::numerics::{axpy, dot_slice, softmax_backward, Matrix};
use crate::scalar::Scalar;

/// DIRE parameters. With `output` set (the two-matrix variant) a second
/// library is built from `V_out`/`A_out` embeddings using the insertion
/// weights of the first; attention is computed on the first library and the
/// read-out taken from the second. Candidates are then mapped with `V_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DireParams<T> {
    pub input: Embedding<T>,
    pub output: Option<OutputMaps<T>>,
    pub gate: GateParams<T>,
    pub gate_mode: GateMode,
    pub probe: Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DireTrace<T> {
    /// `states[k]` is the library after exposure `k`.
    pub states: Vec<Library<T>>,
    pub steps: Vec<InsertionStep<T>>,
    /// Two-matrix variant: output-set exposures and the library built from them.
    pub output_exposures: Option<Vec<Vec<T>>>,
    pub output_library: Option<Matrix<T>>,
    pub attention: Vec<T>,
    pub retrieved: Vec<T>,
}

impl<T: Scalar> DireParams<T> {
    pub(crate) fn blocks(&self) -> Vec<Block<'_, T>> {
        let mut out = self.input.blocks();
        if let Some(o) = &self.output {
            out.extend(o.blocks());
        }
        out.push(Block { name: "w", shape: (1, 1), data: std::slice::from_ref(&self.gate.w) });
        out.push(Block { name: "b", shape: (1, 1), data: std::slice::from_ref(&self.gate.b) });
        out
    }

    pub(crate) fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>> {
        let mut out = self.input.blocks_mut();
        if let Some(o) = &mut self.output {
            out.extend(o.blocks_mut());
        }
        out.push(BlockMut { name: "w", shape: (1, 1), data: std::slice::from_mut(&mut self.gate.w) });
        out.push(BlockMut { name: "b", shape: (1, 1), data: std::slice::from_mut(&mut self.gate.b) });
        out
    }

    fn gate(&self) -> Gate<T> {
        match self.gate_mode {
            GateMode::Learned => Gate::Learned(self.gate),
            GateMode::AlwaysNew => Gate::AlwaysNew,
        }
    }

    fn candidate_map(&self) -> &Matrix<T> {
        self.output.as_ref().map_or(&self.input.v, |o| &o.v)
    }
}

/// Library built from `rows` with fixed insertion weights: row 0 starts as
/// `rows[0]`, then each later row `k` adds `z_k[j] * rows[k]` to rows `0..=k`.
fn replay_insertions<T: Scalar>(rows: &[Vec<T>], steps: &[InsertionStep<T>]) -> Matrix<T> {
    let m = rows[0].len();
    let mut lib = Matrix::zeros(rows.len(), m);
    lib.row_mut(0).copy_from_slice(&rows[0]);
    for (k, st) in steps.iter().enumerate() {
        let u = &rows[k + 1];
        for (j, &zj) in st.z.iter().enumerate() {
            axpy(zj, u, lib.row_mut(j));
        }
    }
    lib
}

pub(super) fn forward<T: Scalar>(
    p: &DireParams<T>,
    dp: &Datapoint<T>,
    masks: &mut Masks<'_, T>,
) -> Result<ForwardTrace<T>> {
    let mut log = Vec::new();
    let mut exposures = Vec::with_capacity(dp.exposures.len());
    for e in &dp.exposures {
        let mut u = p.input.exposure(e.image.as_slice(), e.attribute.as_slice());
        masks.apply(&mut u, &mut log)?;
        exposures.push(u);
    }
    let output_exposures = match &p.output {
        Some(o) => {
            let mut rows = Vec::with_capacity(dp.exposures.len());
            for e in &dp.exposures {
                let mut u = o.exposure(e.image.as_slice(), e.attribute.as_slice());
                masks.apply(&mut u, &mut log)?;
                rows.push(u);
            }
            Some(rows)
        }
        None => None,
    };

    let (states, steps) = Library::build_states(&as_vectors(&exposures), p.gate())?;
    let output_library = output_exposures.as_ref().map(|rows| replay_insertions(rows, &steps));
    let keys = states.last().expect("non-empty").entities();
    let values = output_library.as_ref().unwrap_or(keys);

    let query = p.input.query_of(dp);
    let (attention, retrieved) = retrieve_slices(keys, values, &query);
    let comparison = match p.probe {
        Probe::Retrieved => retrieved.clone(),
        Probe::Query => query.clone(),
    };
    let scored = head::score(&comparison, &dp.candidates, p.candidate_map(), dp.gold);

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
        detail: TraceDetail::Dire(DireTrace {
            states,
            steps,
            output_exposures,
            output_library,
            attention,
            retrieved,
        }),
        fingerprint: None,
    })
}

pub(super) fn backward<T: Scalar>(
    p: &DireParams<T>,
    dp: &Datapoint<T>,
    tr: &ForwardTrace<T>,
    dt: &DireTrace<T>,
) -> DireParams<T> {
    let m = p.input.dim();
    let mut g = DireParams {
        input: zeros_embedding(&p.input),
        output: p.output.as_ref().map(zeros_output),
        gate: GateParams::new(T::zero(), T::zero()),
        gate_mode: p.gate_mode,
        probe: p.probe,
    };

    let dcomparison = {
        let dv = match &mut g.output {
            Some(o) => &mut o.v,
            None => &mut g.input.v,
        };
        head::score_backward(&tr.comparison, &tr.mapped_candidates, &tr.distribution, tr.gold, &dp.candidates, dv)
    };
    let mut dq = vec![T::zero(); m];
    let mut dr = vec![T::zero(); m];
    match p.probe {
        Probe::Retrieved => dr = dcomparison,
        Probe::Query => axpy(T::one(), &dcomparison, &mut dq),
    }

    let keys = dt.states.last().expect("non-empty").entities();
    let n = keys.rows();
    let values = dt.output_library.as_ref().unwrap_or(keys);
    let mut de: Vec<Vec<T>> = vec![vec![T::zero(); m]; n];
    let mut de_out: Option<Vec<Vec<T>>> = dt.output_library.as_ref().map(|_| vec![vec![T::zero(); m]; n]);

    // r = values^T g
    let mut dattention = vec![T::zero(); n];
    for k in 0..n {
        dattention[k] = dot_slice(values.row(k), &dr);
        let target = match de_out.as_mut() {
            Some(d) => &mut d[k],
            None => &mut de[k],
        };
        axpy(dt.attention[k], &dr, target);
    }
    // g = softmax(keys q)
    let dlogits = softmax_backward(&dt.attention, &dattention);
    for k in 0..n {
        axpy(dlogits[k], &tr.query, &mut de[k]);
        axpy(dlogits[k], keys.row(k), &mut dq);
    }
    Embedding::query_backward(&mut g.input, dp, &dq);

    // Reverse the insertions.
    let mut du: Vec<Vec<T>> = vec![vec![T::zero(); m]; n];
    let mut du_out: Vec<Vec<T>> = vec![vec![T::zero(); m]; if de_out.is_some() { n } else { 0 }];
    for k in (1..n).rev() {
        let st = &dt.steps[k - 1];
        let u = &tr.exposures[k];
        let mut dz = vec![T::zero(); k + 1];
        for j in 0..=k {
            dz[j] = dot_slice(&de[j], u);
            axpy(st.z[j], &de[j], &mut du[k]);
        }
        if let (Some(deo), Some(rows)) = (de_out.as_ref(), dt.output_exposures.as_ref()) {
            for j in 0..=k {
                dz[j] += dot_slice(&deo[j], &rows[k]);
                axpy(st.z[j], &deo[j], &mut du_out[k]);
            }
        }

        // z = p_old * softmax(s) || (1 - p_old)
        let mut dp_old = -dz[k];
        let mut dmatch = vec![T::zero(); k];
        for j in 0..k {
            dp_old += dz[j] * st.match_probs[j];
            dmatch[j] = st.p_old * dz[j];
        }
        let mut ds = softmax_backward(&st.match_probs, &dmatch);
        if p.gate_mode == GateMode::Learned {
            let dpre = dp_old * st.p_old * (T::one() - st.p_old);
            g.gate.w += dpre * st.s_max;
            g.gate.b += dpre;
            ds[st.s_argmax] += dpre * p.gate.w;
        }

        // s = E_prev u
        de.truncate(k);
        let prev = dt.states[k - 1].entities();
        for j in 0..k {
            axpy(ds[j], u, &mut de[j]);
            axpy(ds[j], prev.row(j), &mut du[k]);
        }
    }
    axpy(T::one(), &de[0], &mut du[0]);
    if let Some(deo) = &de_out {
        axpy(T::one(), &deo[0], &mut du_out[0]);
    }

    for (i, e) in dp.exposures.iter().enumerate() {
        mask_grad(&tr.masks, i, &mut du[i]);
        exposure_backward(&mut g.input.v, &mut g.input.a, e.image.as_slice(), e.attribute.as_slice(), &du[i]);
    }
    if let Some(o) = &mut g.output {
        for (i, e) in dp.exposures.iter().enumerate() {
            mask_grad(&tr.masks, n + i, &mut du_out[i]);
            exposure_backward(&mut o.v, &mut o.a, e.image.as_slice(), e.attribute.as_slice(), &du_out[i]);
        }
    }
    g
}

pub(super) fn zeros_embedding<T: Scalar>(e: &Embedding<T>) -> Embedding<T> {
    Embedding {
        v: Matrix::zeros(e.v.rows(), e.v.cols()),
        a: Matrix::zeros(e.a.rows(), e.a.cols()),
        c: Matrix::zeros(e.c.rows(), e.c.cols()),
    }
}

pub(super) fn zeros_output<T: Scalar>(o: &OutputMaps<T>) -> OutputMaps<T> {
    OutputMaps {
        v: Matrix::zeros(o.v.rows(), o.v.cols()),
        a: Matrix::zeros(o.a.rows(), o.a.cols()),
    }
}
