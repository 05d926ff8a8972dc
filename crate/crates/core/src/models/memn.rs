use serde::{Deserialize, Serialize};

use super::dire::{zeros_embedding, zeros_output};
use super::head::{self, exposure_backward, Embedding, OutputMaps};
use super::{mask_grad, matrix_from_rows, Block, BlockMut, ForwardTrace, Masks, Readout, TraceDetail};
use crate::datagen::Datapoint;
use crate::error::Result;
use crate::numerics::{axpy, dot_slice, matvec_into, softmax_backward, softmax_into, tmatvec_acc, Matrix};
use crate::scalar::Scalar;

/// End-to-end memory network with one memory slot per exposure.
/// Single-matrix variants read from the same memory they attend over; the
/// two-matrix variants read from a second memory embedded with `V_out`/`A_out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemNParams<T> {
    pub input: Embedding<T>,
    pub output: Option<OutputMaps<T>>,
    pub hops: usize,
    pub readout: Readout,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemNTrace<T> {
    pub memory: Matrix<T>,
    pub memory_out: Option<Matrix<T>>,
    /// `probes[h]` is the probe entering hop `h + 1`; the last one is `q + sum(o)`.
    pub probes: Vec<Vec<T>>,
    pub attentions: Vec<Vec<T>>,
    pub reads: Vec<Vec<T>>,
}

impl<T: Scalar> MemNParams<T> {
    pub(crate) fn blocks(&self) -> Vec<Block<'_, T>> {
        let mut out = self.input.blocks();
        if let Some(o) = &self.output {
            out.extend(o.blocks());
        }
        out
    }

    pub(crate) fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>> {
        let mut out = self.input.blocks_mut();
        if let Some(o) = &mut self.output {
            out.extend(o.blocks_mut());
        }
        out
    }
}

pub(super) fn forward<T: Scalar>(
    p: &MemNParams<T>,
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
    let memory = matrix_from_rows(&exposures);
    let memory_out = match &p.output {
        Some(o) => {
            let mut rows = Vec::with_capacity(dp.exposures.len());
            for e in &dp.exposures {
                let mut u = o.exposure(e.image.as_slice(), e.attribute.as_slice());
                masks.apply(&mut u, &mut log)?;
                rows.push(u);
            }
            Some(matrix_from_rows(&rows))
        }
        None => None,
    };
    let values = memory_out.as_ref().unwrap_or(&memory);

    let query = p.input.query_of(dp);
    let n = memory.rows();
    let mut probes = vec![query.clone()];
    let mut attentions = Vec::with_capacity(p.hops);
    let mut reads = Vec::with_capacity(p.hops);
    for _ in 0..p.hops {
        let probe = probes.last().expect("seeded with q");
        let mut logits = vec![T::zero(); n];
        matvec_into(&memory, probe, &mut logits);
        let mut att = vec![T::zero(); n];
        softmax_into(&logits, &mut att);
        let mut o = vec![T::zero(); values.cols()];
        tmatvec_acc(values, &att, &mut o);
        let mut next = probe.clone();
        axpy(T::one(), &o, &mut next);
        probes.push(next);
        attentions.push(att);
        reads.push(o);
    }
    let comparison = match p.readout {
        Readout::LastProbe => probes.last().expect("hops >= 1").clone(),
        Readout::LastRead => reads.last().expect("hops >= 1").clone(),
    };
    let v = p.output.as_ref().map_or(&p.input.v, |o| &o.v);
    let scored = head::score(&comparison, &dp.candidates, v, dp.gold);

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
        detail: TraceDetail::MemN(MemNTrace {
            memory,
            memory_out,
            probes,
            attentions,
            reads,
        }),
        fingerprint: None,
    })
}

pub(super) fn backward<T: Scalar>(
    p: &MemNParams<T>,
    dp: &Datapoint<T>,
    tr: &ForwardTrace<T>,
    mt: &MemNTrace<T>,
) -> MemNParams<T> {
    let mut g = MemNParams {
        input: zeros_embedding(&p.input),
        output: p.output.as_ref().map(zeros_output),
        hops: p.hops,
        readout: p.readout,
    };
    let dcomparison = {
        let dv = match &mut g.output {
            Some(o) => &mut o.v,
            None => &mut g.input.v,
        };
        head::score_backward(&tr.comparison, &tr.mapped_candidates, &tr.distribution, tr.gold, &dp.candidates, dv)
    };

    let n = mt.memory.rows();
    let m = mt.memory.cols();
    let values = mt.memory_out.as_ref().unwrap_or(&mt.memory);
    let mut dmem = vec![vec![T::zero(); m]; n];
    let mut dmem_out = vec![vec![T::zero(); m]; if mt.memory_out.is_some() { n } else { 0 }];

    // Gradient with respect to the probe leaving the current hop.
    let (mut dnext, mut dlast_read) = match p.readout {
        Readout::LastProbe => (dcomparison, vec![T::zero(); m]),
        Readout::LastRead => (vec![T::zero(); m], dcomparison),
    };
    for h in (0..p.hops).rev() {
        let mut dread = dnext.clone();
        if h + 1 == p.hops {
            axpy(T::one(), &dlast_read, &mut dread);
            dlast_read.iter_mut().for_each(|x| *x = T::zero());
        }
        let att = &mt.attentions[h];
        let mut datt = vec![T::zero(); n];
        for k in 0..n {
            datt[k] = dot_slice(values.row(k), &dread);
            let target = if mt.memory_out.is_some() { &mut dmem_out[k] } else { &mut dmem[k] };
            axpy(att[k], &dread, target);
        }
        let dlogits = softmax_backward(att, &datt);
        let probe = &mt.probes[h];
        for k in 0..n {
            axpy(dlogits[k], probe, &mut dmem[k]);
            axpy(dlogits[k], mt.memory.row(k), &mut dnext);
        }
    }
    Embedding::query_backward(&mut g.input, dp, &dnext);

    for (i, e) in dp.exposures.iter().enumerate() {
        mask_grad(&tr.masks, i, &mut dmem[i]);
        exposure_backward(&mut g.input.v, &mut g.input.a, e.image.as_slice(), e.attribute.as_slice(), &dmem[i]);
    }
    if let Some(o) = &mut g.output {
        for (i, e) in dp.exposures.iter().enumerate() {
            mask_grad(&tr.masks, n + i, &mut dmem_out[i]);
            exposure_backward(&mut o.v, &mut o.a, e.image.as_slice(), e.attribute.as_slice(), &dmem_out[i]);
        }
    }
    g
}
