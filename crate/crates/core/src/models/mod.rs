//! DIRE and the competitor models, each with a forward pass that records a
//! trace and a hand-derived backward pass.
//!
//! All models share the same input embedding (`V` for images, `A` for
//! attributes, `C` for the query noun) and the same candidate-scoring head:
//! candidate images are mapped with a visual matrix, scored by dot product
//! against a comparison vector, and softmax-normalized. They differ only in
//! how the comparison vector is computed.

pub mod checkpoint;
mod dire;
mod head;
mod memn;
mod mlp;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{Datapoint, EXPOSURES};
use crate::error::{mismatch, Error, Result};
use crate::library::{GateParams, InsertionStep, Library};
use crate::numerics::{Matrix, Vector};
use crate::scalar::Scalar;
use crate::training::dropout::sample_mask;

pub use dire::{DireParams, DireTrace};
pub use head::{score_candidates, Embedding, OutputMaps};
pub use memn::{MemNParams, MemNTrace};
pub use mlp::{MlpParams, MlpTrace};

pub const HIDDEN_WIDTH: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelKind {
    Dire { two_matrix: bool },
    MemN { two_matrix: bool, hops: usize },
    Ff,
    Rnn,
}

impl ModelKind {
    /// Every trainable variant, in results-table order.
    pub fn all() -> Vec<ModelKind> {
        let mut out = vec![ModelKind::Ff, ModelKind::Rnn];
        out.push(ModelKind::Dire { two_matrix: false });
        out.push(ModelKind::Dire { two_matrix: true });
        for two_matrix in [false, true] {
            for hops in 1..=3 {
                out.push(ModelKind::MemN { two_matrix, hops });
            }
        }
        out
    }

    pub fn tag(&self) -> String {
        let m = |two: bool| if two { "2m" } else { "1m" };
        match *self {
            ModelKind::Dire { two_matrix } => format!("dire-{}", m(two_matrix)),
            ModelKind::MemN { two_matrix, hops } => format!("memn-{}-{hops}h", m(two_matrix)),
            ModelKind::Ff => "ff".into(),
            ModelKind::Rnn => "rnn".into(),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tag())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown model {s:?}"));
        let matrices = |p: &str| match p {
            "1m" => Ok(false),
            "2m" => Ok(true),
            _ => Err(bad()),
        };
        let lower = s.to_ascii_lowercase();
        let parts: Vec<&str> = lower.split('-').collect();
        match parts.as_slice() {
            ["ff"] => Ok(ModelKind::Ff),
            ["rnn"] => Ok(ModelKind::Rnn),
            ["dire", m] => Ok(ModelKind::Dire { two_matrix: matrices(m)? }),
            ["memn", m, h] => {
                let hops = match *h {
                    "1h" => 1,
                    "2h" => 2,
                    "3h" => 3,
                    _ => return Err(bad()),
                };
                Ok(ModelKind::MemN { two_matrix: matrices(m)?, hops })
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for ModelKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelKind> for String {
    fn from(k: ModelKind) -> String {
        k.tag()
    }
}

/// Which vector DIRE compares against the candidates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Probe {
    #[default]
    Retrieved,
    Query,
}

/// Which vector a memory network hands to the scoring head.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Readout {
    /// `q + o_1 + ... + o_H`
    #[default]
    LastProbe,
    /// `o_H` alone
    LastRead,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Learned,
    /// `p_old = 0`: every exposure opens a new entity.
    AlwaysNew,
}

/// Everything needed to allocate a model's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub image_dim: usize,
    pub attribute_dim: usize,
    pub noun_dim: usize,
    pub multimodal_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Sequence length the feed-forward baseline is built for.
    #[serde(default = "default_exposures")]
    pub exposures: usize,
    #[serde(default)]
    pub probe: Probe,
    #[serde(default)]
    pub readout: Readout,
    #[serde(default)]
    pub gate_mode: GateMode,
}

fn default_hidden() -> usize {
    HIDDEN_WIDTH
}

fn default_exposures() -> usize {
    EXPOSURES
}

impl ModelSpec {
    pub fn new(kind: ModelKind, image_dim: usize, attribute_dim: usize, noun_dim: usize, multimodal_dim: usize) -> Self {
        Self {
            kind,
            image_dim,
            attribute_dim,
            noun_dim,
            multimodal_dim,
            hidden: HIDDEN_WIDTH,
            exposures: EXPOSURES,
            probe: Probe::default(),
            readout: Readout::default(),
            gate_mode: GateMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.image_dim, self.attribute_dim, self.noun_dim, self.multimodal_dim];
        if dims.contains(&0) {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if let ModelKind::MemN { hops, .. } = self.kind {
            if !(1..=3).contains(&hops) {
                return Err(Error::Config(format!("hops must be 1, 2 or 3, got {hops}")));
            }
        }
        if matches!(self.kind, ModelKind::Ff | ModelKind::Rnn) && self.hidden == 0 {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        if self.kind == ModelKind::Ff && self.exposures == 0 {
            return Err(Error::Config("ff needs a positive exposure count".into()));
        }
        Ok(())
    }
}

/// Named view of one parameter block.
pub struct Block<'a, T> {
    pub name: &'static str,
    pub shape: (usize, usize),
    pub data: &'a [T],
}

pub struct BlockMut<'a, T> {
    pub name: &'static str,
    pub shape: (usize, usize),
    pub data: &'a mut [T],
}

/// Source of dropout masks for a forward pass. Masks are drawn in a fixed
/// order and logged on the trace, so a pass can be replayed exactly.
pub enum Masks<'a, T> {
    Off,
    Sample { p: f64, rng: &'a mut dyn rand::RngCore },
    Replay { masks: &'a [Vec<T>], cursor: usize },
}

impl<'a, T: Scalar> Masks<'a, T> {
    pub fn sample(p: f64, rng: &'a mut dyn rand::RngCore) -> Self {
        Masks::Sample { p, rng }
    }

    pub fn replay(masks: &'a [Vec<T>]) -> Self {
        Masks::Replay { masks, cursor: 0 }
    }

    /// Multiplies `x` by the next mask, if any, logging it.
    pub(crate) fn apply(&mut self, x: &mut [T], log: &mut Vec<Vec<T>>) -> Result<()> {
        let mask = match self {
            Masks::Off => return Ok(()),
            Masks::Sample { p, rng } => sample_mask(x.len(), *p, rng)?,
            Masks::Replay { masks, cursor } => {
                let m = masks
                    .get(*cursor)
                    .ok_or_else(|| Error::StaleTrace("replay ran out of dropout masks".into()))?
                    .clone();
                *cursor += 1;
                if m.len() != x.len() {
                    return Err(mismatch("dropout replay", x.len(), m.len()));
                }
                m
            }
        };
        for (v, &m) in x.iter_mut().zip(&mask) {
            *v *= m;
        }
        log.push(mask);
        Ok(())
    }
}

/// Multiplies `d` by logged mask `idx` when dropout was active.
pub(crate) fn mask_grad<T: Scalar>(masks: &[Vec<T>], idx: usize, d: &mut [T]) {
    if let Some(m) = masks.get(idx) {
        for (v, &k) in d.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum TraceDetail<T> {
    Dire(DireTrace<T>),
    MemN(MemNTrace<T>),
    Mlp(MlpTrace<T>),
}

/// Everything a backward pass (or `inspect`) needs from a forward pass.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForwardTrace<T> {
    /// Embedded exposures `u_i` after dropout.
    pub exposures: Vec<Vec<T>>,
    pub query: Vec<T>,
    /// Vector compared with each mapped candidate.
    pub comparison: Vec<T>,
    pub mapped_candidates: Vec<Vec<T>>,
    pub scores: Vec<T>,
    pub distribution: Vec<T>,
    pub loss: T,
    pub gold: usize,
    /// Dropout masks in draw order; empty in evaluation mode.
    pub masks: Vec<Vec<T>>,
    pub detail: TraceDetail<T>,
    #[serde(skip)]
    pub fingerprint: Option<u64>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn prediction(&self) -> usize {
        crate::numerics::argmax_first_slice(&self.distribution).expect("non-empty distribution")
    }

    /// Library states and insertion caches, for DIRE traces.
    pub fn library(&self) -> Option<(&Library<T>, &[InsertionStep<T>])> {
        match &self.detail {
            TraceDetail::Dire(d) => Some((d.states.last()?, &d.steps)),
            _ => None,
        }
    }

    pub fn attention(&self) -> Option<&[T]> {
        match &self.detail {
            TraceDetail::Dire(d) => Some(&d.attention),
            TraceDetail::MemN(m) => m.attentions.last().map(Vec::as_slice),
            TraceDetail::Mlp(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Model<T> {
    Dire(DireParams<T>),
    MemN(MemNParams<T>),
    Ff(MlpParams<T>),
    Rnn(MlpParams<T>),
}

impl<T: Scalar> Model<T> {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` matrices, zero biases,
    /// gate `w = 1`, `b = 0`.
    pub fn init<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        for block in model.blocks_mut() {
            match block.name {
                "w" => block.data[0] = T::one(),
                "b" | "b1" | "b2" | "b3" => {}
                _ => {
                    let bound = 1.0 / (block.shape.0 as f64).sqrt();
                    for x in block.data.iter_mut() {
                        *x = T::lit(rng.random_range(-bound..=bound));
                    }
                }
            }
        }
        Ok(model)
    }

    /// All-zero parameters: every candidate scores 0, so the output is uniform.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let embedding = Embedding::zeros(spec);
        let output = || OutputMaps::zeros(spec);
        Ok(match spec.kind {
            ModelKind::Dire { two_matrix } => Model::Dire(DireParams {
                input: embedding,
                output: two_matrix.then(output),
                gate: GateParams::new(T::zero(), T::zero()),
                gate_mode: spec.gate_mode,
                probe: spec.probe,
            }),
            ModelKind::MemN { two_matrix, hops } => Model::MemN(MemNParams {
                input: embedding,
                output: two_matrix.then(output),
                hops,
                readout: spec.readout,
            }),
            ModelKind::Ff => Model::Ff(MlpParams::zeros(spec, embedding, false)),
            ModelKind::Rnn => Model::Rnn(MlpParams::zeros(spec, embedding, true)),
        })
    }

    pub fn spec(&self) -> ModelSpec {
        let emb = self.embedding();
        let mut spec = ModelSpec::new(
            self.kind(),
            emb.v.rows(),
            emb.a.rows(),
            emb.c.rows(),
            emb.v.cols(),
        );
        match self {
            Model::Dire(p) => {
                spec.probe = p.probe;
                spec.gate_mode = p.gate_mode;
            }
            Model::MemN(p) => spec.readout = p.readout,
            Model::Ff(p) | Model::Rnn(p) => {
                spec.hidden = p.hidden();
                spec.exposures = p.exposures;
            }
        }
        spec
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Dire(p) => ModelKind::Dire { two_matrix: p.output.is_some() },
            Model::MemN(p) => ModelKind::MemN {
                two_matrix: p.output.is_some(),
                hops: p.hops,
            },
            Model::Ff(_) => ModelKind::Ff,
            Model::Rnn(_) => ModelKind::Rnn,
        }
    }

    pub fn embedding(&self) -> &Embedding<T> {
        match self {
            Model::Dire(p) => &p.input,
            Model::MemN(p) => &p.input,
            Model::Ff(p) | Model::Rnn(p) => &p.embedding,
        }
    }

    pub fn blocks(&self) -> Vec<Block<'_, T>> {
        match self {
            Model::Dire(p) => p.blocks(),
            Model::MemN(p) => p.blocks(),
            Model::Ff(p) | Model::Rnn(p) => p.blocks(),
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<BlockMut<'_, T>> {
        match self {
            Model::Dire(p) => p.blocks_mut(),
            Model::MemN(p) => p.blocks_mut(),
            Model::Ff(p) | Model::Rnn(p) => p.blocks_mut(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.data.len()).sum()
    }

    /// Flattened parameters in block order.
    pub fn flatten(&self) -> Vec<T> {
        self.blocks().iter().flat_map(|b| b.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(mismatch("set_flat", self.num_params(), values.len()));
        }
        let mut offset = 0;
        for block in self.blocks_mut() {
            let n = block.data.len();
            block.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.data.iter_mut().for_each(|x| *x = T::zero());
        }
        z
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        let a = self.blocks();
        let b = other.blocks();
        if a.len() != b.len() {
            return Err(mismatch("parameter blocks", a.len(), b.len()));
        }
        for (x, y) in a.iter().zip(&b) {
            if x.name != y.name || x.shape != y.shape {
                return Err(mismatch(
                    "parameter block",
                    format!("{} {:?}", x.name, x.shape),
                    format!("{} {:?}", y.name, y.shape),
                ));
            }
        }
        Ok(())
    }

    /// `self += scale * other`, block by block.
    pub fn add_scaled(&mut self, other: &Self, scale: T) -> Result<()> {
        self.same_shape(other)?;
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            crate::numerics::axpy(scale, src.data, dst.data);
        }
        Ok(())
    }

    /// Hash of every parameter bit, used to detect stale traces.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.blocks() {
            for x in b.data {
                let bits = x.as_f64().to_bits();
                h = (h ^ bits).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    fn check_inputs(&self, dp: &Datapoint<T>) -> Result<()> {
        dp.check_shape()?;
        let emb = self.embedding();
        let want = [
            ("image", emb.v.rows(), dp.exposures[0].image.dim()),
            ("attribute", emb.a.rows(), dp.exposures[0].attribute.dim()),
            ("noun", emb.c.rows(), dp.noun_dim()),
        ];
        for (what, expected, found) in want {
            if expected != found {
                return Err(Error::Malformed(format!(
                    "{what} vectors have dim {found}, model expects {expected}"
                )));
            }
        }
        if let Model::Ff(p) = self {
            if dp.exposures.len() != p.exposures {
                return Err(Error::Malformed(format!(
                    "ff model is built for {} exposures, datapoint has {}",
                    p.exposures,
                    dp.exposures.len()
                )));
            }
        }
        Ok(())
    }

    fn forward_inner(&self, dp: &Datapoint<T>, masks: &mut Masks<'_, T>) -> Result<ForwardTrace<T>> {
        self.check_inputs(dp)?;
        match self {
            Model::Dire(p) => dire::forward(p, dp, masks),
            Model::MemN(p) => memn::forward(p, dp, masks),
            Model::Ff(p) => mlp::forward_ff(p, dp, masks),
            Model::Rnn(p) => mlp::forward_rnn(p, dp, masks),
        }
    }

    /// Forward pass; the returned trace remembers which parameters produced it.
    pub fn forward(&self, dp: &Datapoint<T>, masks: &mut Masks<'_, T>) -> Result<ForwardTrace<T>> {
        let mut trace = self.forward_inner(dp, masks)?;
        trace.fingerprint = Some(self.fingerprint());
        Ok(trace)
    }

    /// Evaluation-mode candidate distribution.
    pub fn predict(&self, dp: &Datapoint<T>) -> Result<Vec<T>> {
        Ok(self.forward_inner(dp, &mut Masks::Off)?.distribution)
    }

    /// Evaluation-mode loss.
    pub fn loss(&self, dp: &Datapoint<T>) -> Result<T> {
        Ok(self.forward_inner(dp, &mut Masks::Off)?.loss)
    }

    /// Re-runs the forward pass with the trace's dropout masks.
    pub fn replay(&self, dp: &Datapoint<T>, trace: &ForwardTrace<T>) -> Result<ForwardTrace<T>> {
        let mut masks = Masks::replay(&trace.masks);
        self.forward(dp, &mut masks)
    }

    /// Gradient of the trace's loss with respect to every parameter.
    pub fn backward(&self, dp: &Datapoint<T>, trace: &ForwardTrace<T>) -> Result<Self> {
        if let Some(fp) = trace.fingerprint {
            if fp != self.fingerprint() {
                return Err(Error::StaleTrace("parameters changed since the forward pass".into()));
            }
        }
        self.backward_inner(dp, trace)
    }

    fn backward_inner(&self, dp: &Datapoint<T>, trace: &ForwardTrace<T>) -> Result<Self> {
        Ok(match (self, &trace.detail) {
            (Model::Dire(p), TraceDetail::Dire(t)) => Model::Dire(dire::backward(p, dp, trace, t)),
            (Model::MemN(p), TraceDetail::MemN(t)) => Model::MemN(memn::backward(p, dp, trace, t)),
            (Model::Ff(p), TraceDetail::Mlp(t)) => Model::Ff(mlp::backward_ff(p, dp, trace, t)),
            (Model::Rnn(p), TraceDetail::Mlp(t)) => Model::Rnn(mlp::backward_rnn(p, dp, trace, t)),
            _ => return Err(Error::StaleTrace("trace was produced by a different model kind".into())),
        })
    }

    /// Forward and backward in one go, skipping the fingerprint.
    pub fn loss_and_grad(&self, dp: &Datapoint<T>, masks: &mut Masks<'_, T>) -> Result<(T, Self)> {
        let trace = self.forward_inner(dp, masks)?;
        let grad = self.backward_inner(dp, &trace)?;
        Ok((trace.loss, grad))
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.data.iter().all(|x| x.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let spec = self.spec();
        let mut out = Model::<U>::zeros(&spec).expect("spec of a live model is valid");
        for (dst, src) in out.blocks_mut().into_iter().zip(self.blocks()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = U::lit(s.as_f64());
            }
        }
        out
    }
}

/// Exposure vectors as library input.
pub(crate) fn as_vectors<T: Scalar>(rows: &[Vec<T>]) -> Vec<Vector<T>> {
    rows.iter().map(|r| Vector::from(r.clone())).collect()
}

pub(crate) fn matrix_from_rows<T: Scalar>(rows: &[Vec<T>]) -> Matrix<T> {
    Matrix::from_rows(rows).expect("rows share the embedding width")
}
