//! The entity library: a growing matrix of entity vectors built by soft
//! insertion and read by soft retrieval.
//!
//! Every exposure appends one row. The incoming vector `u` is spread over the
//! existing rows and the fresh row according to
//! `z = p_old * softmax(E u) || (1 - p_old)`, where
//! `p_old = sigmoid(w * max(E u) + b)`.

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::numerics::{
    argmax_first_slice, axpy, matvec_into, sigmoid, softmax_into, tmatvec_acc, Matrix,
    Vector,
};
use crate::scalar::Scalar;

/// Weight and bias of the old-entity gate, shared across all exposures.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams<T> {
    pub w: T,
    pub b: T,
}

impl<T: Scalar> GateParams<T> {
    pub fn new(w: T, b: T) -> Self {
        Self { w, b }
    }
}

impl<T: Scalar> Default for GateParams<T> {
    fn default() -> Self {
        Self {
            w: T::one(),
            b: T::zero(),
        }
    }
}

/// How `p_old` is obtained while building.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate<T> {
    Learned(GateParams<T>),
    /// `p_old = 0` for every exposure: each exposure becomes its own row.
    AlwaysNew,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Library<T> {
    entities: Matrix<T>,
    step: usize,
}

/// Cached quantities of one insertion (exposures after the first).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InsertionStep<T> {
    pub similarity: Vec<T>,
    pub s_max: T,
    /// Row that received the gradient of `max`; lowest index on ties.
    pub s_argmax: usize,
    pub p_old: T,
    pub match_probs: Vec<T>,
    pub z: Vec<T>,
}

impl<T: Scalar> Library<T> {
    pub fn init(u1: &Vector<T>) -> Result<Self> {
        if u1.dim() == 0 {
            return Err(Error::Empty("library init"));
        }
        let mut entities = Matrix::zeros(0, u1.dim());
        entities.push_row(u1.as_slice())?;
        Ok(Self { entities, step: 1 })
    }

    pub fn entities(&self) -> &Matrix<T> {
        &self.entities
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn rows(&self) -> usize {
        self.entities.rows()
    }

    pub fn dim(&self) -> usize {
        self.entities.cols()
    }

    /// `E u`: one dot product per stored entity.
    pub fn similarity_profile(&self, u: &Vector<T>) -> Result<Vector<T>> {
        if u.dim() != self.dim() {
            return Err(mismatch("similarity_profile", self.dim(), u.dim()));
        }
        let mut s = vec![T::zero(); self.rows()];
        matvec_into(&self.entities, u.as_slice(), &mut s);
        Ok(s.into())
    }

    /// Appends a blank row and adds `z u^T`.
    pub fn update(&self, u: &Vector<T>, z: &Vector<T>) -> Result<Self> {
        if u.dim() != self.dim() {
            return Err(mismatch("update: u", self.dim(), u.dim()));
        }
        if z.dim() != self.rows() + 1 {
            return Err(mismatch("update: z", self.rows() + 1, z.dim()));
        }
        // 1e-9, loosened to a few ulps per row for narrow scalar types.
        let tol = 1e-9_f64.max(T::epsilon().as_f64() * 4.0 * z.dim() as f64);
        let total = z.sum().as_f64();
        if (total - 1.0).abs() > tol {
            return Err(Error::OutOfRange {
                op: "update: sum(z)",
                value: total,
                range: "1 +/- 1e-9",
            });
        }
        let mut entities = self.entities.clone();
        entities.push_row(&vec![T::zero(); self.dim()])?;
        for (k, &zk) in z.iter().enumerate() {
            axpy(zk, u.as_slice(), entities.row_mut(k));
        }
        Ok(Self {
            entities,
            step: self.step + 1,
        })
    }

    pub fn build(exposures: &[Vector<T>], gate: &GateParams<T>) -> Result<Self> {
        Ok(Self::build_traced(exposures, Gate::Learned(*gate))?.0)
    }

    /// Builds the library and returns the per-insertion caches alongside it.
    pub fn build_traced(
        exposures: &[Vector<T>],
        gate: Gate<T>,
    ) -> Result<(Self, Vec<InsertionStep<T>>)> {
        let (mut states, steps) = Self::build_states(exposures, gate)?;
        Ok((states.pop().expect("at least one state"), steps))
    }

    /// Like [`Library::build_traced`], but keeps every intermediate state:
    /// `states[k]` is the library after exposure `k` (so it has `k + 1` rows).
    pub fn build_states(
        exposures: &[Vector<T>],
        gate: Gate<T>,
    ) -> Result<(Vec<Self>, Vec<InsertionStep<T>>)> {
        let (first, rest) = exposures.split_first().ok_or(Error::Empty("library build"))?;
        let mut states = Vec::with_capacity(exposures.len());
        states.push(Self::init(first)?);
        let mut steps = Vec::with_capacity(rest.len());
        for (i, u) in rest.iter().enumerate() {
            let lib = &states[i];
            if u.dim() != lib.dim() {
                return Err(mismatch(
                    "library build",
                    lib.dim(),
                    format!("{} at exposure {}", u.dim(), i + 1),
                ));
            }
            let step = lib.insertion(u.as_slice(), gate);
            let next = lib.update(u, &Vector::from(step.z.clone()))?;
            states.push(next);
            steps.push(step);
        }
        Ok((states, steps))
    }

    fn insertion(&self, u: &[T], gate: Gate<T>) -> InsertionStep<T> {
        let n = self.rows();
        let mut similarity = vec![T::zero(); n];
        matvec_into(&self.entities, u, &mut similarity);
        let s_argmax = argmax_first_slice(&similarity).expect("library is never empty");
        let s_max = similarity[s_argmax];
        let p_old = match gate {
            Gate::Learned(gp) => sigmoid(gp.w * s_max + gp.b),
            Gate::AlwaysNew => T::zero(),
        };
        let mut match_probs = vec![T::zero(); n];
        softmax_into(&similarity, &mut match_probs);
        let mut z: Vec<T> = match_probs.iter().map(|&m| p_old * m).collect();
        z.push(T::one() - p_old);
        InsertionStep {
            similarity,
            s_max,
            s_argmax,
            p_old,
            match_probs,
            z,
        }
    }

    /// Soft retrieval: `g = softmax(E q)`, `r = E^T g`.
    pub fn retrieve(&self, q: &Vector<T>) -> Result<(Vector<T>, Vector<T>)> {
        if q.dim() != self.dim() {
            return Err(mismatch("retrieve", self.dim(), q.dim()));
        }
        let (g, r) = retrieve_slices(&self.entities, &self.entities, q.as_slice());
        Ok((g.into(), r.into()))
    }

    pub fn dump(&self, steps: Option<&[InsertionStep<T>]>) -> LibraryDump {
        LibraryDump {
            step: self.step,
            rows: self.rows(),
            cols: self.dim(),
            e: self.entities.as_slice().iter().map(|x| x.as_f64()).collect(),
            row_norms: self.entities.row_norms().iter().map(|x| x.as_f64()).collect(),
            trace: steps.map(|s| {
                s.iter()
                    .map(|st| StepDump {
                        s_max: st.s_max.as_f64(),
                        p_old: st.p_old.as_f64(),
                        z: st.z.iter().map(|x| x.as_f64()).collect(),
                    })
                    .collect()
            }),
        }
    }
}

/// Attention over `keys`, read out of `values` (which may be the same matrix).
pub(crate) fn retrieve_slices<T: Scalar>(
    keys: &Matrix<T>,
    values: &Matrix<T>,
    q: &[T],
) -> (Vec<T>, Vec<T>) {
    let mut logits = vec![T::zero(); keys.rows()];
    matvec_into(keys, q, &mut logits);
    let mut g = vec![T::zero(); logits.len()];
    softmax_into(&logits, &mut g);
    let mut r = vec![T::zero(); values.cols()];
    tmatvec_acc(values, &g, &mut r);
    (g, r)
}

pub fn old_probability<T: Scalar>(s: &Vector<T>, gate: &GateParams<T>) -> Result<T> {
    let i = argmax_first_slice(s.as_slice()).ok_or(Error::Empty("old_probability"))?;
    Ok(sigmoid(gate.w * s[i] + gate.b))
}

pub fn insertion_distribution<T: Scalar>(s: &Vector<T>, p_old: T) -> Result<Vector<T>> {
    if s.dim() == 0 {
        return Err(Error::Empty("insertion_distribution"));
    }
    if !(p_old >= T::zero() && p_old <= T::one()) {
        return Err(Error::OutOfRange {
            op: "insertion_distribution",
            value: p_old.as_f64(),
            range: "[0, 1]",
        });
    }
    let mut z = vec![T::zero(); s.dim()];
    softmax_into(s.as_slice(), &mut z);
    for x in z.iter_mut() {
        *x *= p_old;
    }
    z.push(T::one() - p_old);
    Ok(z.into())
}

/// JSON view of a library used by `inspect`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LibraryDump {
    pub step: usize,
    pub rows: usize,
    pub cols: usize,
    #[serde(rename = "E")]
    pub e: Vec<f64>,
    pub row_norms: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace: Option<Vec<StepDump>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDump {
    pub s_max: f64,
    pub p_old: f64,
    pub z: Vec<f64>,
}
