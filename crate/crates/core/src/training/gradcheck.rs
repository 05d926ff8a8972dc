//! Finite-difference verification of the hand-written backward passes.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::datagen::{derive_seed, Datapoint, Exposure, Query};
use crate::error::{Error, Result};
use crate::models::{Masks, Model, ModelKind, ModelSpec};
use crate::numerics::Vector;

/// Step for the central differences.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of [`relative_error`]. Central differences at `h = 1e-5`
/// on an O(1) loss carry roughly 1e-11 of rounding noise, so gradients below
/// this are compared in absolute terms instead.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckDims {
    pub multimodal: usize,
    pub image: usize,
    pub attribute: usize,
    pub noun: usize,
    pub exposures: usize,
    pub candidates: usize,
    pub hidden: usize,
    /// Coordinates checked per block; `None` checks all of them. With
    /// 300-wide hidden layers a full sweep of the baselines is far too slow.
    pub coords_per_block: Option<usize>,
}

impl Default for GradCheckDims {
    fn default() -> Self {
        Self {
            multimodal: 8,
            image: 4,
            attribute: 4,
            noun: 4,
            exposures: 4,
            candidates: 3,
            hidden: crate::models::HIDDEN_WIDTH,
            coords_per_block: Some(40),
        }
    }
}

impl GradCheckDims {
    pub fn spec(&self, kind: ModelKind) -> ModelSpec {
        let mut spec = ModelSpec::new(kind, self.image, self.attribute, self.noun, self.multimodal);
        spec.hidden = self.hidden;
        spec.exposures = self.exposures;
        spec
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub model: ModelKind,
    pub trials: usize,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Datapoint with entries uniform in `[-1, 1]`. No structure; only shapes matter.
pub fn random_datapoint<R: Rng + ?Sized>(dims: &GradCheckDims, rng: &mut R) -> Datapoint<f64> {
    let mut vec = |n: usize| Vector::from((0..n).map(|_| rng.random_range(-1.0..=1.0)).collect::<Vec<f64>>());
    let exposures = (0..dims.exposures)
        .map(|_| Exposure { image: vec(dims.image), attribute: vec(dims.attribute) })
        .collect();
    let query = Query { noun: vec(dims.noun), attrs: [vec(dims.attribute), vec(dims.attribute)] };
    let candidates = (0..dims.candidates).map(|_| vec(dims.image)).collect();
    Datapoint {
        exposures,
        query,
        candidates,
        gold: rng.random_range(0..dims.candidates),
        labels: None,
    }
}

/// Standard initialization with a randomized gate and randomized biases, so
/// every parameter has a non-trivial gradient.
pub fn random_model<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model<f64>> {
    let mut model = Model::init(spec, rng)?;
    for block in model.blocks_mut() {
        match block.name {
            "w" => block.data[0] = rng.random_range(0.5..2.0),
            "b" | "b1" | "b2" | "b3" => {
                for x in block.data.iter_mut() {
                    *x = rng.random_range(-0.5..0.5);
                }
            }
            _ => {}
        }
    }
    Ok(model)
}

/// Compares analytic and central-difference gradients of `model` at `dp`,
/// with dropout off. Returns one report per block.
pub fn check_instance<R: Rng + ?Sized>(
    model: &Model<f64>,
    dp: &Datapoint<f64>,
    coords_per_block: Option<usize>,
    rng: &mut R,
) -> Result<Vec<BlockReport>> {
    let trace = model.forward(dp, &mut Masks::Off)?;
    let grad = model.backward(dp, &trace)?;
    let grad_blocks = grad.blocks();
    let mut probe = model.clone();
    let mut reports = Vec::new();
    let mut offset = 0;
    let base = model.flatten();
    for gb in &grad_blocks {
        let len = gb.data.len();
        let coords: Vec<usize> = match coords_per_block {
            Some(k) if k < len => {
                let mut c = sample(rng, len, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..len).collect(),
        };
        let mut rep = BlockReport {
            name: gb.name.to_string(),
            checked: coords.len(),
            max_rel_error: 0.0,
            max_abs_analytic: 0.0,
            max_abs_numeric: 0.0,
        };
        for &i in &coords {
            let mut eval = |x: f64| -> Result<f64> {
                let mut flat = base.clone();
                flat[offset + i] = x;
                probe.set_flat(&flat)?;
                probe.loss(dp)
            };
            let x0 = base[offset + i];
            let numeric = (eval(x0 + FD_STEP)? - eval(x0 - FD_STEP)?) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                return Err(Error::NonFinite { index: offset + i });
            }
            let analytic = gb.data[i];
            rep.max_rel_error = rep.max_rel_error.max(relative_error(analytic, numeric));
            rep.max_abs_analytic = rep.max_abs_analytic.max(analytic.abs());
            rep.max_abs_numeric = rep.max_abs_numeric.max(numeric.abs());
        }
        reports.push(rep);
        offset += len;
    }
    Ok(reports)
}

/// Runs `trials` independent checks of `kind` and keeps the worst error per block.
pub fn grad_check(
    kind: ModelKind,
    trials: usize,
    dims: &GradCheckDims,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if trials == 0 {
        return Err(Error::Config("grad_check needs at least one trial".into()));
    }
    if !(tolerance > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tolerance}")));
    }
    let spec = dims.spec(kind);
    let mut blocks: Vec<BlockReport> = Vec::new();
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 7, trial as u64));
        let model = random_model(&spec, &mut rng)?;
        let dp = random_datapoint(dims, &mut rng);
        let reps = check_instance(&model, &dp, dims.coords_per_block, &mut rng)?;
        if blocks.is_empty() {
            blocks = reps;
            continue;
        }
        for (acc, r) in blocks.iter_mut().zip(reps) {
            acc.checked += r.checked;
            acc.max_rel_error = acc.max_rel_error.max(r.max_rel_error);
            acc.max_abs_analytic = acc.max_abs_analytic.max(r.max_abs_analytic);
            acc.max_abs_numeric = acc.max_abs_numeric.max(r.max_abs_numeric);
        }
    }
    let max_rel_error = blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        model: kind,
        trials,
        tolerance,
        blocks,
        max_rel_error,
        passed: max_rel_error <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        // Both tiny: measured against the floor, not each other.
        assert!(relative_error(1e-12, -1e-12) < 1e-5);
    }

    #[test]
    fn dire_one_matrix_passes() {
        let r = grad_check(ModelKind::Dire { two_matrix: false }, 20, &GradCheckDims::default(), 1e-4, 11).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.blocks.iter().any(|b| b.name == "w" && b.max_abs_analytic > 0.0));
    }

    #[test]
    fn memn_two_matrix_two_hops_passes() {
        let kind = ModelKind::MemN { two_matrix: true, hops: 2 };
        let r = grad_check(kind, 20, &GradCheckDims::default(), 1e-4, 12).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn zero_model_has_vanishing_gradients() {
        let dims = GradCheckDims { hidden: 5, coords_per_block: None, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in ModelKind::all() {
            let model = Model::zeros(&dims.spec(kind)).unwrap();
            let dp = random_datapoint(&dims, &mut rng);
            for b in check_instance(&model, &dp, None, &mut rng).unwrap() {
                assert!(b.max_abs_analytic <= 1e-8 && b.max_abs_numeric <= 1e-8, "{kind} {b:?}");
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let d = GradCheckDims::default();
        assert!(grad_check(ModelKind::Ff, 0, &d, 1e-4, 0).is_err());
        assert!(grad_check(ModelKind::Ff, 1, &d, 0.0, 0).is_err());
    }
}
