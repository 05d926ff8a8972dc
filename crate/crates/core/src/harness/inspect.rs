use serde::Serialize;

use crate::datagen::Datapoint;
use crate::error::{Error, Result};
use crate::library::StepDump;
use crate::models::{Masks, Model, ModelKind, TraceDetail};
use crate::scalar::Scalar;

/// What `inspect` prints for one datapoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InspectDump {
    pub model: ModelKind,
    pub index: usize,
    pub gold: usize,
    pub prediction: usize,
    pub loss: f64,
    pub distribution: Vec<f64>,
    /// Attention over library rows (memory rows for memory networks; last hop).
    pub attention: Option<Vec<f64>>,
    /// One per exposure after the first.
    pub p_old: Option<Vec<f64>>,
    pub steps: Option<Vec<StepDump>>,
    /// Norm of each library (or memory) row.
    pub row_norms: Option<Vec<f64>>,
}

fn f64s<T: Scalar>(x: &[T]) -> Vec<f64> {
    x.iter().map(|v| v.as_f64()).collect()
}

/// Runs `model` on `data[index]` with dropout off and dumps its trace.
pub fn inspect<T: Scalar>(model: &Model<T>, data: &[Datapoint<T>], index: usize) -> Result<InspectDump> {
    let dp = data.get(index).ok_or(Error::OutOfRange {
        op: "inspect: index",
        value: index as f64,
        range: "0..dataset length",
    })?;
    let trace = model.forward(dp, &mut Masks::Off)?;
    let mut dump = InspectDump {
        model: model.kind(),
        index,
        gold: trace.gold,
        prediction: trace.prediction(),
        loss: trace.loss.as_f64(),
        distribution: f64s(&trace.distribution),
        attention: trace.attention().map(f64s),
        p_old: None,
        steps: None,
        row_norms: None,
    };
    match &trace.detail {
        TraceDetail::Dire(d) => {
            let lib = d.states.last().expect("non-empty library");
            let full = lib.dump(Some(&d.steps));
            dump.p_old = Some(d.steps.iter().map(|s| s.p_old.as_f64()).collect());
            dump.steps = full.trace;
            dump.row_norms = Some(full.row_norms);
        }
        TraceDetail::MemN(m) => {
            dump.row_norms = Some(f64s(&m.memory.row_norms()));
        }
        TraceDetail::Mlp(_) => {}
    }
    Ok(dump)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_split, make_world, WorldConfig};
    use crate::models::ModelSpec;
    use crate::training::initial_model;

    #[test]
    fn dire_dump_has_one_gate_value_per_insertion() {
        let world = make_world(&WorldConfig { image_dim: 16, attribute_dim: 8, noun_dim: 8, ..Default::default() }).unwrap();
        let data = generate_split(&world, 3, 1, 0).unwrap();
        let model = initial_model::<f64>(&ModelSpec::new(ModelKind::Dire { two_matrix: false }, 16, 8, 8, 8), 1).unwrap();
        let d = inspect(&model, &data, 2).unwrap();
        assert_eq!(d.p_old.as_ref().unwrap().len(), 11);
        assert_eq!(d.steps.as_ref().unwrap().len(), 11);
        assert_eq!(d.row_norms.as_ref().unwrap().len(), 12);
        assert!((d.attention.as_ref().unwrap().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(inspect(&model, &data, 3).is_err());

        let ff = initial_model::<f64>(&ModelSpec::new(ModelKind::Ff, 16, 8, 8, 8), 1).unwrap();
        let d = inspect(&ff, &data, 0).unwrap();
        assert!(d.p_old.is_none() && d.attention.is_none());
    }
}
