//! Evaluation, error analysis, the results table and trace inspection.

mod config;
mod inspect;
mod suite;

pub use config::RunConfig;
pub use inspect::{inspect, InspectDump};
pub use suite::{run_suite, suite_csv, SuiteConfig, SuiteRow, SUITE_HEADER};

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Datapoint;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::argmax_first_slice;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub predicted: usize,
    pub gold: usize,
    /// Whether the predicted entity has the query's category; needs labels.
    pub same_category: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// `correct / n`, computed from the integer counts in one division.
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    pub records: Vec<PredictionRecord>,
}

impl EvalResult {
    /// Scores a list of predicted candidate slots against `data`.
    pub fn from_predictions<T: Scalar>(predicted: &[usize], data: &[Datapoint<T>]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("evaluation dataset"));
        }
        if predicted.len() != data.len() {
            return Err(crate::error::mismatch("predictions", data.len(), predicted.len()));
        }
        let records: Vec<PredictionRecord> = predicted
            .iter()
            .zip(data)
            .map(|(&p, dp)| PredictionRecord {
                predicted: p,
                gold: dp.gold,
                same_category: dp.labels.as_ref().map(|l| {
                    l.entity_category[l.candidate_entity[p]] == l.query_category
                }),
            })
            .collect();
        let correct = records.iter().filter(|r| r.predicted == r.gold).count();
        Ok(Self {
            accuracy: correct as f64 / records.len() as f64,
            correct,
            n: records.len(),
            records,
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.accuracy
    }
}

/// Predicts every datapoint with dropout off (argmax, lowest slot on ties).
pub fn evaluate<T: Scalar>(model: &Model<T>, data: &[Datapoint<T>]) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let predicted = data
        .par_iter()
        .map(|dp| {
            let p = model.predict(dp)?;
            Ok(argmax_first_slice(&p).expect("non-empty distribution"))
        })
        .collect::<Result<Vec<usize>>>()?;
    EvalResult::from_predictions(&predicted, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorAnalysis {
    pub n: usize,
    pub errors: usize,
    pub error_rate: f64,
    /// Errors whose predicted entity belongs to another category.
    pub wrong_category: usize,
    pub wrong_category_rate: f64,
    /// Errors on an entity of the right category.
    pub wrong_attribute: usize,
    pub wrong_attribute_rate: f64,
    /// Predictions grouped by how the chosen entity relates to the query:
    /// how many query attributes it carries and whether its category matches.
    pub confusion: BTreeMap<String, usize>,
}

/// Splits the errors of `eval` by the kind of entity picked.
pub fn error_analysis<T: Scalar>(eval: &EvalResult, data: &[Datapoint<T>]) -> Result<ErrorAnalysis> {
    if eval.records.len() != data.len() {
        return Err(crate::error::mismatch("error_analysis", data.len(), eval.records.len()));
    }
    if data.is_empty() {
        return Err(Error::Empty("error_analysis"));
    }
    let mut wrong_category = 0;
    let mut wrong_attribute = 0;
    let mut confusion = BTreeMap::new();
    for (i, (rec, dp)) in eval.records.iter().zip(data).enumerate() {
        let labels = dp.labels.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "datapoint {i} has no debug labels; regenerate the data with gen-data --debug"
            ))
        })?;
        let entity = labels.candidate_entity[rec.predicted];
        let same_category = labels.entity_category[entity] == labels.query_category;
        let shared = labels
            .exposure_entity
            .iter()
            .zip(&labels.exposure_attribute)
            .filter(|&(&e, a)| e == entity && labels.query_attributes.contains(a))
            .count();
        let key = format!(
            "{} category, {shared} of 2 attributes",
            if same_category { "same" } else { "other" }
        );
        *confusion.entry(key).or_insert(0) += 1;
        if rec.predicted != rec.gold {
            if same_category {
                wrong_attribute += 1;
            } else {
                wrong_category += 1;
            }
        }
    }
    let n = data.len();
    let errors = eval.n - eval.correct;
    debug_assert_eq!(errors, wrong_category + wrong_attribute);
    let rate = |k: usize| k as f64 / n as f64;
    Ok(ErrorAnalysis {
        n,
        errors,
        error_rate: rate(errors),
        wrong_category,
        wrong_category_rate: rate(wrong_category),
        wrong_attribute,
        wrong_attribute_rate: rate(wrong_attribute),
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_split, make_world, WorldConfig};
    use crate::models::{ModelKind, ModelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(n: usize) -> Vec<Datapoint<f64>> {
        let world = make_world(&WorldConfig { image_dim: 16, attribute_dim: 8, noun_dim: 8, ..Default::default() }).unwrap();
        generate_split(&world, n, 3, 0).unwrap()
    }

    #[test]
    fn symmetric_model_scores_near_chance() {
        let d = data(1000);
        let model = Model::<f64>::zeros(&ModelSpec::new(ModelKind::Dire { two_matrix: false }, 16, 8, 8, 8)).unwrap();
        let r = evaluate(&model, &d).unwrap();
        assert_eq!(r.n, 1000);
        assert!((r.accuracy - 1.0 / 6.0).abs() <= 0.04, "{}", r.accuracy);
        assert_eq!(r.accuracy, r.correct as f64 / 1000.0);
    }

    #[test]
    fn leaked_gold_is_perfect() {
        let d = data(50);
        let gold: Vec<usize> = d.iter().map(|dp| dp.gold).collect();
        let r = EvalResult::from_predictions(&gold, &d).unwrap();
        assert_eq!(r.accuracy, 1.0);
        let a = error_analysis(&r, &d).unwrap();
        assert_eq!(a.wrong_category, 0);
        assert_eq!(a.wrong_category_rate, 0.0);
        assert_eq!(a.confusion.get("same category, 2 of 2 attributes"), Some(&50));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let model = Model::<f64>::zeros(&ModelSpec::new(ModelKind::Ff, 16, 8, 8, 8)).unwrap();
        assert!(matches!(evaluate(&model, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn random_predictor_confuses_category_half_the_time() {
        let d = data(1000);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let preds: Vec<usize> = (0..d.len()).map(|_| rng.random_range(0..6)).collect();
        let r = EvalResult::from_predictions(&preds, &d).unwrap();
        let a = error_analysis(&r, &d).unwrap();
        assert!((a.wrong_category_rate - 0.5).abs() <= 0.05, "{}", a.wrong_category_rate);
        assert_eq!(a.wrong_category + a.wrong_attribute, a.errors);
        assert_eq!(a.errors, r.n - r.correct);
        assert_eq!(a.confusion.values().sum::<usize>(), 1000);
        // Balanced design: the only other-category entity with both query
        // attributes, and two with one each.
        assert!(!a.confusion.contains_key("other category, 0 of 2 attributes"));
        assert!(!a.confusion.contains_key("same category, 0 of 2 attributes"));
    }

    #[test]
    fn analysis_needs_labels() {
        let mut d = data(5);
        let r = EvalResult::from_predictions(&[0; 5], &d).unwrap();
        d[2].labels = None;
        let err = error_analysis(&r, &d).unwrap_err().to_string();
        assert!(err.contains("--debug"), "{err}");
    }
}
