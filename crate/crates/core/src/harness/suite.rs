use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, RunConfig};
use crate::datagen::Dataset;
use crate::error::{Error, Result};
use crate::models::{Model, ModelKind};
use crate::training::{train, EpochRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub models: Vec<ModelKind>,
    /// Prepend the untrained all-zero model as the `random` row.
    pub include_random: bool,
    pub run: RunConfig,
    /// Where to write `<model>.ckpt` and `<model>.log.csv`; nothing is written if unset.
    pub checkpoint_dir: Option<PathBuf>,
    /// Train variants concurrently instead of one after another.
    pub parallel: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub name: String,
    pub val_acc: Option<f64>,
    /// Test accuracy of the best-validation parameters.
    pub test_acc: Option<f64>,
    pub epochs_run: usize,
    /// Wall-clock seconds; 0 in deterministic mode.
    pub seconds: f64,
    pub best_epoch: usize,
    /// Test accuracy of the last-epoch parameters.
    pub test_acc_last: Option<f64>,
    /// `ok`, or the error that stopped this variant.
    pub status: String,
}

impl SuiteRow {
    fn failed(name: String, err: &Error, seconds: f64) -> Self {
        Self {
            name,
            val_acc: None,
            test_acc: None,
            epochs_run: 0,
            seconds,
            best_epoch: 0,
            test_acc_last: None,
            status: format!("failed: {err}"),
        }
    }
}

pub const SUITE_HEADER: &str = "name,val_acc,test_acc,epochs_run,seconds,best_epoch,test_acc_last,status";

pub fn suite_csv(rows: &[SuiteRow]) -> String {
    let acc = |a: Option<f64>| a.map_or_else(String::new, |v| format!("{v:.4}"));
    let mut out = format!("{SUITE_HEADER}\n");
    for r in rows {
        let status = r.status.replace(['"', '\n'], " ");
        let _ = writeln!(
            out,
            "{},{},{},{},{:.1},{},{},\"{}\"",
            r.name,
            acc(r.val_acc),
            acc(r.test_acc),
            r.epochs_run,
            r.seconds,
            r.best_epoch,
            acc(r.test_acc_last),
            status
        );
    }
    out
}

fn random_row(cfg: &SuiteConfig, data: &Dataset) -> Result<SuiteRow> {
    let dp = data.test.first().ok_or(Error::Empty("test split"))?;
    let spec = cfg.run.model_spec(ModelKind::Dire { two_matrix: false }, dp.image_dim(), dp.attribute_dim(), dp.noun_dim());
    let model = Model::<f64>::zeros(&spec)?;
    let test = evaluate(&model, &data.test)?.accuracy();
    Ok(SuiteRow {
        name: "random".into(),
        val_acc: Some(evaluate(&model, &data.val)?.accuracy()),
        test_acc: Some(test),
        epochs_run: 0,
        seconds: 0.0,
        best_epoch: 0,
        test_acc_last: Some(test),
        status: "ok".into(),
    })
}

fn variant_row(
    kind: ModelKind,
    cfg: &SuiteConfig,
    data: &Dataset,
    progress: &(dyn Fn(ModelKind, &EpochRecord) + Sync),
) -> Result<SuiteRow> {
    let dp = data.train.first().ok_or(Error::Empty("training split"))?;
    let spec = cfg.run.model_spec(kind, dp.image_dim(), dp.attribute_dim(), dp.noun_dim());
    let start = Instant::now();
    let out = train(&spec, &data.train, &data.val, &cfg.run.train, |r| progress(kind, r))?;
    let val = evaluate(&out.best, &data.val)?.accuracy();
    let test = evaluate(&out.best, &data.test)?.accuracy();
    let test_last = evaluate(&out.last, &data.test)?.accuracy();
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
        out.best.save_checkpoint(&dir.join(format!("{}.ckpt", kind.tag())), cfg.run.train.seed, out.log.best_epoch)?;
        out.log.write_csv(&dir.join(format!("{}.log.csv", kind.tag())))?;
    }
    let seconds = if cfg.run.train.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
    Ok(SuiteRow {
        name: kind.tag(),
        val_acc: Some(val),
        test_acc: Some(test),
        epochs_run: out.log.epochs.len(),
        seconds,
        best_epoch: out.log.best_epoch,
        test_acc_last: Some(test_last),
        status: "ok".into(),
    })
}

/// Trains and evaluates every requested variant on the same splits. A
/// failing variant becomes a `failed` row; the others still run.
pub fn run_suite(
    cfg: &SuiteConfig,
    data: &Dataset,
    progress: &(dyn Fn(ModelKind, &EpochRecord) + Sync),
) -> Result<Vec<SuiteRow>> {
    let mut rows = Vec::new();
    if cfg.include_random {
        rows.push(random_row(cfg, data).unwrap_or_else(|e| SuiteRow::failed("random".into(), &e, 0.0)));
    }
    let one = |kind: ModelKind| {
        variant_row(kind, cfg, data, progress).unwrap_or_else(|e| SuiteRow::failed(kind.tag(), &e, 0.0))
    };
    if cfg.parallel {
        rows.extend(cfg.models.par_iter().map(|&k| one(k)).collect::<Vec<_>>());
    } else {
        rows.extend(cfg.models.iter().map(|&k| one(k)));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, make_world, SplitSizes, WorldConfig};

    fn setup() -> (SuiteConfig, Dataset) {
        let world = make_world(&WorldConfig { image_dim: 16, attribute_dim: 8, noun_dim: 8, ..Default::default() }).unwrap();
        let data = generate_dataset(&world, SplitSizes { train: 20, val: 10, test: 10 }, 4).unwrap();
        let mut run = RunConfig { multimodal_dim: 8, hidden: 10, ..Default::default() };
        run.train.max_epochs = 2;
        let cfg = SuiteConfig {
            models: vec![ModelKind::Ff, ModelKind::Dire { two_matrix: false }],
            include_random: true,
            run,
            checkpoint_dir: None,
            parallel: false,
        };
        (cfg, data)
    }

    #[test]
    fn table_has_one_row_per_variant() {
        let (cfg, data) = setup();
        let rows = run_suite(&cfg, &data, &|_, _| {}).unwrap();
        assert_eq!(rows.iter().map(|r| r.name.as_str()).collect::<Vec<_>>(), ["random", "ff", "dire-1m"]);
        for r in &rows {
            assert_eq!(r.status, "ok");
            for a in [r.val_acc, r.test_acc, r.test_acc_last] {
                assert!((0.0..=1.0).contains(&a.unwrap()));
            }
        }
        let csv = suite_csv(&rows);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(SUITE_HEADER));
        assert!(csv.lines().nth(2).unwrap().starts_with("ff,"));
    }

    #[test]
    fn a_failing_variant_does_not_abort() {
        let (mut cfg, data) = setup();
        cfg.run.train.max_epochs = 1;
        cfg.run.train.learning_rate = 1e300;
        cfg.include_random = false;
        let rows = run_suite(&cfg, &data, &|_, _| {}).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().any(|r| r.status.starts_with("failed")), "{rows:?}");
        let csv = suite_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn parallel_suite_matches_sequential() {
        let (cfg, data) = setup();
        let par = SuiteConfig { parallel: true, ..cfg.clone() };
        assert_eq!(
            suite_csv(&run_suite(&cfg, &data, &|_, _| {}).unwrap()),
            suite_csv(&run_suite(&par, &data, &|_, _| {}).unwrap())
        );
    }
}
