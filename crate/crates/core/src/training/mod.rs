//! Minibatch SGD, dropout and gradient checking.

pub mod dropout;
pub mod gradcheck;

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{derive_seed, Datapoint};
use crate::error::{Error, Result};
use crate::harness::evaluate;
use crate::models::{Masks, Model, ModelSpec};
use crate::scalar::Scalar;

// Seed streams. Each consumer of randomness gets its own counter-based stream,
// so results do not depend on the order things run in.
const STREAM_INIT: u64 = 100;
const STREAM_SHUFFLE: u64 = 101;
const STREAM_DROPOUT: u64 = 102;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub minibatch: usize,
    pub dropout: f64,
    pub max_epochs: usize,
    pub seed: u64,
    /// Sequential gradient accumulation and zeroed wall-clock columns, so a
    /// run is bit-reproducible. When off, minibatch members are processed in
    /// parallel and summed by a tree reduction whose rounding may vary.
    pub deterministic: bool,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.09,
            minibatch: 10,
            dropout: 0.5,
            max_epochs: 150,
            seed: 1,
            deterministic: true,
            patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.minibatch == 0 {
            return Err(Error::Config("minibatch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch (with dropout active).
    pub train_loss: f64,
    pub val_acc: f64,
    /// Wall-clock time of the epoch; 0 in deterministic mode.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the kept parameters; 0 means the initialization.
    pub best_epoch: usize,
    pub best_val_acc: f64,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_acc,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.6},{:.4},{:.3}", e.epoch, e.train_loss, e.val_acc, e.seconds);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub struct TrainOutcome<T> {
    /// Parameters with the best validation accuracy (earliest epoch on ties).
    pub best: Model<T>,
    /// Parameters after the last epoch run.
    pub last: Model<T>,
    pub log: TrainLog,
}

/// `model -= learning_rate * grad`
pub fn sgd_step<T: Scalar>(model: &mut Model<T>, grad: &Model<T>, learning_rate: T) -> Result<()> {
    model.add_scaled(grad, -learning_rate)
}

/// Parameters of a fresh model, drawn from the run's initialization stream.
pub fn initial_model<T: Scalar>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_INIT, 0));
    Model::init(spec, &mut rng)
}

/// Loss and gradient of one training example. Its dropout masks come from a
/// stream keyed by `(epoch, position)`, independent of any other example.
fn example_grad<T: Scalar>(
    model: &Model<T>,
    dp: &Datapoint<T>,
    cfg: &TrainConfig,
    epoch: usize,
    position: usize,
) -> Result<(T, Model<T>)> {
    if cfg.dropout == 0.0 {
        return model.loss_and_grad(dp, &mut Masks::Off);
    }
    let key = derive_seed(cfg.seed, STREAM_DROPOUT, epoch as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(key, 0, position as u64));
    model.loss_and_grad(dp, &mut Masks::sample(cfg.dropout, &mut rng))
}

/// Mean loss and mean gradient over a minibatch.
fn minibatch_grad<T: Scalar>(
    model: &Model<T>,
    train: &[Datapoint<T>],
    batch: &[usize],
    first_position: usize,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(T, Model<T>)> {
    let (loss, mut grad) = if cfg.deterministic {
        let mut grad = model.zeros_like();
        let mut loss = T::zero();
        for (k, &i) in batch.iter().enumerate() {
            let (l, g) = example_grad(model, &train[i], cfg, epoch, first_position + k)?;
            loss += l;
            grad.add_scaled(&g, T::one())?;
        }
        (loss, grad)
    } else {
        batch
            .par_iter()
            .enumerate()
            .map(|(k, &i)| example_grad(model, &train[i], cfg, epoch, first_position + k))
            .try_reduce(
                || (T::zero(), model.zeros_like()),
                |(la, mut ga), (lb, gb)| {
                    ga.add_scaled(&gb, T::one())?;
                    Ok((la + lb, ga))
                },
            )?
    };
    let n = T::lit(batch.len() as f64);
    let inv = T::one() / n;
    for b in grad.blocks_mut() {
        b.data.iter_mut().for_each(|x| *x *= inv);
    }
    Ok((loss / n, grad))
}

/// Runs one epoch of shuffled minibatch SGD; returns the mean training loss.
pub fn train_epoch<T: Scalar>(
    model: &mut Model<T>,
    train: &[Datapoint<T>],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_SHUFFLE, epoch as u64));
    order.shuffle(&mut rng);
    let lr = T::lit(cfg.learning_rate);
    let mut total = 0.0;
    for (b, batch) in order.chunks(cfg.minibatch).enumerate() {
        let (loss, grad) = minibatch_grad(model, train, batch, b * cfg.minibatch, cfg, epoch)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Diverged { epoch, minibatch: b });
        }
        sgd_step(model, &grad, lr)?;
        total += loss.as_f64() * batch.len() as f64;
    }
    Ok(total / train.len() as f64)
}

/// Trains `model` in place from its current parameters.
pub fn train_model<T: Scalar>(
    mut model: Model<T>,
    train: &[Datapoint<T>],
    val: &[Datapoint<T>],
    cfg: &TrainConfig,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut log = TrainLog::default();
    let mut best = model.clone();
    log.best_val_acc = evaluate(&model, val)?.accuracy();
    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let train_loss = train_epoch(&mut model, train, cfg, epoch)?;
        let val_acc = evaluate(&model, val)?.accuracy();
        let seconds = if cfg.deterministic { 0.0 } else { start.elapsed().as_secs_f64() };
        let rec = EpochRecord { epoch, train_loss, val_acc, seconds };
        progress(&rec);
        log.epochs.push(rec);
        if val_acc > log.best_val_acc {
            log.best_val_acc = val_acc;
            log.best_epoch = epoch;
            best = model.clone();
        }
        if let Some(p) = cfg.patience {
            if epoch - log.best_epoch >= p {
                break;
            }
        }
    }
    Ok(TrainOutcome { best, last: model, log })
}

/// Initializes a model for `spec` from the run seed and trains it.
pub fn train<T: Scalar>(
    spec: &ModelSpec,
    train: &[Datapoint<T>],
    val: &[Datapoint<T>],
    cfg: &TrainConfig,
    progress: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    let model = initial_model(spec, cfg.seed)?;
    train_model(model, train, val, cfg, progress)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_datapoint, make_world, WorldConfig};
    use crate::models::ModelKind;

    fn world_data(n: usize, seed: u64) -> (crate::datagen::EmbeddingWorld, Vec<Datapoint<f64>>) {
        let world = make_world(&WorldConfig { image_dim: 16, attribute_dim: 8, noun_dim: 8, ..Default::default() }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n).map(|_| generate_datapoint(&world, &mut rng).unwrap()).collect();
        (world, data)
    }

    fn spec(kind: ModelKind, m: usize) -> ModelSpec {
        let mut s = ModelSpec::new(kind, 16, 8, 8, m);
        s.hidden = 12;
        s
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (_, data) = world_data(6, 1);
        let cfg = TrainConfig { max_epochs: 0, ..Default::default() };
        let s = spec(ModelKind::Dire { two_matrix: false }, 8);
        let out = train::<f64>(&s, &data[..4], &data[4..], &cfg, |_| {}).unwrap();
        assert!(out.log.epochs.is_empty());
        assert_eq!(out.log.best_epoch, 0);
        assert_eq!(out.best, initial_model::<f64>(&s, cfg.seed).unwrap());
        assert_eq!(out.log.to_csv(), "epoch,train_loss,val_acc,seconds\n");
    }

    #[test]
    fn rejects_empty_splits_and_bad_config() {
        let (_, data) = world_data(2, 1);
        let s = spec(ModelKind::Ff, 8);
        let cfg = TrainConfig::default();
        assert!(train::<f64>(&s, &[], &data, &cfg, |_| {}).is_err());
        assert!(train::<f64>(&s, &data, &[], &cfg, |_| {}).is_err());
        let bad = TrainConfig { minibatch: 0, ..Default::default() };
        assert!(train::<f64>(&s, &data, &data, &bad, |_| {}).is_err());
        let bad = TrainConfig { dropout: 1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn deterministic_runs_are_identical() {
        let (_, data) = world_data(30, 2);
        let cfg = TrainConfig { max_epochs: 3, ..Default::default() };
        for kind in [ModelKind::Dire { two_matrix: true }, ModelKind::Rnn] {
            let s = spec(kind, 8);
            let a = train::<f64>(&s, &data[..20], &data[20..], &cfg, |_| {}).unwrap();
            let b = train::<f64>(&s, &data[..20], &data[20..], &cfg, |_| {}).unwrap();
            assert_eq!(a.log, b.log);
            assert_eq!(a.best.flatten(), b.best.flatten());
            assert_eq!(a.log.epochs.len(), 3);
        }
    }

    #[test]
    fn parallel_accumulation_agrees_closely() {
        let (_, data) = world_data(30, 3);
        let s = spec(ModelKind::MemN { two_matrix: false, hops: 2 }, 8);
        let seq = TrainConfig { max_epochs: 2, ..Default::default() };
        let par = TrainConfig { deterministic: false, ..seq.clone() };
        let a = train::<f64>(&s, &data[..20], &data[20..], &seq, |_| {}).unwrap();
        let b = train::<f64>(&s, &data[..20], &data[20..], &par, |_| {}).unwrap();
        for (x, y) in a.last.flatten().iter().zip(b.last.flatten()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn minibatch_gradient_is_the_mean() {
        let (_, data) = world_data(3, 4);
        let s = spec(ModelKind::Dire { two_matrix: false }, 8);
        let model = initial_model::<f64>(&s, 5).unwrap();
        let cfg = TrainConfig { dropout: 0.0, ..Default::default() };
        let (loss, grad) = minibatch_grad(&model, &data, &[0, 1, 2], 0, &cfg, 1).unwrap();
        let mut expect = model.zeros_like();
        let mut total = 0.0;
        for dp in &data {
            let (l, g) = model.loss_and_grad(dp, &mut Masks::Off).unwrap();
            total += l;
            expect.add_scaled(&g, 1.0 / 3.0).unwrap();
        }
        assert!((loss - total / 3.0).abs() < 1e-12);
        for (x, y) in grad.flatten().iter().zip(expect.flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_step_rejects_mismatched_gradient() {
        let mut a = initial_model::<f64>(&spec(ModelKind::Ff, 8), 1).unwrap();
        let b = initial_model::<f64>(&spec(ModelKind::Rnn, 8), 1).unwrap();
        assert!(sgd_step(&mut a, &b, 0.1).is_err());
    }

    #[test]
    fn divergence_is_reported_with_minibatch() {
        let (_, data) = world_data(12, 6);
        let s = spec(ModelKind::Dire { two_matrix: false }, 8);
        let mut model = initial_model::<f64>(&s, 1).unwrap();
        model.blocks_mut()[0].data[0] = f64::NAN;
        let cfg = TrainConfig { max_epochs: 1, ..Default::default() };
        match train_model(model, &data[..10], &data[10..], &cfg, |_| {}) {
            Err(Error::Diverged { epoch: 1, minibatch: 0 }) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected divergence"),
        }
    }

    #[test]
    fn overfits_a_single_datapoint() {
        let (_, data) = world_data(1, 7);
        let s = spec(ModelKind::Dire { two_matrix: false }, 16);
        let mut model = initial_model::<f64>(&s, 3).unwrap();
        let mut losses = Vec::new();
        for _ in 0..500 {
            let (l, g) = model.loss_and_grad(&data[0], &mut Masks::Off).unwrap();
            losses.push(l);
            sgd_step(&mut model, &g, 0.09).unwrap();
        }
        let last = model.loss(&data[0]).unwrap();
        assert!(last < 0.01, "final loss {last}");
        let early: f64 = losses[..50].iter().sum::<f64>() / 50.0;
        let late: f64 = losses[450..].iter().sum::<f64>() / 50.0;
        assert!(late < early);
    }
}
