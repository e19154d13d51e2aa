use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MetricsRow, TransferConfig};
use crate::data::{split_dataset, subsample_fraction, Dataset, Split, Task};
use crate::error::{Error, Result};
use crate::nn::{apply_norm_updates, Encoder, EncoderConfig, LinearProbe, Mode};
use crate::objectives::cross_entropy;
use crate::tensor::{Tape, Tensor};

/// Records per forward pass when embedding.
const EMBED_CHUNK: usize = 128;

#[derive(Debug, Clone)]
pub struct TransferResult {
    pub probe: LinearProbe,
    /// The end-to-end trained encoder for Scratch runs.
    pub encoder: Option<Encoder>,
    /// Best validation accuracy, in `[0, 1]`.
    pub val_accuracy: f64,
    /// Test accuracy of the model selected on validation, in `[0, 1]`.
    pub test_accuracy: f64,
    pub best_epoch: usize,
    pub train_size: usize,
    pub metrics: Vec<MetricsRow>,
}

/// Fraction of matching entries.
pub fn accuracy(predictions: &[usize], targets: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid("accuracy", "no examples to evaluate"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::invalid(
            "accuracy",
            format!(
                "{} predictions for {} targets",
                predictions.len(),
                targets.len()
            ),
        ));
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p == t)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

/// Arg-max class of each row of `features` under `probe`; ties go to the
/// lower class index.
pub fn predict(probe: &LinearProbe, features: &Tensor) -> Result<Vec<usize>> {
    let tape = Tape::new();
    let bind = probe.params.bind(&tape, false);
    let logits = probe
        .forward(&bind, tape.constant(features.clone()))?
        .value();
    let c = probe.n_classes;
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect())
}

fn embed(encoder: &Encoder, ds: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let h = encoder.config.hidden_dim;
    let mut rows = Vec::with_capacity(indices.len() * h);
    for chunk in indices.chunks(EMBED_CHUNK) {
        rows.extend_from_slice(encoder.embed(&ds.batch(chunk)?, EMBED_CHUNK)?.data());
    }
    Tensor::new(vec![indices.len(), h], rows)
}

fn gather(features: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let h = features.shape()[1];
    let data = rows
        .iter()
        .flat_map(|&r| features.data()[r * h..(r + 1) * h].iter().copied())
        .collect();
    Tensor::new(vec![rows.len(), h], data)
}

/// Accuracy of `encoder` plus `probe` on the selected records.
pub fn evaluate(
    encoder: &Encoder,
    probe: &LinearProbe,
    ds: &Dataset,
    indices: &[usize],
    task: Task,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("evaluate", "evaluation split is empty"));
    }
    let features = embed(encoder, ds, indices)?;
    accuracy(&predict(probe, &features)?, &ds.targets(indices, task)?)
}

struct Splits<'a> {
    ds: Cow<'a, Dataset>,
    train: Vec<usize>,
    val: Vec<usize>,
    test: Vec<usize>,
}

fn splits<'a>(ds: &'a Dataset, config: &TransferConfig) -> Result<Splits<'a>> {
    let ds = match ds.splits {
        Some(_) => Cow::Borrowed(ds),
        None => Cow::Owned(split_dataset(ds, config.split, config.split_seed)?),
    };
    let pool = ds.indices(Split::Train)?;
    let train = subsample_fraction(&ds, &pool, config.fraction, config.seed)?;
    let val = ds.indices(Split::Val)?;
    let test = ds.indices(Split::Test)?;
    if val.is_empty() || test.is_empty() {
        return Err(Error::invalid(
            "transfer",
            "validation and test splits must be non-empty",
        ));
    }
    Ok(Splits {
        ds,
        train,
        val,
        test,
    })
}

fn row(config: &TransferConfig, phase: &str, epoch: usize, loss: f32, val: f64) -> MetricsRow {
    MetricsRow {
        phase: phase.into(),
        epoch,
        l_ssl: Some(loss),
        l_sparse: None,
        accuracy: Some(val),
        fraction: Some(config.fraction),
        seed: config.seed,
        wall_time_s: 0.0,
    }
}

/// Fits a linear probe on frozen features of `encoder`. Picks the epoch
/// with the best validation accuracy and reports its test accuracy.
pub fn transfer_train(
    encoder: &Encoder,
    ds: &Dataset,
    config: &TransferConfig,
) -> Result<TransferResult> {
    config.validate()?;
    let Splits {
        ds,
        train,
        val,
        test,
    } = splits(ds, config)?;
    let features = embed(encoder, &ds, &train)?;
    let targets = ds.targets(&train, config.task)?;
    let val_features = embed(encoder, &ds, &val)?;
    let val_targets = ds.targets(&val, config.task)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut probe = LinearProbe::new(encoder.config.hidden_dim, config.task.n_classes(), &mut rng)?;
    let mut best = (probe.clone(), f64::NEG_INFINITY, 0);
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for rows in order.chunks(config.batch_size) {
            let tape = Tape::new();
            let bind = probe.params.bind(&tape, true);
            let x = tape.constant(gather(&features, rows)?);
            let y: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
            let loss = cross_entropy(probe.forward(&bind, x)?, &y)?;
            loss_sum += loss.item().unwrap_or(f32::NAN) * rows.len() as f32;
            let grads = tape.backward(loss)?;
            probe.params.accumulate_grads(&bind, &grads)?;
            probe.params.adam_step(config.lr)?;
            probe.params.zero_grad();
        }
        let val_acc = accuracy(&predict(&probe, &val_features)?, &val_targets)?;
        metrics.push(row(
            config,
            "transfer",
            epoch,
            loss_sum / train.len() as f32,
            val_acc,
        ));
        if val_acc > best.1 {
            best = (probe.clone(), val_acc, epoch);
        }
    }
    let (probe, val_accuracy, best_epoch) = best;
    let val_accuracy = if best_epoch == 0 {
        accuracy(&predict(&probe, &val_features)?, &val_targets)?
    } else {
        val_accuracy
    };
    let test_accuracy = evaluate(encoder, &probe, &ds, &test, config.task)?;
    Ok(TransferResult {
        probe,
        encoder: None,
        val_accuracy,
        test_accuracy,
        best_epoch,
        train_size: train.len(),
        metrics,
    })
}

/// Accumulates gradients of the cross-entropy of `encoder` plus `probe`
/// over a window of `(signals, targets)` batches, each weighted by its share
/// of the records, so the result equals the gradient on the concatenated
/// window when batch statistics are not used. Returns the mean loss.
pub fn supervised_window(
    encoder: &mut Encoder,
    probe: &mut LinearProbe,
    window: &[(Tensor, Vec<usize>)],
    mode: Mode,
) -> Result<f32> {
    let total: usize = window.iter().map(|(_, y)| y.len()).sum();
    if total == 0 {
        return Err(Error::invalid("supervised_window", "empty window"));
    }
    let mut mean = 0.0;
    for (x, y) in window {
        let weight = y.len() as f32 / total as f32;
        let tape = Tape::new();
        let eb = encoder.params.bind(&tape, true);
        let pb = probe.params.bind(&tape, true);
        let (h, updates) = encoder.forward(&eb, tape.constant(x.clone()), mode)?;
        let loss = cross_entropy(probe.forward(&pb, h)?, y)?;
        let value = loss.item().unwrap_or(f32::NAN);
        if !value.is_finite() {
            return Err(Error::invalid("supervised_window", "non-finite loss"));
        }
        mean += weight * value;
        let grads = tape.backward(loss.scale(weight))?;
        encoder.params.accumulate_grads(&eb, &grads)?;
        probe.params.accumulate_grads(&pb, &grads)?;
        apply_norm_updates(&mut encoder.params, &updates)?;
    }
    Ok(mean)
}

/// Trains a randomly initialised encoder and a linear head end to end on
/// the labelled subset, with the transfer optimiser settings.
pub fn train_scratch(
    encoder_config: &EncoderConfig,
    ds: &Dataset,
    config: &TransferConfig,
) -> Result<TransferResult> {
    config.validate()?;
    let Splits {
        ds,
        train,
        val,
        test,
    } = splits(ds, config)?;
    let targets = ds.targets(&train, config.task)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = Encoder::new(encoder_config.clone(), &mut rng)?;
    let mut probe = LinearProbe::new(encoder_config.hidden_dim, config.task.n_classes(), &mut rng)?;
    let mut best: Option<(Encoder, LinearProbe, f64, usize)> = None;
    let mut metrics = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for rows in order.chunks(config.batch_size) {
            let idx: Vec<usize> = rows.iter().map(|&r| train[r]).collect();
            let y: Vec<usize> = rows.iter().map(|&r| targets[r]).collect();
            let window = [(ds.batch(&idx)?, y)];
            loss_sum += supervised_window(&mut encoder, &mut probe, &window, Mode::Train)?
                * rows.len() as f32;
            for params in [&mut encoder.params, &mut probe.params] {
                params.adam_step(config.lr)?;
                params.zero_grad();
            }
        }
        let val_acc = evaluate(&encoder, &probe, &ds, &val, config.task)?;
        metrics.push(row(
            config,
            "scratch",
            epoch,
            loss_sum / train.len() as f32,
            val_acc,
        ));
        if best.as_ref().is_none_or(|b| val_acc > b.2) {
            best = Some((encoder.clone(), probe.clone(), val_acc, epoch));
        }
    }
    let (encoder, probe, val_accuracy, best_epoch) = match best {
        Some(b) => b,
        None => {
            let acc = evaluate(&encoder, &probe, &ds, &val, config.task)?;
            (encoder, probe, acc, 0)
        }
    };
    let test_accuracy = evaluate(&encoder, &probe, &ds, &test, config.task)?;
    Ok(TransferResult {
        probe,
        encoder: Some(encoder),
        val_accuracy,
        test_accuracy,
        best_epoch,
        train_size: train.len(),
        metrics,
    })
}
