use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MetricsRow, PretrainConfig};
use crate::augment::{AdversarialPlan, Affine};
use crate::checkpoint::{Checkpoint, CheckpointHeader};
use crate::data::{Dataset, Split, N_LEADS, SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::nn::{apply_norm_updates, Encoder, MaskGenerator, MaskGeneratorConfig, Mode, Projector};
use crate::objectives::{adversary_loss, encoder_loss, pair_loss, Bindings, Models, Player, Views};
use crate::tensor::{Tape, Tensor};

/// One batch with its augmentation randomness already drawn, so both
/// players see identical views.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub clean: Tensor,
    /// Input of the mask generator; `clean` unless a step precedes masking.
    pub source: Tensor,
    /// Per-record affine steps after masking, empty if none.
    pub after: Vec<Affine>,
    pub mask_index: usize,
    pub adversary_mask_index: usize,
    /// Second view for non-adversarial augmentations.
    pub augmented: Option<Tensor>,
}

impl PreparedBatch {
    pub fn len(&self) -> usize {
        self.clean.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Size-weighted means over the batches of one window or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindowStats {
    pub l_ssl: f32,
    pub l_sparse: Option<f32>,
    pub records: usize,
}

impl WindowStats {
    fn merge(self, other: WindowStats) -> WindowStats {
        let n = self.records + other.records;
        if n == 0 {
            return self;
        }
        let mix = |a: f32, b: f32| (a * self.records as f32 + b * other.records as f32) / n as f32;
        WindowStats {
            l_ssl: mix(self.l_ssl, other.l_ssl),
            l_sparse: match (self.l_sparse, other.l_sparse) {
                (Some(a), Some(b)) => Some(mix(a, b)),
                (a, None) if other.records == 0 => a,
                (None, b) if self.records == 0 => b,
                _ => None,
            },
            records: n,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
    pub stopped_early: bool,
}

/// State of a pretraining run: the three networks and the data stream.
#[derive(Debug, Clone)]
pub struct Pretrainer {
    pub config: PretrainConfig,
    pub encoder: Encoder,
    pub projector: Projector,
    /// Present when the augmentation contains adversarial masking.
    pub generator: Option<MaskGenerator>,
    plan: Option<AdversarialPlan>,
    rng: ChaCha8Rng,
    /// Epochs completed.
    pub epoch: usize,
    /// Position in the epoch of the current window's first batch.
    window_start: usize,
}

fn data_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

fn stack(rows: &[Tensor]) -> Result<Tensor> {
    let mut shape = vec![rows.len()];
    shape.extend_from_slice(rows.first().map(Tensor::shape).unwrap_or(&[]));
    let data = rows.iter().flat_map(|r| r.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

impl Pretrainer {
    /// Fresh networks initialised from `config.seed`.
    pub fn new(config: PretrainConfig) -> Result<Self> {
        config.validate()?;
        let plan = config.augmentation.adversarial_plan()?;
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::new(config.encoder.clone(), &mut init)?;
        let projector = Projector::new(&config.encoder, &mut init)?;
        let generator = plan
            .as_ref()
            .map(|p| MaskGenerator::new(generator_config(&config, p.n_masks), &mut init))
            .transpose()?;
        Ok(Self {
            rng: data_rng(config.seed),
            config,
            encoder,
            projector,
            generator,
            plan,
            epoch: 0,
            window_start: 0,
        })
    }

    /// Continues from saved networks. The encoder architecture comes from
    /// the checkpoint; a missing generator is initialised fresh.
    pub fn from_checkpoint(mut config: PretrainConfig, ck: Checkpoint) -> Result<Self> {
        config.encoder = ck.header.encoder.clone();
        let mut fresh = Self::new(config)?;
        fresh.encoder = ck.encoder;
        fresh.projector = ck.projector;
        if let (Some(plan), Some(g)) = (&fresh.plan, ck.generator) {
            if g.config.n_masks != plan.n_masks {
                return Err(Error::invalid(
                    "pretrain",
                    format!(
                        "checkpoint generator has {} masks, augmentation asks for {}",
                        g.config.n_masks, plan.n_masks
                    ),
                ));
            }
            fresh.generator = Some(g);
        }
        fresh.epoch = ck.header.epoch;
        Ok(fresh)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            header: CheckpointHeader {
                encoder: self.encoder.config.clone(),
                generator: self.generator.as_ref().map(|g| g.config.clone()),
                augmentation: self.config.augmentation.name(),
                seed: self.config.seed,
                epoch: self.epoch,
                dataset_schema_version: SCHEMA_VERSION,
            },
            encoder: self.encoder.clone(),
            projector: self.projector.clone(),
            generator: self.generator.clone(),
        }
    }

    /// Stacks `indices` and draws all augmentation randomness for them.
    pub fn prepare(&mut self, ds: &Dataset, indices: &[usize]) -> Result<PreparedBatch> {
        let fs = ds
            .sampling_rate_hz()
            .ok_or_else(|| Error::invalid("pretrain", "empty dataset"))?;
        let clean = ds.batch(indices)?;
        let len = clean.shape()[2];
        let signals = indices.iter().map(|&i| &ds.records[i].signal);
        let rng = &mut self.rng;
        let mut batch = PreparedBatch {
            source: clean.clone(),
            clean,
            after: Vec::new(),
            mask_index: 0,
            adversary_mask_index: 0,
            augmented: None,
        };
        match &self.plan {
            Some(plan) => {
                if let Some(before) = &plan.before {
                    let rows = signals
                        .map(|s| before.apply(s, fs, rng))
                        .collect::<Result<Vec<_>>>()?;
                    batch.source = stack(&rows)?;
                }
                if let Some(after) = &plan.after {
                    batch.after = (0..indices.len())
                        .map(|_| after.sample_affine(N_LEADS, len, fs, rng))
                        .collect::<Result<_>>()?;
                }
                if plan.n_masks < N_LEADS {
                    batch.mask_index = rng.random_range(0..plan.n_masks);
                    batch.adversary_mask_index = if self.config.resample_mask_index {
                        rng.random_range(0..plan.n_masks)
                    } else {
                        batch.mask_index
                    };
                }
            }
            None => {
                let spec = &self.config.augmentation;
                let rows = signals
                    .map(|s| spec.apply(s, fs, rng))
                    .collect::<Result<Vec<_>>>()?;
                batch.augmented = Some(stack(&rows)?);
            }
        }
        Ok(batch)
    }

    fn non_finite(&self, batch: usize, l_ssl: f32, l_sparse: f32) -> Error {
        Error::NonFiniteLoss {
            epoch: self.epoch,
            batch: self.window_start + batch,
            l_ssl,
            l_sparse,
        }
    }

    /// Accumulates the encoder and projector gradients of every batch, each
    /// weighted by its share of the window, then takes one Adam step.
    pub fn encoder_window(&mut self, batches: &[PreparedBatch]) -> Result<WindowStats> {
        let total: usize = batches.iter().map(PreparedBatch::len).sum();
        if total == 0 {
            return Err(Error::invalid("pretrain", "empty window"));
        }
        let mut stats = WindowStats::default();
        for (i, b) in batches.iter().enumerate() {
            let weight = b.len() as f32 / total as f32;
            let tape = Tape::new();
            let clean = tape.constant(b.clean.clone());
            let (l_ssl, l_sparse) = match (&self.generator, &b.augmented) {
                (Some(generator), _) => {
                    let models = Models {
                        encoder: &self.encoder,
                        projector: &self.projector,
                        generator,
                    };
                    let binds = Bindings::new(&tape, models, Player::Encoder);
                    let views = Views {
                        clean,
                        source: tape.constant(b.source.clone()),
                        mask_index: b.mask_index,
                        after: &b.after,
                    };
                    let out = encoder_loss(models, &binds, &views, &self.config.objective)?;
                    if !(out.l_ssl.is_finite() && out.l_sparse.is_finite()) {
                        return Err(self.non_finite(i, out.l_ssl, out.l_sparse));
                    }
                    let grads = tape.backward(out.loss.scale(weight))?;
                    self.encoder
                        .params
                        .accumulate_grads(&binds.encoder, &grads)?;
                    self.projector
                        .params
                        .accumulate_grads(&binds.projector, &grads)?;
                    apply_norm_updates(&mut self.encoder.params, &out.encoder_updates)?;
                    (out.l_ssl, Some(out.l_sparse))
                }
                (None, Some(augmented)) => {
                    let eb = self.encoder.params.bind(&tape, true);
                    let pb = self.projector.params.bind(&tape, true);
                    let (loss, updates) = pair_loss(
                        (&self.encoder, &eb),
                        (&self.projector, &pb),
                        clean,
                        tape.constant(augmented.clone()),
                        Mode::Train,
                        &self.config.objective,
                    )?;
                    let l_ssl = loss.item().unwrap_or(f32::NAN);
                    if !l_ssl.is_finite() {
                        return Err(self.non_finite(i, l_ssl, 0.0));
                    }
                    let grads = tape.backward(loss.scale(weight))?;
                    self.encoder.params.accumulate_grads(&eb, &grads)?;
                    self.projector.params.accumulate_grads(&pb, &grads)?;
                    apply_norm_updates(&mut self.encoder.params, &updates)?;
                    (l_ssl, None)
                }
                (None, None) => {
                    return Err(Error::invalid(
                        "pretrain",
                        "batch was prepared without a second view",
                    ))
                }
            };
            stats = stats.merge(WindowStats {
                l_ssl,
                l_sparse,
                records: b.len(),
            });
        }
        let lr = self.config.lr_encoder;
        self.encoder.params.adam_step(lr)?;
        self.projector.params.adam_step(lr)?;
        self.encoder.params.zero_grad();
        self.projector.params.zero_grad();
        Ok(stats)
    }

    /// The mask generator's step on the same window, with the encoder fixed.
    /// A no-op without a generator.
    pub fn adversary_window(&mut self, batches: &[PreparedBatch]) -> Result<WindowStats> {
        let Some(generator) = &mut self.generator else {
            return Ok(WindowStats::default());
        };
        let total: usize = batches.iter().map(PreparedBatch::len).sum();
        if total == 0 {
            return Err(Error::invalid("pretrain", "empty window"));
        }
        let mut stats = WindowStats::default();
        for (i, b) in batches.iter().enumerate() {
            let weight = b.len() as f32 / total as f32;
            let tape = Tape::new();
            let models = Models {
                encoder: &self.encoder,
                projector: &self.projector,
                generator,
            };
            let binds = Bindings::new(&tape, models, Player::Adversary);
            let views = Views {
                clean: tape.constant(b.clean.clone()),
                source: tape.constant(b.source.clone()),
                mask_index: b.adversary_mask_index,
                after: &b.after,
            };
            let out = adversary_loss(models, &binds, &views, &self.config.objective)?;
            if !(out.l_ssl.is_finite() && out.l_sparse.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch: self.epoch,
                    batch: self.window_start + i,
                    l_ssl: out.l_ssl,
                    l_sparse: out.l_sparse,
                });
            }
            let grads = tape.backward(out.loss.scale(weight))?;
            generator
                .params
                .accumulate_grads(&binds.generator, &grads)?;
            apply_norm_updates(&mut generator.params, &out.generator_updates)?;
            stats = stats.merge(WindowStats {
                l_ssl: out.l_ssl,
                l_sparse: Some(out.l_sparse),
                records: b.len(),
            });
        }
        generator.params.adam_step(self.config.lr_adversary)?;
        generator.params.zero_grad();
        Ok(stats)
    }

    /// One pass over `pool` in shuffled batches. Batches smaller than two
    /// records are dropped. Returns the encoder-phase losses.
    pub fn run_epoch(&mut self, ds: &Dataset, pool: &[usize]) -> Result<WindowStats> {
        let mut order = pool.to_vec();
        order.shuffle(&mut self.rng);
        let batches: Vec<&[usize]> = order
            .chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .collect();
        if batches.is_empty() {
            return Err(Error::invalid(
                "pretrain",
                format!("{} records cannot form a batch of two", pool.len()),
            ));
        }
        let mut stats = WindowStats::default();
        for (w, window) in batches.chunks(self.config.grad_accum_batches).enumerate() {
            self.window_start = w * self.config.grad_accum_batches;
            let prepared = window
                .iter()
                .map(|idx| self.prepare(ds, idx))
                .collect::<Result<Vec<_>>>()?;
            let enc = if self.config.adversary_first {
                self.adversary_window(&prepared)?;
                self.encoder_window(&prepared)?
            } else {
                let enc = self.encoder_window(&prepared)?;
                self.adversary_window(&prepared)?;
                enc
            };
            stats = stats.merge(enc);
        }
        self.epoch += 1;
        Ok(stats)
    }
}

fn generator_config(config: &PretrainConfig, n_masks: usize) -> MaskGeneratorConfig {
    MaskGeneratorConfig {
        in_leads: N_LEADS,
        base_channels: config.mask_base_channels,
        n_masks,
    }
}

/// Records used for pretraining: the train split, or everything when the
/// dataset is unsplit. Labels are never read.
pub(crate) fn pretrain_pool(ds: &Dataset) -> Result<Vec<usize>> {
    match ds.splits {
        Some(_) => ds.indices(Split::Train),
        None => Ok((0..ds.len()).collect()),
    }
}

/// Alternating pretraining with early stopping on the epoch-mean L_SSL.
/// The returned checkpoint holds the final state.
pub fn pretrain(config: &PretrainConfig, ds: &Dataset) -> Result<PretrainOutput> {
    let mut trainer = Pretrainer::new(config.clone())?;
    let pool = pretrain_pool(ds)?;
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut best = f32::INFINITY;
    let mut stale = 0;
    let mut stopped_early = false;
    for _ in 0..config.max_epochs {
        let stats = trainer.run_epoch(ds, &pool)?;
        log::info!(
            "pretrain epoch {}: l_ssl {:.4}{}",
            trainer.epoch,
            stats.l_ssl,
            stats
                .l_sparse
                .map(|s| format!(", l_sparse {s:.4}"))
                .unwrap_or_default()
        );
        metrics.push(MetricsRow {
            phase: "pretrain".into(),
            epoch: trainer.epoch,
            l_ssl: Some(stats.l_ssl),
            l_sparse: stats.l_sparse,
            accuracy: None,
            fraction: None,
            seed: config.seed,
            wall_time_s: if config.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        });
        if stats.l_ssl < best - config.min_delta {
            best = stats.l_ssl;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.early_stop_patience {
                stopped_early = true;
                log::info!("no improvement for {stale} epochs, stopping");
                break;
            }
        }
    }
    Ok(PretrainOutput {
        checkpoint: trainer.checkpoint(),
        metrics,
        stopped_early,
    })
}
