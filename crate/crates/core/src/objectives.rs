//! Contrastive loss, mask binarisation, sparsity penalty and the two
//! players' losses of the adversarial game.

use std::f32::consts::PI;

use serde::{Deserialize, Serialize};

use crate::augment::{apply_adversarial_mask, Affine};
use crate::error::{Error, Result};
use crate::nn::{Encoder, MaskGenerator, Mode, NormUpdates, Projector};
use crate::params::Binding;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub temperature: f32,
    pub binarize_gamma: f32,
    pub sparse_weight: f32,
    pub penalty_clamp: f32,
    /// Keep the positive pair in the contrastive denominator.
    pub canonical_ntxent: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            binarize_gamma: 25.0,
            sparse_weight: 0.1,
            penalty_clamp: 1e3,
            canonical_ntxent: false,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !(self.binarize_gamma > 0.0) {
            return Err(Error::invalid(
                "objective_config",
                "temperature and gamma must be positive",
            ));
        }
        if !(self.sparse_weight >= 0.0) {
            return Err(Error::invalid(
                "objective_config",
                "sparse_weight must be non-negative",
            ));
        }
        if !(self.penalty_clamp >= 1.0) {
            return Err(Error::invalid(
                "objective_config",
                "penalty_clamp must be at least 1",
            ));
        }
        Ok(())
    }
}

fn unit_rows<'t>(z: Var<'t>) -> Result<Var<'t>> {
    let norm = z.mul(z)?.sum_axis(1, true)?.sqrt();
    if norm.with_value(|n| n.data().contains(&0.0)) {
        return Err(Error::invalid(
            "ntxent_loss",
            "zero-norm embedding row; cosine similarity undefined",
        ));
    }
    z.div(norm)
}

/// Contrastive loss between clean views `z` and augmented views `z_aug`,
/// both `[B, P]`. Row `i` of `z` is pulled towards row `i` of `z_aug` and
/// pushed from every other row of `z_aug`, with cosine similarity over
/// `temperature`. Unless `canonical`, the positive is left out of the
/// denominator.
pub fn ntxent_loss<'t>(
    z: Var<'t>,
    z_aug: Var<'t>,
    temperature: f32,
    canonical: bool,
) -> Result<Var<'t>> {
    let shape = z.shape();
    if shape.len() != 2 || shape != z_aug.shape() {
        return Err(Error::shapes("ntxent_loss", &[&shape, &z_aug.shape()]));
    }
    let b = shape[0];
    if b < 2 {
        return Err(Error::invalid(
            "ntxent_loss",
            format!("need at least 2 pairs, got {b}"),
        ));
    }
    let tape = z.tape();
    let sim = unit_rows(z)?
        .matmul(unit_rows(z_aug)?.transpose()?)?
        .scale(1.0 / temperature);

    let eye = Tensor::new(
        vec![b, b],
        (0..b * b).map(|k| f32::from(k % (b + 1) == 0)).collect(),
    )?;
    let keep = if canonical {
        Tensor::ones(&[b, b])
    } else {
        eye.map(|v| 1.0 - v)
    };
    // row maxima as constants keep the exponentials bounded
    let shift = sim.with_value(|s| {
        let rows = s
            .data()
            .chunks(b)
            .map(|r| r.iter().copied().fold(f32::MIN, f32::max))
            .collect();
        Tensor::new(vec![b, 1], rows)
    })?;
    let shift = tape.constant(shift);
    let denom = sim
        .sub(shift)?
        .exp()
        .mul(tape.constant(keep))?
        .sum_axis(1, true)?
        .ln()
        .add(shift)?;
    let positive = sim.mul(tape.constant(eye))?.sum_axis(1, true)?;
    denom.sub(positive)?.mean()
}

/// `1 / (1 + exp(−γ (m − 0.5)))`, pushing mask values towards 0 or 1.
pub fn soft_binarize<'t>(m: Var<'t>, gamma: f32) -> Var<'t> {
    m.add_scalar(-0.5).scale(gamma).sigmoid()
}

/// Mean over every mask (all leading axes) of `1 / sin(π/D · Σ_d m_d)`,
/// each term capped at `clamp`.
pub fn sparse_penalty<'t>(m: Var<'t>, clamp: f32) -> Result<Var<'t>> {
    let shape = m.shape();
    let Some(&len) = shape.last() else {
        return Err(Error::shapes("sparse_penalty", &[&shape]));
    };
    if len == 0 {
        return Err(Error::shapes("sparse_penalty", &[&shape]));
    }
    let s = m
        .sum_axis(shape.len() - 1, false)?
        .scale(PI / len as f32)
        .sin()
        .clamp(1.0 / clamp, f32::INFINITY);
    let ones = m.tape().constant(Tensor::full(&s.shape(), 1.0));
    ones.div(s)?.mean()
}

/// Mean cross-entropy of `logits: [B, C]` against class indices.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    let [b, c] = shape[..] else {
        return Err(Error::shapes("cross_entropy", &[&shape]));
    };
    if b == 0 || targets.len() != b {
        return Err(Error::invalid(
            "cross_entropy",
            format!("{} targets for {b} rows", targets.len()),
        ));
    }
    let mut onehot = Tensor::zeros(&[b, c]);
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::invalid(
                "cross_entropy",
                format!("target {t} out of range for {c} classes"),
            ));
        }
        onehot.data_mut()[i * c + t] = 1.0;
    }
    let picked = logits
        .log_softmax(1)?
        .mul(logits.tape().constant(onehot))?
        .sum()?;
    Ok(picked.scale(-1.0 / b as f32))
}

/// The three networks of the game.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub encoder: &'a Encoder,
    pub projector: &'a Projector,
    pub generator: &'a MaskGenerator,
}

/// Which side of the game is being updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Player {
    Encoder,
    Adversary,
}

/// Parameters of all three networks bound on one tape; only the updating
/// player's leaves require gradients.
pub struct Bindings<'t> {
    pub encoder: Binding<'t>,
    pub projector: Binding<'t>,
    pub generator: Binding<'t>,
}

impl<'t> Bindings<'t> {
    pub fn new(tape: &'t Tape, models: Models<'_>, player: Player) -> Self {
        let enc = player == Player::Encoder;
        Self {
            encoder: models.encoder.params.bind(tape, enc),
            projector: models.projector.params.bind(tape, enc),
            generator: models.generator.params.bind(tape, !enc),
        }
    }
}

/// One player's loss on one batch.
pub struct GameLoss<'t> {
    /// The value to minimise.
    pub loss: Var<'t>,
    pub l_ssl: f32,
    pub l_sparse: f32,
    pub encoder_updates: NormUpdates,
    pub generator_updates: NormUpdates,
}

/// Inputs to one game step.
#[derive(Debug, Clone, Copy)]
pub struct Views<'t, 'a> {
    /// Anchor view `[B, leads, D]`.
    pub clean: Var<'t>,
    /// Signal seen by the mask generator and masked, usually `clean`.
    pub source: Var<'t>,
    pub mask_index: usize,
    /// One affine map per record applied after masking, or empty.
    pub after: &'a [Affine],
}

impl<'t> Views<'t, 'static> {
    /// Masks `x` itself with mask `mask_index`.
    pub fn new(x: Var<'t>, mask_index: usize) -> Self {
        Self {
            clean: x,
            source: x,
            mask_index,
            after: &[],
        }
    }
}

fn play<'t>(
    models: Models<'_>,
    binds: &Bindings<'t>,
    views: &Views<'t, '_>,
    config: &ObjectiveConfig,
    player: Player,
) -> Result<GameLoss<'t>> {
    let (enc_mode, gen_mode) = match player {
        Player::Encoder => (Mode::Train, Mode::BatchOnly),
        Player::Adversary => (Mode::BatchOnly, Mode::Train),
    };
    let batch = views.clean.shape()[0];
    if views.source.shape() != views.clean.shape() {
        return Err(Error::shapes(
            "game",
            &[&views.clean.shape(), &views.source.shape()],
        ));
    }
    let (m, generator_updates) =
        models
            .generator
            .forward(&binds.generator, views.source, gen_mode)?;
    let mut x_aug =
        apply_adversarial_mask(views.source, m, views.mask_index, config.binarize_gamma)?;
    if !views.after.is_empty() {
        x_aug = apply_per_record(x_aug, views.after)?;
    }
    let both = Var::concat(&[views.clean, x_aug], 0)?;
    let (h, encoder_updates) = models.encoder.forward(&binds.encoder, both, enc_mode)?;
    let z = models.projector.forward(&binds.projector, h)?;
    let l_ssl = ntxent_loss(
        z.slice(0, 0, batch)?,
        z.slice(0, batch, batch)?,
        config.temperature,
        config.canonical_ntxent,
    )?;
    let l_sparse = sparse_penalty(m, config.penalty_clamp)?;
    let loss = match player {
        Player::Encoder => l_ssl,
        Player::Adversary => l_ssl.sub(l_sparse.scale(config.sparse_weight))?.neg(),
    };
    Ok(GameLoss {
        loss,
        l_ssl: l_ssl.item().unwrap_or(f32::NAN),
        l_sparse: l_sparse.item().unwrap_or(f32::NAN),
        encoder_updates,
        generator_updates,
    })
}

/// Applies `maps[b]` to row `b` of a `[B, leads, D]` variable.
pub fn apply_per_record<'t>(x: Var<'t>, maps: &[Affine]) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[0] != maps.len() {
        return Err(Error::invalid(
            "apply_per_record",
            format!("{} maps for input of shape {shape:?}", maps.len()),
        ));
    }
    let rows = maps
        .iter()
        .enumerate()
        .map(|(b, map)| {
            let row = x.slice(0, b, 1)?.reshape(&shape[1..])?;
            map.apply_var(row)?.reshape(&[1, shape[1], shape[2]])
        })
        .collect::<Result<Vec<_>>>()?;
    Var::concat(&rows, 0)
}

/// Contrastive loss of the encoder on `(x, masked x)` pairs with the mask
/// generator held fixed. `binds` should come from [`Player::Encoder`].
pub fn encoder_loss<'t>(
    models: Models<'_>,
    binds: &Bindings<'t>,
    views: &Views<'t, '_>,
    config: &ObjectiveConfig,
) -> Result<GameLoss<'t>> {
    play(models, binds, views, config, Player::Encoder)
}

/// `−(L_SSL − α·L_sparse)` with the encoder and projector held fixed.
/// `binds` should come from [`Player::Adversary`].
pub fn adversary_loss<'t>(
    models: Models<'_>,
    binds: &Bindings<'t>,
    views: &Views<'t, '_>,
    config: &ObjectiveConfig,
) -> Result<GameLoss<'t>> {
    play(models, binds, views, config, Player::Adversary)
}

/// Contrastive loss on fixed `(x, x_aug)` pairs, for baseline augmentations.
pub fn pair_loss<'t>(
    (encoder, enc_bind): (&Encoder, &Binding<'t>),
    (projector, proj_bind): (&Projector, &Binding<'t>),
    x: Var<'t>,
    x_aug: Var<'t>,
    mode: Mode,
    config: &ObjectiveConfig,
) -> Result<(Var<'t>, NormUpdates)> {
    let batch = x.shape()[0];
    let both = Var::concat(&[x, x_aug], 0)?;
    let (h, updates) = encoder.forward(enc_bind, both, mode)?;
    let z = projector.forward(proj_bind, h)?;
    let loss = ntxent_loss(
        z.slice(0, 0, batch)?,
        z.slice(0, batch, batch)?,
        config.temperature,
        config.canonical_ntxent,
    )?;
    Ok((loss, updates))
}
