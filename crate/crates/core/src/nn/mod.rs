//! Networks built on the tape: a 1-D ResNet-18 encoder with projection
//! head, a 1-D U-Net mask generator and a linear probe.
//!
//! Every network owns a [`ParameterSet`]. A forward pass takes a
//! [`Binding`] of that set on some tape and returns the output [`Var`] plus
//! any batch-norm running-statistic updates, which the caller applies with
//! [`apply_norm_updates`] once the tape is done.

mod encoder;
mod probe;
mod unet;

pub use encoder::{Encoder, EncoderConfig, Projector};
pub use probe::LinearProbe;
pub use unet::{MaskGenerator, MaskGeneratorConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Binding, ParameterSet};
use crate::tensor::{NormSource, NormStats, Tensor, Var};

/// Momentum of batch-norm running estimates.
pub const BN_MOMENTUM: f32 = 0.1;

/// How batch-norm layers behave during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics, running estimates updated.
    Train,
    /// Batch statistics, running estimates left alone.
    BatchOnly,
    /// Running estimates.
    Eval,
}

/// Batch statistics collected during a [`Mode::Train`] forward pass, keyed
/// by batch-norm layer name.
pub type NormUpdates = Vec<(String, NormStats)>;

/// Folds batch statistics into the running estimates of `params`.
pub fn apply_norm_updates(params: &mut ParameterSet, updates: &NormUpdates) -> Result<()> {
    for (name, stats) in updates {
        for (suffix, batch) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            let key = format!("{name}.{suffix}");
            let buf = params.buffer_mut(&key).ok_or_else(|| {
                Error::invalid("apply_norm_updates", format!("unknown buffer {key}"))
            })?;
            for (r, &b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
    Ok(())
}

fn kaiming_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub(crate) fn add_conv(
    ps: &mut ParameterSet,
    rng: &mut impl Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    bias: bool,
) -> Result<()> {
    ps.insert(
        format!("{name}.w"),
        kaiming_uniform(rng, &[c_out, c_in, kernel], c_in * kernel),
    )?;
    if bias {
        ps.insert(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
    }
    Ok(())
}

pub(crate) fn add_bn(ps: &mut ParameterSet, name: &str, channels: usize) -> Result<()> {
    ps.insert(format!("{name}.gamma"), Tensor::ones(&[channels]))?;
    ps.insert(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
    ps.insert_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels]))?;
    ps.insert_buffer(format!("{name}.running_var"), Tensor::ones(&[channels]))
}

/// Weight stored as `[in, out]` so the forward pass is `x · W + b`.
pub(crate) fn add_linear(
    ps: &mut ParameterSet,
    rng: &mut impl Rng,
    name: &str,
    d_in: usize,
    d_out: usize,
) -> Result<()> {
    ps.insert(
        format!("{name}.w"),
        kaiming_uniform(rng, &[d_in, d_out], d_in),
    )?;
    ps.insert(format!("{name}.b"), Tensor::zeros(&[d_out]))
}

/// Per-forward state shared by the layer helpers.
pub(crate) struct Ctx<'a, 't> {
    pub bind: &'a Binding<'t>,
    pub params: &'a ParameterSet,
    pub mode: Mode,
    pub updates: NormUpdates,
}

impl<'a, 't> Ctx<'a, 't> {
    pub fn new(bind: &'a Binding<'t>, params: &'a ParameterSet, mode: Mode) -> Self {
        Self {
            bind,
            params,
            mode,
            updates: Vec::new(),
        }
    }

    pub fn conv(&self, x: Var<'t>, name: &str, stride: usize, padding: usize) -> Result<Var<'t>> {
        let w = self.bind.get(&format!("{name}.w"))?;
        let b = self.bind.get(&format!("{name}.b")).ok();
        x.conv1d(w, b, stride, padding)
    }

    pub fn bn(&mut self, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        let gamma = self.bind.get(&format!("{name}.gamma"))?;
        let beta = self.bind.get(&format!("{name}.beta"))?;
        let (y, stats) = match self.mode {
            Mode::Eval => {
                let buf = |s: &str| {
                    self.params.buffer(&format!("{name}.{s}")).ok_or_else(|| {
                        Error::invalid("batch_norm", format!("missing buffer {name}.{s}"))
                    })
                };
                let (mean, var) = (buf("running_mean")?, buf("running_var")?);
                x.batch_norm(
                    gamma,
                    beta,
                    NormSource::Running {
                        mean: mean.data(),
                        var: var.data(),
                    },
                )?
            }
            Mode::Train | Mode::BatchOnly => x.batch_norm(gamma, beta, NormSource::Batch)?,
        };
        if let (Mode::Train, Some(stats)) = (self.mode, stats) {
            self.updates.push((name.to_string(), stats));
        }
        Ok(y)
    }

    pub fn conv_bn_relu(
        &mut self,
        x: Var<'t>,
        name: &str,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>> {
        let y = self.conv(x, &format!("{name}.conv"), stride, padding)?;
        Ok(self.bn(y, &format!("{name}.bn"))?.relu())
    }

    pub fn linear(&self, x: Var<'t>, name: &str) -> Result<Var<'t>> {
        let w = self.bind.get(&format!("{name}.w"))?;
        let b = self.bind.get(&format!("{name}.b"))?;
        x.matmul(w)?.add(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kaiming_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = kaiming_uniform(&mut rng, &[8, 4, 3], 12);
        let bound = (0.5f32).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut ps = ParameterSet::new();
        add_bn(&mut ps, "bn", 1).unwrap();
        let tape = Tape::new();
        let bind = ps.bind(&tape, true);
        let mut ctx = Ctx::new(&bind, &ps, Mode::Train);
        let x = tape.constant(Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        ctx.bn(x, "bn").unwrap();
        let updates = ctx.updates;
        apply_norm_updates(&mut ps, &updates).unwrap();
        // batch mean 4, unbiased variance 20/3
        let mean = ps.buffer("bn.running_mean").unwrap().data()[0];
        let var = ps.buffer("bn.running_var").unwrap().data()[0];
        assert!((mean - 0.4).abs() < 1e-6);
        assert!((var - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-5);
    }

    #[test]
    fn batch_only_leaves_running_stats() {
        let mut ps = ParameterSet::new();
        add_bn(&mut ps, "bn", 1).unwrap();
        let tape = Tape::new();
        let bind = ps.bind(&tape, true);
        let mut ctx = Ctx::new(&bind, &ps, Mode::BatchOnly);
        let x = tape.constant(Tensor::new(vec![2, 1, 1], vec![1.0, 3.0]).unwrap());
        ctx.bn(x, "bn").unwrap();
        assert!(ctx.updates.is_empty());
    }
}
