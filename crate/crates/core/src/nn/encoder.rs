use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_bn, add_conv, add_linear, Ctx, Mode, NormUpdates};
use crate::error::{Error, Result};
use crate::params::{Binding, ParameterSet};
use crate::tensor::{Tape, Tensor, Var};

/// Shortest signal the encoder accepts.
pub const MIN_LENGTH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_leads: usize,
    pub stage_widths: [usize; 4],
    pub blocks_per_stage: usize,
    pub hidden_dim: usize,
    pub projection_dim: usize,
}

impl EncoderConfig {
    /// Widths of the published ResNet-18: 512-dimensional features.
    pub fn full() -> Self {
        Self {
            in_leads: 12,
            stage_widths: [64, 128, 256, 512],
            blocks_per_stage: 2,
            hidden_dim: 512,
            projection_dim: 128,
        }
    }

    /// One eighth of the full widths, for CPU runs.
    pub fn desk() -> Self {
        Self {
            in_leads: 12,
            stage_widths: [8, 16, 32, 64],
            blocks_per_stage: 2,
            hidden_dim: 64,
            projection_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_leads == 0 || self.blocks_per_stage == 0 || self.stage_widths.contains(&0) {
            return Err(Error::invalid(
                "encoder_config",
                "leads, widths and block counts must be positive",
            ));
        }
        if self.hidden_dim != self.stage_widths[3] {
            return Err(Error::invalid(
                "encoder_config",
                format!(
                    "hidden_dim {} must equal the last stage width {}",
                    self.hidden_dim, self.stage_widths[3]
                ),
            ));
        }
        if self.projection_dim == 0 {
            return Err(Error::invalid(
                "encoder_config",
                "projection_dim must be positive",
            ));
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// 1-D ResNet-18 feature extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParameterSet,
}

fn block_name(stage: usize, block: usize) -> String {
    format!("layer{}.{}", stage + 1, block)
}

fn stage_stride(stage: usize) -> usize {
    if stage == 0 {
        1
    } else {
        2
    }
}

impl Encoder {
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParameterSet::new();
        let w = config.stage_widths;
        add_conv(&mut ps, rng, "stem.conv", config.in_leads, w[0], 7, false)?;
        add_bn(&mut ps, "stem.bn", w[0])?;
        let mut c_in = w[0];
        for (s, &c_out) in w.iter().enumerate() {
            for b in 0..config.blocks_per_stage {
                let name = block_name(s, b);
                let stride = if b == 0 { stage_stride(s) } else { 1 };
                add_conv(
                    &mut ps,
                    rng,
                    &format!("{name}.conv1"),
                    c_in,
                    c_out,
                    3,
                    false,
                )?;
                add_bn(&mut ps, &format!("{name}.bn1"), c_out)?;
                add_conv(
                    &mut ps,
                    rng,
                    &format!("{name}.conv2"),
                    c_out,
                    c_out,
                    3,
                    false,
                )?;
                add_bn(&mut ps, &format!("{name}.bn2"), c_out)?;
                if stride != 1 || c_in != c_out {
                    add_conv(
                        &mut ps,
                        rng,
                        &format!("{name}.down.conv"),
                        c_in,
                        c_out,
                        1,
                        false,
                    )?;
                    add_bn(&mut ps, &format!("{name}.down.bn"), c_out)?;
                }
                c_in = c_out;
            }
        }
        Ok(Self { config, params: ps })
    }

    /// `x: [B, leads, D]` → `h: [B, hidden_dim]`.
    pub fn forward<'t>(
        &self,
        bind: &Binding<'t>,
        x: Var<'t>,
        mode: Mode,
    ) -> Result<(Var<'t>, NormUpdates)> {
        let shape = x.shape();
        match shape[..] {
            [_, leads, len] if leads == self.config.in_leads => {
                if len < MIN_LENGTH {
                    return Err(Error::invalid(
                        "encoder_forward",
                        format!("signal length {len} is below the minimum of {MIN_LENGTH}"),
                    ));
                }
            }
            _ => return Err(Error::shapes("encoder_forward", &[&shape])),
        }
        let mut ctx = Ctx::new(bind, &self.params, mode);
        let mut y = ctx.conv_bn_relu(x, "stem", 2, 3)?;
        y = y.max_pool1d(3, 2, 1)?;
        for s in 0..4 {
            for b in 0..self.config.blocks_per_stage {
                let stride = if b == 0 { stage_stride(s) } else { 1 };
                y = basic_block(&mut ctx, y, &block_name(s, b), stride)?;
            }
        }
        let h = y.global_avg_pool1d()?;
        Ok((h, ctx.updates))
    }

    /// Features of `x` with running statistics and no gradient, evaluated in
    /// chunks of `chunk` rows.
    pub fn embed(&self, x: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = x.shape().first().copied().unwrap_or(0);
        let mut rows = Vec::with_capacity(n * self.config.hidden_dim);
        let mut start = 0;
        while start < n {
            let len = chunk.max(1).min(n - start);
            let tape = Tape::new();
            let bind = self.params.bind(&tape, false);
            let xb = tape.constant(x.clone()).slice(0, start, len)?;
            let (h, _) = self.forward(&bind, xb, Mode::Eval)?;
            rows.extend_from_slice(h.value().data());
            start += len;
        }
        Tensor::new(vec![n, self.config.hidden_dim], rows)
    }
}

fn basic_block<'t>(
    ctx: &mut Ctx<'_, 't>,
    x: Var<'t>,
    name: &str,
    stride: usize,
) -> Result<Var<'t>> {
    let y = ctx.conv(x, &format!("{name}.conv1"), stride, 1)?;
    let y = ctx.bn(y, &format!("{name}.bn1"))?.relu();
    let y = ctx.conv(y, &format!("{name}.conv2"), 1, 1)?;
    let y = ctx.bn(y, &format!("{name}.bn2"))?;
    let skip = if ctx.params.get(&format!("{name}.down.conv.w")).is_some() {
        let s = ctx.conv(x, &format!("{name}.down.conv"), stride, 0)?;
        ctx.bn(s, &format!("{name}.down.bn"))?
    } else {
        x
    };
    Ok(y.add(skip)?.relu())
}

/// Two-layer projection head used only during pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    pub params: ParameterSet,
}

impl Projector {
    pub fn new(config: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParameterSet::new();
        add_linear(&mut ps, rng, "fc1", config.hidden_dim, config.hidden_dim)?;
        add_linear(
            &mut ps,
            rng,
            "fc2",
            config.hidden_dim,
            config.projection_dim,
        )?;
        Ok(Self { params: ps })
    }

    /// `h: [B, hidden]` → `z: [B, projection_dim]`.
    pub fn forward<'t>(&self, bind: &Binding<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let ctx = Ctx::new(bind, &self.params, Mode::Eval);
        let y = ctx.linear(h, "fc1")?.relu();
        ctx.linear(y, "fc2")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    /// Parameter count written out from the topology, block by block.
    fn analytic_count(c: &EncoderConfig) -> usize {
        let w = c.stage_widths;
        let mut n = c.in_leads * w[0] * 7 + 2 * w[0];
        let mut c_in = w[0];
        for (s, &c_out) in w.iter().enumerate() {
            for b in 0..c.blocks_per_stage {
                n += c_in * c_out * 3 + 2 * c_out + c_out * c_out * 3 + 2 * c_out;
                let strided = b == 0 && s > 0;
                if strided || c_in != c_out {
                    n += c_in * c_out + 2 * c_out;
                }
                c_in = c_out;
            }
        }
        n
    }

    #[test]
    fn desk_parameter_count_matches_topology() {
        let enc = Encoder::new(EncoderConfig::desk(), &mut rng()).unwrap();
        assert_eq!(
            enc.params.num_scalars(),
            analytic_count(&EncoderConfig::desk())
        );
        assert_eq!(enc.params.num_scalars(), 61_776);
    }

    #[test]
    fn full_parameter_count_matches_topology() {
        let enc = Encoder::new(EncoderConfig::full(), &mut rng()).unwrap();
        assert_eq!(
            enc.params.num_scalars(),
            analytic_count(&EncoderConfig::full())
        );
    }

    #[test]
    fn hidden_dim_must_match_last_stage() {
        let mut c = EncoderConfig::desk();
        c.hidden_dim = 32;
        assert!(Encoder::new(c, &mut rng()).is_err());
    }

    #[test]
    fn short_signal_rejected_with_minimum() {
        let enc = Encoder::new(EncoderConfig::desk(), &mut rng()).unwrap();
        let tape = Tape::new();
        let bind = enc.params.bind(&tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 12, 16]));
        let err = enc.forward(&bind, x, Mode::Eval).unwrap_err().to_string();
        assert!(err.contains("32"), "{err}");
    }
}
