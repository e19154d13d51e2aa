use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{add_bn, add_conv, Ctx, Mode, NormUpdates};
use crate::error::{Error, Result};
use crate::params::{Binding, ParameterSet};
use crate::tensor::{Tensor, Var};

const DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskGeneratorConfig {
    pub in_leads: usize,
    pub base_channels: usize,
    pub n_masks: usize,
}

impl Default for MaskGeneratorConfig {
    fn default() -> Self {
        Self {
            in_leads: 12,
            base_channels: 8,
            n_masks: 2,
        }
    }
}

impl MaskGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_leads == 0 || self.base_channels == 0 {
            return Err(Error::invalid(
                "mask_generator_config",
                "leads and channels must be positive",
            ));
        }
        if self.n_masks == 0 || self.n_masks > 12 {
            return Err(Error::invalid(
                "mask_generator_config",
                format!("n_masks must be in 1..=12, got {}", self.n_masks),
            ));
        }
        Ok(())
    }

    fn widths(&self) -> [usize; DEPTH] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }
}

/// 1-D U-Net producing `N` masks per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGenerator {
    pub config: MaskGeneratorConfig,
    pub params: ParameterSet,
}

fn add_double(
    ps: &mut ParameterSet,
    rng: &mut impl Rng,
    name: &str,
    c_in: usize,
    c_out: usize,
) -> Result<()> {
    add_conv(ps, rng, &format!("{name}.0.conv"), c_in, c_out, 3, false)?;
    add_bn(ps, &format!("{name}.0.bn"), c_out)?;
    add_conv(ps, rng, &format!("{name}.1.conv"), c_out, c_out, 3, false)?;
    add_bn(ps, &format!("{name}.1.bn"), c_out)
}

fn double<'t>(ctx: &mut Ctx<'_, 't>, x: Var<'t>, name: &str) -> Result<Var<'t>> {
    let y = ctx.conv_bn_relu(x, &format!("{name}.0"), 1, 1)?;
    ctx.conv_bn_relu(y, &format!("{name}.1"), 1, 1)
}

impl MaskGenerator {
    pub fn new(config: MaskGeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut ps = ParameterSet::new();
        let w = config.widths();
        let mut c_in = config.in_leads;
        for (i, &c) in w.iter().enumerate() {
            add_double(&mut ps, rng, &format!("down{i}"), c_in, c)?;
            c_in = c;
        }
        add_double(&mut ps, rng, "bottleneck", w[3], w[3])?;
        // decoder level i takes the upsampled input plus the skip of width w[i]
        let mut c_up = w[3];
        for i in (0..DEPTH).rev() {
            let c_out = if i == 0 { w[0] } else { w[i - 1] };
            add_double(&mut ps, rng, &format!("up{i}"), c_up + w[i], c_out)?;
            c_up = c_out;
        }
        add_conv(&mut ps, rng, "head", w[0], config.n_masks, 1, true)?;
        Ok(Self { config, params: ps })
    }

    /// `x: [B, leads, D]` → masks `[B, N, D]` with values in `[0, 1]`.
    /// Lengths that are not a multiple of 16 are zero-padded on the right
    /// and the output is cropped back to `D`.
    pub fn forward<'t>(
        &self,
        bind: &Binding<'t>,
        x: Var<'t>,
        mode: Mode,
    ) -> Result<(Var<'t>, NormUpdates)> {
        let shape = x.shape();
        let (batch, len) = match shape[..] {
            [b, leads, d] if leads == self.config.in_leads && d > 0 => (b, d),
            _ => return Err(Error::shapes("mask_generator_forward", &[&shape])),
        };
        let unit = 1 << DEPTH;
        let padded = len.div_ceil(unit) * unit;
        let x = if padded != len {
            let pad =
                x.tape()
                    .constant(Tensor::zeros(&[batch, self.config.in_leads, padded - len]));
            Var::concat(&[x, pad], 2)?
        } else {
            x
        };

        let mut ctx = Ctx::new(bind, &self.params, mode);
        let mut skips = Vec::with_capacity(DEPTH);
        let mut y = x;
        for i in 0..DEPTH {
            let s = double(&mut ctx, y, &format!("down{i}"))?;
            y = s.max_pool1d(2, 2, 0)?;
            skips.push(s);
        }
        y = double(&mut ctx, y, "bottleneck")?;
        for i in (0..DEPTH).rev() {
            let up = y.upsample_nearest(2)?;
            y = double(
                &mut ctx,
                Var::concat(&[up, skips[i]], 1)?,
                &format!("up{i}"),
            )?;
        }
        let logits = ctx.conv(y, "head", 1, 0)?;
        let logits = if padded != len {
            logits.slice(2, 0, len)?
        } else {
            logits
        };
        let m = if self.config.n_masks == 1 {
            logits.sigmoid()
        } else {
            logits.softmax(1)?
        };
        Ok((m, ctx.updates))
    }
}
