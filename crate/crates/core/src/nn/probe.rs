use rand::Rng;

use super::{add_linear, Ctx, Mode};
use crate::error::Result;
use crate::params::{Binding, ParameterSet};
use crate::tensor::Var;

/// Single affine classifier on frozen features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub n_classes: usize,
    pub params: ParameterSet,
}

impl LinearProbe {
    pub fn new(hidden_dim: usize, n_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut params = ParameterSet::new();
        add_linear(&mut params, rng, "fc", hidden_dim, n_classes)?;
        Ok(Self { n_classes, params })
    }

    /// `h: [B, hidden]` → logits `[B, n_classes]`.
    pub fn forward<'t>(&self, bind: &Binding<'t>, h: Var<'t>) -> Result<Var<'t>> {
        Ctx::new(bind, &self.params, Mode::Eval).linear(h, "fc")
    }
}
