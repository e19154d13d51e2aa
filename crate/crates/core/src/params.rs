//! Named, ordered trainable tensors with their gradients and Adam moments.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, AdamState, Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Vec<f32>,
}

/// Trainable parameters plus non-trainable buffers (batch-norm running
/// statistics). Iteration order is insertion order, which makes checkpoints
/// and optimizer state deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    params: IndexMap<String, Param>,
    buffers: IndexMap<String, Tensor>,
    adam: Option<AdamState>,
    adam_config: AdamConfig,
}

impl Default for ParameterSet {
    fn default() -> Self {
        Self::new()
    }
}

impl ParameterSet {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
            adam: None,
            adam_config: AdamConfig::default(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::invalid(
                "parameter_set",
                format!("duplicate name {name}"),
            ));
        }
        let grad = vec![0.0; value.numel()];
        self.params.insert(name, Param { value, grad });
        self.adam = None;
        Ok(())
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) || self.buffers.contains_key(&name) {
            return Err(Error::invalid(
                "parameter_set",
                format!("duplicate name {name}"),
            ));
        }
        self.buffers.insert(name, value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.get(name)
    }

    pub fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.buffers.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameters then buffers, each in insertion order.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter()
            .map(|(n, p)| (n, &p.value))
            .chain(self.buffers())
    }

    /// Overwrites a parameter or buffer value by name; shapes must agree.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = match self.params.get_mut(name) {
            Some(p) => &mut p.value,
            None => self
                .buffers
                .get_mut(name)
                .ok_or_else(|| Error::invalid("parameter_set", format!("unknown tensor {name}")))?,
        };
        if slot.shape() != value.shape() {
            return Err(Error::shapes("assign", &[slot.shape(), value.shape()]));
        }
        *slot = value;
        Ok(())
    }

    /// Records every parameter on `tape` as a leaf. With `trainable = false`
    /// the leaves are constants and receive no gradient.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> Binding<'t> {
        let vars = self
            .params
            .iter()
            .map(|(name, p)| (name.clone(), tape.leaf(p.value.clone(), trainable)))
            .collect();
        Binding { vars }
    }

    /// Adds the gradients of bound leaves into the parameter grad buffers.
    pub fn accumulate_grads(&mut self, binding: &Binding<'_>, grads: &Gradients) -> Result<()> {
        for (name, var) in &binding.vars {
            let Some(g) = grads.get(*var) else { continue };
            let param = self.params.get_mut(name).ok_or_else(|| {
                Error::invalid("accumulate_grads", format!("unknown parameter {name}"))
            })?;
            if g.len() != param.grad.len() {
                return Err(Error::invalid(
                    "accumulate_grads",
                    format!("{name}: gradient length mismatch"),
                ));
            }
            param.grad.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f32 {
        self.params
            .values()
            .flat_map(|p| p.grad.iter())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt() as f32
    }

    pub fn set_adam_config(&mut self, config: AdamConfig) {
        self.adam_config = config;
        self.adam = None;
    }

    pub fn adam_state(&self) -> Option<&AdamState> {
        self.adam.as_ref()
    }

    /// One Adam step using the accumulated gradients. Gradients are left in
    /// place; call [`ParameterSet::zero_grad`] afterwards.
    pub fn adam_step(&mut self, lr: f32) -> Result<()> {
        let config = self.adam_config;
        let adam = self.adam.get_or_insert_with(|| {
            AdamState::new(config, self.params.values().map(|p| p.value.numel()))
        });
        adam.step(
            lr,
            self.params
                .values_mut()
                .map(|p| (p.value.data_mut(), p.grad.as_slice())),
        )
    }

    /// CRC32 over names, shapes and value bits of parameters and buffers.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(&v.to_bits().to_le_bytes());
            }
        }
        h.finalize()
    }
}

/// Parameters of one [`ParameterSet`] recorded on a tape.
pub struct Binding<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> Binding<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("binding", format!("no parameter named {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'t>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}
