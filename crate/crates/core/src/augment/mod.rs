//! Stochastic signal augmentations for `[leads, D]` records.
//!
//! Every augmentation is a pure function of the signal and an RNG. The
//! additive kinds (gaussian, powerline, wander, shift) and the 3KG
//! projection are affine in the signal, so they can also be sampled as an
//! [`Affine`] map and applied on a tape after adversarial masking.

mod masking;
mod noise;
mod stft;
pub mod vcg;

pub use masking::{block_mask, peak_mask, random_mask};
pub use noise::{baseline_shift, baseline_wander, gaussian_noise, powerline_noise};
pub use stft::{istft, stft, stft_spectral_mask, Spectrogram};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::soft_binarize;
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianParams {
    pub sigma: f32,
}

impl Default for GaussianParams {
    fn default() -> Self {
        Self { sigma: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PowerlineParams {
    /// Amplitude is drawn from `U(0, max_amplitude)`.
    pub max_amplitude: f32,
    pub frequency_hz: f32,
    pub harmonics: usize,
    /// Draw the phase from `U(0, 2π)` instead of `N(0, 2π)`.
    pub uniform_phase: bool,
}

impl Default for PowerlineParams {
    fn default() -> Self {
        Self {
            max_amplitude: 0.5,
            frequency_hz: 50.0,
            harmonics: 1,
            uniform_phase: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WanderParams {
    /// `C ~ N(c_mean, c_std²)`.
    pub c_mean: f32,
    pub c_std: f32,
    /// `a ~ U(0, max_amplitude)`.
    pub max_amplitude: f32,
    /// `Δf ~ U(min_df_hz, max_df_hz)`.
    pub min_df_hz: f32,
    pub max_df_hz: f32,
    pub terms: usize,
    pub uniform_phase: bool,
}

impl Default for WanderParams {
    fn default() -> Self {
        Self {
            c_mean: 1.0,
            c_std: 0.5,
            max_amplitude: 0.5,
            min_df_hz: 0.01,
            max_df_hz: 0.2,
            terms: 3,
            uniform_phase: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftParams {
    /// Fraction of each lead that is shifted.
    pub fraction: f32,
    /// Offset magnitude `~ N(mean, std²)`, with a random sign.
    pub mean: f32,
    pub std: f32,
}

impl Default for ShiftParams {
    fn default() -> Self {
        Self {
            fraction: 0.2,
            mean: -0.5,
            std: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskParams {
    pub p: f32,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self { p: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeakmaskParams {
    /// Probability of masking the non-peak regions instead.
    pub complement_prob: f64,
}

impl Default for PeakmaskParams {
    fn default() -> Self {
        Self {
            complement_prob: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StftParams {
    pub window: usize,
    pub hop: usize,
    pub beta_alpha: f32,
    pub beta_beta: f32,
    /// With `false` the spectral mask is all ones.
    pub sample_mask: bool,
}

impl Default for StftParams {
    fn default() -> Self {
        Self {
            window: 64,
            hop: 32,
            beta_alpha: 5.0,
            beta_beta: 2.0,
            sample_mask: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThreeKgParams {
    pub max_angle_deg: f32,
    pub min_scale: f32,
    pub max_scale: f32,
}

impl Default for ThreeKgParams {
    fn default() -> Self {
        Self {
            max_angle_deg: 45.0,
            min_scale: 1.0,
            max_scale: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialParams {
    pub n_masks: usize,
}

impl Default for AdversarialParams {
    fn default() -> Self {
        Self { n_masks: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComposeParams {
    pub steps: Vec<AugmentationSpec>,
}

/// One augmentation and its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AugmentationSpec {
    Gaussian(GaussianParams),
    Powerline(PowerlineParams),
    Stft(StftParams),
    Wander(WanderParams),
    Shift(ShiftParams),
    Mask(MaskParams),
    Blockmask(MaskParams),
    Peakmask(PeakmaskParams),
    Threekg(ThreeKgParams),
    Adversarial(AdversarialParams),
    Compose(ComposeParams),
}

/// Names accepted by [`AugmentationSpec::from_name`].
pub const NAMES: [&str; 10] = [
    "gaussian",
    "powerline",
    "stft",
    "wander",
    "shift",
    "mask",
    "blockmask",
    "peakmask",
    "threekg",
    "adversarial",
];

impl AugmentationSpec {
    /// Default parameters for a kind name; `a+b` composes left to right.
    pub fn from_name(name: &str) -> Result<Self> {
        if name.contains('+') {
            let steps = name
                .split('+')
                .map(|s| Self::from_name(s.trim()))
                .collect::<Result<_>>()?;
            return Ok(Self::Compose(ComposeParams { steps }));
        }
        Ok(match name {
            "gaussian" => Self::Gaussian(Default::default()),
            "powerline" => Self::Powerline(Default::default()),
            "stft" => Self::Stft(Default::default()),
            "wander" => Self::Wander(Default::default()),
            "shift" => Self::Shift(Default::default()),
            "mask" => Self::Mask(Default::default()),
            "blockmask" => Self::Blockmask(Default::default()),
            "peakmask" => Self::Peakmask(Default::default()),
            "threekg" | "3kg" => Self::Threekg(Default::default()),
            "adversarial" => Self::Adversarial(Default::default()),
            other => {
                return Err(Error::invalid(
                    "augmentation",
                    format!(
                        "unknown augmentation {other:?}; valid names: {}",
                        NAMES.join(", ")
                    ),
                ))
            }
        })
    }

    pub fn name(&self) -> String {
        match self {
            Self::Gaussian(_) => "gaussian".into(),
            Self::Powerline(_) => "powerline".into(),
            Self::Stft(_) => "stft".into(),
            Self::Wander(_) => "wander".into(),
            Self::Shift(_) => "shift".into(),
            Self::Mask(_) => "mask".into(),
            Self::Blockmask(_) => "blockmask".into(),
            Self::Peakmask(_) => "peakmask".into(),
            Self::Threekg(_) => "threekg".into(),
            Self::Adversarial(_) => "adversarial".into(),
            Self::Compose(c) => c.steps.iter().map(Self::name).collect::<Vec<_>>().join("+"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |p: f32, what: &str| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::invalid(
                    "augmentation",
                    format!("{what} must lie in [0, 1], got {p}"),
                ))
            }
        };
        match self {
            Self::Gaussian(g) if !(g.sigma >= 0.0) => {
                Err(Error::invalid("augmentation", "sigma must be non-negative"))
            }
            Self::Shift(s) => prob(s.fraction, "shift fraction"),
            Self::Mask(m) | Self::Blockmask(m) => prob(m.p, "mask probability"),
            Self::Peakmask(m) => prob(m.complement_prob as f32, "complement probability"),
            Self::Threekg(t) if !(t.min_scale >= 1.0 && t.max_scale >= t.min_scale) => {
                Err(Error::invalid(
                    "augmentation",
                    "3KG scale range must satisfy 1 <= min <= max",
                ))
            }
            Self::Stft(s) if s.window == 0 || s.hop == 0 => Err(Error::invalid(
                "augmentation",
                "STFT window and hop must be positive",
            )),
            Self::Adversarial(a) if a.n_masks == 0 || a.n_masks > 12 => Err(Error::invalid(
                "augmentation",
                format!("n_masks must be in 1..=12, got {}", a.n_masks),
            )),
            Self::Compose(c) => {
                c.steps.iter().try_for_each(Self::validate)?;
                self.adversarial_plan().map(|_| ())
            }
            _ => Ok(()),
        }
    }

    /// Applies the augmentation to one record `[leads, D]` sampled at `fs`.
    pub fn apply<R: Rng + ?Sized>(&self, x: &Tensor, fs: f32, rng: &mut R) -> Result<Tensor> {
        if x.rank() != 2 {
            return Err(Error::shapes("augment", &[x.shape()]));
        }
        match self {
            Self::Gaussian(p) => gaussian_noise(x, p, rng),
            Self::Powerline(p) => powerline_noise(x, p, fs, rng),
            Self::Stft(p) => stft_spectral_mask(x, p, rng),
            Self::Wander(p) => baseline_wander(x, p, fs, rng),
            Self::Shift(p) => baseline_shift(x, p, rng),
            Self::Mask(p) => random_mask(x, p.p, rng),
            Self::Blockmask(p) => block_mask(x, p.p, rng),
            Self::Peakmask(p) => peak_mask(x, p, rng),
            Self::Threekg(p) => vcg::three_kg(x, p, rng),
            Self::Adversarial(_) => Err(Error::invalid(
                "augment",
                "adversarial masks come from a mask generator; use apply_adversarial_mask",
            )),
            Self::Compose(c) => c
                .steps
                .iter()
                .try_fold(x.clone(), |acc, s| s.apply(&acc, fs, rng)),
        }
    }

    /// Samples the augmentation as an affine map. Only gaussian, powerline,
    /// wander, shift, threekg and compositions of them are affine.
    pub fn sample_affine<R: Rng + ?Sized>(
        &self,
        leads: usize,
        len: usize,
        fs: f32,
        rng: &mut R,
    ) -> Result<Affine> {
        let zeros = Tensor::zeros(&[leads, len]);
        let additive = |t: Result<Tensor>| {
            t.map(|offset| Affine {
                matrix: None,
                offset: Some(offset),
            })
        };
        match self {
            Self::Gaussian(p) => additive(gaussian_noise(&zeros, p, rng)),
            Self::Powerline(p) => additive(powerline_noise(&zeros, p, fs, rng)),
            Self::Wander(p) => additive(baseline_wander(&zeros, p, fs, rng)),
            Self::Shift(p) => additive(baseline_shift(&zeros, p, rng)),
            Self::Threekg(p) => {
                if leads != 12 {
                    return Err(Error::invalid(
                        "threekg",
                        format!("need 12 leads, got {leads}"),
                    ));
                }
                Ok(Affine {
                    matrix: Some(vcg::three_kg_matrix(p, rng)),
                    offset: None,
                })
            }
            Self::Compose(c) => c
                .steps
                .iter()
                .try_fold(Affine::identity(), |acc, s| {
                    Ok(acc.then(&s.sample_affine(leads, len, fs, rng)?))
                })
                .and_then(|a: Affine| a.check(leads, len)),
            other => Err(Error::invalid(
                "augment",
                format!(
                    "{} is not affine and cannot follow adversarial masking",
                    other.name()
                ),
            )),
        }
    }

    /// Splits a spec around its adversarial step: `(n_masks, before, after)`.
    /// `None` when the spec has no adversarial step.
    pub fn adversarial_plan(&self) -> Result<Option<AdversarialPlan>> {
        let steps: Vec<&AugmentationSpec> = match self {
            Self::Compose(c) => c.steps.iter().collect(),
            other => vec![other],
        };
        let positions: Vec<usize> = steps
            .iter()
            .enumerate()
            .filter(|(_, s)| matches!(s, Self::Adversarial(_)))
            .map(|(i, _)| i)
            .collect();
        let &[at] = positions.as_slice() else {
            if positions.is_empty() {
                return Ok(None);
            }
            return Err(Error::invalid(
                "augment",
                "at most one adversarial step is allowed",
            ));
        };
        let Self::Adversarial(params) = steps[at] else {
            unreachable!()
        };
        let before: Vec<AugmentationSpec> = steps[..at].iter().map(|s| (*s).clone()).collect();
        let after: Vec<AugmentationSpec> = steps[at + 1..].iter().map(|s| (*s).clone()).collect();
        for s in &after {
            // probe affinity with a throwaway stream
            s.sample_affine(
                12,
                64,
                125.0,
                &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
            )?;
        }
        Ok(Some(AdversarialPlan {
            n_masks: params.n_masks,
            before: wrap(before),
            after: wrap(after),
        }))
    }
}

fn wrap(steps: Vec<AugmentationSpec>) -> Option<AugmentationSpec> {
    match steps.len() {
        0 => None,
        1 => steps.into_iter().next(),
        _ => Some(AugmentationSpec::Compose(ComposeParams { steps })),
    }
}

/// An augmentation chain containing adversarial masking.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialPlan {
    pub n_masks: usize,
    /// Applied to the signal before the mask generator sees it.
    pub before: Option<AugmentationSpec>,
    /// Affine steps applied after masking.
    pub after: Option<AugmentationSpec>,
}

/// `x ↦ M·x + o` on a `[leads, D]` record.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `[leads, leads]`, identity when `None`.
    pub matrix: Option<Tensor>,
    /// `[leads, D]`, zero when `None`.
    pub offset: Option<Tensor>,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            matrix: None,
            offset: None,
        }
    }

    /// `other ∘ self`: first `self`, then `other`.
    pub fn then(self, other: &Affine) -> Affine {
        let matrix = match (&other.matrix, self.matrix) {
            (None, m) => m,
            (Some(b), None) => Some(b.clone()),
            (Some(b), Some(a)) => Some(matmul(b, &a)),
        };
        let moved = match (&other.matrix, self.offset) {
            (Some(b), Some(o)) => Some(matmul(b, &o)),
            (_, o) => o,
        };
        let offset = match (moved, &other.offset) {
            (None, o) => o.clone(),
            (Some(a), None) => Some(a),
            (Some(a), Some(b)) => Some(
                Tensor::new(
                    a.shape().to_vec(),
                    a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
                )
                .expect("equal shapes"),
            ),
        };
        Affine { matrix, offset }
    }

    fn check(self, leads: usize, len: usize) -> Result<Self> {
        let ok_m = self
            .matrix
            .as_ref()
            .is_none_or(|m| m.shape() == [leads, leads]);
        let ok_o = self
            .offset
            .as_ref()
            .is_none_or(|o| o.shape() == [leads, len]);
        if ok_m && ok_o {
            Ok(self)
        } else {
            Err(Error::invalid(
                "affine",
                "sampled map does not fit the record shape",
            ))
        }
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = match &self.matrix {
            Some(m) => {
                if x.rank() != 2 || m.shape()[1] != x.shape()[0] {
                    return Err(Error::shapes("affine", &[m.shape(), x.shape()]));
                }
                matmul(m, x)
            }
            None => x.clone(),
        };
        if let Some(o) = &self.offset {
            if o.shape() != y.shape() {
                return Err(Error::shapes("affine", &[o.shape(), y.shape()]));
            }
            y.data_mut()
                .iter_mut()
                .zip(o.data())
                .for_each(|(a, b)| *a += b);
        }
        Ok(y)
    }

    /// Applies the map to a `[leads, D]` variable.
    pub fn apply_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        let mut y = x;
        if let Some(m) = &self.matrix {
            y = tape.constant(m.clone()).matmul(y)?;
        }
        if let Some(o) = &self.offset {
            y = y.add(tape.constant(o.clone()))?;
        }
        Ok(y)
    }
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k) = (a.shape()[0], a.shape()[1]);
    let m = b.shape()[1];
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a.data()[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b.data()[p * m..(p + 1) * m];
            out[i * m..(i + 1) * m]
                .iter_mut()
                .zip(row)
                .for_each(|(o, &bv)| *o += av * bv);
        }
    }
    Tensor::new(vec![n, m], out).expect("shapes agree")
}

/// Applies generator masks `m: [B, N, D]` to `x: [B, leads, D]`. With
/// `N == 12` mask `n` gates lead `n`; otherwise mask `index` gates every
/// lead. Masks are soft-binarised with `gamma` first.
pub fn apply_adversarial_mask<'t>(
    x: Var<'t>,
    m: Var<'t>,
    index: usize,
    gamma: f32,
) -> Result<Var<'t>> {
    let (xs, ms) = (x.shape(), m.shape());
    let (&[b, leads, d], &[mb, n, md]) = (xs.as_slice(), ms.as_slice()) else {
        return Err(Error::shapes("apply_adversarial_mask", &[&xs, &ms]));
    };
    if b != mb || d != md {
        return Err(Error::shapes("apply_adversarial_mask", &[&xs, &ms]));
    }
    match n {
        12 if leads == 12 => x.mul(soft_binarize(m, gamma)),
        12 => Err(Error::invalid(
            "apply_adversarial_mask",
            format!("12 per-lead masks need 12 leads, got {leads}"),
        )),
        1..12 => {
            if index >= n {
                return Err(Error::invalid(
                    "apply_adversarial_mask",
                    format!("mask index {index} out of range for {n} masks"),
                ));
            }
            x.mul(soft_binarize(m.slice(1, index, 1)?, gamma))
        }
        _ => Err(Error::invalid(
            "apply_adversarial_mask",
            format!("n_masks must be in 1..=12, got {n}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_round_trip() {
        for name in NAMES {
            assert_eq!(AugmentationSpec::from_name(name).unwrap().name(), name);
        }
        let err = AugmentationSpec::from_name("jitter")
            .unwrap_err()
            .to_string();
        assert!(err.contains("blockmask"), "{err}");
    }

    #[test]
    fn serde_tagged_with_defaults() {
        let spec: AugmentationSpec = serde_json::from_str(r#"{"kind":"mask","p":0.3}"#).unwrap();
        assert_eq!(spec, AugmentationSpec::Mask(MaskParams { p: 0.3 }));
        let spec: AugmentationSpec = serde_json::from_str(r#"{"kind":"gaussian"}"#).unwrap();
        assert_eq!(
            spec,
            AugmentationSpec::Gaussian(GaussianParams { sigma: 0.05 })
        );
        assert!(serde_json::from_str::<AugmentationSpec>(r#"{"kind":"mask","q":0.3}"#).is_err());
        let chain = AugmentationSpec::from_name("adversarial+threekg").unwrap();
        let text = serde_json::to_string(&chain).unwrap();
        assert_eq!(
            serde_json::from_str::<AugmentationSpec>(&text).unwrap(),
            chain
        );
    }

    #[test]
    fn adversarial_plan_splits_chain() {
        let plan = AugmentationSpec::from_name("gaussian+adversarial+threekg")
            .unwrap()
            .adversarial_plan()
            .unwrap()
            .unwrap();
        assert_eq!(plan.n_masks, 2);
        assert_eq!(plan.before.unwrap().name(), "gaussian");
        assert_eq!(plan.after.unwrap().name(), "threekg");
        assert!(AugmentationSpec::from_name("adversarial+mask")
            .unwrap()
            .validate()
            .is_err());
        assert!(AugmentationSpec::from_name("blockmask")
            .unwrap()
            .adversarial_plan()
            .unwrap()
            .is_none());
    }

    #[test]
    fn affine_matches_direct_application() {
        let spec = AugmentationSpec::from_name("threekg+gaussian").unwrap();
        let mut data_rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(
            vec![12, 40],
            (0..480).map(|_| data_rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let direct = spec
            .apply(&x, 125.0, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let affine = spec
            .sample_affine(12, 40, 125.0, &mut ChaCha8Rng::seed_from_u64(9))
            .unwrap();
        let via = affine.apply(&x).unwrap();
        for (a, b) in direct.data().iter().zip(via.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
