use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{zscore, Dataset, Gender, Labels, Rhythm, SignalRecord};
use crate::augment::vcg;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named class balances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Balance {
    /// AFIB 36%, GSVT 22%, SB 21%, SR 21%.
    Chapman,
    Uniform,
}

impl Balance {
    /// Proportions in [`Rhythm::ALL`] order.
    pub fn proportions(self) -> [f64; 4] {
        match self {
            Balance::Chapman => [0.36, 0.22, 0.21, 0.21],
            Balance::Uniform => [0.25; 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_records: usize,
    /// Samples per record.
    pub length: usize,
    pub sampling_rate_hz: f32,
    /// AFIB, GSVT, SB, SR.
    pub rhythm_proportions: [f64; 4],
    pub male_fraction: f64,
    /// Std of white measurement noise relative to an R wave of height 1.
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_records: 512,
            length: 256,
            sampling_rate_hz: 125.0,
            rhythm_proportions: Balance::Chapman.proportions(),
            male_fraction: 0.56,
            noise_std: 0.03,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("synthetic", reason));
        if self.n_records == 0 {
            return bad("n_records must be at least 1".into());
        }
        if self.length < 32 {
            return bad(format!(
                "length must be at least 32 samples, got {}",
                self.length
            ));
        }
        if !(self.sampling_rate_hz.is_finite() && self.sampling_rate_hz > 0.0) {
            return bad(format!(
                "sampling rate must be positive, got {}",
                self.sampling_rate_hz
            ));
        }
        let p = &self.rhythm_proportions;
        if p.iter().any(|v| !v.is_finite() || *v < 0.0)
            || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return bad(format!(
                "rhythm proportions must be non-negative and sum to 1, got {p:?}"
            ));
        }
        if !(0.0..=1.0).contains(&self.male_fraction) {
            return bad(format!(
                "male fraction must lie in [0, 1], got {}",
                self.male_fraction
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad(format!(
                "noise std must be non-negative, got {}",
                self.noise_std
            ));
        }
        Ok(())
    }
}

/// Splits `n` by `weights` so the counts sum to `n` (largest remainder).
pub(crate) fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Deterministic labelled dataset of synthetic 12-lead ECGs, z-scored per lead.
pub fn generate_synthetic_ecg(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n_records;

    let mut rhythms: Vec<Rhythm> = apportion(n, &config.rhythm_proportions)
        .into_iter()
        .zip(Rhythm::ALL)
        .flat_map(|(c, r)| std::iter::repeat_n(r, c))
        .collect();
    let males = apportion(n, &[config.male_fraction, 1.0 - config.male_fraction])[0];
    let mut genders: Vec<Gender> = (0..n)
        .map(|i| {
            if i < males {
                Gender::Male
            } else {
                Gender::Female
            }
        })
        .collect();
    rhythms.shuffle(&mut rng);
    genders.shuffle(&mut rng);

    let records = rhythms
        .into_iter()
        .zip(genders)
        .enumerate()
        .map(|(i, (rhythm, gender))| {
            let labels = Labels { rhythm, gender };
            let signal = synth_record(config, labels, &mut rng)?;
            SignalRecord::new(
                format!("syn{i:05}"),
                signal,
                config.sampling_rate_hz,
                Some(labels),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(records, format!("synthetic seed={seed}"))
}

struct Wave {
    /// Seconds relative to the R peak.
    offset: f64,
    width: f64,
    amplitude: f64,
    dipole: [f64; 3],
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| (0..3).map(|k| r[i][k] * v[k]).sum())
}

fn beat_rate<R: Rng + ?Sized>(rhythm: Rhythm, rng: &mut R) -> f64 {
    match rhythm {
        Rhythm::Sb => rng.random_range(40.0..55.0),
        Rhythm::Sr => rng.random_range(60.0..90.0),
        Rhythm::Gsvt => rng.random_range(150.0..200.0),
        Rhythm::Afib => rng.random_range(90.0..140.0),
    }
}

fn synth_record<R: Rng + ?Sized>(
    config: &SyntheticConfig,
    labels: Labels,
    rng: &mut R,
) -> Result<Tensor> {
    let fs = config.sampling_rate_hz as f64;
    let d = config.length;
    let duration = d as f64 / fs;
    let male = labels.gender == Gender::Male;
    let afib = labels.rhythm == Rhythm::Afib;

    let deg = 15f64.to_radians();
    let rot = vcg::rotation(
        rng.random_range(-deg..deg),
        rng.random_range(-deg..deg),
        rng.random_range(-deg..deg),
    );
    let mut jitter = |lo: f64, hi: f64| rng.random_range(lo..hi);
    let qrs = if male { 0.016 } else { 0.011 } * jitter(0.9, 1.1);
    let t_ratio = if male { 0.22 } else { 0.36 } * jitter(0.9, 1.1);
    let mut template = vec![
        Wave {
            offset: -0.025,
            width: qrs * 0.7,
            amplitude: 0.12,
            dipole: unit([-0.4, -0.2, 0.3]),
        },
        Wave {
            offset: 0.0,
            width: qrs,
            amplitude: 1.0,
            dipole: unit([0.7, 0.6, 0.4]),
        },
        Wave {
            offset: 0.03,
            width: qrs * 0.8,
            amplitude: 0.3 * jitter(0.8, 1.2),
            dipole: unit([-0.3, -0.4, -0.8]),
        },
        Wave {
            offset: 0.28,
            width: 0.045,
            amplitude: t_ratio,
            dipole: unit([0.6, 0.5, -0.3]),
        },
    ];
    if !afib {
        template.push(Wave {
            offset: -0.15,
            width: 0.022,
            amplitude: 0.12 * jitter(0.8, 1.2),
            dipole: unit([0.3, 0.6, 0.1]),
        });
    }
    for w in &mut template {
        w.dipole = rotate(&rot, w.dipole);
    }

    let mut xyz = vec![0.0f64; 3 * d];
    let mean_rr = 60.0 / beat_rate(labels.rhythm, rng);
    let mut t = -rng.random_range(0.0..mean_rr) - 0.4;
    while t < duration + 0.4 {
        let rr = if afib {
            60.0 / beat_rate(labels.rhythm, rng)
        } else {
            mean_rr * (1.0 + 0.02 * rng.random_range(-1.0..1.0))
        };
        for w in &template {
            // repolarisation timing scales with the square root of the cycle
            let centre = t + if w.offset > 0.1 {
                w.offset * rr.sqrt()
            } else {
                w.offset
            };
            add_bump(&mut xyz, d, fs, centre, w.width, w.amplitude, w.dipole);
        }
        t += rr;
    }
    if afib {
        let f = rng.random_range(4.0..8.0);
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let dir = unit([
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            1.0,
        ]);
        for i in 0..d {
            let v = 0.06 * (std::f64::consts::TAU * f * i as f64 / fs + phase).sin();
            (0..3).for_each(|a| xyz[a * d + i] += v * dir[a]);
        }
    }

    let vcg_t = Tensor::new(vec![3, d], xyz.iter().map(|&v| v as f32).collect())?;
    let mut ecg = vcg::from_vcg(&vcg_t)?;
    let noise = Normal::new(0.0, config.noise_std)
        .map_err(|e| Error::invalid("synthetic", e.to_string()))?;
    for row in ecg.data_mut().chunks_mut(d) {
        let drift_f = rng.random_range(0.1..0.4);
        let drift_phase = rng.random_range(0.0..std::f64::consts::TAU);
        for (i, v) in row.iter_mut().enumerate() {
            let drift =
                0.05 * (std::f64::consts::TAU * drift_f * i as f64 / fs + drift_phase).sin();
            *v += (noise.sample(rng) + drift) as f32;
        }
    }
    zscore(&mut ecg);
    Ok(ecg)
}

fn add_bump(
    xyz: &mut [f64],
    d: usize,
    fs: f64,
    centre: f64,
    width: f64,
    amplitude: f64,
    dipole: [f64; 3],
) {
    let lo = (((centre - 4.0 * width) * fs).floor().max(0.0)) as usize;
    let hi = (((centre + 4.0 * width) * fs).ceil().max(0.0) as usize).min(d);
    for i in lo..hi {
        let z = (i as f64 / fs - centre) / width;
        let g = amplitude * (-0.5 * z * z).exp();
        (0..3).for_each(|a| xyz[a * d + i] += g * dipole[a]);
    }
}
