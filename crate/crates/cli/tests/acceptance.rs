//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr (visible even when output is captured) and then asserts.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use advmask::augment::{
    apply_adversarial_mask, vcg, AugmentationSpec, GaussianParams, MaskParams, PowerlineParams,
    ShiftParams, StftParams, ThreeKgParams, WanderParams,
};
use advmask::data::{
    generate_synthetic_ecg, split_dataset, Dataset, SplitFractions, SyntheticConfig,
};
use advmask::gradcheck;
use advmask::nn::{Encoder, EncoderConfig, Mode};
use advmask::objectives::{cross_entropy, ntxent_loss, pair_loss, soft_binarize, sparse_penalty};
use advmask::tensor::{NormSource, Tape, Tensor, Var};
use advmask::training::{
    pretrain, train_scratch, transfer_train, PreparedBatch, PretrainConfig, Pretrainer,
    TransferConfig,
};
use advmask::Result;
use advmask_cli::{cmd_gen_data, cmd_pretrain, GenDataArgs, GlobalArgs, PretrainArgs, RunConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 3] = [0, 1, 2];

fn report(id: u32, title: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance] criterion {id} {verdict}: {title} ({detail})"
    );
    assert!(pass, "criterion {id} failed: {detail}");
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f32, hi: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Distinct values on a 0.05 grid, so max-pool ties and clamp kinks stay
/// further than the step size away.
fn grid(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| i as f32 * 0.05 - 1.0).collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

fn signed_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.05f32..1.0);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Default)]
struct GradAudit {
    worst: Vec<(&'static str, f64, usize)>,
}

impl GradAudit {
    fn record(&mut self, name: &'static str, err: f64) {
        match self.worst.iter_mut().find(|w| w.0 == name) {
            Some(w) => {
                w.1 = w.1.max(err);
                w.2 += 1;
            }
            None => self.worst.push((name, err, 1)),
        }
    }

    fn full<F>(&mut self, name: &'static str, inputs: &[Tensor], f: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let r = gradcheck::check(inputs, 1e-3, f).unwrap();
        self.record(name, r.max_rel_error());
    }

    fn directional<F>(&mut self, name: &'static str, inputs: &[Tensor], seed: u64, f: F)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let err = gradcheck::check_directional(inputs, 1e-3, 3, seed, f).unwrap();
        self.record(name, err);
    }
}

#[test]
fn criterion_1_gradient_checks() {
    let start = Instant::now();
    let mut audit = GradAudit::default();
    for seed in 0..20u64 {
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let a = random(&[2, 3, 4], rng, -1.0, 1.0);
        let b = random(&[3, 1], rng, -1.0, 1.0);
        let pos = random(&[1, 4], rng, 0.5, 2.0);
        audit.full("add", &[a.clone(), b.clone()], |_, v| v[0].add(v[1]));
        audit.full("sub", &[a.clone(), b.clone()], |_, v| v[0].sub(v[1]));
        audit.full("mul", &[a.clone(), b.clone()], |_, v| v[0].mul(v[1]));
        audit.full("div", &[a.clone(), pos], |_, v| v[0].div(v[1]));

        let x = signed_away_from_zero(&[3, 5], rng);
        let p = random(&[3, 5], rng, 0.3, 2.0);
        audit.full("scale", std::slice::from_ref(&x), |_, v| {
            Ok(v[0].scale(-2.5))
        });
        audit.full("neg", std::slice::from_ref(&x), |_, v| Ok(v[0].neg()));
        audit.full("add_scalar", std::slice::from_ref(&x), |_, v| {
            Ok(v[0].add_scalar(0.7))
        });
        audit.full("relu", std::slice::from_ref(&x), |_, v| Ok(v[0].relu()));
        audit.full("sigmoid", std::slice::from_ref(&x), |_, v| {
            Ok(v[0].sigmoid())
        });
        audit.full("exp", std::slice::from_ref(&x), |_, v| Ok(v[0].exp()));
        audit.full("sin", std::slice::from_ref(&x), |_, v| Ok(v[0].sin()));
        audit.full("ln", std::slice::from_ref(&p), |_, v| Ok(v[0].ln()));
        audit.full("sqrt", &[p], |_, v| Ok(v[0].sqrt()));
        audit.full("clamp", &[grid(&[3, 5], rng)], |_, v| {
            Ok(v[0].clamp(-0.525, 0.475))
        });

        let x = random(&[2, 4, 3], rng, -2.0, 2.0);
        audit.full("sum", std::slice::from_ref(&x), |_, v| {
            v[0].scale(0.5).sum()
        });
        audit.full("mean", std::slice::from_ref(&x), |_, v| v[0].exp().mean());
        for axis in 0..3 {
            audit.full("sum_axis", std::slice::from_ref(&x), |_, v| {
                v[0].sum_axis(axis, axis == 1)
            });
            audit.full("softmax", std::slice::from_ref(&x), |_, v| {
                v[0].softmax(axis)
            });
            audit.full("log_softmax", std::slice::from_ref(&x), |_, v| {
                v[0].log_softmax(axis)
            });
        }

        let m = random(&[3, 4], rng, -1.0, 1.0);
        let w = random(&[4, 2], rng, -1.0, 1.0);
        audit.full("matmul", &[m.clone(), w], |_, v| v[0].matmul(v[1]));
        audit.full("transpose", &[m], |_, v| v[0].transpose());

        let (stride, padding) = (1 + seed as usize % 2, seed as usize % 3);
        let x = random(&[2, 3, 9], rng, -1.0, 1.0);
        let w = random(&[4, 3, 3], rng, -1.0, 1.0);
        let bias = random(&[4], rng, -1.0, 1.0);
        audit.full("conv1d", &[x, w, bias], |_, v| {
            v[0].conv1d(v[1], Some(v[2]), stride, padding)
        });

        let x = grid(&[2, 3, 10], rng);
        audit.full("max_pool1d", std::slice::from_ref(&x), |_, v| {
            v[0].max_pool1d(3, 2, 1)
        });
        audit.full("avg_pool1d", std::slice::from_ref(&x), |_, v| {
            v[0].avg_pool1d(2, 2)
        });
        audit.full("global_avg_pool1d", std::slice::from_ref(&x), |_, v| {
            v[0].global_avg_pool1d()
        });
        audit.full("upsample_nearest", &[x], |_, v| v[0].upsample_nearest(2));

        let x = random(&[3, 2, 5], rng, -2.0, 2.0);
        let gamma = random(&[2], rng, 0.5, 1.5);
        let beta = random(&[2], rng, -0.5, 0.5);
        audit.full(
            "batch_norm",
            &[x.clone(), gamma.clone(), beta.clone()],
            |_, v| Ok(v[0].batch_norm(v[1], v[2], NormSource::Batch)?.0),
        );
        let (mean, var) = ([0.1, -0.2], [0.8, 1.3]);
        audit.full("batch_norm", &[x, gamma, beta], |_, v| {
            Ok(v[0]
                .batch_norm(
                    v[1],
                    v[2],
                    NormSource::Running {
                        mean: &mean,
                        var: &var,
                    },
                )?
                .0)
        });

        let a = random(&[2, 3, 4], rng, -1.0, 1.0);
        let b = random(&[2, 1, 4], rng, -1.0, 1.0);
        audit.full("concat", &[a.clone(), b], |_, v| {
            Var::concat(&[v[0], v[1], v[0]], 1)
        });
        audit.full("slice", std::slice::from_ref(&a), |_, v| {
            v[0].slice(2, 1, 2)
        });
        audit.full("reshape", &[a], |_, v| v[0].reshape(&[6, 4]));

        // composite losses
        let z = random(&[3, 4], rng, -1.0, 1.0);
        let za = random(&[3, 4], rng, -1.0, 1.0);
        audit.directional("ntxent", &[z, za], seed, |_, v| {
            ntxent_loss(v[0], v[1], 0.1, false)
        });
        let m = random(&[2, 3, 5], rng, 0.35, 0.65);
        audit.full("soft_binarize", &[m], |_, v| Ok(soft_binarize(v[0], 25.0)));
        let m = random(&[2, 3, 5], rng, 0.1, 0.4);
        audit.full("sparse_penalty", &[m], |_, v| sparse_penalty(v[0], 1e3));
        let logits = random(&[4, 3], rng, -2.0, 2.0);
        let targets: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        audit.full("cross_entropy", &[logits], |_, v| {
            cross_entropy(v[0], &targets)
        });

        // the adversary objective end to end: masked view through a shared
        // linear projection, contrastive term plus sparsity penalty
        let x = random(&[3, 8], rng, -1.0, 1.0);
        let m = random(&[3, 8], rng, 0.4, 0.6);
        let w = random(&[8, 4], rng, -0.5, 0.5);
        audit.directional("adversary_objective", &[x, m, w], seed, |_, v| {
            let z = v[0].matmul(v[2])?;
            let za = v[0].mul(soft_binarize(v[1], 25.0))?.matmul(v[2])?;
            let l = ntxent_loss(z, za, 0.1, false)?.neg();
            l.add(sparse_penalty(v[1].reshape(&[3, 1, 8])?, 1e3)?.scale(0.1))
        });
    }
    let elapsed = start.elapsed().as_secs_f64();
    let failing: Vec<String> = audit
        .worst
        .iter()
        .filter(|w| w.1.is_nan() || w.1 > 1e-3)
        .map(|w| format!("{} {:.2e}", w.0, w.1))
        .collect();
    let worst = audit.worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let thin = audit
        .worst
        .iter()
        .filter(|w| w.2 < 20)
        .map(|w| w.0)
        .collect::<Vec<_>>();
    report(
        1,
        "finite-difference gradient checks",
        failing.is_empty() && thin.is_empty() && elapsed < 120.0,
        &format!(
            "{} ops/losses x >=20 instances, worst rel err {worst:.2e}, {elapsed:.1}s; failing {failing:?}; under-sampled {thin:?}",
            audit.worst.len()
        ),
    );
}

fn ntxent_oracle(z: &Tensor, za: &Tensor, tau: f64, canonical: bool) -> f64 {
    let (b, p) = (z.shape()[0], z.shape()[1]);
    let row = |t: &Tensor, i: usize| -> Vec<f64> {
        t.data()[i * p..(i + 1) * p]
            .iter()
            .map(|&v| v as f64)
            .collect()
    };
    let cos = |a: &[f64], c: &[f64]| {
        let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nc = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nc)
    };
    let mut total = 0.0;
    for i in 0..b {
        let anchor = row(z, i);
        let positive = cos(&anchor, &row(za, i)) / tau;
        let mut denom = 0.0;
        for j in 0..b {
            if j != i || canonical {
                denom += (cos(&anchor, &row(za, j)) / tau).exp();
            }
        }
        total -= (positive.exp() / denom).ln();
    }
    total / b as f64
}

#[test]
fn criterion_2_loss_oracles() {
    let rng = &mut ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::new();
    let mut worst_ntxent = 0.0f64;
    for b in [2, 4, 8] {
        for canonical in [false, true] {
            for _ in 0..10 {
                let z = random(&[b, 16], rng, -1.0, 1.0);
                let za = random(&[b, 16], rng, -1.0, 1.0);
                let got = ntxent_loss(
                    tape.constant(z.clone()),
                    tape.constant(za.clone()),
                    0.1,
                    canonical,
                )
                .unwrap()
                .item()
                .unwrap() as f64;
                worst_ntxent =
                    worst_ntxent.max((got - ntxent_oracle(&z, &za, 0.1, canonical)).abs());
            }
        }
    }

    let m = random(&[1, 2, 64], rng, 0.0, 1.0);
    let got = soft_binarize(tape.constant(m.clone()), 25.0).value();
    let worst_binarize = m
        .data()
        .iter()
        .zip(got.data())
        .map(|(&v, &g)| (g as f64 - 1.0 / (1.0 + (-25.0 * (v as f64 - 0.5)).exp())).abs())
        .fold(0.0, f64::max);
    let b0 = soft_binarize(tape.constant(Tensor::from_vec(vec![0.0])), 25.0)
        .item()
        .unwrap() as f64;
    let b0_ok = (b0 - 3.7266e-6).abs() <= 1e-3 * 3.7266e-6;

    let penalty = |data: Vec<f32>| {
        let d = data.len();
        sparse_penalty(
            tape.constant(Tensor::new(vec![1, 1, d], data).unwrap()),
            1e3,
        )
        .unwrap()
        .item()
        .unwrap() as f64
    };
    let half = penalty(vec![0.5; 64]);
    let quarter = penalty(
        (0..64)
            .map(|t| if t % 4 == 0 { 1.0 } else { 0.0 })
            .collect(),
    );
    let mut worst_sym = 0.0f64;
    for _ in 0..50 {
        let m = random(&[2, 3, 32], rng, 0.0, 1.0);
        let a = sparse_penalty(tape.constant(m.clone()), 1e3)
            .unwrap()
            .item()
            .unwrap() as f64;
        let b = sparse_penalty(tape.constant(m.map(|v| 1.0 - v)), 1e3)
            .unwrap()
            .item()
            .unwrap() as f64;
        worst_sym = worst_sym.max((a - b).abs());
    }
    let pass = worst_ntxent <= 1e-5
        && worst_binarize <= 1e-6
        && b0_ok
        && (half - 1.0).abs() <= 1e-5
        && (quarter - std::f64::consts::SQRT_2).abs() <= 1e-4
        && worst_sym <= 1e-6;
    report(
        2,
        "loss oracles",
        pass,
        &format!(
            "ntxent err {worst_ntxent:.1e}, binarize err {worst_binarize:.1e}, b(0;25)={b0:.4e}, \
             penalty(0.5)={half:.6}, penalty(0.25)={quarter:.6}, symmetry err {worst_sym:.1e}"
        ),
    );
}

fn signal(leads: usize, len: usize, seed: u64) -> Tensor {
    random(
        &[leads, len],
        &mut ChaCha8Rng::seed_from_u64(seed),
        -1.0,
        1.0,
    )
}

/// Least-squares VCG of a record in the image of the Dower projection.
fn recovered_vcg(y: &Tensor) -> Vec<[f64; 3]> {
    const INDEPENDENT: [usize; 8] = [6, 7, 8, 9, 10, 11, 0, 1];
    let d = y.shape()[1];
    let mut gram = [[0.0f64; 3]; 3];
    for row in vcg::DOWER {
        for i in 0..3 {
            for j in 0..3 {
                gram[i][j] += row[i] * row[j];
            }
        }
    }
    let det = |m: &[[f64; 3]; 3]| {
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    };
    let g = det(&gram);
    (0..d)
        .map(|t| {
            let mut rhs = [0.0f64; 3];
            for (row, lead) in vcg::DOWER.iter().zip(INDEPENDENT) {
                for a in 0..3 {
                    rhs[a] += row[a] * y.data()[lead * d + t] as f64;
                }
            }
            // Cramer's rule
            let mut v = [0.0; 3];
            for (k, out) in v.iter_mut().enumerate() {
                let mut m = gram;
                for r in 0..3 {
                    m[r][k] = rhs[r];
                }
                *out = det(&m) / g;
            }
            v
        })
        .collect()
}

fn dominant_hz(x: &[f64], fs: f64) -> f64 {
    let n = x.len();
    let power = |k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let phase = -2.0 * std::f64::consts::PI * (k * t) as f64 / n as f64;
            re += v * phase.cos();
            im += v * phase.sin();
        }
        re * re + im * im
    };
    let k = (1..n / 2)
        .max_by(|&a, &b| power(a).total_cmp(&power(b)))
        .unwrap();
    k as f64 * fs / n as f64
}

#[test]
fn criterion_3_augmentation_invariants() {
    const FS: f32 = 500.0;
    let mut notes = Vec::new();
    let mut pass = true;

    let x = signal(12, 256, 1);
    let zero = [
        AugmentationSpec::Gaussian(GaussianParams { sigma: 0.0 }),
        AugmentationSpec::Powerline(PowerlineParams {
            max_amplitude: 0.0,
            ..Default::default()
        }),
        AugmentationSpec::Wander(WanderParams {
            c_mean: 0.0,
            c_std: 0.0,
            ..Default::default()
        }),
        AugmentationSpec::Shift(ShiftParams {
            mean: 0.0,
            std: 0.0,
            ..Default::default()
        }),
        AugmentationSpec::Mask(MaskParams { p: 0.0 }),
        AugmentationSpec::Blockmask(MaskParams { p: 0.0 }),
    ];
    let not_identity: Vec<String> = zero
        .iter()
        .filter(|s| {
            (0..5).any(|seed| {
                s.apply(&x, FS, &mut ChaCha8Rng::seed_from_u64(seed))
                    .unwrap()
                    != x
            })
        })
        .map(|s| s.name())
        .collect();
    pass &= not_identity.is_empty();
    notes.push(format!("zero-amplitude non-identities {not_identity:?}"));

    let ones = Tensor::full(&[1, 100_000], 1.0);
    let y = AugmentationSpec::Mask(MaskParams { p: 0.2 })
        .apply(&ones, FS, &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let rate = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
    pass &= (rate - 0.2).abs() <= 0.01;
    notes.push(format!("mask rate {rate:.4}"));

    let x = signal(12, 1000, 4);
    let y = AugmentationSpec::Stft(StftParams {
        sample_mask: false,
        ..Default::default()
    })
    .apply(&x, FS, &mut ChaCha8Rng::seed_from_u64(5))
    .unwrap();
    let sq: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    let rms = (sq / x.data().len() as f64).sqrt();
    pass &= rms <= 1e-3;
    notes.push(format!("stft rms {rms:.1e}"));

    let x = signal(12, 128, 6);
    let before = vcg::to_vcg(&x).unwrap();
    let spec = AugmentationSpec::Threekg(ThreeKgParams {
        min_scale: 1.0,
        max_scale: 1.0,
        ..Default::default()
    });
    let mut worst_norm = 0.0f64;
    for seed in 0..10 {
        let y = spec
            .apply(&x, FS, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        for (t, v) in recovered_vcg(&y).iter().enumerate() {
            let norm = |w: &[f64]| w.iter().map(|a| a * a).sum::<f64>().sqrt();
            let want = norm(
                &(0..3)
                    .map(|a| before.data()[a * 128 + t] as f64)
                    .collect::<Vec<_>>(),
            );
            worst_norm = worst_norm.max((norm(v) - want).abs() / want.max(1.0));
        }
    }
    pass &= worst_norm <= 1e-5;
    notes.push(format!("3KG norm err {worst_norm:.1e}"));

    let x = signal(12, 1000, 7);
    let spec = AugmentationSpec::Powerline(PowerlineParams {
        max_amplitude: 0.5,
        ..Default::default()
    });
    let mut peaks = Vec::new();
    for seed in 0..3 {
        let y = spec
            .apply(&x, FS, &mut ChaCha8Rng::seed_from_u64(seed))
            .unwrap();
        let d: Vec<f64> = (0..1000)
            .map(|t| (y.data()[t] - x.data()[t]) as f64)
            .collect();
        peaks.push(dominant_hz(&d, FS as f64));
    }
    pass &= peaks.iter().all(|&hz| hz == 50.0);
    notes.push(format!("powerline peaks {peaks:?} Hz"));

    report(3, "augmentation invariants", pass, &notes.join(", "));
}

/// Mean contrastive loss of generator masks and of Bernoulli masks that keep
/// the same fraction of timesteps, over both mask indices.
fn adversarial_vs_random(
    tr: &Pretrainer,
    batches: &[PreparedBatch],
    rng: &mut ChaCha8Rng,
) -> (f64, f64) {
    let generator = tr.generator.as_ref().unwrap();
    let n_masks = generator.config.n_masks;
    let gamma = tr.config.objective.binarize_gamma;
    let (mut adv, mut rnd, mut k) = (0.0, 0.0, 0.0);
    for batch in batches {
        for index in 0..n_masks {
            let tape = Tape::new();
            let eb = tr.encoder.params.bind(&tape, false);
            let pb = tr.projector.params.bind(&tape, false);
            let gb = generator.params.bind(&tape, false);
            let x = tape.constant(batch.clean.clone());
            let (m, _) = generator.forward(&gb, x, Mode::BatchOnly).unwrap();
            let xa = apply_adversarial_mask(x, m, index, gamma).unwrap();
            let enc = (&tr.encoder, &eb);
            let proj = (&tr.projector, &pb);
            let (l, _) =
                pair_loss(enc, proj, x, xa, Mode::BatchOnly, &tr.config.objective).unwrap();
            adv += l.item().unwrap() as f64;

            let mv = m.value();
            let (b, n, d) = (mv.shape()[0], mv.shape()[1], mv.shape()[2]);
            let leads = batch.clean.shape()[1];
            let mut keep = vec![0.0f32; b * leads * d];
            for r in 0..b {
                let row = &mv.data()[(r * n + index) * d..(r * n + index + 1) * d];
                let frac = row
                    .iter()
                    .map(|&v| 1.0 / (1.0 + (-gamma * (v - 0.5)).exp()))
                    .sum::<f32>()
                    / d as f32;
                for t in 0..d {
                    let on = if rng.random::<f32>() < frac { 1.0 } else { 0.0 };
                    for l in 0..leads {
                        keep[(r * leads + l) * d + t] = on;
                    }
                }
            }
            let xr = x
                .mul(tape.constant(Tensor::new(vec![b, leads, d], keep).unwrap()))
                .unwrap();
            let (l, _) =
                pair_loss(enc, proj, x, xr, Mode::BatchOnly, &tr.config.objective).unwrap();
            rnd += l.item().unwrap() as f64;
            k += 1.0;
        }
    }
    (adv / k, rnd / k)
}

#[test]
fn criterion_4_adversary_beats_matched_random_masks() {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in SEEDS {
        let ds = generate_synthetic_ecg(&SyntheticConfig::default(), seed).unwrap();
        let pool: Vec<usize> = (0..ds.len()).collect();
        let config = PretrainConfig {
            seed,
            lr_encoder: 1e-3,
            lr_adversary: 1e-3,
            ..Default::default()
        };
        let mut tr = Pretrainer::new(config).unwrap();
        for _ in 0..5 {
            tr.run_epoch(&ds, &pool).unwrap();
        }
        // the encoder is frozen from here on; only the generator moves
        tr.config.lr_adversary = 2e-2;
        let rng = &mut ChaCha8Rng::seed_from_u64(seed + 77);
        let mut order = pool.clone();
        order.shuffle(rng);
        let eval: Vec<PreparedBatch> = order
            .chunks(32)
            .take(16)
            .map(|c| tr.prepare(&ds, c).unwrap())
            .collect();
        let encoder_before = tr.encoder.params.checksum();
        // each step is one full-dataset gradient step over shuffled batches
        for _ in 0..50 {
            order.shuffle(rng);
            let window: Vec<PreparedBatch> = order
                .chunks(32)
                .map(|c| tr.prepare(&ds, c).unwrap())
                .collect();
            tr.adversary_window(&window).unwrap();
        }
        assert_eq!(tr.encoder.params.checksum(), encoder_before);
        let (adv, rnd) = adversarial_vs_random(&tr, &eval, rng);
        if adv > rnd {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: adversarial {adv:.3} vs random {rnd:.3}"
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    report(
        4,
        "adversary raises L_SSL above matched random masks",
        wins == SEEDS.len() && elapsed <= 600.0,
        &format!(
            "{wins}/{} seeds; {}; {elapsed:.0}s",
            SEEDS.len(),
            lines.join("; ")
        ),
    );
}

fn split_synthetic(seed: u64) -> Dataset {
    let ds = generate_synthetic_ecg(&SyntheticConfig::default(), 100 + seed).unwrap();
    split_dataset(&ds, SplitFractions::default(), seed).unwrap()
}

#[test]
fn criterion_5_representation_ordering() {
    let start = Instant::now();
    let (mut pre_full, mut rnd_full, mut pre_low, mut scratch_low) = (0.0, 0.0, 0.0, 0.0);
    for seed in SEEDS {
        let ds = split_synthetic(seed);
        let config = PretrainConfig {
            seed,
            max_epochs: 30,
            lr_encoder: 1e-3,
            lr_adversary: 1e-3,
            ..Default::default()
        };
        let encoder = pretrain(&config, &ds).unwrap().checkpoint.encoder;
        let random_init = Encoder::new(
            EncoderConfig::desk(),
            &mut ChaCha8Rng::seed_from_u64(seed + 1000),
        )
        .unwrap();
        let full = TransferConfig {
            seed,
            ..Default::default()
        };
        let low = TransferConfig {
            fraction: 0.01,
            ..full.clone()
        };
        pre_full += transfer_train(&encoder, &ds, &full).unwrap().test_accuracy / 3.0;
        rnd_full += transfer_train(&random_init, &ds, &full)
            .unwrap()
            .test_accuracy
            / 3.0;
        pre_low += transfer_train(&encoder, &ds, &low).unwrap().test_accuracy / 3.0;
        scratch_low += train_scratch(&EncoderConfig::desk(), &ds, &low)
            .unwrap()
            .test_accuracy
            / 3.0;
    }
    let margin = 100.0 * (pre_full - rnd_full);
    report(
        5,
        "pretrained probe beats random init and Scratch",
        margin >= 10.0 && pre_low > scratch_low,
        &format!(
            "100%: adversarial {:.1}% vs random-init {:.1}% (+{margin:.1} pts); 1%: adversarial {:.1}% vs scratch {:.1}%; {:.0}s",
            100.0 * pre_full,
            100.0 * rnd_full,
            100.0 * pre_low,
            100.0 * scratch_low,
            start.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn criterion_6_default_protocol() {
    let c = RunConfig::default();
    let p = &c.pretrain;
    let o = &p.objective;
    let t = &c.transfer;
    let checks = [
        ("temperature 0.1", o.temperature == 0.1),
        ("gamma 25", o.binarize_gamma == 25.0),
        ("alpha 0.1", o.sparse_weight == 0.1),
        (
            "pretrain lr 1e-4",
            p.lr_encoder == 1e-4 && p.lr_adversary == 1e-4,
        ),
        (
            "batch 32 x accum 4",
            p.batch_size == 32 && p.grad_accum_batches == 4 && p.effective_batch() == 128,
        ),
        ("transfer lr 0.01", t.lr == 0.01),
        ("transfer batch 256", t.batch_size == 256),
        (
            "splits 80/10/10",
            t.split
                == SplitFractions {
                    train: 0.8,
                    val: 0.1,
                    test: 0.1,
                },
        ),
        ("fractions 100/10/1%", c.sweep.fractions == [1.0, 0.1, 0.01]),
        (
            "3 seeds",
            c.sweep.n_seeds == 3 && c.sweep_seeds() == [0, 1, 2],
        ),
    ];
    let snapshot_path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots/default_config.json");
    let json = c.to_json().unwrap();
    if std::env::var_os("ADVMASK_UPDATE_SNAPSHOTS").is_some() {
        std::fs::create_dir_all(snapshot_path.parent().unwrap()).unwrap();
        std::fs::write(&snapshot_path, &json).unwrap();
    }
    let snapshot = std::fs::read_to_string(&snapshot_path).unwrap_or_default();
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    let snapshot_ok = snapshot == json;
    report(
        6,
        "default protocol",
        failed.is_empty() && snapshot_ok,
        &format!(
            "{} settings checked, mismatched {failed:?}, snapshot {}",
            checks.len(),
            if snapshot_ok { "identical" } else { "differs" }
        ),
    );
}

#[test]
fn criterion_7_pretraining_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let global = |out: &Path| GlobalArgs {
        seed: Some(9),
        out: Some(out.to_path_buf()),
        ..Default::default()
    };
    cmd_gen_data(
        &global(&data),
        &GenDataArgs {
            n: Some(96),
            length: Some(256),
            ..Default::default()
        },
    )
    .unwrap();
    let args = PretrainArgs {
        data: Some(data),
        max_epochs: Some(2),
        ..Default::default()
    };
    let a = cmd_pretrain(&global(&dir.path().join("a")), &args).unwrap();
    let b = cmd_pretrain(&global(&dir.path().join("b")), &args).unwrap();
    let read = |p: &Path| std::fs::read(p).unwrap();
    let same_ck = read(&a.checkpoint) == read(&b.checkpoint);
    let same_metrics = read(&a.metrics) == read(&b.metrics);
    report(
        7,
        "pretraining is byte-reproducible",
        same_ck && same_metrics,
        &format!(
            "checkpoint {} ({} bytes), metrics {}",
            if same_ck { "identical" } else { "differs" },
            read(&a.checkpoint).len(),
            if same_metrics { "identical" } else { "differs" }
        ),
    );
}
