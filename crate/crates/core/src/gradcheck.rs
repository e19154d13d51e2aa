//! Central finite-difference gradient oracle, for tests only.
//!
//! The numeric side never touches the backward pass: it re-evaluates the
//! forward function with one input element nudged by ±h. Non-scalar outputs
//! are reduced with a fixed random projection `Σ r·y`, done in f64 outside
//! the tape so the difference quotient is not dominated by f32 rounding of
//! the reduced loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Normwise relative error per input: `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<Vec<f32>>,
    pub numeric: Vec<Vec<f64>>,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

fn projection(len: usize, seed: u64) -> Vec<f32> {
    if len == 1 {
        return vec![1.0];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect()
}

/// Compares backward-pass gradients of `f` at `inputs` with central
/// differences of step `h`. `f` may return any shape.
pub fn check<F>(inputs: &[Tensor], h: f32, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    check_seeded(inputs, h, 0x9e37_79b9, f)
}

pub fn check_seeded<F>(inputs: &[Tensor], h: f32, seed: u64, f: F) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let shape = out.shape();
    let r = projection(shape.iter().product(), seed);
    let loss = out
        .mul(tape.constant(Tensor::new(shape, r.clone())?))?
        .sum()?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|v| grads.get(*v).map(<[f32]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?.value();
        Ok(out
            .data()
            .iter()
            .zip(&r)
            .map(|(&y, &w)| y as f64 * w as f64)
            .sum())
    };

    let mut numeric = Vec::with_capacity(inputs.len());
    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut num = vec![0.0f64; inputs[i].numel()];
        for (j, slot) in num.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            // the step actually representable in f32
            let step = ((orig + h) as f64) - ((orig - h) as f64);
            *slot = (plus - minus) / step;
        }
        let a = &analytic[i];
        let diff: f64 = a
            .iter()
            .zip(&num)
            .map(|(&x, &y)| (x as f64 - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let nn: f64 = num.iter().map(|y| y * y).sum::<f64>().sqrt();
        let scale = na.max(nn);
        rel_errors.push(if scale < 1e-7 { diff } else { diff / scale });
        numeric.push(num);
    }
    Ok(GradReport {
        rel_errors,
        analytic,
        numeric,
    })
}

/// Directional check: compares `⟨∇L, d⟩` with `(L(x + h·d) − L(x − h·d)) / 2h`
/// for `directions` random unit-free directions `d ∈ [−1, 1]^n` over all
/// inputs at once. Returns the largest relative error, measured against
/// `max(|⟨∇L, d⟩|, ‖∇L‖·‖d‖/√n)`.
pub fn check_directional<F>(
    inputs: &[Tensor],
    h: f32,
    directions: usize,
    seed: u64,
    f: F,
) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let shape = out.shape();
    let r = projection(shape.iter().product(), seed);
    let loss = out
        .mul(tape.constant(Tensor::new(shape, r.clone())?))?
        .sum()?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|v| grads.get(*v).map(<[f32]>::to_vec).unwrap_or_default())
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ins.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?.value();
        Ok(out
            .data()
            .iter()
            .zip(&r)
            .map(|(&y, &w)| y as f64 * w as f64)
            .sum())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xd1ec);
    let mut worst = 0.0f64;
    for _ in 0..directions {
        let dirs: Vec<Vec<f32>> = inputs
            .iter()
            .map(|t| {
                (0..t.numel())
                    .map(|_| rng.random_range(-1.0f32..1.0))
                    .collect()
            })
            .collect();
        let shifted = |sign: f32| -> Result<Vec<Tensor>> {
            inputs
                .iter()
                .zip(&dirs)
                .map(|(t, d)| {
                    let data = t
                        .data()
                        .iter()
                        .zip(d)
                        .map(|(&x, &di)| x + sign * h * di)
                        .collect();
                    Tensor::new(t.shape().to_vec(), data)
                })
                .collect()
        };
        let numeric = (eval(&shifted(1.0)?)? - eval(&shifted(-1.0)?)?) / (2.0 * h as f64);
        let exact: f64 = analytic
            .iter()
            .zip(&dirs)
            .flat_map(|(g, d)| g.iter().zip(d).map(|(&a, &b)| a as f64 * b as f64))
            .sum();
        // a random direction can be nearly orthogonal to the gradient, so the
        // scale also includes the typical size ‖g‖·‖d‖/√n of the product
        let n = dirs.iter().map(Vec::len).sum::<usize>().max(1) as f64;
        let gn: f64 = analytic
            .iter()
            .flatten()
            .map(|&a| (a as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let dn: f64 = dirs
            .iter()
            .flatten()
            .map(|&d| (d as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = exact.abs().max(numeric.abs()).max(gn * dn / n.sqrt());
        let err = (exact - numeric).abs();
        worst = worst.max(if scale < 1e-7 { err } else { err / scale });
    }
    Ok(worst)
}
