//! 12-lead ECG ↔ vectorcardiogram projections and the 3KG augmentation.
//!
//! Lead order is I, II, III, aVR, aVL, aVF, V1–V6. Only the eight
//! independent leads V1–V6, I and II enter the projection; the remaining
//! limb leads are rebuilt from I and II by Einthoven/Goldberger relations.

use rand::Rng;

use super::ThreeKgParams;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dower matrix mapping (X, Y, Z) to V1–V6, I, II.
/// Dower GE et al., J Electrocardiol 1980; 13(2):189–191.
pub const DOWER: [[f64; 3]; 8] = [
    [-0.515, 0.157, -0.917],
    [0.044, 0.164, -1.387],
    [0.882, 0.098, -1.277],
    [1.213, 0.127, -0.601],
    [1.125, 0.127, -0.086],
    [0.831, 0.076, 0.230],
    [0.632, -0.235, 0.059],
    [0.235, 1.066, -0.132],
];

/// Inverse Dower matrix mapping V1–V6, I, II to (X, Y, Z).
/// Edenbrandt L, Pahlm O, J Electrocardiol 1988; 21(4):361–367.
pub const INVERSE_DOWER: [[f64; 8]; 3] = [
    [-0.172, -0.074, 0.122, 0.231, 0.239, 0.194, 0.156, -0.010],
    [0.057, -0.019, -0.106, -0.022, 0.041, 0.048, -0.227, 0.887],
    [-0.229, -0.310, -0.246, -0.063, 0.055, 0.108, 0.022, 0.102],
];

/// Positions of V1–V6, I, II in the 12-lead order.
const INDEPENDENT: [usize; 8] = [6, 7, 8, 9, 10, 11, 0, 1];

type Mat3 = [[f64; 3]; 3];

fn check_leads(x: &Tensor, leads: usize, op: &'static str) -> Result<usize> {
    match *x.shape() {
        [l, d] if l == leads => Ok(d),
        [l, _] => Err(Error::invalid(
            op,
            format!("expected {leads} leads, got {l}"),
        )),
        _ => Err(Error::shapes(op, &[x.shape()])),
    }
}

/// `[12, D]` ECG → `[3, D]` VCG.
pub fn to_vcg(x: &Tensor) -> Result<Tensor> {
    let d = check_leads(x, 12, "to_vcg")?;
    let data = x.data();
    let mut out = vec![0.0f32; 3 * d];
    for (axis, row) in INVERSE_DOWER.iter().enumerate() {
        for t in 0..d {
            let v: f64 = row
                .iter()
                .zip(INDEPENDENT)
                .map(|(&c, l)| c * data[l * d + t] as f64)
                .sum();
            out[axis * d + t] = v as f32;
        }
    }
    Tensor::new(vec![3, d], out)
}

/// 12×8 expansion of the independent leads into the full 12-lead order.
fn expansion() -> [[f64; 8]; 12] {
    let mut e = [[0.0; 8]; 12];
    let (i, ii) = (6, 7);
    e[0][i] = 1.0;
    e[1][ii] = 1.0;
    e[2] = row(&[(ii, 1.0), (i, -1.0)]);
    e[3] = row(&[(i, -0.5), (ii, -0.5)]);
    e[4] = row(&[(i, 1.0), (ii, -0.5)]);
    e[5] = row(&[(ii, 1.0), (i, -0.5)]);
    for v in 0..6 {
        e[6 + v][v] = 1.0;
    }
    e
}

fn row(entries: &[(usize, f64)]) -> [f64; 8] {
    let mut r = [0.0; 8];
    for &(k, v) in entries {
        r[k] = v;
    }
    r
}

/// `[3, D]` VCG → `[12, D]` ECG.
pub fn from_vcg(v: &Tensor) -> Result<Tensor> {
    let d = check_leads(v, 3, "from_vcg")?;
    let m = matrix_12x3();
    let data = v.data();
    let mut out = vec![0.0f32; 12 * d];
    for (lead, coef) in m.iter().enumerate() {
        for t in 0..d {
            let s: f64 = (0..3).map(|a| coef[a] * data[a * d + t] as f64).sum();
            out[lead * d + t] = s as f32;
        }
    }
    Tensor::new(vec![12, d], out)
}

fn matrix_12x3() -> [[f64; 3]; 12] {
    let e = expansion();
    let mut m = [[0.0; 3]; 12];
    for (lead, er) in e.iter().enumerate() {
        for a in 0..3 {
            m[lead][a] = (0..8).map(|k| er[k] * DOWER[k][a]).sum();
        }
    }
    m
}

/// `Rz(γ)·Ry(β)·Rx(α)`, angles in radians.
pub fn rotation(alpha: f64, beta: f64, gamma: f64) -> Mat3 {
    let (sa, ca) = alpha.sin_cos();
    let (sb, cb) = beta.sin_cos();
    let (sg, cg) = gamma.sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, ca, -sa], [0.0, sa, ca]];
    let ry = [[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]];
    let rz = [[cg, -sg, 0.0], [sg, cg, 0.0], [0.0, 0.0, 1.0]];
    mul3(&rz, &mul3(&ry, &rx))
}

fn mul3(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Applies `scale·R` to every timestep of a `[3, D]` VCG.
pub fn transform_vcg(v: &Tensor, rot: &Mat3, scale: f64) -> Result<Tensor> {
    let d = check_leads(v, 3, "transform_vcg")?;
    let data = v.data();
    let mut out = vec![0.0f32; 3 * d];
    for i in 0..3 {
        for t in 0..d {
            let s: f64 = (0..3).map(|k| rot[i][k] * data[k * d + t] as f64).sum();
            out[i * d + t] = (scale * s) as f32;
        }
    }
    Tensor::new(vec![3, d], out)
}

/// The 12×12 map `ECG ↦ Dower(scale·R·inverseDower(ECG))`.
pub fn transform_matrix(rot: &Mat3, scale: f64) -> Tensor {
    let m = matrix_12x3();
    // inverse Dower lifted to all 12 inputs
    let mut inv = [[0.0; 12]; 3];
    for a in 0..3 {
        for (k, &lead) in INDEPENDENT.iter().enumerate() {
            inv[a][lead] = INVERSE_DOWER[a][k];
        }
    }
    let mut out = vec![0.0f32; 144];
    for i in 0..12 {
        for j in 0..12 {
            let mut s = 0.0;
            for a in 0..3 {
                for b in 0..3 {
                    s += m[i][a] * scale * rot[a][b] * inv[b][j];
                }
            }
            out[i * 12 + j] = s as f32;
        }
    }
    Tensor::new(vec![12, 12], out).expect("12x12")
}

/// Samples a 3KG map: independent per-axis angles in `±max_angle_deg` and
/// one uniform scale in `[min_scale, max_scale]`.
pub fn three_kg_matrix<R: Rng + ?Sized>(p: &ThreeKgParams, rng: &mut R) -> Tensor {
    let max = (p.max_angle_deg as f64).to_radians();
    let mut angle = || {
        if max > 0.0 {
            rng.random_range(-max..=max)
        } else {
            0.0
        }
    };
    let (a, b, c) = (angle(), angle(), angle());
    let scale = if p.max_scale > p.min_scale {
        rng.random_range(p.min_scale as f64..=p.max_scale as f64)
    } else {
        p.min_scale as f64
    };
    transform_matrix(&rotation(a, b, c), scale)
}

pub fn three_kg<R: Rng + ?Sized>(x: &Tensor, p: &ThreeKgParams, rng: &mut R) -> Result<Tensor> {
    check_leads(x, 12, "threekg")?;
    let m = three_kg_matrix(p, rng);
    super::Affine {
        matrix: Some(m),
        offset: None,
    }
    .apply(x)
}
