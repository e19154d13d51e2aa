//! Raw numeric kernels behind the differentiable ops. Everything here works on
//! flat row-major slices; shape validation happens in `ops`.

/// `c = a·b + beta·c` for an `m×k` by `k×n` product with arbitrary strides.
///
/// Strides are `(row, col)` element strides, so a transposed operand is just
/// a swapped stride pair.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent =
        |rows: usize, cols: usize, (rs, cs): (usize, usize)| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(extent(m, n, c_strides) <= c.len(), "gemm: c out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * c_strides.0 + j * c_strides.1] *= beta;
            }
        }
        return;
    }
    assert!(extent(m, k, a_strides) <= a.len(), "gemm: a out of bounds");
    assert!(extent(k, n, b_strides) <= b.len(), "gemm: b out of bounds");
    // SAFETY: every index the kernel touches is bounded by the extents checked
    // above, and `c` is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Element strides of `shape` viewed inside `out_shape`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let offset = out_shape.len() - shape.len();
    let mut strides = vec![0; out_shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast
/// output, in row-major order.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if a_shape == out_shape && b_shape == out_shape {
        for i in 0..total {
            f(i, i, i);
        }
        return;
    }
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let mut counter = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, ia + j * sa[last], ib + j * sb[last]);
        }
        o += inner;
        // advance the odometer over all axes but the last
        let mut d = last;
        while d > 0 {
            d -= 1;
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out_shape[d] {
                break;
            }
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
            counter[d] = 0;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_len: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.c_in * self.kernel
    }
}

fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let (lo, l) = (g.out_len, g.len as isize);
    for ci in 0..g.c_in {
        let row_in = &x[ci * g.len..(ci + 1) * g.len];
        for kk in 0..g.kernel {
            let row = &mut cols[(ci * g.kernel + kk) * lo..(ci * g.kernel + kk + 1) * lo];
            let shift = kk as isize - g.padding as isize;
            for (t, slot) in row.iter_mut().enumerate() {
                let pos = (t * g.stride) as isize + shift;
                *slot = if pos >= 0 && pos < l {
                    row_in[pos as usize]
                } else {
                    0.0
                };
            }
        }
    }
}

fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (lo, l) = (g.out_len, g.len as isize);
    for ci in 0..g.c_in {
        let row_out = &mut dx[ci * g.len..(ci + 1) * g.len];
        for kk in 0..g.kernel {
            let row = &cols[(ci * g.kernel + kk) * lo..(ci * g.kernel + kk + 1) * lo];
            let shift = kk as isize - g.padding as isize;
            for (t, &v) in row.iter().enumerate() {
                let pos = (t * g.stride) as isize + shift;
                if pos >= 0 && pos < l {
                    row_out[pos as usize] += v;
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, g: &ConvGeom) -> Vec<f32> {
    let rows = g.col_rows();
    let mut cols = vec![0.0; rows * g.out_len];
    let mut out = vec![0.0; g.batch * g.c_out * g.out_len];
    for b in 0..g.batch {
        im2col(
            &x[b * g.c_in * g.len..(b + 1) * g.c_in * g.len],
            g,
            &mut cols,
        );
        let out_b = &mut out[b * g.c_out * g.out_len..(b + 1) * g.c_out * g.out_len];
        if let Some(bias) = bias {
            for (co, row) in out_b.chunks_mut(g.out_len).enumerate() {
                row.fill(bias[co]);
            }
        }
        gemm(
            g.c_out,
            rows,
            g.out_len,
            w,
            (rows, 1),
            &cols,
            (g.out_len, 1),
            1.0,
            out_b,
            (g.out_len, 1),
        );
    }
    out
}

/// Gradients of a conv1d with respect to its input, weight and bias.
pub(crate) fn conv1d_backward(
    x: &[f32],
    w: &[f32],
    grad_out: &[f32],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let rows = g.col_rows();
    let mut cols = vec![0.0; rows * g.out_len];
    let mut dcols = vec![0.0; rows * g.out_len];
    let mut dx = need_input.then(|| vec![0.0; x.len()]);
    let mut dw = need_weight.then(|| vec![0.0; w.len()]);
    let mut dbias = vec![0.0; g.c_out];
    for b in 0..g.batch {
        let go = &grad_out[b * g.c_out * g.out_len..(b + 1) * g.c_out * g.out_len];
        for (co, row) in go.chunks(g.out_len).enumerate() {
            dbias[co] += row.iter().sum::<f32>();
        }
        if let Some(dw) = dw.as_mut() {
            im2col(
                &x[b * g.c_in * g.len..(b + 1) * g.c_in * g.len],
                g,
                &mut cols,
            );
            // dw[c_out, rows] += go[c_out, out_len] · cols^T[out_len, rows]
            gemm(
                g.c_out,
                g.out_len,
                rows,
                go,
                (g.out_len, 1),
                &cols,
                (1, g.out_len),
                1.0,
                dw,
                (rows, 1),
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[rows, out_len] = w^T[rows, c_out] · go[c_out, out_len]
            gemm(
                rows,
                g.c_out,
                g.out_len,
                w,
                (1, rows),
                go,
                (g.out_len, 1),
                0.0,
                &mut dcols,
                (g.out_len, 1),
            );
            col2im_add(
                &dcols,
                g,
                &mut dx[b * g.c_in * g.len..(b + 1) * g.c_in * g.len],
            );
        }
    }
    (dx, dw, dbias)
}

/// Max pool over the last axis of `rows × len` data. Returns the pooled values
/// and, per output, the flat input index that won.
pub(crate) fn max_pool(
    x: &[f32],
    rows: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_len: usize,
) -> (Vec<f32>, Vec<usize>) {
    let mut out = vec![0.0; rows * out_len];
    let mut arg = vec![0usize; rows * out_len];
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        for t in 0..out_len {
            let start = (t * stride) as isize - padding as isize;
            let mut best = f32::NEG_INFINITY;
            let mut best_i = usize::MAX;
            for kk in 0..kernel as isize {
                let pos = start + kk;
                if pos < 0 || pos >= len as isize {
                    continue;
                }
                let v = row[pos as usize];
                if best_i == usize::MAX || v > best {
                    best = v;
                    best_i = pos as usize;
                }
            }
            out[r * out_len + t] = best;
            arg[r * out_len + t] = r * len + best_i;
        }
    }
    (out, arg)
}

pub(crate) fn avg_pool(
    x: &[f32],
    rows: usize,
    len: usize,
    kernel: usize,
    stride: usize,
    out_len: usize,
) -> Vec<f32> {
    let mut out = vec![0.0; rows * out_len];
    let scale = 1.0 / kernel as f64;
    for r in 0..rows {
        let row = &x[r * len..(r + 1) * len];
        for t in 0..out_len {
            let s: f64 = row[t * stride..t * stride + kernel]
                .iter()
                .map(|&v| v as f64)
                .sum();
            out[r * out_len + t] = (s * scale) as f32;
        }
    }
    out
}

/// Per-channel statistics of a `[batch, channels, len]` tensor.
pub(crate) fn channel_moments(
    x: &[f32],
    batch: usize,
    channels: usize,
    len: usize,
) -> (Vec<f32>, Vec<f32>) {
    let n = (batch * len) as f64;
    let mut mean = vec![0.0; channels];
    let mut var = vec![0.0; channels];
    for c in 0..channels {
        let mut s = 0.0f64;
        for b in 0..batch {
            let off = (b * channels + c) * len;
            s += x[off..off + len].iter().map(|&v| v as f64).sum::<f64>();
        }
        let m = s / n;
        let mut ss = 0.0f64;
        for b in 0..batch {
            let off = (b * channels + c) * len;
            ss += x[off..off + len]
                .iter()
                .map(|&v| {
                    let d = v as f64 - m;
                    d * d
                })
                .sum::<f64>();
        }
        mean[c] = m as f32;
        var[c] = (ss / n) as f32;
    }
    (mean, var)
}
