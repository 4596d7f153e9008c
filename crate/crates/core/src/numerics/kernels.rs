//! Raw slice kernels shared by the graph ops and by the plain-tensor entry points.

use std::f64::consts::{FRAC_2_SQRT_PI, SQRT_2};

/// `c = a · b + beta · c` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`.
/// `ta`/`tb` read the stored operand transposed (storage `[k, m]` / `[n, k]`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the asserted slice extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Silu,
    Gelu,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Silu => "silu",
            Activation::Gelu => "gelu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / SQRT_2)),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
                let pdf = 0.5 * FRAC_2_SQRT_PI / SQRT_2 * (-0.5 * x * x).exp();
                cdf + x * pdf
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
        }
    }
}

const SIGMOID_HI: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function, kept inside the open interval (0, 1) for every finite input.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, SIGMOID_HI)
}

/// `ln(1 + e^x)`, strictly positive for every finite input.
pub fn softplus(x: f64) -> f64 {
    let v = x.max(0.0) + (-x.abs()).exp().ln_1p();
    v.max(f64::MIN_POSITIVE)
}

pub fn inverse_softplus(y: f64) -> f64 {
    assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}

/// Per-row normalization followed by the affine map. Returns `(out, xhat, inv_std)`.
pub fn layer_norm_forward(
    x: &[f64],
    d: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut out = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..d {
            let h = (row[j] - mean) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gamma[j] + beta[j];
        }
    }
    (out, xhat, inv_std)
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    d: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = dy.len() / d;
    let mut dx = vec![0.0; dy.len()];
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let o = r * d;
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let g = dy[o + j];
            dgamma[j] += g * xhat[o + j];
            dbeta[j] += g;
            dxhat[j] = g * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xhat[o + j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            dx[o + j] = inv_std[r] * (dxhat[j] - mean_dxhat - xhat[o + j] * mean_dxhat_xhat);
        }
    }
    (dx, dgamma, dbeta)
}

/// Left padding for a length-`k` kernel: `k - 1` when causal, `(k - 1) / 2` otherwise.
pub fn conv_left_pad(k: usize, causal: bool) -> usize {
    if causal {
        k - 1
    } else {
        (k - 1) / 2
    }
}

/// `out[t, c] = Σ_j kernel[j, c] · x[t - left + j, c]` with zeros outside `[0, len)`.
pub fn depthwise_conv1d_forward(
    x: &[f64],
    kernel: &[f64],
    len: usize,
    channels: usize,
    k: usize,
    causal: bool,
) -> Vec<f64> {
    let left = conv_left_pad(k, causal) as isize;
    let mut out = vec![0.0; len * channels];
    for t in 0..len {
        for j in 0..k {
            let src = t as isize - left + j as isize;
            if src < 0 || src >= len as isize {
                continue;
            }
            let src = src as usize;
            let orow = &mut out[t * channels..(t + 1) * channels];
            let xrow = &x[src * channels..(src + 1) * channels];
            let krow = &kernel[j * channels..(j + 1) * channels];
            for c in 0..channels {
                orow[c] += krow[c] * xrow[c];
            }
        }
    }
    out
}

/// Returns `(dx, dkernel)`.
pub fn depthwise_conv1d_backward(
    dy: &[f64],
    x: &[f64],
    kernel: &[f64],
    len: usize,
    channels: usize,
    k: usize,
    causal: bool,
) -> (Vec<f64>, Vec<f64>) {
    let left = conv_left_pad(k, causal) as isize;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; kernel.len()];
    for t in 0..len {
        for j in 0..k {
            let src = t as isize - left + j as isize;
            if src < 0 || src >= len as isize {
                continue;
            }
            let src = src as usize;
            for c in 0..channels {
                let g = dy[t * channels + c];
                dx[src * channels + c] += g * kernel[j * channels + c];
                dk[j * channels + c] += g * x[src * channels + c];
            }
        }
    }
    (dx, dk)
}

/// Same-padded patch gather for a `k × k` window over an `[h, w, c]` grid.
/// Output is `[h·w, k·k·c]` with feature order `(ki, kj, c)`.
pub fn im2col(x: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let feat = k * k * c;
    let mut out = vec![0.0; h * w * feat];
    for i in 0..h {
        for j in 0..w {
            let row = &mut out[(i * w + j) * feat..(i * w + j + 1) * feat];
            for ki in 0..k {
                let si = i as isize + ki as isize - r;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kj in 0..k {
                    let sj = j as isize + kj as isize - r;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * c;
                    let dst = (ki * k + kj) * c;
                    row[dst..dst + c].copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }
    out
}

pub fn im2col_backward(dy: &[f64], h: usize, w: usize, c: usize, k: usize) -> Vec<f64> {
    let r = (k / 2) as isize;
    let feat = k * k * c;
    let mut dx = vec![0.0; h * w * c];
    for i in 0..h {
        for j in 0..w {
            let row = &dy[(i * w + j) * feat..(i * w + j + 1) * feat];
            for ki in 0..k {
                let si = i as isize + ki as isize - r;
                if si < 0 || si >= h as isize {
                    continue;
                }
                for kj in 0..k {
                    let sj = j as isize + kj as isize - r;
                    if sj < 0 || sj >= w as isize {
                        continue;
                    }
                    let src = (si as usize * w + sj as usize) * c;
                    let dst = (ki * k + kj) * c;
                    for ch in 0..c {
                        dx[src + ch] += row[dst + ch];
                    }
                }
            }
        }
    }
    dx
}

/// Non-overlapping `patch × patch` flattening of an `[s, s, c]` grid into
/// row-major tokens of `patch·patch·c` features ordered `(u, v, c)`.
pub fn patchify(x: &[f64], s: usize, c: usize, patch: usize) -> Vec<f64> {
    let g = s / patch;
    let feat = patch * patch * c;
    let mut out = vec![0.0; g * g * feat];
    for pi in 0..g {
        for pj in 0..g {
            let tok = pi * g + pj;
            for u in 0..patch {
                let src = ((pi * patch + u) * s + pj * patch) * c;
                let dst = tok * feat + u * patch * c;
                out[dst..dst + patch * c].copy_from_slice(&x[src..src + patch * c]);
            }
        }
    }
    out
}

pub fn unpatchify(dy: &[f64], s: usize, c: usize, patch: usize) -> Vec<f64> {
    let g = s / patch;
    let feat = patch * patch * c;
    let mut dx = vec![0.0; s * s * c];
    for pi in 0..g {
        for pj in 0..g {
            let tok = pi * g + pj;
            for u in 0..patch {
                let dst = ((pi * patch + u) * s + pj * patch) * c;
                let src = tok * feat + u * patch * c;
                dx[dst..dst + patch * c].copy_from_slice(&dy[src..src + patch * c]);
            }
        }
    }
    dx
}
