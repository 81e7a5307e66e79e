//! Forward and backward passes for dense and factorized layers.
//!
//! Activations are channel-major `(C, H, W)`. Kernels are stored `D×D×S×T`
//! and transposed to `(T, S, D, D)` on entry to the convolution loops.
//! Output position `(h', w')` reads input `(h'·Δ + i − P, w'·Δ + j − P)`
//! for tap `(i, j)`; taps that fall outside the input read zero.
//!
//! Every sum is accumulated in 64-bit in a fixed order.

use crate::decomp::{ConvLayerSpec, FactorizedConv, FactorizedFc, FcLayerSpec};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    d: usize,
    cin: usize,
    cout: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

/// Output spatial size `⌊(n + 2P − D)/Δ⌋ + 1`, or `None` if the window does
/// not fit.
pub fn conv_output_size(n: usize, d: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if stride == 0 || padded < d {
        return None;
    }
    Some((padded - d) / stride + 1)
}

impl Geometry {
    fn new(x: &Tensor, d: usize, cin: usize, cout: usize, stride: usize, pad: usize) -> Result<Self> {
        let sh = x.shape();
        if sh.len() != 3 || sh[0] != cin {
            return Err(Error::Shape(format!(
                "expected a {cin}×H×W input, got {sh:?}"
            )));
        }
        let (h, w) = (sh[1], sh[2]);
        let (ho, wo) = match (
            conv_output_size(h, d, stride, pad),
            conv_output_size(w, d, stride, pad),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Shape(format!(
                    "{d}×{d} kernel with padding {pad} does not fit a {h}×{w} input"
                )))
            }
        };
        Ok(Self {
            d,
            cin,
            cout,
            stride,
            pad,
            h,
            w,
            ho,
            wo,
        })
    }

    /// Input row for output row `o` and tap `i`, if inside the input.
    #[inline]
    fn src(&self, o: usize, tap: usize, n: usize) -> Option<usize> {
        let v = (o * self.stride + tap) as isize - self.pad as isize;
        (v >= 0 && (v as usize) < n).then_some(v as usize)
    }

    /// Outputs `lo..hi` whose tap `j` lands inside a row of `n` inputs.
    #[inline]
    fn valid(&self, tap: usize, n: usize, n_out: usize) -> (usize, usize) {
        let lo = if self.pad > tap {
            (self.pad - tap).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if n + self.pad > tap {
            ((n - 1 + self.pad - tap) / self.stride + 1).min(n_out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

/// `(D, D, S, T)` → `(T, S, D, D)` in 64-bit.
fn kernel_to_exec(k: &[f32], d: usize, cin: usize, cout: usize) -> Vec<f64> {
    let mut out = vec![0.0; k.len()];
    for i in 0..d {
        for j in 0..d {
            for s in 0..cin {
                for t in 0..cout {
                    out[((t * cin + s) * d + i) * d + j] = k[((i * d + j) * cin + s) * cout + t] as f64;
                }
            }
        }
    }
    out
}

fn kernel_from_exec(k: &[f64], d: usize, cin: usize, cout: usize) -> Vec<f32> {
    let mut out = vec![0.0; k.len()];
    for i in 0..d {
        for j in 0..d {
            for s in 0..cin {
                for t in 0..cout {
                    out[((i * d + j) * cin + s) * cout + t] = k[((t * cin + s) * d + i) * d + j] as f32;
                }
            }
        }
    }
    out
}

/// Patch matrix: row `(s, i, j)` holds, for every output position, the input
/// value tap `(i, j)` of channel `s` reads (zero outside the input).
fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let mut cols = vec![0.0; g.cin * g.d * g.d * plane];
    for s in 0..g.cin {
        let xs = &x[s * g.h * g.w..(s + 1) * g.h * g.w];
        for i in 0..g.d {
            for j in 0..g.d {
                let row = &mut cols[((s * g.d + i) * g.d + j) * plane..][..plane];
                let (lo, hi) = g.valid(j, g.w, g.wo);
                if lo == hi {
                    continue;
                }
                let start = lo * g.stride + j - g.pad;
                for oh in 0..g.ho {
                    let Some(ih) = g.src(oh, i, g.h) else { continue };
                    let xrow = &xs[ih * g.w..(ih + 1) * g.w];
                    for (k, v) in row[oh * g.wo + lo..oh * g.wo + hi].iter_mut().enumerate() {
                        *v = xrow[start + k * g.stride];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let mut x = vec![0.0; g.cin * g.h * g.w];
    for s in 0..g.cin {
        let xs = &mut x[s * g.h * g.w..(s + 1) * g.h * g.w];
        for i in 0..g.d {
            for j in 0..g.d {
                let row = &cols[((s * g.d + i) * g.d + j) * plane..][..plane];
                let (lo, hi) = g.valid(j, g.w, g.wo);
                if lo == hi {
                    continue;
                }
                let start = lo * g.stride + j - g.pad;
                for oh in 0..g.ho {
                    let Some(ih) = g.src(oh, i, g.h) else { continue };
                    let xrow = &mut xs[ih * g.w..(ih + 1) * g.w];
                    for (k, &v) in row[oh * g.wo + lo..oh * g.wo + hi].iter().enumerate() {
                        xrow[start + k * g.stride] += v;
                    }
                }
            }
        }
    }
    x
}

/// `y[t, p] = Σ_q k[t, q] · cols[q, p]` with `q = (s, i, j)`.
fn conv_forward(x: &[f64], k: &[f64], g: &Geometry) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let q_len = g.cin * g.d * g.d;
    let cols = im2col(x, g);
    let mut y = vec![0.0; g.cout * plane];
    for (t, yt) in y.chunks_exact_mut(plane).enumerate() {
        for (q, &kv) in k[t * q_len..(t + 1) * q_len].iter().enumerate() {
            if kv == 0.0 {
                continue;
            }
            for (yv, &c) in yt.iter_mut().zip(&cols[q * plane..(q + 1) * plane]) {
                *yv += kv * c;
            }
        }
    }
    y
}

/// Returns `(dK, dX)` in the exec kernel layout.
fn conv_backward(x: &[f64], k: &[f64], dy: &[f64], g: &Geometry) -> (Vec<f64>, Vec<f64>) {
    let plane = g.ho * g.wo;
    let q_len = g.cin * g.d * g.d;
    let cols = im2col(x, g);
    let mut dk = vec![0.0; k.len()];
    let mut dcols = vec![0.0; cols.len()];
    for t in 0..g.cout {
        let dyt = &dy[t * plane..(t + 1) * plane];
        for q in 0..q_len {
            let crow = &cols[q * plane..(q + 1) * plane];
            dk[t * q_len + q] = dyt.iter().zip(crow).map(|(a, b)| a * b).sum();
            let kv = k[t * q_len + q];
            if kv != 0.0 {
                for (d, &gy) in dcols[q * plane..(q + 1) * plane].iter_mut().zip(dyt) {
                    *d += kv * gy;
                }
            }
        }
    }
    (dk, col2im(&dcols, g))
}

/// `out[r, p] = Σ_c m[c, r] · x[c, p]` for `m: C×R`.
fn channel_mix_t(x: &[f64], m: &[f32], c: usize, r: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * plane];
    for ci in 0..c {
        let xc = &x[ci * plane..(ci + 1) * plane];
        for ri in 0..r {
            let w = m[ci * r + ri] as f64;
            if w == 0.0 {
                continue;
            }
            for (o, &v) in out[ri * plane..(ri + 1) * plane].iter_mut().zip(xc) {
                *o += w * v;
            }
        }
    }
    out
}

/// `out[c, p] = Σ_r m[c, r] · z[r, p]` for `m: C×R`.
fn channel_mix(z: &[f64], m: &[f32], c: usize, r: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * plane];
    for ci in 0..c {
        let orow = &mut out[ci * plane..(ci + 1) * plane];
        for ri in 0..r {
            let w = m[ci * r + ri] as f64;
            if w == 0.0 {
                continue;
            }
            for (o, &v) in orow.iter_mut().zip(&z[ri * plane..(ri + 1) * plane]) {
                *o += w * v;
            }
        }
    }
    out
}

/// `g[c, r] = Σ_p a[c, p] · b[r, p]`
fn outer_over_plane(a: &[f64], b: &[f64], c: usize, r: usize, plane: usize) -> Vec<f64> {
    let mut g = vec![0.0; c * r];
    for ci in 0..c {
        let ac = &a[ci * plane..(ci + 1) * plane];
        for ri in 0..r {
            g[ci * r + ri] = ac
                .iter()
                .zip(&b[ri * plane..(ri + 1) * plane])
                .map(|(x, y)| x * y)
                .sum();
        }
    }
    g
}

fn to64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn to32(shape: Vec<usize>, v: &[f64]) -> Tensor {
    Tensor::new(shape, v.iter().map(|&x| x as f32).collect()).expect("shape matches data")
}

fn check_grad_shape(dy: &Tensor, expected: &[usize]) -> Result<()> {
    if dy.shape() != expected {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match output {:?}",
            dy.shape(),
            expected
        )));
    }
    Ok(())
}

/// Dense convolution of an `S×H×W` input.
pub fn conv2d_reference(x: &Tensor, layer: &ConvLayerSpec) -> Result<Tensor> {
    let (d, s, t) = (layer.kernel_size(), layer.in_channels(), layer.out_channels());
    let g = Geometry::new(x, d, s, t, layer.stride, layer.padding)?;
    let k = kernel_to_exec(layer.kernel.data(), d, s, t);
    let y = conv_forward(&to64(x), &k, &g);
    Ok(to32(vec![t, g.ho, g.wo], &y))
}

#[derive(Debug, Clone)]
pub struct ConvGrad {
    /// `D×D×S×T`
    pub dkernel: Tensor,
    pub dx: Tensor,
}

pub fn conv2d_reference_grad(layer: &ConvLayerSpec, x: &Tensor, dy: &Tensor) -> Result<ConvGrad> {
    let (d, s, t) = (layer.kernel_size(), layer.in_channels(), layer.out_channels());
    let g = Geometry::new(x, d, s, t, layer.stride, layer.padding)?;
    check_grad_shape(dy, &[t, g.ho, g.wo])?;
    let k = kernel_to_exec(layer.kernel.data(), d, s, t);
    let (dk, dx) = conv_backward(&to64(x), &k, &to64(dy), &g);
    Ok(ConvGrad {
        dkernel: Tensor::new(vec![d, d, s, t], kernel_from_exec(&dk, d, s, t))?,
        dx: to32(x.shape().to_vec(), &dx),
    })
}

/// Intermediates of the three-sublayer forward pass.
struct FactorizedTrace {
    geom: Geometry,
    core: Vec<f64>,
    x: Vec<f64>,
    z: Vec<f64>,
    zp: Vec<f64>,
    y: Vec<f64>,
}

fn factorized_trace(x: &Tensor, f: &FactorizedConv) -> Result<FactorizedTrace> {
    let (d, s, t) = (f.kernel_size(), f.in_channels(), f.out_channels());
    let (r3, r4) = f.ranks();
    if x.order() != 3 || x.shape()[0] != s {
        return Err(Error::Shape(format!(
            "expected a {s}×H×W input, got {:?}",
            x.shape()
        )));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let z_shape = Tensor::zeros(&[r3, h, w]);
    let geom = Geometry::new(&z_shape, d, r3, r4, f.stride, f.padding)?;
    let xv = to64(x);
    // 1×1, S → R3, with U3ᵀ
    let z = channel_mix_t(&xv, f.u3.data(), s, r3, h * w);
    // D×D, R3 → R4, stride and padding live here
    let core = kernel_to_exec(f.core.data(), d, r3, r4);
    let zp = conv_forward(&z, &core, &geom);
    // 1×1, R4 → T, with U4
    let y = channel_mix(&zp, f.u4.data(), t, r4, geom.ho * geom.wo);
    Ok(FactorizedTrace {
        geom,
        core,
        x: xv,
        z,
        zp,
        y,
    })
}

/// Three-sublayer Tucker-2 convolution.
pub fn conv2d_factorized(x: &Tensor, f: &FactorizedConv) -> Result<Tensor> {
    let tr = factorized_trace(x, f)?;
    Ok(to32(vec![f.out_channels(), tr.geom.ho, tr.geom.wo], &tr.y))
}

#[derive(Debug, Clone)]
pub struct FactorizedConvGrad {
    pub du3: Tensor,
    pub dcore: Tensor,
    pub du4: Tensor,
    pub dx: Tensor,
}

pub fn conv2d_factorized_grad(f: &FactorizedConv, x: &Tensor, dy: &Tensor) -> Result<FactorizedConvGrad> {
    let tr = factorized_trace(x, f)?;
    let g = tr.geom;
    let (d, s, t) = (f.kernel_size(), f.in_channels(), f.out_channels());
    let (r3, r4) = f.ranks();
    check_grad_shape(dy, &[t, g.ho, g.wo])?;
    let dyv = to64(dy);
    let out_plane = g.ho * g.wo;
    let in_plane = g.h * g.w;

    let du4 = outer_over_plane(&dyv, &tr.zp, t, r4, out_plane);
    let dzp = channel_mix_t(&dyv, f.u4.data(), t, r4, out_plane);
    let (dcore, dz) = conv_backward(&tr.z, &tr.core, &dzp, &g);
    let du3 = outer_over_plane(&tr.x, &dz, s, r3, in_plane);
    let dx = channel_mix(&dz, f.u3.data(), s, r3, in_plane);

    Ok(FactorizedConvGrad {
        du3: to32(vec![s, r3], &du3),
        dcore: Tensor::new(vec![d, d, r3, r4], kernel_from_exec(&dcore, d, r3, r4))?,
        du4: to32(vec![t, r4], &du4),
        dx: to32(x.shape().to_vec(), &dx),
    })
}

fn vec_mat(x: &[f64], m: &[f32], rows: usize, cols: usize) -> Vec<f64> {
    let mut y = vec![0.0; cols];
    for (i, &xv) in x.iter().enumerate().take(rows) {
        if xv == 0.0 {
            continue;
        }
        for (yv, &w) in y.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
            *yv += xv * w as f64;
        }
    }
    y
}

fn mat_vec(m: &[f32], v: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| {
            m[i * cols..(i + 1) * cols]
                .iter()
                .zip(v)
                .map(|(&w, &g)| w as f64 * g)
                .sum()
        })
        .collect()
}

fn outer(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().flat_map(|&x| b.iter().map(move |&y| x * y)).collect()
}

fn check_len(x: &[f32], n: usize) -> Result<()> {
    if x.len() != n {
        return Err(Error::Shape(format!("expected a vector of length {n}, got {}", x.len())));
    }
    Ok(())
}

/// `yᵀ = xᵀ W`
pub fn fc_forward(x: &[f32], layer: &FcLayerSpec) -> Result<Vec<f32>> {
    let (m, n) = (layer.in_features(), layer.out_features());
    check_len(x, m)?;
    let xv: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    Ok(vec_mat(&xv, layer.weight.data(), m, n)
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

/// `(dW, dx)`
pub fn fc_grad(layer: &FcLayerSpec, x: &[f32], dy: &[f32]) -> Result<(Tensor, Vec<f32>)> {
    let (m, n) = (layer.in_features(), layer.out_features());
    check_len(x, m)?;
    check_len(dy, n)?;
    let xv: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let dyv: Vec<f64> = dy.iter().map(|&v| v as f64).collect();
    let dw = to32(vec![m, n], &outer(&xv, &dyv));
    let dx = mat_vec(layer.weight.data(), &dyv, m, n);
    Ok((dw, dx.into_iter().map(|v| v as f32).collect()))
}

/// `yᵀ = (xᵀ A) B`
pub fn fc_factorized_forward(x: &[f32], f: &FactorizedFc) -> Result<Vec<f32>> {
    let (m, r, n) = (f.in_features(), f.rank(), f.out_features());
    check_len(x, m)?;
    let xv: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let z = vec_mat(&xv, f.a.data(), m, r);
    Ok(vec_mat(&z, f.b.data(), r, n)
        .into_iter()
        .map(|v| v as f32)
        .collect())
}

#[derive(Debug, Clone)]
pub struct FactorizedFcGrad {
    pub da: Tensor,
    pub db: Tensor,
    pub dx: Vec<f32>,
}

pub fn fc_factorized_grad(f: &FactorizedFc, x: &[f32], dy: &[f32]) -> Result<FactorizedFcGrad> {
    let (m, r, n) = (f.in_features(), f.rank(), f.out_features());
    check_len(x, m)?;
    check_len(dy, n)?;
    let xv: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let dyv: Vec<f64> = dy.iter().map(|&v| v as f64).collect();
    let z = vec_mat(&xv, f.a.data(), m, r);
    let dz = mat_vec(f.b.data(), &dyv, r, n);
    let dx = mat_vec(f.a.data(), &dz, m, r);
    Ok(FactorizedFcGrad {
        da: to32(vec![m, r], &outer(&xv, &dz)),
        db: to32(vec![r, n], &outer(&z, &dyv)),
        dx: dx.into_iter().map(|v| v as f32).collect(),
    })
}
