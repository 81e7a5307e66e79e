//! Brute-force 64-bit reference computations used as test oracles.
//!
//! Nothing here shares code with the library under test. Convolutions are
//! literal nested loops over an explicitly zero-padded input, and every
//! routine counts the multiplies it performs so operation counts can be
//! checked by enumeration.
//!
//! Layouts: activations `C×H×W`, kernels `D×D×S×T`, 2-way factors row-major.

/// Index of `k[i][j][s][t]` in a `D×D×S×T` kernel.
pub fn kernel_index(d: usize, s: usize, t: usize, i: usize, j: usize, si: usize, ti: usize) -> usize {
    debug_assert!(i < d && j < d && si < s && ti < t);
    ((i * d + j) * s + si) * t + ti
}

/// `C×(H+2P)×(W+2P)` copy of `x` with a zero border.
pub fn zero_pad(x: &[f64], c: usize, h: usize, w: usize, p: usize) -> Vec<f64> {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[(ci * hp + y + p) * wp + xx + p] = x[(ci * h + y) * w + xx];
            }
        }
    }
    out
}

/// Output extent of a convolution, or `None` when the window does not fit.
pub fn out_size(n: usize, d: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(d).map(|v| v / stride + 1)
}

/// `y[t, oh, ow] = Σ_{i,j,s} k[i,j,s,t] · xpad[s, oh·Δ + i, ow·Δ + j]`.
///
/// Returns `(y, H′, W′)`. Padded taps are multiplied like any other.
#[allow(clippy::too_many_arguments)]
pub fn conv(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    k: &[f64],
    d: usize,
    t: usize,
    stride: usize,
    pad: usize,
    mults: &mut u64,
) -> (Vec<f64>, usize, usize) {
    assert_eq!(x.len(), c * h * w);
    assert_eq!(k.len(), d * d * c * t);
    let ho = out_size(h, d, stride, pad).expect("kernel fits");
    let wo = out_size(w, d, stride, pad).expect("kernel fits");
    let xp = zero_pad(x, c, h, w, pad);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut y = vec![0.0; t * ho * wo];
    for ti in 0..t {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for si in 0..c {
                    for i in 0..d {
                        for j in 0..d {
                            let xv = xp[(si * hp + oh * stride + i) * wp + ow * stride + j];
                            acc += k[kernel_index(d, c, t, i, j, si, ti)] * xv;
                            *mults += 1;
                        }
                    }
                }
                y[(ti * ho + oh) * wo + ow] = acc;
            }
        }
    }
    (y, ho, wo)
}

/// Channel mixing at every position: `y[o, p] = Σ_c weight(c, o) · x[c, p]`.
pub fn pointwise(
    x: &[f64],
    cin: usize,
    cout: usize,
    weight: impl Fn(usize, usize) -> f64,
    mults: &mut u64,
) -> Vec<f64> {
    let plane = x.len() / cin;
    let mut y = vec![0.0; cout * plane];
    for o in 0..cout {
        for p in 0..plane {
            let mut acc = 0.0;
            for ci in 0..cin {
                acc += weight(ci, o) * x[ci * plane + p];
                *mults += 1;
            }
            y[o * plane + p] = acc;
        }
    }
    y
}

/// Three sublayers: `U3` mixes `S→R3` at input resolution, the `D×D×R3×R4`
/// core convolves with the layer's stride and padding, `U4` mixes `R4→T`.
#[allow(clippy::too_many_arguments)]
pub fn factorized_conv(
    x: &[f64],
    (s, h, w): (usize, usize, usize),
    u3: &[f64],
    core: &[f64],
    u4: &[f64],
    (d, r3, r4, t): (usize, usize, usize, usize),
    stride: usize,
    pad: usize,
    mults: &mut u64,
) -> (Vec<f64>, usize, usize) {
    assert_eq!(u3.len(), s * r3);
    assert_eq!(u4.len(), t * r4);
    let z = pointwise(x, s, r3, |c, a| u3[c * r3 + a], mults);
    let (zp, ho, wo) = conv(&z, (r3, h, w), core, d, r4, stride, pad, mults);
    let y = pointwise(&zp, r4, t, |b, o| u4[o * r4 + b], mults);
    (y, ho, wo)
}

/// `y = xᵀ W` for `W: M×N`.
pub fn vec_mat(x: &[f64], wgt: &[f64], m: usize, n: usize, mults: &mut u64) -> Vec<f64> {
    assert_eq!(x.len(), m);
    assert_eq!(wgt.len(), m * n);
    (0..n)
        .map(|j| {
            (0..m)
                .map(|i| {
                    *mults += 1;
                    x[i] * wgt[i * n + j]
                })
                .sum()
        })
        .collect()
}

/// Dense `K = core ×₃ U3 ×₄ U4`.
pub fn tucker_reconstruct(core: &[f64], u3: &[f64], u4: &[f64], (d, s, t, r3, r4): (usize, usize, usize, usize, usize)) -> Vec<f64> {
    let mut k = vec![0.0; d * d * s * t];
    for i in 0..d {
        for j in 0..d {
            for si in 0..s {
                for ti in 0..t {
                    let mut acc = 0.0;
                    for a in 0..r3 {
                        for b in 0..r4 {
                            acc += core[kernel_index(d, r3, r4, i, j, a, b)] * u3[si * r3 + a] * u4[ti * r4 + b];
                        }
                    }
                    k[kernel_index(d, s, t, i, j, si, ti)] = acc;
                }
            }
        }
    }
    k
}

/// `(ρ/r)·(‖uᵀu − I_r‖²_F + ‖uuᵀ − I_n‖²_F)` for `u: n×r`, by explicit sums.
pub fn ortho_penalty(u: &[f64], n: usize, r: usize, rho: f64) -> f64 {
    let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    let mut gram = 0.0;
    for a in 0..r {
        for b in 0..r {
            let v: f64 = (0..n).map(|i| u[i * r + a] * u[i * r + b]).sum::<f64>() - delta(a, b);
            gram += v * v;
        }
    }
    let mut cogram = 0.0;
    for i in 0..n {
        for j in 0..n {
            let v: f64 = (0..r).map(|a| u[i * r + a] * u[j * r + a]).sum::<f64>() - delta(i, j);
            cogram += v * v;
        }
    }
    rho / r as f64 * (gram + cogram)
}

/// `‖uᵀu − I‖_F` by explicit sums.
pub fn gram_residual(u: &[f64], n: usize, r: usize) -> f64 {
    let mut acc = 0.0;
    for a in 0..r {
        for b in 0..r {
            let v: f64 = (0..n).map(|i| u[i * r + a] * u[i * r + b]).sum::<f64>() - if a == b { 1.0 } else { 0.0 };
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// One network layer with 64-bit weights.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv {
        kernel: Vec<f64>,
        d: usize,
        s: usize,
        t: usize,
        stride: usize,
        pad: usize,
    },
    FactorizedConv {
        u3: Vec<f64>,
        core: Vec<f64>,
        u4: Vec<f64>,
        d: usize,
        s: usize,
        t: usize,
        r3: usize,
        r4: usize,
        stride: usize,
        pad: usize,
    },
    Fc {
        w: Vec<f64>,
        m: usize,
        n: usize,
    },
    FactorizedFc {
        a: Vec<f64>,
        b: Vec<f64>,
        m: usize,
        r: usize,
        n: usize,
    },
}

impl Layer {
    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv { .. } | Layer::FactorizedConv { .. })
    }

    /// Parameter vectors in the order `[kernel]`, `[u3, core, u4]`, `[w]`,
    /// `[a, b]`.
    pub fn params(&self) -> Vec<&Vec<f64>> {
        match self {
            Layer::Conv { kernel, .. } => vec![kernel],
            Layer::FactorizedConv { u3, core, u4, .. } => vec![u3, core, u4],
            Layer::Fc { w, .. } => vec![w],
            Layer::FactorizedFc { a, b, .. } => vec![a, b],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match self {
            Layer::Conv { kernel, .. } => vec![kernel],
            Layer::FactorizedConv { u3, core, u4, .. } => vec![u3, core, u4],
            Layer::Fc { w, .. } => vec![w],
            Layer::FactorizedFc { a, b, .. } => vec![a, b],
        }
    }

    /// 2-way conv factors as `(data, rows, cols)`.
    pub fn conv_factors(&self) -> Vec<(&[f64], usize, usize)> {
        match self {
            Layer::FactorizedConv { u3, u4, s, t, r3, r4, .. } => vec![(u3, *s, *r3), (u4, *t, *r4)],
            _ => Vec::new(),
        }
    }
}

/// Conv layers with rectifiers, global average pooling, then FC layers with
/// rectifiers between them and raw logits out. Inputs are shifted by
/// `-shift` first. Without conv layers the input is flattened.
#[derive(Debug, Clone)]
pub struct Net {
    pub input: (usize, usize, usize),
    pub shift: f64,
    pub layers: Vec<Layer>,
}

impl Net {
    pub fn logits(&self, x: &[f64], mults: &mut u64) -> Vec<f64> {
        self.forward(x, mults, &mut Vec::new())
    }

    /// Logits; `pattern` receives the sign of every rectified pre-activation.
    pub fn forward(&self, x: &[f64], mults: &mut u64, pattern: &mut Vec<bool>) -> Vec<f64> {
        let (mut c, mut h, mut w) = self.input;
        let mut act: Vec<f64> = x.iter().map(|v| v - self.shift).collect();
        let mut pooled = false;
        let n_fc = self.layers.iter().filter(|l| !l.is_conv()).count();
        let mut fc_seen = 0;
        for layer in &self.layers {
            if !layer.is_conv() && !pooled {
                pooled = true;
                if self.layers[0].is_conv() {
                    let plane = h * w;
                    act = (0..c)
                        .map(|ci| act[ci * plane..(ci + 1) * plane].iter().sum::<f64>() / plane as f64)
                        .collect();
                }
            }
            match layer {
                Layer::Conv { kernel, d, t, stride, pad, .. } => {
                    let (y, ho, wo) = conv(&act, (c, h, w), kernel, *d, *t, *stride, *pad, mults);
                    pattern.extend(y.iter().map(|&v| v > 0.0));
                    act = y.into_iter().map(|v| v.max(0.0)).collect();
                    (c, h, w) = (*t, ho, wo);
                }
                Layer::FactorizedConv {
                    u3,
                    core,
                    u4,
                    d,
                    t,
                    r3,
                    r4,
                    stride,
                    pad,
                    ..
                } => {
                    let (y, ho, wo) =
                        factorized_conv(&act, (c, h, w), u3, core, u4, (*d, *r3, *r4, *t), *stride, *pad, mults);
                    pattern.extend(y.iter().map(|&v| v > 0.0));
                    act = y.into_iter().map(|v| v.max(0.0)).collect();
                    (c, h, w) = (*t, ho, wo);
                }
                Layer::Fc { w: wgt, m, n } => {
                    act = vec_mat(&act, wgt, *m, *n, mults);
                    fc_seen += 1;
                }
                Layer::FactorizedFc { a, b, m, r, n } => {
                    let z = vec_mat(&act, a, *m, *r, mults);
                    act = vec_mat(&z, b, *r, *n, mults);
                    fc_seen += 1;
                }
            }
            if !layer.is_conv() && fc_seen < n_fc {
                pattern.extend(act.iter().map(|&v| v > 0.0));
                act.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        act
    }

    /// Mean softmax cross-entropy over `(image, label)` pairs.
    pub fn mean_ce(&self, images: &[Vec<f64>], labels: &[usize]) -> f64 {
        self.mean_ce_and_pattern(images, labels).0
    }

    /// Mean cross-entropy and the rectifier pattern, from one pass.
    pub fn mean_ce_and_pattern(&self, images: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<bool>) {
        let mut pattern = Vec::new();
        let total: f64 = images
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let z = self.forward(x, &mut 0, &mut pattern);
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                lse - z[y]
            })
            .sum();
        (total / images.len() as f64, pattern)
    }

    /// Rectifier pattern over a set of images.
    pub fn relu_pattern(&self, images: &[Vec<f64>]) -> Vec<bool> {
        let mut pattern = Vec::new();
        for x in images {
            self.forward(x, &mut 0, &mut pattern);
        }
        pattern
    }

    /// Mean cross-entropy plus `λ·Σ` penalties over every conv factor.
    pub fn objective(&self, images: &[Vec<f64>], labels: &[usize], rho: f64, lambda: f64) -> f64 {
        self.objective_and_pattern(images, labels, rho, lambda).0
    }

    /// [`Net::objective`] together with the rectifier pattern on `images`.
    pub fn objective_and_pattern(&self, images: &[Vec<f64>], labels: &[usize], rho: f64, lambda: f64) -> (f64, Vec<bool>) {
        let penalties: f64 = self
            .layers
            .iter()
            .flat_map(|l| l.conv_factors())
            .map(|(u, n, r)| ortho_penalty(u, n, r, rho))
            .sum();
        let (ce, pattern) = self.mean_ce_and_pattern(images, labels);
        (ce + lambda * penalties, pattern)
    }

    /// Every parameter vector, layer by layer.
    pub fn params(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

/// Central differences `(f(x + h·e_k) − f(x − h·e_k)) / 2h` for every `k`.
pub fn central_differences(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + h;
            let up = f(&probe);
            probe[k] = x[k] - h;
            let down = f(&probe);
            probe[k] = x[k];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences of `net`'s scalar `f` with respect to parameter
/// vector `which` (index into [`Net::params`]).
pub fn net_differences(net: &Net, which: usize, h: f64, f: impl Fn(&Net) -> f64) -> Vec<f64> {
    let base = net.params()[which].clone();
    let mut probe = net.clone();
    central_differences(&base, h, |p| {
        probe.params_mut()[which].copy_from_slice(p);
        f(&probe)
    })
}

/// Like [`net_differences`], but central differences are only meaningful
/// where the function is smooth on `[θ − h, θ + h]`. `f` returns the value
/// and the rectifier pattern it passed through; the result is `Err(k)` for
/// the first coordinate whose probes change that pattern.
pub fn smooth_net_differences(
    net: &Net,
    which: usize,
    h: f64,
    f: impl Fn(&Net) -> (f64, Vec<bool>),
) -> Result<Vec<f64>, usize> {
    let reference = f(net).1;
    let base = net.params()[which].clone();
    let mut probe = net.clone();
    let mut out = Vec::with_capacity(base.len());
    for k in 0..base.len() {
        let mut at = |v: f64| {
            probe.params_mut()[which][k] = v;
            let (value, pattern) = f(&probe);
            (value, pattern == reference)
        };
        let (up, same_up) = at(base[k] + h);
        let (down, same_down) = at(base[k] - h);
        probe.params_mut()[which][k] = base[k];
        if !(same_up && same_down) {
            return Err(k);
        }
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `‖a − b‖₂ / ‖b‖₂`, with `b` the reference; `‖a − b‖₂` when `b` is zero.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}

/// `max|a − b| / max|b|`, with `b` the reference.
pub fn rel_max(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let norm = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if norm > 0.0 {
        diff / norm
    } else {
        diff
    }
}
