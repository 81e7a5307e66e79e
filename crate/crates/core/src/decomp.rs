//! Tucker-2 factorization of convolution kernels and truncated-SVD splitting
//! of fully-connected weights.
//!
//! A kernel `K` of shape `D×D×S×T` is written as
//! `K[i,j,s,t] = Σ_{a,b} G[i,j,a,b] · U3[s,a] · U4[t,b]`
//! with a core `G: D×D×R3×R4` and factors `U3: S×R3`, `U4: T×R4`. Executed as a
//! network this is a 1×1 convolution (S→R3), a D×D convolution (R3→R4) that
//! carries the original stride and padding, and a 1×1 convolution (R4→T).
//!
//! The fit is a truncated HOSVD followed by HOOI sweeps; each sweep re-solves
//! one factor with the other fixed, so the reconstruction error never grows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svd::{leading_left_vectors, svd};
use crate::tensor::{Matrix, Tensor};

pub const DEFAULT_HOOI_MAX_ITERS: usize = 50;
pub const DEFAULT_HOOI_TOL: f64 = 1e-7;

/// Dense convolution: kernel `D×D×S×T`, stride and zero padding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayerSpec {
    pub fn new(kernel: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let s = kernel.shape();
        if s.len() != 4 || s[0] != s[1] {
            return Err(Error::Shape(format!(
                "convolution kernel must be D×D×S×T, got {s:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(Self {
            kernel,
            stride,
            padding,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn param_count(&self) -> u64 {
        self.kernel.len() as u64
    }
}

/// Tucker-2 form of a convolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedConv {
    /// `S×R3`
    pub u3: Tensor,
    /// `D×D×R3×R4`
    pub core: Tensor,
    /// `T×R4`
    pub u4: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl FactorizedConv {
    pub fn new(u3: Tensor, core: Tensor, u4: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let (c, a, b) = (core.shape(), u3.shape(), u4.shape());
        if c.len() != 4 || c[0] != c[1] || a.len() != 2 || b.len() != 2 {
            return Err(Error::Shape(format!(
                "factorized conv needs u3 S×R3, core D×D×R3×R4, u4 T×R4; got {a:?}, {c:?}, {b:?}"
            )));
        }
        if a[1] != c[2] || b[1] != c[3] {
            return Err(Error::Shape(format!(
                "factor ranks {}/{} disagree with core {c:?}",
                a[1], b[1]
            )));
        }
        if a[1] > a[0] || b[1] > b[0] {
            return Err(Error::Shape(format!(
                "ranks ({}, {}) exceed channels ({}, {})",
                a[1], b[1], a[0], b[0]
            )));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(Self {
            u3,
            core,
            u4,
            stride,
            padding,
        })
    }

    pub fn kernel_size(&self) -> usize {
        self.core.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.u3.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.u4.shape()[0]
    }

    /// `(R3, R4)`
    pub fn ranks(&self) -> (usize, usize) {
        (self.u3.shape()[1], self.u4.shape()[1])
    }

    /// `S·R3 + D²·R3·R4 + T·R4`
    pub fn param_count(&self) -> u64 {
        (self.u3.len() + self.core.len() + self.u4.len()) as u64
    }
}

/// Dense fully-connected layer `yᵀ = xᵀ W`, `W: M×N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcLayerSpec {
    pub weight: Tensor,
}

impl FcLayerSpec {
    pub fn new(weight: Tensor) -> Result<Self> {
        if weight.order() != 2 {
            return Err(Error::Shape(format!(
                "fully-connected weight must be 2-way, got {:?}",
                weight.shape()
            )));
        }
        Ok(Self { weight })
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> u64 {
        self.weight.len() as u64
    }
}

/// Two-sublayer form `zᵀ = xᵀ A`, `yᵀ = zᵀ B` with `A = U·S` (`M×R`) and
/// `B = Vᵀ` (`R×N`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedFc {
    pub a: Tensor,
    pub b: Tensor,
}

impl FactorizedFc {
    pub fn new(a: Tensor, b: Tensor) -> Result<Self> {
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!(
                "factorized fc needs A M×R and B R×N, got {sa:?} and {sb:?}"
            )));
        }
        if sa[1] > sa[0].min(sb[1]) {
            return Err(Error::RankOutOfRange {
                rank: sa[1],
                max: sa[0].min(sb[1]),
            });
        }
        Ok(Self { a, b })
    }

    pub fn in_features(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.b.shape()[1]
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    /// `M·R + R·N`
    pub fn param_count(&self) -> u64 {
        (self.a.len() + self.b.len()) as u64
    }

    /// The product `A·B`.
    pub fn weight(&self) -> Matrix {
        let a = self.a.to_matrix().expect("2-way");
        let b = self.b.to_matrix().expect("2-way");
        a.matmul(&b).expect("conformant")
    }
}

fn check_rank(rank: usize, max: usize) -> Result<()> {
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    Ok(())
}

/// Rank-`r` truncated SVD; singular values are folded into the left factor.
pub fn tsvd_truncate(w: &Matrix, r: usize) -> Result<FactorizedFc> {
    let (m, n) = w.shape();
    check_rank(r, m.min(n))?;
    let dec = svd(w)?;
    let a = Matrix::from_fn(m, r, |i, j| dec.u.get(i, j) * dec.s[j]);
    let b = dec.vt.leading_rows(r);
    FactorizedFc::new(a.to_tensor(), b.to_tensor())
}

pub fn factorize_fc_layer(layer: &FcLayerSpec, r: usize) -> Result<FactorizedFc> {
    tsvd_truncate(&layer.weight.to_matrix()?, r)
}

/// A Tucker-2 fit together with the relative reconstruction error after the
/// HOSVD initialization (first entry) and after every HOOI sweep.
#[derive(Debug, Clone)]
pub struct Tucker2Fit {
    pub factors: FactorizedConv,
    pub rel_errors: Vec<f64>,
}

/// Kernel in 64-bit with the spatial indices merged: `data[(p*S + s)*T + t]`.
struct Kernel64 {
    d2: usize,
    s: usize,
    t: usize,
    data: Vec<f64>,
    norm: f64,
}

impl Kernel64 {
    fn from_tensor(k: &Tensor) -> Self {
        let sh = k.shape();
        let data: Vec<f64> = k.data().iter().map(|&v| v as f64).collect();
        let norm = data.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self {
            d2: sh[0] * sh[1],
            s: sh[2],
            t: sh[3],
            data,
            norm,
        }
    }

    /// Mode-3 unfolding of `K ×₄ U4ᵀ`: `S × (D²·R4)`.
    fn project_out(&self, u4: &Matrix) -> Matrix {
        let r4 = u4.cols();
        let mut m = Matrix::zeros(self.s, self.d2 * r4);
        for p in 0..self.d2 {
            for s in 0..self.s {
                let krow = &self.data[(p * self.s + s) * self.t..][..self.t];
                for b in 0..r4 {
                    let mut acc = 0.0;
                    for (t, &kv) in krow.iter().enumerate() {
                        acc += kv * u4.get(t, b);
                    }
                    m.set(s, p * r4 + b, acc);
                }
            }
        }
        m
    }

    /// Mode-4 unfolding of `K ×₃ U3ᵀ`: `T × (D²·R3)`.
    fn project_in(&self, u3: &Matrix) -> Matrix {
        let r3 = u3.cols();
        let mut m = Matrix::zeros(self.t, self.d2 * r3);
        for p in 0..self.d2 {
            for a in 0..r3 {
                for s in 0..self.s {
                    let w = u3.get(s, a);
                    if w == 0.0 {
                        continue;
                    }
                    let krow = &self.data[(p * self.s + s) * self.t..][..self.t];
                    for (t, &kv) in krow.iter().enumerate() {
                        let cur = m.get(t, p * r3 + a);
                        m.set(t, p * r3 + a, cur + w * kv);
                    }
                }
            }
        }
        m
    }

    /// Core `G[p, a, b] = Σ_{s,t} K[p,s,t] U3[s,a] U4[t,b]`.
    fn core(&self, u3: &Matrix, u4: &Matrix) -> Vec<f64> {
        let (r3, r4) = (u3.cols(), u4.cols());
        let mut g = vec![0.0; self.d2 * r3 * r4];
        for p in 0..self.d2 {
            // KU4[s, b]
            let mut ku4 = vec![0.0; self.s * r4];
            for s in 0..self.s {
                let krow = &self.data[(p * self.s + s) * self.t..][..self.t];
                for b in 0..r4 {
                    ku4[s * r4 + b] = krow
                        .iter()
                        .enumerate()
                        .map(|(t, &kv)| kv * u4.get(t, b))
                        .sum();
                }
            }
            for a in 0..r3 {
                for b in 0..r4 {
                    let mut acc = 0.0;
                    for s in 0..self.s {
                        acc += u3.get(s, a) * ku4[s * r4 + b];
                    }
                    g[(p * r3 + a) * r4 + b] = acc;
                }
            }
        }
        g
    }

    fn rel_error(&self, g: &[f64], u3: &Matrix, u4: &Matrix) -> f64 {
        let recon = reconstruct64(g, u3, u4, self.d2);
        let err = recon
            .iter()
            .zip(&self.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        if self.norm > 0.0 {
            err / self.norm
        } else {
            err
        }
    }
}

fn reconstruct64(g: &[f64], u3: &Matrix, u4: &Matrix, d2: usize) -> Vec<f64> {
    let (s_dim, r3) = u3.shape();
    let (t_dim, r4) = u4.shape();
    let mut out = vec![0.0; d2 * s_dim * t_dim];
    let mut gu4 = vec![0.0; r3 * t_dim];
    for p in 0..d2 {
        // GU4[a, t] = Σ_b G[p,a,b] U4[t,b]
        for a in 0..r3 {
            for t in 0..t_dim {
                let mut acc = 0.0;
                for b in 0..r4 {
                    acc += g[(p * r3 + a) * r4 + b] * u4.get(t, b);
                }
                gu4[a * t_dim + t] = acc;
            }
        }
        for s in 0..s_dim {
            let orow = &mut out[(p * s_dim + s) * t_dim..][..t_dim];
            for a in 0..r3 {
                let w = u3.get(s, a);
                if w == 0.0 {
                    continue;
                }
                for (o, &v) in orow.iter_mut().zip(&gu4[a * t_dim..(a + 1) * t_dim]) {
                    *o += w * v;
                }
            }
        }
    }
    out
}

fn leading_left(m: &Matrix, r: usize) -> Result<Matrix> {
    leading_left_vectors(m, r)
}

/// Tucker-2 fit of a `D×D×S×T` kernel at ranks `(r3, r4)`; the factorized
/// layer uses stride 1 and no padding.
pub fn tucker2_fit(k: &Tensor, r3: usize, r4: usize, max_iters: usize, tol: f64) -> Result<Tucker2Fit> {
    let sh = k.shape();
    if sh.len() != 4 || sh[0] != sh[1] {
        return Err(Error::Shape(format!("kernel must be D×D×S×T, got {sh:?}")));
    }
    check_rank(r3, sh[2])?;
    check_rank(r4, sh[3])?;
    if !k.is_finite() {
        return Err(Error::NonFinite("convolution kernel"));
    }
    let kern = Kernel64::from_tensor(k);

    // Truncated HOSVD.
    let identity_t = Matrix::identity(kern.t);
    let mut u3 = leading_left(&kern.project_out(&identity_t), r3)?;
    let identity_s = Matrix::identity(kern.s);
    let mut u4 = leading_left(&kern.project_in(&identity_s), r4)?;
    let mut g = kern.core(&u3, &u4);
    let mut errors = vec![kern.rel_error(&g, &u3, &u4)];

    for _ in 0..max_iters {
        let prev = *errors.last().expect("non-empty");
        if prev <= f64::EPSILON {
            break;
        }
        let next_u3 = leading_left(&kern.project_out(&u4), r3)?;
        let next_u4 = leading_left(&kern.project_in(&next_u3), r4)?;
        let next_g = kern.core(&next_u3, &next_u4);
        let err = kern.rel_error(&next_g, &next_u3, &next_u4);
        u3 = next_u3;
        u4 = next_u4;
        g = next_g;
        errors.push(err);
        if (prev - err) < tol * prev {
            break;
        }
    }

    let d = sh[0];
    let core = Tensor::new(vec![d, d, r3, r4], g.iter().map(|&v| v as f32).collect())?;
    Ok(Tucker2Fit {
        factors: FactorizedConv::new(u3.to_tensor(), core, u4.to_tensor(), 1, 0)?,
        rel_errors: errors,
    })
}

pub fn tucker2_decompose(
    k: &Tensor,
    r3: usize,
    r4: usize,
    max_iters: usize,
    tol: f64,
) -> Result<FactorizedConv> {
    Ok(tucker2_fit(k, r3, r4, max_iters, tol)?.factors)
}

/// `core ×₃ U3 ×₄ U4`, shape `D×D×S×T`.
pub fn tucker2_reconstruct(f: &FactorizedConv) -> Tensor {
    let d = f.kernel_size();
    let u3 = f.u3.to_matrix().expect("2-way");
    let u4 = f.u4.to_matrix().expect("2-way");
    let g: Vec<f64> = f.core.data().iter().map(|&v| v as f64).collect();
    let out = reconstruct64(&g, &u3, &u4, d * d);
    Tensor::new(
        vec![d, d, f.in_channels(), f.out_channels()],
        out.into_iter().map(|v| v as f32).collect(),
    )
    .expect("shape is consistent")
}

/// Tucker-2 factorization of a layer; stride and padding move onto the
/// middle `D×D` sublayer.
pub fn factorize_conv_layer(layer: &ConvLayerSpec, r3: usize, r4: usize) -> Result<FactorizedConv> {
    let mut f = tucker2_decompose(
        &layer.kernel,
        r3,
        r4,
        DEFAULT_HOOI_MAX_ITERS,
        DEFAULT_HOOI_TOL,
    )?;
    f.stride = layer.stride;
    f.padding = layer.padding;
    Ok(f)
}
