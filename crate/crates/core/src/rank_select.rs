//! Rank selection by empirical variational-Bayes matrix factorization (EVBMF).
//!
//! For a fully observed `L×M` matrix (`L ≤ M` after transposing) the global
//! EVB solution shrinks each singular value independently. Writing
//! `α = L/M` and `x = s²/(M·σ²)`, a component survives iff
//! `x > x̄ = (1 + τ̄)(1 + α/τ̄)` where `τ̄ > 0` is the root of
//! `ln(1+τ) + α·ln(1+τ/α) − τ = 0`. The noise variance `σ²` minimizes the EVB
//! free energy, searched on a log grid between analytic bounds and refined
//! by golden section.
//!
//! Because `x̄ ≥ (1+√α)²`, every retained singular value lies above the
//! Marchenko–Pastur edge `σ(√L + √M)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::svd::singular_values;
use crate::tensor::{unfold, Matrix, Tensor};

/// Components at or below this fraction of the largest singular value are
/// numerically zero and never retained.
pub const NOISELESS_FLOOR: f64 = 1e-6;

const GRID_POINTS: usize = 256;
const GOLDEN_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub layer: String,
    pub estimated_rank: usize,
    pub singular_values: Vec<f64>,
    pub retained_mask: Vec<bool>,
    pub noise_sigma2: f64,
}

impl RankReport {
    fn with_layer(mut self, layer: impl Into<String>) -> Self {
        self.layer = layer.into();
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum R4Rule {
    /// `R4 = round(R3 · T / S)`
    ChannelRatio,
    /// EVBMF on the output-channel unfolding as well.
    VbmfIndependent,
}

impl std::str::FromStr for R4Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "channel_ratio" => Ok(R4Rule::ChannelRatio),
            "vbmf_independent" => Ok(R4Rule::VbmfIndependent),
            other => Err(Error::Config(format!(
                "unknown rank policy `{other}` (expected channel_ratio or vbmf_independent)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankPolicy {
    pub r4_rule: R4Rule,
    pub min_rank: usize,
    pub rank_cap_fraction: f64,
}

impl Default for RankPolicy {
    fn default() -> Self {
        Self {
            r4_rule: R4Rule::ChannelRatio,
            min_rank: 1,
            rank_cap_fraction: 1.0,
        }
    }
}

impl RankPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.min_rank == 0 {
            return Err(Error::Config("min_rank must be at least 1".into()));
        }
        if !(self.rank_cap_fraction > 0.0 && self.rank_cap_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "rank_cap_fraction must lie in (0, 1], got {}",
                self.rank_cap_fraction
            )));
        }
        Ok(())
    }

    fn cap(&self, dim: usize) -> usize {
        ((self.rank_cap_fraction * dim as f64).ceil() as usize).clamp(1, dim)
    }
}

/// Positive root of `ln(1+τ) + α·ln(1+τ/α) − τ`.
pub fn evb_tau(alpha: f64) -> f64 {
    let f = |t: f64| (1.0 + t).ln() + alpha * (1.0 + t / alpha).ln() - t;
    // f(0) = 0 with f'(0) = 1, so f > 0 just right of zero; f → −∞.
    let mut lo = alpha.sqrt().min(1.0) * 1e-3;
    let mut hi = 1.0;
    while f(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `x̄ = (1+τ̄)(1+α/τ̄)`
pub fn evb_threshold_factor(alpha: f64) -> f64 {
    let tau = evb_tau(alpha);
    (1.0 + tau) * (1.0 + alpha / tau)
}

/// EVB free energy as a function of `σ²`, with `σ²`-independent constants
/// dropped so exactly-zero singular values are harmless.
fn free_energy(sigma2: f64, s: &[f64], l: usize, m: usize, xbar: f64) -> f64 {
    let alpha = l as f64 / m as f64;
    let msig = m as f64 * sigma2;
    let log_msig = msig.ln();
    s.iter()
        .map(|&sv| {
            let x = sv * sv / msig;
            if x <= xbar {
                x + log_msig
            } else {
                let b = x - (1.0 + alpha);
                let tau = 0.5 * (b + (b * b - 4.0 * alpha).max(0.0).sqrt());
                x - tau + (tau + 1.0).ln() + log_msig + alpha * (tau / alpha + 1.0).ln()
            }
        })
        .sum()
}

fn minimize_log_sigma2(lower: f64, upper: f64, obj: impl Fn(f64) -> f64) -> f64 {
    let (a, b) = (lower.ln(), upper.ln());
    let step = (b - a) / (GRID_POINTS - 1) as f64;
    let grid = |k: usize| a + step * k as f64;
    let best = (0..GRID_POINTS)
        .map(|k| (k, obj(grid(k).exp())))
        .fold((0, f64::INFINITY), |acc, (k, v)| if v < acc.1 { (k, v) } else { acc });
    let mut lo = grid(best.0.saturating_sub(1));
    let mut hi = grid((best.0 + 1).min(GRID_POINTS - 1));
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = hi - g * (hi - lo);
    let mut d = lo + g * (hi - lo);
    let (mut fc, mut fd) = (obj(c.exp()), obj(d.exp()));
    for _ in 0..GOLDEN_ITERS {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - g * (hi - lo);
            fc = obj(c.exp());
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + g * (hi - lo);
            fd = obj(d.exp());
        }
    }
    let refined = 0.5 * (lo + hi);
    // Keep the grid point if golden section wandered into a worse basin.
    if obj(refined.exp()) <= best.1 {
        refined.exp()
    } else {
        grid(best.0).exp()
    }
}

/// Estimate the rank of `m` by EVBMF.
pub fn evbmf_rank(m: &Matrix) -> Result<RankReport> {
    if !m.is_finite() {
        return Err(Error::NonFinite("matrix passed to evbmf"));
    }
    let (l, mm) = if m.rows() <= m.cols() {
        (m.rows(), m.cols())
    } else {
        (m.cols(), m.rows())
    };
    let s = singular_values(m)?;
    let s1 = s.first().copied().unwrap_or(0.0);

    let report = |sigma2: f64, keep: &dyn Fn(f64) -> bool| {
        let mask: Vec<bool> = s.iter().map(|&v| keep(v)).collect();
        RankReport {
            layer: String::new(),
            estimated_rank: mask.iter().filter(|&&b| b).count(),
            singular_values: s.clone(),
            retained_mask: mask,
            noise_sigma2: sigma2,
        }
    };

    if s1 == 0.0 {
        return Ok(report(0.0, &|_| false));
    }
    let floor = NOISELESS_FLOOR * s1;

    let alpha = l as f64 / mm as f64;
    let xbar = evb_threshold_factor(alpha);
    let (lf, mf) = (l as f64, mm as f64);

    let energy: f64 = s.iter().map(|v| v * v).sum();
    let upper = energy / (lf * mf);
    let k0 = ((lf / (1.0 + alpha)).ceil() as usize).saturating_sub(1).min(l - 1);
    let tail = &s[k0..];
    let tail_mean = tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64;
    let lower = (s[k0] * s[k0] / (mf * xbar)).max(tail_mean / mf);

    if !(lower < upper * (1.0 - 1e-12)) {
        // Flat spectrum: no noise level separates signal from noise.
        return Ok(report(0.0, &|v| v > floor));
    }
    let lower = lower.max(upper * 1e-30);
    let sigma2 = minimize_log_sigma2(lower, upper, |s2| free_energy(s2, &s, l, mm, xbar));
    let threshold = (mf * sigma2 * xbar).sqrt();
    Ok(report(sigma2, &|v| v > threshold && v > floor))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvRanks {
    pub r3: usize,
    pub r4: usize,
    /// EVBMF on the input-channel (mode-3) unfolding.
    pub mode3: RankReport,
    /// EVBMF on the output-channel unfolding, under `vbmf_independent`.
    pub mode4: Option<RankReport>,
}

fn clamp_rank(est: usize, min_rank: usize, max: usize) -> usize {
    est.clamp(min_rank.min(max), max)
}

/// `round(r3 · t / s)` with ties rounded up.
pub fn channel_ratio_rank(r3: usize, s: usize, t: usize) -> usize {
    (2 * r3 * t + s) / (2 * s)
}

pub fn select_conv_ranks(k: &Tensor, policy: &RankPolicy) -> Result<ConvRanks> {
    policy.validate()?;
    let sh = k.shape();
    if sh.len() != 4 || sh[0] != sh[1] {
        return Err(Error::Shape(format!("kernel must be D×D×S×T, got {sh:?}")));
    }
    let (s, t) = (sh[2], sh[3]);
    let mode3 = evbmf_rank(&unfold(k, 2)?)?;
    let r3 = clamp_rank(mode3.estimated_rank, policy.min_rank, policy.cap(s));
    let (r4, mode4) = match policy.r4_rule {
        R4Rule::ChannelRatio => (
            clamp_rank(channel_ratio_rank(r3, s, t), policy.min_rank, t),
            None,
        ),
        R4Rule::VbmfIndependent => {
            let rep = evbmf_rank(&unfold(k, 3)?)?;
            (
                clamp_rank(rep.estimated_rank, policy.min_rank, policy.cap(t)),
                Some(rep),
            )
        }
    };
    Ok(ConvRanks { r3, r4, mode3, mode4 })
}

/// Labelled variant used when walking a model.
pub fn select_conv_ranks_for(layer: &str, k: &Tensor, policy: &RankPolicy) -> Result<ConvRanks> {
    let mut r = select_conv_ranks(k, policy)?;
    r.mode3 = r.mode3.with_layer(format!("{layer}/mode3"));
    r.mode4 = r.mode4.map(|m| m.with_layer(format!("{layer}/mode4")));
    Ok(r)
}

pub fn select_fc_rank(w: &Matrix, policy: &RankPolicy) -> Result<(usize, RankReport)> {
    policy.validate()?;
    let rep = evbmf_rank(w)?;
    let r = clamp_rank(rep.estimated_rank, policy.min_rank, w.rows().min(w.cols()));
    Ok((r, rep))
}

pub fn select_fc_rank_for(layer: &str, w: &Matrix, policy: &RankPolicy) -> Result<(usize, RankReport)> {
    let (r, rep) = select_fc_rank(w, policy)?;
    Ok((r, rep.with_layer(layer)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svd::svd;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Σ_k scale_k · a_k b_kᵀ with orthonormal a, b plus i.i.d. noise.
    fn planted(l: usize, m: usize, scales: &[f64], sigma: f64, rng: &mut ChaCha8Rng) -> Matrix {
        let r = scales.len();
        let a = svd(&Matrix::from_fn(l, r, |_, _| rng.sample(StandardNormal))).unwrap().u;
        let b = svd(&Matrix::from_fn(m, r, |_, _| rng.sample(StandardNormal))).unwrap().u;
        Matrix::from_fn(l, m, |i, j| {
            let signal: f64 = (0..r).map(|k| scales[k] * a.get(i, k) * b.get(j, k)).sum();
            signal + sigma * rng.sample::<f64, _>(StandardNormal)
        })
    }

    #[test]
    fn tau_at_square_aspect() {
        // 2·ln(1+τ) = τ
        let t = evb_tau(1.0);
        assert!((2.0 * (1.0 + t).ln() - t).abs() < 1e-12);
        assert!((t - 2.5129).abs() < 1e-3);
    }

    #[test]
    fn threshold_factor_exceeds_bulk_edge() {
        for alpha in [0.01, 0.1, 0.25, 0.5, 1.0] {
            let xbar = evb_threshold_factor(alpha);
            assert!(xbar > (1.0 + alpha.sqrt()).powi(2));
        }
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let r = evbmf_rank(&Matrix::zeros(5, 9)).unwrap();
        assert_eq!(r.estimated_rank, 0);
        assert_eq!(r.noise_sigma2, 0.0);
    }

    #[test]
    fn noiseless_planted_rank_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = planted(32, 128, &[3.0, 1.5], 0.0, &mut rng);
        let r = evbmf_rank(&m).unwrap();
        assert_eq!(r.estimated_rank, 2);
        assert_eq!(&r.retained_mask[..3], &[true, true, false]);
    }

    #[test]
    fn noisy_planted_rank_two_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hits = (0..100)
            .filter(|_| {
                let m = planted(64, 256, &[2.0, 1.0], 0.01, &mut rng);
                evbmf_rank(&m).unwrap().estimated_rank == 2
            })
            .count();
        assert!(hits >= 95, "{hits}/100");
    }

    #[test]
    fn identity_keeps_every_component() {
        let r = evbmf_rank(&Matrix::identity(10)).unwrap();
        assert_eq!(r.estimated_rank, 10);
        let (rank, _) = select_fc_rank(&Matrix::identity(10), &RankPolicy::default()).unwrap();
        assert_eq!(rank, 10);
    }

    #[test]
    fn retained_values_clear_the_bulk_edge() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for sigma in [0.01, 0.05, 0.2] {
            let m = planted(40, 90, &[2.0, 1.0, 0.5], sigma, &mut rng);
            let r = evbmf_rank(&m).unwrap();
            let edge = r.noise_sigma2.sqrt() * (40f64.sqrt() + 90f64.sqrt());
            for (v, keep) in r.singular_values.iter().zip(&r.retained_mask) {
                if *keep {
                    assert!(*v > edge);
                }
            }
            // prefix property
            let k = r.estimated_rank;
            assert!(r.retained_mask[..k].iter().all(|&b| b));
            assert!(r.retained_mask[k..].iter().all(|&b| !b));
        }
    }

    #[test]
    fn rank_is_scale_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let m = planted(30, 50, &[1.0, 0.6, 0.3], 0.03, &mut rng);
            let base = evbmf_rank(&m).unwrap().estimated_rank;
            for c in [1e-3, 0.37, 5.0, 1e4] {
                assert_eq!(evbmf_rank(&m.scale(c)).unwrap().estimated_rank, base);
            }
        }
    }

    #[test]
    fn transposition_does_not_change_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = planted(20, 60, &[1.0, 0.5], 0.02, &mut rng);
        assert_eq!(
            evbmf_rank(&m).unwrap().estimated_rank,
            evbmf_rank(&m.transpose()).unwrap().estimated_rank
        );
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Matrix::zeros(3, 3);
        m.set(1, 1, f64::NAN);
        assert!(matches!(evbmf_rank(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn channel_ratio_arithmetic() {
        assert_eq!(channel_ratio_rank(4, 16, 32), 8);
        assert_eq!(channel_ratio_rank(5, 16, 16), 5);
        // 3·5/2 = 7.5 rounds up
        assert_eq!(channel_ratio_rank(3, 2, 5), 8);
    }

    fn planted_kernel(d: usize, s: usize, t: usize, r3: usize, rng: &mut ChaCha8Rng) -> Tensor {
        // K[i,j,s,t] = Σ_a U[s,a] · C[i,j,a,t]
        let u = svd(&Matrix::from_fn(s, r3, |_, _| rng.sample(StandardNormal))).unwrap().u;
        let c: Vec<f64> = (0..d * d * r3 * t).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::from_fn(&[d, d, s, t], |ix| {
            let p = ix[0] * d + ix[1];
            (0..r3)
                .map(|a| u.get(ix[2], a) * c[(p * r3 + a) * t + ix[3]])
                .sum::<f64>() as f32
        })
    }

    #[test]
    fn conv_ranks_follow_channel_ratio() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let k = planted_kernel(3, 16, 32, 4, &mut rng);
        let ranks = select_conv_ranks(&k, &RankPolicy::default()).unwrap();
        assert_eq!((ranks.r3, ranks.r4), (4, 8));
        assert!(ranks.mode4.is_none());

        let k = planted_kernel(3, 8, 8, 3, &mut rng);
        let ranks = select_conv_ranks(&k, &RankPolicy::default()).unwrap();
        assert_eq!(ranks.r3, ranks.r4);
    }

    #[test]
    fn conv_ranks_respect_clamps() {
        let policy = RankPolicy {
            min_rank: 2,
            rank_cap_fraction: 0.25,
            ..RankPolicy::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = planted_kernel(3, 16, 32, 8, &mut rng);
        let ranks = select_conv_ranks(&k, &policy).unwrap();
        assert_eq!(ranks.r3, 4);
        assert_eq!(ranks.r4, 8);

        // the cap wins over min_rank: ceil(0.25·4) = 1, then round(1·6/4) = 2
        let zero = Tensor::zeros(&[3, 3, 4, 6]);
        let ranks = select_conv_ranks(&zero, &policy).unwrap();
        assert_eq!((ranks.r3, ranks.r4), (1, 2));
        let roomier = RankPolicy {
            rank_cap_fraction: 0.5,
            ..policy
        };
        let ranks = select_conv_ranks(&zero, &roomier).unwrap();
        assert_eq!((ranks.r3, ranks.r4), (2, 3));

        let indep = RankPolicy {
            r4_rule: R4Rule::VbmfIndependent,
            ..RankPolicy::default()
        };
        let ranks = select_conv_ranks(&zero, &indep).unwrap();
        assert_eq!((ranks.r3, ranks.r4), (1, 1));
        assert!(ranks.mode4.is_some());
    }

    #[test]
    fn fc_rank_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = planted(12, 7, &[2.0], 0.0, &mut rng);
        assert_eq!(select_fc_rank(&m, &RankPolicy::default()).unwrap().0, 1);
        assert_eq!(
            select_fc_rank(&Matrix::zeros(6, 4), &RankPolicy::default()).unwrap().0,
            1
        );
    }

    #[test]
    fn policy_validation() {
        let bad = RankPolicy {
            min_rank: 0,
            ..RankPolicy::default()
        };
        assert!(bad.validate().is_err());
        let bad = RankPolicy {
            rank_cap_fraction: 1.5,
            ..RankPolicy::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!("vbmf_independent".parse::<R4Rule>().unwrap(), R4Rule::VbmfIndependent);
        assert!("median".parse::<R4Rule>().is_err());
    }
}
