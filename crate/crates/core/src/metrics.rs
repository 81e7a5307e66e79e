//! Parameter and multiply counts, compression and speed-up ratios, Top-1.
//!
//! Counts are exact for the constructed sublayers: a factorized conv holds
//! `S·R3 + D²·R3·R4 + T·R4` weights. The literal formulas, whose middle term
//! reads `R·D²`, are available through [`literal_formula_conv`] for comparison
//! only. No layer carries a bias.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(D²·S·T, S·R3 + D²·R3·R4 + T·R4)`
pub fn conv_param_counts(d: usize, s: usize, t: usize, r3: usize, r4: usize) -> (u64, u64) {
    let (d, s, t, r3, r4) = (d as u64, s as u64, t as u64, r3 as u64, r4 as u64);
    (d * d * s * t, s * r3 + d * d * r3 * r4 + t * r4)
}

pub fn conv_cr(d: usize, s: usize, t: usize, r3: usize, r4: usize) -> f64 {
    let (p, q) = conv_param_counts(d, s, t, r3, r4);
    p as f64 / q as f64
}

/// Multiplies of the dense layer and of the three sublayers.
///
/// The first 1×1 sublayer runs at input resolution `H×W`; the core and the
/// second 1×1 sublayer run at output resolution `H′×W′`.
#[allow(clippy::too_many_arguments)]
pub fn conv_mult_counts(
    d: usize,
    s: usize,
    t: usize,
    r3: usize,
    r4: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> (u64, u64) {
    let [d, s, t, r3, r4, h, w, ho, wo] = [d, s, t, r3, r4, h, w, ho, wo].map(|v| v as u64);
    let out = ho * wo;
    (t * s * d * d * out, r3 * s * w * h + r3 * r4 * d * d * out + t * r4 * out)
}

#[allow(clippy::too_many_arguments)]
pub fn conv_speedup(
    d: usize,
    s: usize,
    t: usize,
    r3: usize,
    r4: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> f64 {
    let (p, q) = conv_mult_counts(d, s, t, r3, r4, h, w, ho, wo);
    p as f64 / q as f64
}

/// `(M·N, M·R + R·N)`
pub fn fc_param_counts(m: usize, n: usize, r: usize) -> (u64, u64) {
    let (m, n, r) = (m as u64, n as u64, r as u64);
    (m * n, m * r + r * n)
}

/// Compression and speed-up of a factorized FC layer; the two coincide.
pub fn fc_cr(m: usize, n: usize, r: usize) -> f64 {
    let (p, q) = fc_param_counts(m, n, r);
    p as f64 / q as f64
}

/// `(CR, SR)` with the single-rank denominators read literally: `R3` on the
/// input factor and `R4` on both terms that follow it.
#[allow(clippy::too_many_arguments)]
pub fn literal_formula_conv(
    d: usize,
    s: usize,
    t: usize,
    r3: usize,
    r4: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
) -> (f64, f64) {
    let [d, s, t, r3, r4, h, w, ho, wo] = [d, s, t, r3, r4, h, w, ho, wo].map(|v| v as f64);
    let cr = t * s * d * d / (r3 * s + r4 * d * d + t * r4);
    let out = ho * wo;
    let sr = t * s * d * d * out / (r3 * s * w * h + r4 * d * d * out + t * r4 * out);
    (cr, sr)
}

/// Percentage of predictions equal to their label.
pub fn top1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64 * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDims {
    Conv {
        d: usize,
        s: usize,
        t: usize,
        h: usize,
        w: usize,
        ho: usize,
        wo: usize,
    },
    Fc {
        m: usize,
        n: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer: String,
    pub dims: LayerDims,
    /// `[R3, R4]` for convs, `[R]` for FC layers, empty when left dense.
    pub ranks: Vec<usize>,
    pub p_original: u64,
    pub p_compressed: u64,
    pub cr: f64,
    pub sr: f64,
}

impl LayerEntry {
    pub fn conv(layer: impl Into<String>, dims: LayerDims, ranks: Option<(usize, usize)>) -> Result<Self> {
        let LayerDims::Conv { d, s, t, h, w, ho, wo } = dims else {
            return Err(Error::Shape("conv entry needs conv dimensions".into()));
        };
        let (p_original, p_compressed, sr, ranks) = match ranks {
            Some((r3, r4)) => {
                let (p, q) = conv_param_counts(d, s, t, r3, r4);
                (p, q, conv_speedup(d, s, t, r3, r4, h, w, ho, wo), vec![r3, r4])
            }
            None => {
                let p = conv_param_counts(d, s, t, 1, 1).0;
                (p, p, 1.0, Vec::new())
            }
        };
        Ok(Self {
            layer: layer.into(),
            dims,
            ranks,
            p_original,
            p_compressed,
            cr: p_original as f64 / p_compressed as f64,
            sr,
        })
    }

    pub fn fc(layer: impl Into<String>, m: usize, n: usize, rank: Option<usize>) -> Self {
        let (p_original, p_compressed, ranks) = match rank {
            Some(r) => {
                let (p, q) = fc_param_counts(m, n, r);
                (p, q, vec![r])
            }
            None => (m as u64 * n as u64, m as u64 * n as u64, Vec::new()),
        };
        let cr = p_original as f64 / p_compressed as f64;
        Self {
            layer: layer.into(),
            dims: LayerDims::Fc { m, n },
            ranks,
            p_original,
            p_compressed,
            cr,
            sr: cr,
        }
    }

    /// `(CR, SR)` from the literal formulas; FC layers are unaffected.
    pub fn literal_formula(&self) -> (f64, f64) {
        match (self.dims, self.ranks.as_slice()) {
            (LayerDims::Conv { d, s, t, h, w, ho, wo }, &[r3, r4]) => {
                literal_formula_conv(d, s, t, r3, r4, h, w, ho, wo)
            }
            _ => (self.cr, self.sr),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelTotals {
    pub p_original: u64,
    pub p_compressed: u64,
    pub cr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1_before: Option<f64>,
    pub top1_after: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub layers: Vec<LayerEntry>,
    pub totals: ModelTotals,
    pub accuracy: Accuracy,
    #[serde(default)]
    pub rank_reports: Vec<crate::rank_select::RankReport>,
}

/// Whole-model `P_original / P_compressed` over the layer entries.
pub fn model_totals(layers: &[LayerEntry]) -> ModelTotals {
    let p_original = layers.iter().map(|l| l.p_original).sum();
    let p_compressed = layers.iter().map(|l| l.p_compressed).sum();
    ModelTotals {
        p_original,
        p_compressed,
        cr: model_cr(p_original, p_compressed),
    }
}

pub fn model_cr(p_original: u64, p_compressed: u64) -> f64 {
    p_original as f64 / p_compressed as f64
}

impl CompressionReport {
    pub fn new(layers: Vec<LayerEntry>, accuracy: Accuracy, rank_reports: Vec<crate::rank_select::RankReport>) -> Self {
        let totals = model_totals(&layers);
        Self {
            layers,
            totals,
            accuracy,
            rank_reports,
        }
    }

    pub fn model_cr(&self) -> f64 {
        self.totals.cr
    }

    /// Plain-text table. With `literal_formula` the conv rows use the literal
    /// formulas and the totals row is unchanged.
    pub fn render(&self, literal_formula: bool) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:<10} {:>12} {:>12} {:>8} {:>8}\n",
            "layer", "ranks", "P_original", "P_compressed", "CR", "SR"
        ));
        for l in &self.layers {
            let (cr, sr) = if literal_formula { l.literal_formula() } else { (l.cr, l.sr) };
            let ranks = if l.ranks.is_empty() {
                "dense".to_string()
            } else {
                l.ranks.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(",")
            };
            out.push_str(&format!(
                "{:<10} {:<10} {:>12} {:>12} {:>8.3} {:>8.3}\n",
                l.layer, ranks, l.p_original, l.p_compressed, cr, sr
            ));
        }
        out.push_str(&format!(
            "{:<10} {:<10} {:>12} {:>12} {:>7.2}x\n",
            "total", "", self.totals.p_original, self.totals.p_compressed, self.totals.cr
        ));
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}%"));
        out.push_str(&format!(
            "top1 before {}  after {}\n",
            pct(self.accuracy.top1_before),
            pct(self.accuracy.top1_after)
        ));
        if literal_formula {
            out.push_str("conv CR/SR shown with the literal R·D² middle term\n");
        }
        out
    }
}
