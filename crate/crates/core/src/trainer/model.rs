//! Block-structured classifier: convolutions, global average pool, then
//! fully-connected layers, with a rectifier between consecutive blocks and
//! softmax cross-entropy on the last output.
//!
//! Pixels in `[0, 1]` are shifted by [`INPUT_SHIFT`] before the first block;
//! no layer has a bias, so this centring is the only offset in the network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv_exec::{
    conv2d_factorized, conv2d_factorized_grad, conv2d_reference, conv2d_reference_grad, conv_output_size,
    fc_factorized_forward, fc_factorized_grad, fc_forward, fc_grad,
};
use crate::dataset::Dataset;
use crate::decomp::{tucker2_reconstruct, ConvLayerSpec, FactorizedConv, FactorizedFc, FcLayerSpec};
use crate::error::{Error, Result};
use crate::metrics::{top1, CompressionReport, LayerDims, LayerEntry};
use crate::rank_select::RankReport;
use crate::tensor::{Matrix, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Block {
    Conv(ConvLayerSpec),
    FactorizedConv(FactorizedConv),
    Fc(FcLayerSpec),
    FactorizedFc(FactorizedFc),
}

impl Block {
    pub fn kind(&self) -> &'static str {
        match self {
            Block::Conv(_) => "conv",
            Block::FactorizedConv(_) => "factorized_conv",
            Block::Fc(_) => "fc",
            Block::FactorizedFc(_) => "factorized_fc",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Block::Conv(_) | Block::FactorizedConv(_))
    }

    /// Weight tensors in a fixed order: `[kernel]`, `[u3, core, u4]`,
    /// `[weight]` or `[a, b]`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Block::Conv(c) => vec![&c.kernel],
            Block::FactorizedConv(f) => vec![&f.u3, &f.core, &f.u4],
            Block::Fc(l) => vec![&l.weight],
            Block::FactorizedFc(f) => vec![&f.a, &f.b],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Block::Conv(c) => vec![&mut c.kernel],
            Block::FactorizedConv(f) => vec![&mut f.u3, &mut f.core, &mut f.u4],
            Block::Fc(l) => vec![&mut l.weight],
            Block::FactorizedFc(f) => vec![&mut f.a, &mut f.b],
        }
    }

    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|t| t.len() as u64).sum()
    }

    /// `(D, S, T, stride, padding)` for conv blocks.
    pub fn conv_geometry(&self) -> Option<(usize, usize, usize, usize, usize)> {
        match self {
            Block::Conv(c) => Some((c.kernel_size(), c.in_channels(), c.out_channels(), c.stride, c.padding)),
            Block::FactorizedConv(f) => {
                Some((f.kernel_size(), f.in_channels(), f.out_channels(), f.stride, f.padding))
            }
            _ => None,
        }
    }

    /// `(M, N)` for FC blocks.
    pub fn fc_dims(&self) -> Option<(usize, usize)> {
        match self {
            Block::Fc(l) => Some((l.in_features(), l.out_features())),
            Block::FactorizedFc(f) => Some((f.in_features(), f.out_features())),
            _ => None,
        }
    }

    /// The dense kernel a conv block computes.
    pub fn full_kernel(&self) -> Option<Tensor> {
        match self {
            Block::Conv(c) => Some(c.kernel.clone()),
            Block::FactorizedConv(f) => Some(tucker2_reconstruct(f)),
            _ => None,
        }
    }

    /// The dense weight an FC block computes.
    pub fn full_weight(&self) -> Option<Matrix> {
        match self {
            Block::Fc(l) => Some(l.weight.to_matrix().expect("2-way")),
            Block::FactorizedFc(f) => Some(f.weight()),
            _ => None,
        }
    }

    /// `[R3, R4]` or `[R]` when factorized.
    pub fn ranks(&self) -> Option<Vec<usize>> {
        match self {
            Block::FactorizedConv(f) => {
                let (a, b) = f.ranks();
                Some(vec![a, b])
            }
            Block::FactorizedFc(f) => Some(vec![f.rank()]),
            _ => None,
        }
    }
}

/// Subtracted from every input pixel.
pub const INPUT_SHIFT: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvArch {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Defaults to `kernel / 2`.
    #[serde(default)]
    pub padding: Option<usize>,
}

fn one() -> usize {
    1
}

impl ConvArch {
    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.kernel / 2)
    }
}

/// Layer layout from which a full-rank factorized model is initialized.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    /// `[C, H, W]`
    pub input: [usize; 3],
    pub classes: usize,
    #[serde(default)]
    pub convs: Vec<ConvArch>,
    /// Widths of FC layers before the head.
    #[serde(default)]
    pub hidden: Vec<usize>,
}

impl ArchSpec {
    /// Two `3×3` convolutions (`C→16→32`), pool, FC head.
    pub fn tinynet(input: [usize; 3], classes: usize) -> Self {
        let conv = |out| ConvArch {
            out_channels: out,
            kernel: 3,
            stride: 1,
            padding: None,
        };
        Self {
            input,
            classes,
            convs: vec![conv(16), conv(32)],
            hidden: Vec::new(),
        }
    }
}

fn xavier(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

/// Full-rank factorized model with Xavier-uniform factors and cores.
///
/// A 2-way factor `n×r` uses fans `(n, r)`; a `D×D×R3×R4` core uses
/// `(R3·D², R4·D²)`.
pub fn init_model(arch: &ArchSpec, seed: u64) -> Result<Model> {
    if arch.classes < 2 {
        return Err(Error::Config("a classifier needs at least two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks = Vec::new();
    let mut c = arch.input[0];
    for conv in &arch.convs {
        let (d, t) = (conv.kernel, conv.out_channels);
        if d == 0 || t == 0 || conv.stride == 0 {
            return Err(Error::Config(format!("invalid conv layer {conv:?}")));
        }
        let u3 = xavier(&[c, c], c, c, &mut rng);
        let core = xavier(&[d, d, c, t], c * d * d, t * d * d, &mut rng);
        let u4 = xavier(&[t, t], t, t, &mut rng);
        blocks.push(Block::FactorizedConv(FactorizedConv::new(
            u3,
            core,
            u4,
            conv.stride,
            conv.padding(),
        )?));
        c = t;
    }
    let mut m = if arch.convs.is_empty() {
        arch.input.iter().product()
    } else {
        c
    };
    for &n in arch.hidden.iter().chain(std::iter::once(&arch.classes)) {
        if n == 0 {
            return Err(Error::Config("FC width must be positive".into()));
        }
        let r = m.min(n);
        let a = xavier(&[m, r], m, r, &mut rng);
        let b = xavier(&[r, n], r, n, &mut rng);
        blocks.push(Block::FactorizedFc(FactorizedFc::new(a, b)?));
        m = n;
    }
    Model::new(arch.input, blocks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    input: [usize; 3],
    blocks: Vec<Block>,
}

/// Per-tensor gradients in the order of [`Model::tensors`].
pub type Grads = Vec<Vec<f64>>;

struct SampleTrace {
    /// Input of each conv block.
    conv_in: Vec<Tensor>,
    /// Output of each conv block before the rectifier.
    conv_pre: Vec<Tensor>,
    /// Input of each FC block.
    fc_in: Vec<Vec<f32>>,
    /// Output of each FC block before the rectifier; the last is the logits.
    fc_pre: Vec<Vec<f32>>,
}

fn relu_tensor(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect()).expect("same shape")
}

fn softmax_ce(logits: &[f32], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[label] as f64;
    let mut d: Vec<f64> = exps.iter().map(|e| e / z).collect();
    d[label] -= 1.0;
    (loss, d)
}

impl Model {
    pub fn new(input: [usize; 3], blocks: Vec<Block>) -> Result<Self> {
        let m = Self { input, blocks };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let n_conv = self.blocks.iter().take_while(|b| b.is_conv()).count();
        if self.blocks[n_conv..].iter().any(|b| b.is_conv()) {
            return Err(Error::Shape("conv blocks must precede FC blocks".into()));
        }
        if n_conv == self.blocks.len() {
            return Err(Error::Shape("model needs an FC classification head".into()));
        }
        let [mut c, mut h, mut w] = self.input;
        for (i, b) in self.blocks[..n_conv].iter().enumerate() {
            let (d, s, t, stride, pad) = b.conv_geometry().expect("conv");
            if s != c {
                return Err(Error::Shape(format!("conv{} expects {s} channels, receives {c}", i + 1)));
            }
            h = conv_output_size(h, d, stride, pad)
                .ok_or_else(|| Error::Shape(format!("conv{} does not fit a {h}×{w} input", i + 1)))?;
            w = conv_output_size(w, d, stride, pad)
                .ok_or_else(|| Error::Shape(format!("conv{} does not fit a {h}×{w} input", i + 1)))?;
            c = t;
        }
        let mut m = if n_conv == 0 { c * h * w } else { c };
        for (j, b) in self.blocks[n_conv..].iter().enumerate() {
            let (fm, fn_) = b.fc_dims().expect("fc");
            if fm != m {
                return Err(Error::Shape(format!("fc{} expects {fm} inputs, receives {m}", j + 1)));
            }
            m = fn_;
        }
        if m < 2 {
            return Err(Error::Shape("classification head needs at least two outputs".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn classes(&self) -> usize {
        self.blocks.last().and_then(|b| b.fc_dims()).expect("validated head").1
    }

    fn n_conv(&self) -> usize {
        self.blocks.iter().take_while(|b| b.is_conv()).count()
    }

    /// `conv1, conv2, …, fc1, fc2, …`
    pub fn layer_names(&self) -> Vec<String> {
        let n_conv = self.n_conv();
        (0..self.blocks.len())
            .map(|i| {
                if i < n_conv {
                    format!("conv{}", i + 1)
                } else {
                    format!("fc{}", i - n_conv + 1)
                }
            })
            .collect()
    }

    /// `([C, H, W] in, [T, H′, W′] out)` of every conv block.
    pub fn conv_shapes(&self) -> Vec<([usize; 3], [usize; 3])> {
        let [mut c, mut h, mut w] = self.input;
        let mut out = Vec::new();
        for b in &self.blocks[..self.n_conv()] {
            let (d, _, t, stride, pad) = b.conv_geometry().expect("conv");
            let ho = conv_output_size(h, d, stride, pad).expect("validated");
            let wo = conv_output_size(w, d, stride, pad).expect("validated");
            out.push(([c, h, w], [t, ho, wo]));
            c = t;
            h = ho;
            w = wo;
        }
        out
    }

    pub fn param_count(&self) -> u64 {
        self.blocks.iter().map(|b| b.param_count()).sum()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.blocks.iter().flat_map(|b| b.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.blocks.iter_mut().flat_map(|b| b.tensors_mut()).collect()
    }

    /// Index into [`Model::tensors`] of every `(u3, u4)` pair.
    pub fn factor_indices(&self) -> Vec<(usize, usize)> {
        let mut idx = 0;
        let mut out = Vec::new();
        for b in &self.blocks {
            if let Block::FactorizedConv(_) = b {
                out.push((idx, idx + 2));
            }
            idx += b.tensors().len();
        }
        out
    }

    /// `‖UᵀU − I‖_F` of every conv factor, `u3` then `u4` per block.
    pub fn factor_residuals(&self) -> Vec<f64> {
        let tensors = self.tensors();
        self.factor_indices()
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .map(|i| crate::regularizer::gram_residual(&tensors[i].to_matrix().expect("2-way")))
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape() != self.input {
            return Err(Error::Shape(format!(
                "model takes {:?} inputs, got {:?}",
                self.input,
                x.shape()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: &Tensor) -> Result<SampleTrace> {
        self.check_input(x)?;
        let n_conv = self.n_conv();
        let mut tr = SampleTrace {
            conv_in: Vec::with_capacity(n_conv),
            conv_pre: Vec::with_capacity(n_conv),
            fc_in: Vec::new(),
            fc_pre: Vec::new(),
        };
        let mut act = Tensor::new(
            x.shape().to_vec(),
            x.data().iter().map(|&v| v - INPUT_SHIFT).collect(),
        )?;
        for b in &self.blocks[..n_conv] {
            let y = match b {
                Block::Conv(c) => conv2d_reference(&act, c)?,
                Block::FactorizedConv(f) => conv2d_factorized(&act, f)?,
                _ => unreachable!(),
            };
            let next = relu_tensor(&y);
            tr.conv_in.push(std::mem::replace(&mut act, next));
            tr.conv_pre.push(y);
        }
        let mut v: Vec<f32> = if n_conv == 0 {
            act.data().to_vec()
        } else {
            let c = act.shape()[0];
            let plane = act.len() / c;
            (0..c)
                .map(|ci| {
                    let s: f64 = act.data()[ci * plane..(ci + 1) * plane].iter().map(|&v| v as f64).sum();
                    (s / plane as f64) as f32
                })
                .collect()
        };
        let fcs = &self.blocks[n_conv..];
        for (j, b) in fcs.iter().enumerate() {
            let y = match b {
                Block::Fc(l) => fc_forward(&v, l)?,
                Block::FactorizedFc(f) => fc_factorized_forward(&v, f)?,
                _ => unreachable!(),
            };
            let next = if j + 1 < fcs.len() {
                y.iter().map(|&a| a.max(0.0)).collect()
            } else {
                Vec::new()
            };
            tr.fc_in.push(std::mem::replace(&mut v, next));
            tr.fc_pre.push(y);
        }
        Ok(tr)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Vec<f32>> {
        Ok(self.trace(x)?.fc_pre.pop().expect("head"))
    }

    pub fn predict_one(&self, x: &Tensor) -> Result<usize> {
        let logits = self.forward(x)?;
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        Ok(best)
    }

    pub fn predict(&self, data: &Dataset) -> Result<Vec<usize>> {
        (0..data.len())
            .into_par_iter()
            .map(|i| self.predict_one(&data.image(i)))
            .collect()
    }

    /// Top-1 percentage on `data`.
    pub fn evaluate(&self, data: &Dataset) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        top1(&self.predict(data)?, data.labels())
    }

    /// Cross-entropy of one sample and its gradient for every tensor.
    pub fn sample_grad(&self, x: &Tensor, label: usize) -> Result<(f64, Vec<Tensor>)> {
        if label >= self.classes() {
            return Err(Error::Shape(format!("label {label} outside {} classes", self.classes())));
        }
        let tr = self.trace(x)?;
        let n_conv = self.n_conv();
        let (loss, dlogits) = softmax_ce(tr.fc_pre.last().expect("head"), label);
        let mut grads: Vec<Vec<Tensor>> = vec![Vec::new(); self.blocks.len()];

        let mut dv: Vec<f32> = dlogits.iter().map(|&v| v as f32).collect();
        for j in (0..self.blocks.len() - n_conv).rev() {
            let b = &self.blocks[n_conv + j];
            let x_in = &tr.fc_in[j];
            let dx = match b {
                Block::Fc(l) => {
                    let (dw, dx) = fc_grad(l, x_in, &dv)?;
                    grads[n_conv + j] = vec![dw];
                    dx
                }
                Block::FactorizedFc(f) => {
                    let g = fc_factorized_grad(f, x_in, &dv)?;
                    grads[n_conv + j] = vec![g.da, g.db];
                    g.dx
                }
                _ => unreachable!(),
            };
            dv = if j > 0 {
                dx.iter().zip(&tr.fc_pre[j - 1]).map(|(&g, &a)| if a > 0.0 { g } else { 0.0 }).collect()
            } else {
                dx
            };
        }

        if n_conv > 0 {
            let last = &tr.conv_pre[n_conv - 1];
            let c = last.shape()[0];
            let plane = last.len() / c;
            let mut dact = Tensor::zeros(last.shape());
            for (i, (g, &a)) in dact.data_mut().iter_mut().zip(last.data()).enumerate() {
                if a > 0.0 {
                    *g = (dv[i / plane] as f64 / plane as f64) as f32;
                }
            }
            for i in (0..n_conv).rev() {
                let x_in = &tr.conv_in[i];
                let dx = match &self.blocks[i] {
                    Block::Conv(cv) => {
                        let g = conv2d_reference_grad(cv, x_in, &dact)?;
                        grads[i] = vec![g.dkernel];
                        g.dx
                    }
                    Block::FactorizedConv(f) => {
                        let g = conv2d_factorized_grad(f, x_in, &dact)?;
                        grads[i] = vec![g.du3, g.dcore, g.du4];
                        g.dx
                    }
                    _ => unreachable!(),
                };
                if i > 0 {
                    let pre = &tr.conv_pre[i - 1];
                    let data = dx
                        .data()
                        .iter()
                        .zip(pre.data())
                        .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
                        .collect();
                    dact = Tensor::new(pre.shape().to_vec(), data)?;
                }
            }
        }
        Ok((loss, grads.into_iter().flatten().collect()))
    }

    /// Mean cross-entropy over `indices` and its gradient, accumulated in
    /// 64-bit in index order.
    pub fn batch_grad(&self, data: &Dataset, indices: &[usize]) -> Result<(f64, Grads)> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let per_sample: Vec<(f64, Vec<Tensor>)> = indices
            .par_iter()
            .map(|&i| self.sample_grad(&data.image(i), data.labels()[i]))
            .collect::<Result<_>>()?;
        let mut grads: Grads = self.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l;
            for (acc, t) in grads.iter_mut().zip(g) {
                for (a, &v) in acc.iter_mut().zip(t.data()) {
                    *a += v as f64;
                }
            }
        }
        let inv = 1.0 / indices.len() as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        Ok((loss * inv, grads))
    }

    /// `w ← w − lr·g`
    pub fn sgd_step(&mut self, grads: &Grads, lr: f64) {
        for (t, g) in self.tensors_mut().into_iter().zip(grads) {
            for (w, &d) in t.data_mut().iter_mut().zip(g) {
                *w = (*w as f64 - lr * d) as f32;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Per-layer counts against the dense equivalent of every block.
    pub fn report(&self, accuracy: crate::metrics::Accuracy, rank_reports: Vec<RankReport>) -> CompressionReport {
        let names = self.layer_names();
        let shapes = self.conv_shapes();
        let entries = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| {
                let ranks = b.ranks();
                if let Some((d, s, t, _, _)) = b.conv_geometry() {
                    let ([_, h, w], [_, ho, wo]) = shapes[i];
                    let dims = LayerDims::Conv { d, s, t, h, w, ho, wo };
                    LayerEntry::conv(&names[i], dims, ranks.map(|r| (r[0], r[1]))).expect("conv dims")
                } else {
                    let (m, n) = b.fc_dims().expect("fc");
                    LayerEntry::fc(&names[i], m, n, ranks.map(|r| r[0]))
                }
            })
            .collect();
        CompressionReport::new(entries, accuracy, rank_reports)
    }
}
