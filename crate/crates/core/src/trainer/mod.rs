//! Two-phase training: full-rank factorized training under the
//! orthogonality penalty, rank selection and truncation, then low-rank
//! retraining on cross-entropy alone.
//!
//! Optimization is plain mini-batch SGD. All randomness comes from a
//! ChaCha8 stream seeded by [`TrainConfig::seed`]; phase 2 uses stream 1 of
//! the same seed.

mod model;

pub use model::{init_model, ArchSpec, Block, ConvArch, Grads, Model, INPUT_SHIFT};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::decomp::{factorize_conv_layer, tsvd_truncate, ConvLayerSpec};
use crate::error::{Error, Result};
use crate::metrics::{Accuracy, CompressionReport};
use crate::rank_select::{select_conv_ranks_for, select_fc_rank_for, RankPolicy, RankReport};
use crate::regularizer::{ortho_penalty, ortho_penalty_grad, total_loss, OrthoConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_overparam: usize,
    pub epochs_lowrank: usize,
    pub batch_size: usize,
    /// `(first epoch, learning rate)`, thresholds strictly increasing from 0.
    pub lr_schedule: Vec<(usize, f64)>,
    pub rho: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Keep the orthogonality penalty during low-rank retraining.
    pub keep_ortho_phase2: bool,
}

/// Thirty epochs per phase at batch 4, sized for small synthetic sets.
impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_overparam: 30,
            epochs_lowrank: 30,
            batch_size: 4,
            lr_schedule: vec![(0, 0.1)],
            rho: 0.01,
            lambda: 1.0,
            seed: 0,
            keep_ortho_phase2: false,
        }
    }
}

impl TrainConfig {
    /// CIFAR-scale schedule: 200 + 60 epochs at batch 128, rate divided by
    /// ten at epochs 100 and 150.
    pub fn full() -> Self {
        Self {
            epochs_overparam: 200,
            epochs_lowrank: 60,
            batch_size: 128,
            lr_schedule: vec![(0, 0.1), (100, 0.01), (150, 0.001)],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr_schedule.first().map(|p| p.0) != Some(0) {
            return Err(Error::Config("lr_schedule must start at epoch 0".into()));
        }
        for w in self.lr_schedule.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config("lr_schedule thresholds must strictly increase".into()));
            }
        }
        if let Some(&(_, lr)) = self.lr_schedule.iter().find(|p| !(p.1 > 0.0 && p.1.is_finite())) {
            return Err(Error::Config(format!("learning rate {lr} is not positive")));
        }
        self.ortho().map(|_| ())
    }

    pub fn ortho(&self) -> Result<OrthoConfig> {
        OrthoConfig::new(self.rho, self.lambda)
    }

    /// Rate of the last threshold not after `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|p| p.0 <= epoch)
            .last()
            .map_or(self.lr_schedule[0].1, |p| p.1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over mini-batches of the objective that was minimized.
    pub loss: f64,
}

pub type History = Vec<EpochStats>;

/// Mean cross-entropy on `indices` plus `λ·Σ` penalties over every conv
/// factor. Returns `(total, cross-entropy, gradients)`.
pub fn objective_grad(
    model: &Model,
    data: &Dataset,
    indices: &[usize],
    ortho: Option<OrthoConfig>,
) -> Result<(f64, f64, Grads)> {
    let (ce, mut grads) = model.batch_grad(data, indices)?;
    let Some(cfg) = ortho.filter(|c| c.rho > 0.0 && c.lambda > 0.0) else {
        return Ok((ce, ce, grads));
    };
    let tensors = model.tensors();
    let mut penalties = Vec::new();
    for (a, b) in model.factor_indices() {
        for i in [a, b] {
            let u = tensors[i].to_matrix()?;
            penalties.push(ortho_penalty(&u, cfg.rho));
            let g = ortho_penalty_grad(&u, cfg.rho);
            for (acc, &v) in grads[i].iter_mut().zip(g.data()) {
                *acc += cfg.lambda * v;
            }
        }
    }
    Ok((total_loss(ce, &penalties, cfg.lambda), ce, grads))
}

fn run_sgd(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    ortho: Option<OrthoConfig>,
    rng: &mut ChaCha8Rng,
) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if data.image_shape() != model.input_shape() {
        return Err(Error::Shape(format!(
            "data images are {:?}, model takes {:?}",
            data.image_shape(),
            model.input_shape()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, _, grads) = objective_grad(model, data, batch, ortho)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("loss became {loss} in epoch {epoch}")));
            }
            model.sgd_step(&grads, lr);
            sum += loss;
            batches += 1;
        }
        if !model.is_finite() {
            return Err(Error::Numeric(format!("weights became non-finite in epoch {epoch}")));
        }
        history.push(EpochStats {
            epoch,
            lr,
            loss: sum / batches as f64,
        });
    }
    Ok(history)
}

/// Phase 1: `E` epochs on cross-entropy plus the orthogonality penalty.
pub fn train_overparam(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, History)> {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let h = run_sgd(&mut m, data, cfg, cfg.epochs_overparam, Some(cfg.ortho()?), &mut rng)?;
    Ok((m, h))
}

/// Phase 2: `e` epochs on cross-entropy, or on the full objective when
/// `keep_ortho_phase2` is set.
pub fn retrain_lowrank(model: &Model, data: &Dataset, cfg: &TrainConfig) -> Result<(Model, History)> {
    let mut m = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let ortho = if cfg.keep_ortho_phase2 { Some(cfg.ortho()?) } else { None };
    let h = run_sgd(&mut m, data, cfg, cfg.epochs_lowrank, ortho, &mut rng)?;
    Ok((m, h))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRanks {
    Conv { r3: usize, r4: usize },
    Fc { r: usize },
    Keep,
}

/// Re-fit every block at its new ranks from the dense weights it computes.
pub fn truncate_model(model: &Model, ranks: &[LayerRanks]) -> Result<Model> {
    if ranks.len() != model.blocks().len() {
        return Err(Error::Shape(format!(
            "{} rank entries for {} blocks",
            ranks.len(),
            model.blocks().len()
        )));
    }
    let blocks = model
        .blocks()
        .iter()
        .zip(ranks)
        .map(|(b, r)| match (r, b.conv_geometry()) {
            (LayerRanks::Keep, _) => Ok(b.clone()),
            (LayerRanks::Conv { r3, r4 }, Some((_, _, _, stride, padding))) => {
                let layer = ConvLayerSpec::new(b.full_kernel().expect("conv"), stride, padding)?;
                Ok(Block::FactorizedConv(factorize_conv_layer(&layer, *r3, *r4)?))
            }
            (LayerRanks::Fc { r }, None) => Ok(Block::FactorizedFc(tsvd_truncate(
                &b.full_weight().expect("fc"),
                *r,
            )?)),
            _ => Err(Error::Shape(format!("rank entry {r:?} does not fit a {} block", b.kind()))),
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(model.input_shape(), blocks)
}

/// EVBMF ranks for every block of `model`.
pub fn select_model_ranks(model: &Model, policy: &RankPolicy) -> Result<(Vec<LayerRanks>, Vec<RankReport>)> {
    let names = model.layer_names();
    let mut ranks = Vec::new();
    let mut reports = Vec::new();
    for (b, name) in model.blocks().iter().zip(&names) {
        if let Some(k) = b.full_kernel() {
            let cr = select_conv_ranks_for(name, &k, policy)?;
            ranks.push(LayerRanks::Conv { r3: cr.r3, r4: cr.r4 });
            reports.push(cr.mode3);
            reports.extend(cr.mode4);
        } else {
            let (r, rep) = select_fc_rank_for(name, &b.full_weight().expect("fc"), policy)?;
            ranks.push(LayerRanks::Fc { r });
            reports.push(rep);
        }
    }
    Ok((ranks, reports))
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub phase1: Model,
    pub model: Model,
    pub ranks: Vec<LayerRanks>,
    pub phase1_history: History,
    pub phase2_history: History,
    pub report: CompressionReport,
}

/// Initialize, train at full rank, select ranks, truncate, retrain, and
/// report. Accuracy is measured on `eval`.
pub fn compress_pipeline(
    arch: &ArchSpec,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    policy: &RankPolicy,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    policy.validate()?;
    let init = init_model(arch, cfg.seed)?;
    let (phase1, phase1_history) = train_overparam(&init, train, cfg)?;
    compress_trained(phase1, phase1_history, train, eval, cfg, policy)
}

/// The stages after phase 1, for a model that is already trained.
pub fn compress_trained(
    phase1: Model,
    phase1_history: History,
    train: &Dataset,
    eval: &Dataset,
    cfg: &TrainConfig,
    policy: &RankPolicy,
) -> Result<PipelineOutput> {
    let before = phase1.evaluate(eval)?;
    let (ranks, rank_reports) = select_model_ranks(&phase1, policy)?;
    let truncated = truncate_model(&phase1, &ranks)?;
    let (model, phase2_history) = retrain_lowrank(&truncated, train, cfg)?;
    let after = model.evaluate(eval)?;
    let report = model.report(
        Accuracy {
            top1_before: Some(before),
            top1_after: Some(after),
        },
        rank_reports,
    );
    Ok(PipelineOutput {
        phase1,
        model,
        ranks,
        phase1_history,
        phase2_history,
        report,
    })
}
