//! `lowrank`: train, compress, evaluate and report on low-rank models.
//!
//! Exit codes: 0 success, 2 bad arguments, 3 I/O or format error, 4 numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lowrank_core::dataset::Split;
use lowrank_core::io::{
    create_dir, load_arch, load_model, load_report, load_run_config, save_json, save_model, save_report, DataSource,
    RunConfig,
};
use lowrank_core::metrics::Accuracy;
use lowrank_core::rank_select::R4Rule;
use lowrank_core::trainer::{
    compress_pipeline, compress_trained, init_model, retrain_lowrank, select_model_ranks, train_overparam,
    truncate_model, LayerRanks, Model, PipelineOutput,
};
use lowrank_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "lowrank", version, about = "Tucker-2 / truncated-SVD compression of small CNNs")]
struct Cli {
    /// Overrides the training seed of the run configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the estimated rank of every layer of a saved model.
    Ranks {
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = PolicyArg::ChannelRatio)]
        policy: PolicyArg,
        /// Print the rank reports as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Factorize a saved model at fixed or estimated ranks, optionally retrain.
    ///
    /// With `--pipeline` the input is an architecture file (train from scratch)
    /// or a saved phase-1 model directory, and the whole two-phase run happens.
    Compress(CompressArgs),
    /// Full-rank training with the orthogonality penalty.
    Train {
        arch: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Continue with rank selection, truncation and retraining.
        #[arg(long)]
        pipeline: bool,
    },
    /// Top-1 accuracy of a saved model.
    Evaluate {
        model: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Render the compression report saved in a directory.
    Report {
        dir: PathBuf,
        /// Conv CR/SR from the literal formulas with an `R·D²` middle term.
        #[arg(long)]
        literal_formula: bool,
    },
}

#[derive(Args, Debug)]
struct DataArgs {
    /// `synth` or a CIFAR batch directory / file.
    #[arg(long, default_value = "synth")]
    data: String,
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Read CIFAR-100 records (two label bytes).
    #[arg(long)]
    cifar100: bool,
}

#[derive(Args, Debug)]
struct CompressArgs {
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Estimate ranks with EVBMF.
    #[arg(long, conflicts_with_all = ["r3", "r4"])]
    auto: bool,
    #[arg(long, requires = "r4")]
    r3: Option<usize>,
    #[arg(long, requires = "r3")]
    r4: Option<usize>,
    /// Rank of every FC layer when ranks are fixed; FC layers stay as they are
    /// otherwise.
    #[arg(long, conflicts_with = "auto")]
    fc_rank: Option<usize>,
    /// How R4 is chosen; overrides the run configuration.
    #[arg(long, value_enum)]
    policy: Option<PolicyArg>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    keep_ortho_phase2: bool,
    /// Run the complete two-phase pipeline.
    #[arg(long)]
    pipeline: bool,
    /// Retrain on `--data` after factorizing (implied by `--pipeline`).
    #[arg(long)]
    retrain: bool,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PolicyArg {
    ChannelRatio,
    VbmfIndependent,
}

impl From<PolicyArg> for R4Rule {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::ChannelRatio => R4Rule::ChannelRatio,
            PolicyArg::VbmfIndependent => R4Rule::VbmfIndependent,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run_config(data: &DataArgs, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match &data.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Ranks { model, policy, json } => ranks(&model, policy, json),
        Command::Compress(args) => compress(args, seed),
        Command::Train {
            arch,
            data,
            out,
            pipeline,
        } => train(&arch, &data, &out, pipeline, seed),
        Command::Evaluate { model, data, split } => {
            let cfg = run_config(&data, seed)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let set = DataSource::parse(&data.data, data.cifar100).load_split(&cfg, split)?;
            let top1 = load_model(&model)?.evaluate(&set)?;
            println!("top1 {top1:.4}% on {} samples", set.len());
            Ok(())
        }
        Command::Report { dir, literal_formula } => {
            print!("{}", load_report(&dir)?.render(literal_formula));
            Ok(())
        }
    }
}

fn ranks(path: &Path, policy: PolicyArg, json: bool) -> Result<()> {
    let model = load_model(path)?;
    let policy = lowrank_core::rank_select::RankPolicy {
        r4_rule: policy.into(),
        ..Default::default()
    };
    let (ranks, reports) = select_model_ranks(&model, &policy)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
        return Ok(());
    }
    for (name, r) in model.layer_names().iter().zip(&ranks) {
        match r {
            LayerRanks::Conv { r3, r4 } => println!("{name:<8} R3 {r3:>4}  R4 {r4:>4}"),
            LayerRanks::Fc { r } => println!("{name:<8} R  {r:>4}"),
            LayerRanks::Keep => println!("{name:<8} dense"),
        }
    }
    for rep in &reports {
        let shown: Vec<String> = rep.singular_values.iter().take(8).map(|s| format!("{s:.4}")).collect();
        println!(
            "  {:<8} rank {:>4}  sigma2 {:.3e}  sv [{}{}]",
            rep.layer,
            rep.estimated_rank,
            rep.noise_sigma2,
            shown.join(", "),
            if rep.singular_values.len() > 8 { ", …" } else { "" }
        );
    }
    Ok(())
}

fn write_pipeline(out: &PipelineOutput, dir: &Path) -> Result<()> {
    save_model(&out.model, dir)?;
    save_model(&out.phase1, &dir.join("phase1"))?;
    save_report(&out.report, dir)?;
    save_json(
        &serde_json::json!({
            "ranks": out.ranks,
            "phase1": out.phase1_history,
            "phase2": out.phase2_history,
        }),
        &dir.join("history.json"),
    )?;
    print!("{}", out.report.render(false));
    Ok(())
}

fn pipeline_from_arch(arch: &Path, data: &DataArgs, cfg: &RunConfig) -> Result<PipelineOutput> {
    let arch = load_arch(arch)?;
    let (train, test) = DataSource::parse(&data.data, data.cifar100).load(cfg)?;
    compress_pipeline(&arch, &train, &test, &cfg.train, &cfg.policy)
}

fn train(arch: &Path, data: &DataArgs, out: &Path, pipeline: bool, seed: Option<u64>) -> Result<()> {
    let cfg = run_config(data, seed)?;
    if pipeline {
        return write_pipeline(&pipeline_from_arch(arch, data, &cfg)?, out);
    }
    let spec = load_arch(arch)?;
    let (train, test) = DataSource::parse(&data.data, data.cifar100).load(&cfg)?;
    let init = init_model(&spec, cfg.train.seed)?;
    let (model, history) = train_overparam(&init, &train, &cfg.train)?;
    save_model(&model, out)?;
    save_json(&history, &out.join("history.json"))?;
    let residuals: Vec<String> = model.factor_residuals().iter().map(|r| format!("{r:.4}")).collect();
    println!(
        "trained {} epochs: loss {:.6}  train top1 {:.2}%  test top1 {:.2}%",
        history.len(),
        history.last().map_or(f64::NAN, |h| h.loss),
        model.evaluate(&train)?,
        model.evaluate(&test)?
    );
    println!("factor residuals ‖UᵀU−I‖_F [{}]", residuals.join(", "));
    Ok(())
}

fn compress(args: CompressArgs, seed: Option<u64>) -> Result<()> {
    let mut cfg = run_config(&args.data, seed)?;
    if let Some(p) = args.policy {
        cfg.policy.r4_rule = p.into();
    }
    cfg.train.rho = args.rho.unwrap_or(cfg.train.rho);
    cfg.train.lambda = args.lambda.unwrap_or(cfg.train.lambda);
    cfg.train.keep_ortho_phase2 |= args.keep_ortho_phase2;
    cfg.validate()?;

    if args.pipeline {
        let out = if args.input.is_dir() {
            let phase1 = load_model(&args.input)?;
            let (train, test) = DataSource::parse(&args.data.data, args.data.cifar100).load(&cfg)?;
            compress_trained(phase1, Vec::new(), &train, &test, &cfg.train, &cfg.policy)?
        } else {
            pipeline_from_arch(&args.input, &args.data, &cfg)?
        };
        return write_pipeline(&out, &args.out);
    }

    let model = load_model(&args.input)?;
    let (ranks, rank_reports) = if args.auto {
        select_model_ranks(&model, &cfg.policy)?
    } else if args.r3.is_some() || args.fc_rank.is_some() {
        (fixed_ranks(&model, args.r3.zip(args.r4), args.fc_rank), Vec::new())
    } else {
        return Err(Error::Config("give --auto, --r3/--r4, --fc-rank or --pipeline".into()));
    };
    let truncated = truncate_model(&model, &ranks)?;
    let (compressed, accuracy) = if args.retrain {
        let (train, test) = DataSource::parse(&args.data.data, args.data.cifar100).load(&cfg)?;
        let before = model.evaluate(&test)?;
        let (m, history) = retrain_lowrank(&truncated, &train, &cfg.train)?;
        create_dir(&args.out)?;
        save_json(&history, &args.out.join("history.json"))?;
        let after = m.evaluate(&test)?;
        (
            m,
            Accuracy {
                top1_before: Some(before),
                top1_after: Some(after),
            },
        )
    } else {
        (
            truncated,
            Accuracy {
                top1_before: None,
                top1_after: None,
            },
        )
    };
    let report = compressed.report(accuracy, rank_reports);
    save_model(&compressed, &args.out)?;
    save_report(&report, &args.out)?;
    print!("{}", report.render(false));
    Ok(())
}

fn fixed_ranks(model: &Model, conv: Option<(usize, usize)>, fc: Option<usize>) -> Vec<LayerRanks> {
    model
        .blocks()
        .iter()
        .map(|b| match (b.is_conv(), conv, fc) {
            (true, Some((r3, r4)), _) => LayerRanks::Conv { r3, r4 },
            (false, _, Some(r)) => LayerRanks::Fc { r },
            _ => LayerRanks::Keep,
        })
        .collect()
}
