//! `ncup`: upsample, train, evaluate and self-test the normalized
//! convolution flow upsampler.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ncup::flowio::{self, epe, flow_to_color, read_flo, write_flo, write_ppm, FlowField};
use ncup::nconv::PoolKind;
use ncup::selftest;
use ncup::tensor::{Activation, Shape, Tensor};
use ncup::train::{self, gen_synthetic, train_loop, LossConfig, TrainConfig, LOG_HEADER};
use ncup::upsampler::{bilinear_baseline, InterpNetConfig, NcupModel};

#[derive(Parser)]
#[command(
    name = "ncup",
    version,
    about = "Guided optical flow upsampling with normalized convolutions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Upsample a .flo file with a trained model.
    Upsample(UpsampleArgs),
    /// Train on synthetic piecewise-constant flow; writes a checkpoint and a CSV log.
    Train(TrainArgs),
    /// End-point error between two .flo files.
    Eval { pred: PathBuf, gt: PathBuf },
    /// NCUP vs bilinear EPE on a groundtruth file or on synthetic samples.
    Compare(CompareArgs),
    /// Runs the built-in invariant suites.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also audit this checkpoint file.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Args)]
struct UpsampleArgs {
    /// Low-resolution flow.
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scale: usize,
    /// Guidance image (PPM) at the low or the high resolution.
    #[arg(long)]
    guidance: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Color-wheel rendering of the result.
    #[arg(long)]
    color: Option<PathBuf>,
    /// Grey-level map of the estimated weights (horizontal component).
    #[arg(long)]
    weights_map: Option<PathBuf>,
    /// Groundtruth at the high resolution; prints the EPE when given.
    #[arg(long)]
    gt: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FinalAct {
    Sigmoid,
    Softplus,
}

#[derive(Clone, Copy, ValueEnum)]
enum Pooling {
    Conf,
    Max,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value_t = train::DEFAULT_ALPHA1)]
    alpha1: f64,
    /// Adds the level-p (1/2^(p-1) resolution) term with weight alpha_p.
    #[arg(long)]
    lowres_level: Option<u32>,
    #[arg(long, value_enum, default_value_t = FinalAct::Sigmoid)]
    final_act: FinalAct,
    #[arg(long, value_enum, default_value_t = Pooling::Conf)]
    pooling: Pooling,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..=2))]
    downsamplings: u32,
    #[arg(long)]
    no_batch_norm: bool,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 500)]
    samples: usize,
    #[arg(long, default_value_t = 50)]
    val_samples: usize,
    /// Height and width of the synthetic samples.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Output directory for model.ckpt and train_log.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// High-resolution groundtruth; synthetic samples are used without it.
    gt: Option<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    scale: usize,
    /// Guidance image (PPM) for the groundtruth file.
    #[arg(long)]
    guidance: Option<PathBuf>,
    /// Number of synthetic samples.
    #[arg(long, default_value_t = 20)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    size: usize,
}

/// Model and command scale disagree; exits with code 2.
#[derive(Debug)]
struct ScaleMismatch {
    model: usize,
    requested: usize,
}

impl std::fmt::Display for ScaleMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "model was trained for scale {} but --scale {} was requested",
            self.model, self.requested
        )
    }
}

impl std::error::Error for ScaleMismatch {}

/// Six significant digits, plain notation for moderate magnitudes.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..]
        .parse()
        .expect("integer exponent");
    if (-5..6).contains(&exp) {
        let s = format!("{:.*}", (5 - exp) as usize, x);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        sci
    }
}

fn kv(key: &str, value: f64) {
    println!("{key}={}", sig6(value));
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NCUP_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("NCUP_THREADS={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

fn load_model(path: &Path, scale: usize) -> Result<NcupModel> {
    let model = NcupModel::load(path).with_context(|| format!("loading {}", path.display()))?;
    if model.scale != scale {
        return Err(ScaleMismatch {
            model: model.scale,
            requested: scale,
        }
        .into());
    }
    Ok(model)
}

/// Guidance at the flow's resolution: a low-resolution image is used as is,
/// a high-resolution one is area-downsampled, none gives zeros.
fn load_guidance(path: Option<&Path>, channels: usize, lr: Shape, s: usize) -> Result<Tensor> {
    let Some(path) = path else {
        eprintln!("warning: no guidance image given; using zeros");
        return Ok(Tensor::zeros(Shape::new(1, channels, lr.h, lr.w)));
    };
    if channels != 3 {
        bail!("model expects {channels} guidance channels; only RGB images are supported");
    }
    let img = flowio::read_ppm(path).with_context(|| format!("reading {}", path.display()))?;
    let t = img.to_tensor();
    match (img.height, img.width) {
        (h, w) if (h, w) == (lr.h, lr.w) => Ok(t),
        (h, w) if (h, w) == (lr.h * s, lr.w * s) => Ok(t.area_downsample(s)?),
        (h, w) => bail!(
            "guidance is {h}x{w}; expected {}x{} or {}x{}",
            lr.h,
            lr.w,
            lr.h * s,
            lr.w * s
        ),
    }
}

fn cmd_upsample(a: UpsampleArgs) -> Result<()> {
    if ![2, 4, 8].contains(&a.scale) {
        bail!("--scale must be 2, 4 or 8, got {}", a.scale);
    }
    let model = load_model(&a.model, a.scale)?;
    let flow = read_flo(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let guidance = load_guidance(
        a.guidance.as_deref(),
        model.weights_cfg.guidance_channels,
        flow.shape(),
        a.scale,
    )?;
    let out = model.upsample(&flow, &guidance)?;
    if out.empty_grid {
        eprintln!("warning: the sparse grid carried no confidence; output is not meaningful");
    }
    write_flo(&a.out, &out.flow)?;
    println!("out={}", a.out.display());
    println!("height={}", out.flow.height());
    println!("width={}", out.flow.width());
    kv("min_conf", out.conf.min());
    if let Some(p) = &a.color {
        write_ppm(p, &flow_to_color(&out.flow, None))?;
    }
    if let Some(p) = &a.weights_map {
        flowio::dump_weights_map(&out.weights_lr, p)?;
    }
    if let Some(gt) = &a.gt {
        let gt = read_flo(gt)?;
        kv("epe", epe(&out.flow, &gt)?);
    }
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut loss = vec![(1, a.alpha1)];
    if let Some(p) = a.lowres_level {
        let alpha = train::PYRAMID_ALPHAS
            .iter()
            .find(|(lvl, _)| *lvl == p)
            .map(|&(_, al)| al)
            .unwrap_or(0.08);
        if p < 2 {
            bail!("--lowres-level must be 2 or more");
        }
        loss.push((p, alpha));
    }
    let mut cfg = TrainConfig {
        seed: a.seed,
        train_samples: a.samples,
        val_samples: a.val_samples,
        height: a.size,
        width: a.size,
        scale: a.scale,
        epochs: a.epochs,
        batch_size: a.batch_size,
        lr: a.lr,
        loss: LossConfig::new(loss)?,
        ..TrainConfig::desk_scale(a.seed)
    };
    cfg.weights_cfg.final_activation = match a.final_act {
        FinalAct::Sigmoid => Activation::Sigmoid,
        FinalAct::Softplus => Activation::Softplus,
    };
    cfg.weights_cfg.batch_norm = !a.no_batch_norm;
    cfg.interp_cfg = InterpNetConfig {
        downsamplings: a.downsamplings as usize,
        pooling: match a.pooling {
            Pooling::Conf => PoolKind::Confidence,
            Pooling::Max => PoolKind::Max,
        },
        ..InterpNetConfig::default()
    };
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.out.join("train_log.csv");
    let mut log = fs::File::create(&log_path)?;
    writeln!(log, "{LOG_HEADER}")?;
    let outcome = train_loop(&cfg, |e| {
        println!(
            "epoch={} train_loss={} val_epe_ncup={} val_epe_bilinear={}",
            e.epoch,
            sig6(e.train_loss),
            sig6(e.val_epe_ncup),
            sig6(e.val_epe_bilinear)
        );
        // the log is flushed per epoch so partial runs remain inspectable
        let _ = writeln!(log, "{e}").and_then(|_| log.flush());
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(ncup::Error::NonFiniteLoss { epoch, seeds }) => {
            bail!("non-finite loss in epoch {epoch}; offending sample seeds: {seeds:?}")
        }
        Err(e) => return Err(e.into()),
    };
    let ckpt = a.out.join("model.ckpt");
    outcome.model.save(&ckpt)?;
    println!("checkpoint={}", ckpt.display());
    println!("log={}", log_path.display());
    println!("param_count={}", outcome.model.param_count());
    Ok(())
}

fn cmd_eval(pred: &Path, gt: &Path) -> Result<()> {
    let p = read_flo(pred).with_context(|| format!("reading {}", pred.display()))?;
    let g = read_flo(gt).with_context(|| format!("reading {}", gt.display()))?;
    kv("epe", epe(&p, &g)?);
    Ok(())
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let model = load_model(&a.model, a.scale)?;
    let s = a.scale;
    let cases: Vec<(FlowField, FlowField, Tensor)> = match &a.gt {
        Some(path) => {
            let gt = read_flo(path).with_context(|| format!("reading {}", path.display()))?;
            let lr = FlowField::new(gt.tensor().area_downsample(s)?)?;
            let guidance = load_guidance(
                a.guidance.as_deref(),
                model.weights_cfg.guidance_channels,
                lr.shape(),
                s,
            )?;
            vec![(gt, lr, guidance)]
        }
        None => (0..a.samples)
            .map(|i| {
                let smp =
                    gen_synthetic(train::VAL_SEED_BASE + a.seed + i as u64, a.size, a.size, s)?;
                let g = smp.guidance_lr()?;
                Ok((smp.flow_hr_gt, smp.flow_lr, g))
            })
            .collect::<ncup::Result<_>>()?,
    };
    let (mut ours, mut bil) = (0.0, 0.0);
    for (gt, lr, guidance) in &cases {
        ours += epe(&model.upsample(lr, guidance)?.flow, gt)?;
        bil += epe(&bilinear_baseline(lr, s, false)?, gt)?;
    }
    let n = cases.len() as f64;
    println!("samples={}", cases.len());
    kv("epe_ncup", ours / n);
    kv("epe_bilinear", bil / n);
    kv("ratio", ours / bil);
    Ok(())
}

fn cmd_selftest(seed: u64, model: Option<&Path>) -> Result<bool> {
    let mut results = selftest::run_all(seed);
    if let Some(path) = model {
        let (passed, detail) = match NcupModel::load(path) {
            Ok(m) => (true, format!("param_count={}", m.param_count())),
            Err(e) => (false, format!("error={e}")),
        };
        results.push(selftest::SuiteResult {
            name: "param.audit.checkpoint".into(),
            passed,
            detail,
        });
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    for r in &results {
        println!("{r}");
    }
    println!("suites={} failed={}", results.len(), failed.len());
    if !failed.is_empty() {
        eprintln!("failed suites: {}", failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn run(cli: Cli) -> Result<bool> {
    configure_threads()?;
    match cli.command {
        Command::Upsample(a) => cmd_upsample(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Eval { pred, gt } => cmd_eval(&pred, &gt)?,
        Command::Compare(a) => cmd_compare(a)?,
        Command::Selftest { seed, model } => return cmd_selftest(seed, model.as_deref()),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ScaleMismatch>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::sig6;

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(5.0), "5");
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(0.123456789), "0.123457");
        assert_eq!(sig6(1234.5678), "1234.57");
        assert_eq!(sig6(1.5e-7), "1.50000e-7");
        assert_eq!(sig6(-2.5), "-2.5");
    }
}
