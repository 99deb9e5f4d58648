//! `hrtnet`: synthetic data, training, evaluation, inference and PR plots.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid config or usage, 3 non-finite loss.

use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use hrtnet::aux_stream::SupplementaryInput;
use hrtnet::checkpoint::{load_checkpoint, save_checkpoint};
use hrtnet::io;
use hrtnet::metrics::{EvalResult, GrayMap};
use hrtnet::train::{evaluate_samples, scenes, train, DOMAIN_HELD_OUT};
use hrtnet::tensor::Tensor;
use hrtnet::{Error, HarnessConfig, Modality, Model};

#[derive(Parser)]
#[command(name = "hrtnet", version, about = "Two-modality salient object detection harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file with optional [model] and [train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed; seeds every random draw.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides model.modality.
    #[arg(long)]
    modality: Option<Modality>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic held-out scenes as PNG files under primary/, supp/ and gt/.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes; defaults to train.eval_samples.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train on synthetic scenes; writes loss.csv, checkpoints, eval.csv and pr.csv.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Overrides train.steps.
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Evaluate prediction maps against ground truths, or a checkpoint on synthetic held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with_all = ["pred", "gt"])]
        ckpt: Option<PathBuf>,
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
        /// Output directory for metrics.csv and pr.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict a saliency map for one image pair and write it as an 8-bit PNG.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Supplementary map; repeat once per slice for a focal stack.
        #[arg(long, required = true)]
        supp: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plot one or more PR CSV files as a static SVG.
    PlotPr {
        #[arg(long = "pr", required = true)]
        pr: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<HarnessConfig> {
    let mut c = match &common.config {
        // an unreadable config file is a config error too
        Some(path) => HarnessConfig::load(path).map_err(|e| match e {
            Error::Io { .. } => Error::Config(e.to_string()),
            e => e,
        })?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = common.seed {
        c.train.seed = seed;
    }
    if let Some(m) = common.modality {
        c.model.modality = m;
    }
    c.model.validate()?;
    c.train.validate()?;
    Ok(c)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen(common: &Common, out: &Path, count: Option<usize>) -> Result<()> {
    let c = load_config(common)?;
    let n = count.unwrap_or(c.train.eval_samples);
    let samples = scenes(&c.train, &c.model, DOMAIN_HELD_OUT, 0, n)?;
    for sub in ["primary", "supp", "gt"] {
        create_dir(&out.join(sub))?;
    }
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:04}");
        io::write_rgb_png(out.join("primary").join(format!("{name}.png")), &s.primary)?;
        io::write_plane_png(out.join("gt").join(format!("{name}.png")), &s.gt, 0)?;
        let supp = s.supplementary.data();
        match s.supplementary.kind() {
            Modality::FocalStack => {
                let (h, w) = (supp.shape()[2], supp.shape()[3]);
                for k in 0..s.supplementary.real_slices() {
                    let slice = Tensor::new(&[1, 3, h, w], supp.data()[3 * k * h * w..(3 * k + 3) * h * w].to_vec())?;
                    io::write_rgb_png(out.join("supp").join(format!("{name}_{k:02}.png")), &slice)?;
                }
            }
            _ => io::write_plane_png(out.join("supp").join(format!("{name}.png")), supp, 0)?,
        }
    }
    eprintln!("wrote {n} scenes to {}", out.display());
    Ok(())
}

fn write_eval(out: &Path, file: &str, rows: &[(String, EvalResult)]) -> Result<EvalResult> {
    let mean = io::write_metrics_csv(out.join(file), rows)?;
    io::write_pr_csv(out.join("pr.csv"), &mean.pr)?;
    Ok(mean)
}

fn held_out_rows(model: &Model, c: &HarnessConfig) -> Result<Vec<(String, EvalResult)>> {
    let samples = scenes(&c.train, model.config(), DOMAIN_HELD_OUT, 0, c.train.eval_samples)?;
    let results = evaluate_samples(model, &samples, false)?;
    Ok(results.into_iter().enumerate().map(|(i, r)| (format!("{i:04}"), r)).collect())
}

fn report(mean: &EvalResult) {
    println!(
        "S {:.4}  F {:.4}  E {:.4}  MAE {:.4}",
        mean.s, mean.f_beta, mean.e_xi, mean.mae
    );
}

fn cmd_train(common: &Common, out: &Path, steps: Option<u64>) -> Result<()> {
    let mut c = load_config(common)?;
    if let Some(s) = steps {
        c.train.steps = s;
    }
    create_dir(out)?;
    std::fs::write(out.join("config.toml"), c.to_text()).context("writing config.toml")?;
    let mut model = Model::new(c.model.clone(), c.train.seed)?;
    let mut losses = csv::Writer::from_path(out.join("loss.csv")).context("creating loss.csv")?;
    losses.write_record(["step", "loss"])?;
    let tc = c.train.clone();
    train(&mut model, &tc, false, |m, rec| {
        losses.write_record([rec.step.to_string(), rec.loss.to_string()])?;
        if tc.log_every > 0 && rec.step % tc.log_every == 0 {
            eprintln!("step {} loss {:.5}", rec.step, rec.loss);
        }
        if tc.checkpoint_every > 0 && rec.step % tc.checkpoint_every == 0 {
            save_checkpoint(&m.state, out.join(format!("step_{:06}.ckpt", rec.step)))?;
        }
        Ok(ControlFlow::Continue(()))
    })?;
    losses.flush().context("writing loss.csv")?;
    save_checkpoint(&model.state, out.join("final.ckpt"))?;
    let mean = write_eval(out, "eval.csv", &held_out_rows(&model, &c)?)?;
    report(&mean);
    Ok(())
}

fn cmd_eval(common: &Common, ckpt: Option<&Path>, pred: Option<&Path>, gt: Option<&Path>, out: &Path) -> Result<()> {
    let rows = match (ckpt, pred, gt) {
        (Some(ckpt), _, _) => {
            let c = load_config(common)?;
            let model = Model::from_state(load_checkpoint(ckpt)?)?;
            held_out_rows(&model, &c)?
        }
        (None, Some(pred), Some(gt)) => io::evaluate_dirs(pred, gt)?,
        _ => bail!("eval needs either --ckpt or both --pred and --gt"),
    };
    create_dir(out)?;
    report(&write_eval(out, "metrics.csv", &rows)?);
    Ok(())
}

fn cmd_infer(ckpt: &Path, image: &Path, supp: &[PathBuf], out: &Path) -> Result<()> {
    let model = Model::from_state(load_checkpoint(ckpt)?)?;
    let primary = io::read_rgb(image)?;
    let kind = model.config().modality;
    let supp = match kind {
        Modality::FocalStack => {
            let slices = supp.iter().map(io::read_rgb).collect::<hrtnet::Result<Vec<_>>>()?;
            SupplementaryInput::focal_stack(&slices)?
        }
        _ => {
            if supp.len() != 1 {
                bail!("{} input takes exactly one --supp map", kind.name());
            }
            SupplementaryInput::single(kind, io::read_plane(&supp[0])?)?
        }
    };
    let prob = model.predict(&primary, &supp)?;
    let s = prob.shape();
    io::write_prob_png(out, &GrayMap::new(s[2], s[3], prob.data().to_vec())?)?;
    Ok(())
}

fn cmd_plot_pr(pr: &[PathBuf], out: &Path) -> Result<()> {
    let mut curves = Vec::with_capacity(pr.len());
    for path in pr {
        let label = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        curves.push((label, io::read_pr_csv(path)?));
    }
    std::fs::write(out, io::pr_svg(&curves)).with_context(|| format!("writing {}", out.display()))
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Gen { common, out, count } => gen(common, out, *count),
        Command::Train { common, out, steps } => cmd_train(common, out, *steps),
        Command::Eval { common, ckpt, pred, gt, out } => cmd_eval(common, ckpt.as_deref(), pred.as_deref(), gt.as_deref(), out),
        Command::Infer { ckpt, image, supp, out } => cmd_infer(ckpt, image, supp, out),
        Command::PlotPr { pr, out } => cmd_plot_pr(pr, out),
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(err) if err.is_non_finite() => 3,
        _ => 1,
    }
}

/// The error chain joined by ": ", skipping causes the outer message already spells out.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out += ": ";
            }
            out += &msg;
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
