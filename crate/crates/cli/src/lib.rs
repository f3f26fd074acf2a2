//! `mixmask` command suite: mask and mixture previews, training, k-NN
//! evaluation and a mixing throughput benchmark.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime errors.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use mixmask::bench::{bench_mix, BenchConfig};
use mixmask::datastore::{self, DatasetSpec};
use mixmask::maskgen::{expand_to_pixels, gen_mask, MaskPattern, RatioPolicy};
use mixmask::mixer::{mix_batch, switch_batch, FillMode, Pairing};
use mixmask::nnet::Checkpoint;
use mixmask::trainer::{self, RunOptions, TrainConfig};
use mixmask::{eval, Error, Normalization};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "mixmask", version, about = "Filling-based masking for siamese ConvNets", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Mask generation.
    #[command(subcommand, arg_required_else_help = true)]
    Mask(MaskCmd),
    /// Mixture previews.
    #[command(subcommand, arg_required_else_help = true)]
    Mix(MixCmd),
    /// Pretrain an encoder.
    Train(TrainArgs),
    /// Frozen-feature evaluation.
    #[command(subcommand, arg_required_else_help = true)]
    Eval(EvalCmd),
    /// Throughput benchmarks.
    #[command(subcommand, arg_required_else_help = true)]
    Bench(BenchCmd),
}

#[derive(Subcommand, Debug)]
enum MaskCmd {
    /// Write a mask PNG and a sidecar text file with its coefficient.
    Gen(MaskGenArgs),
}

#[derive(Args, Debug)]
struct MaskGenArgs {
    /// Grid side; the mask has grid x grid cells.
    #[arg(long, default_value_t = 8)]
    grid: usize,
    /// Filled fraction: R, fixed:R or uniform:LO:HI.
    #[arg(long, default_value = "0.5")]
    ratio: RatioPolicy,
    /// discrete or blocked.
    #[arg(long, default_value = "blocked")]
    pattern: MaskPattern,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output image side in pixels; must be a multiple of the grid.
    #[arg(long, default_value_t = 256)]
    size: usize,
    /// Output PNG path; the sidecar goes next to it with a .txt extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum MixCmd {
    /// Write mixture, switch and mask PNGs for a set of input images.
    Preview(MixPreviewArgs),
}

#[derive(Args, Debug)]
struct MixPreviewArgs {
    /// Two or more PNG files of equal size, paired in reverse order.
    #[arg(long, num_args = 2.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, default_value_t = 4)]
    grid: usize,
    #[arg(long, default_value = "0.5")]
    ratio: RatioPolicy,
    #[arg(long, default_value = "blocked")]
    pattern: MaskPattern,
    /// image, zero or gaussian.
    #[arg(long, default_value = "image")]
    fill: FillMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Flat key = value config file; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// Extra `key=value` config overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long)]
    pattern: Option<String>,
    #[arg(long)]
    fill: Option<String>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    queue_k: Option<usize>,
    #[arg(long)]
    momentum: Option<f64>,
    /// Enable or disable the MixMask branch.
    #[arg(long)]
    mixmask: Option<bool>,
    /// Enable or disable the Un-Mix branch.
    #[arg(long)]
    unmix: Option<bool>,
    #[arg(long)]
    global_prob: Option<f64>,
    /// same or different.
    #[arg(long)]
    permutation: Option<String>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    eval_set: Option<String>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    deterministic: bool,
    /// Print only the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Subcommand, Debug)]
enum EvalCmd {
    /// Weighted k-NN accuracy of a checkpoint's online encoder.
    Knn(EvalKnnArgs),
}

#[derive(Args, Debug)]
struct EvalKnnArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset spec for the feature bank.
    #[arg(long)]
    train_set: String,
    /// Dataset spec for the queries.
    #[arg(long)]
    test_set: String,
    #[arg(long, default_value_t = eval::DEFAULT_K)]
    k: usize,
    #[arg(long, default_value_t = eval::DEFAULT_TEMPERATURE)]
    temperature: f64,
    /// Directory for per_class.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    /// Mask generation plus mixing throughput.
    Mix(BenchMixArgs),
}

#[derive(Args, Debug)]
struct BenchMixArgs {
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 8)]
    grid: usize,
    #[arg(long, default_value = "blocked")]
    pattern: MaskPattern,
    #[arg(long, default_value_t = 0.5)]
    ratio: f64,
    #[arg(long, default_value = "image")]
    fill: FillMode,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    #[arg(long, default_value_t = 2)]
    workers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory for bench.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

type Out<'a> = &'a mut dyn Write;

/// Parses `args` (program name first) and runs the command.
pub fn dispatch<I, T>(args: I, out: Out, err: Out) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    let result = match cli.command {
        Command::Mask(MaskCmd::Gen(a)) => mask_gen(a, out),
        Command::Mix(MixCmd::Preview(a)) => mix_preview(a, out),
        Command::Train(a) => train(a, out, err),
        Command::Eval(EvalCmd::Knn(a)) => eval_knn(a, out),
        Command::Bench(BenchCmd::Mix(a)) => bench(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

fn create_dir(dir: &Path) -> mixmask::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_file(path: &Path, text: &str) -> mixmask::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn print(out: Out, text: &str) {
    let _ = out.write_all(text.as_bytes());
}

fn mask_gen(a: MaskGenArgs, out: Out) -> mixmask::Result<()> {
    let ratio = a.ratio.sample(&mut mixmask::rng::stream(a.seed, mixmask::rng::Domain::Ratio, &[]));
    let resolved = format!(
        "grid = {}\nratio = \"{}\"\npattern = \"{}\"\nseed = {}\nsize = {}\nout = \"{}\"\n",
        a.grid,
        a.ratio,
        a.pattern,
        a.seed,
        a.size,
        a.out.display()
    );
    print(out, &resolved);
    let mask = gen_mask(a.pattern, a.grid, ratio, a.seed)?;
    let pixels = expand_to_pixels(&mask, a.size, a.size)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    datastore::write_mask_png(&pixels, &a.out)?;
    let sidecar = a.out.with_extension("txt");
    let cells: String = mask
        .cells()
        .chunks(a.grid)
        .map(|r| r.iter().map(|c| char::from(b'0' + c)).collect::<String>() + "\n")
        .collect();
    write_file(
        &sidecar,
        &format!(
            "lambda = {}\nratio = {ratio}\nseed = {}\ngrid = {}\npattern = \"{}\"\ncells = \"\"\"\n{cells}\"\"\"\n",
            mask.lambda(),
            a.seed,
            a.grid,
            a.pattern
        ),
    )?;
    print(out, &format!("lambda {}\n", mask.lambda()));
    Ok(())
}

fn mix_preview(a: MixPreviewArgs, out: Out) -> mixmask::Result<()> {
    let fill = match a.fill {
        FillMode::Gaussian { .. } => FillMode::Gaussian { seed: a.seed },
        f => f,
    };
    print(
        out,
        &format!(
            "inputs = {:?}\ngrid = {}\nratio = \"{}\"\npattern = \"{}\"\nfill = \"{}\"\nseed = {}\nout_dir = \"{}\"\n",
            a.inputs, a.grid, a.ratio, a.pattern, fill, a.seed, a.out_dir.display()
        ),
    );
    let images = a
        .inputs
        .iter()
        .map(datastore::read_png)
        .collect::<mixmask::Result<Vec<_>>>()?;
    let batch = datastore::pngs_to_batch(&images, &Normalization::centered(3))?;
    let s = batch.shape();
    if s.h != s.w {
        return Err(Error::InvalidArgument(format!("inputs must be square, got {}x{}", s.h, s.w)));
    }
    let ratio = a.ratio.sample(&mut mixmask::rng::stream(a.seed, mixmask::rng::Domain::Ratio, &[]));
    let mask = gen_mask(a.pattern, a.grid, ratio, a.seed)?;
    let pixels = expand_to_pixels(&mask, s.h, s.w)?;
    let pairing = Pairing::reverse(s.n);
    let mixed = mix_batch(&batch, &pixels, &pairing, fill)?;
    create_dir(&a.out_dir)?;
    datastore::write_mask_png(&pixels, a.out_dir.join("mask.png"))?;
    for i in 0..s.n {
        datastore::write_image_png(&mixed.mixtures, i, a.out_dir.join(format!("mix_{i}.png")))?;
    }
    if fill == FillMode::Image {
        let switched = switch_batch(&mixed, &batch, &pixels)?;
        for i in 0..s.n {
            datastore::write_image_png(&switched, i, a.out_dir.join(format!("switch_{i}.png")))?;
        }
    }
    write_file(&a.out_dir.join("lambda.txt"), &format!("lambda = {}\n", mixed.lambda))?;
    print(out, &format!("lambda {}\nwrote {} mixtures to {}\n", mixed.lambda, s.n, a.out_dir.display()));
    Ok(())
}

fn train_overrides(a: &TrainArgs) -> mixmask::Result<Vec<(String, String)>> {
    let mut o = Vec::new();
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        o.push((k.trim().to_string(), v.trim().to_string()));
    }
    let quoted = |v: &str| format!("\"{}\"", v.replace('\\', "\\\\").replace('"', "\\\""));
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    put("epochs", a.epochs.map(|v| v.to_string()));
    put("batch_size", a.batch_size.map(|v| v.to_string()));
    put("seed", a.seed.map(|v| v.to_string()));
    put("lr", a.lr.map(|v| format!("{v:?}")));
    put("grid_n", a.grid.map(|v| v.to_string()));
    put("ratio_policy", a.ratio.as_deref().map(quoted));
    put("mask_pattern", a.pattern.as_deref().map(quoted));
    put("fill_mode", a.fill.as_deref().map(quoted));
    put("tau", a.tau.map(|v| format!("{v:?}")));
    put("queue_k", a.queue_k.map(|v| v.to_string()));
    put("momentum_m", a.momentum.map(|v| format!("{v:?}")));
    put("mixmask_enabled", a.mixmask.map(|v| v.to_string()));
    put("unmix_enabled", a.unmix.map(|v| v.to_string()));
    put("unmix_global_prob", a.global_prob.map(|v| format!("{v:?}")));
    put("permutation_policy", a.permutation.as_deref().map(quoted));
    put("dataset", a.dataset.as_deref().map(quoted));
    put("eval_set", a.eval_set.as_deref().map(quoted));
    put("workers", a.workers.map(|v| v.to_string()));
    if a.deterministic {
        put("deterministic", Some("true".into()));
    }
    Ok(o)
}

fn train(a: TrainArgs, out: Out, err: Out) -> mixmask::Result<()> {
    let overrides = train_overrides(&a)?;
    let cfg = match &a.config {
        Some(path) => TrainConfig::load(path, &overrides)?,
        None => TrainConfig::from_toml_with("", &overrides)?,
    };
    print(out, &cfg.to_toml());
    if a.dry_run {
        return Ok(());
    }
    let summary = trainer::run_with(
        &cfg,
        &a.out,
        &RunOptions {
            progress: true,
            ..Default::default()
        },
    )?;
    if let Some(e) = summary.resumed_from {
        let _ = writeln!(err, "resumed from epoch {e}");
    }
    print(out, &format!("steps {}\n", summary.steps));
    if let Some((_, loss)) = summary.epoch_losses.last() {
        print(out, &format!("final epoch mean loss {loss:.6}\n"));
    }
    if let Some(k) = &summary.knn {
        print(out, &format!("knn accuracy {:.4}\n", k.accuracy));
    }
    Ok(())
}

fn eval_knn(a: EvalKnnArgs, out: Out) -> mixmask::Result<()> {
    print(
        out,
        &format!(
            "checkpoint = \"{}\"\ntrain_set = \"{}\"\ntest_set = \"{}\"\nk = {}\ntemperature = {}\n",
            a.checkpoint.display(),
            a.train_set,
            a.test_set,
            a.k,
            a.temperature
        ),
    );
    let ck = Checkpoint::load(&a.checkpoint)?;
    let params = ck.encoder("online", &ck.arch.clone())?;
    let train: DatasetSpec = a.train_set.parse()?;
    let test: DatasetSpec = a.test_set.parse()?;
    let train = datastore::load_dataset(&train)?;
    let test = datastore::load_dataset(&test)?;
    for (name, d) in [("train", &train), ("test", &test)] {
        let s = d.shape();
        if s.c != ck.arch.in_channels || s.h != ck.arch.image_size || s.w != ck.arch.image_size {
            return Err(Error::ArchitectureMismatch {
                found: format!("{name} set images {}x{}x{}", s.c, s.h, s.w),
                expected: ck.arch.describe(),
            });
        }
    }
    let report = eval::knn_accuracy(&params, &train, &test, a.k, a.temperature)?;
    create_dir(&a.out)?;
    let csv = a.out.join("per_class.csv");
    write_file(&csv, &report.per_class_csv())?;
    print(out, &format!("accuracy {:.4}\nper-class results in {}\n", report.accuracy, csv.display()));
    Ok(())
}

fn bench(a: BenchMixArgs, out: Out) -> mixmask::Result<()> {
    let cfg = BenchConfig {
        batch_size: a.batch_size,
        image_size: a.image_size,
        grid_n: a.grid,
        pattern: a.pattern,
        ratio: a.ratio,
        fill: a.fill,
        iterations: a.iterations,
        workers: a.workers,
        seed: a.seed,
    };
    print(out, &format!("{cfg:?}\n"));
    let report = bench_mix(&cfg)?;
    let csv = report.to_csv();
    create_dir(&a.out)?;
    write_file(&a.out.join("bench.csv"), &csv)?;
    print(out, &csv);
    if let Some(s) = report.speedup() {
        print(out, &format!("multi/single throughput {s:.3}\n"));
    }
    Ok(())
}
