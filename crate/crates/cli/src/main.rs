//! Command-line entry point: corpus synthesis, training, evaluation,
//! energy-score export, ensemble evaluation, label statistics, and the
//! finite-difference gradient check, all over the core library.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O or parse failure, 3 numerical
//! divergence, 4 shape or configuration mismatch.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use adura_core::config::{Config, NetworkConfig, SynthConfig};
use adura_core::data::{class_distribution, generate_ood, generate_synthetic, split, Dataset, SplitSpec};
use adura_core::error::{Error, Result};
use adura_core::gradcheck;
use adura_core::metrics::{
    compute_report, energy_score, ensemble_logits, histogram, histogram_csv, summarize_energy,
};
use adura_core::rng::Rng;
use adura_core::tensor::tape::stable_sigmoid;
use adura_core::tensor::Tensor;
use adura_core::train::{evaluate, load_checkpoint, sibling_path, Trainer};

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_SHAPE: u8 = 4;

fn exit_for(err: &Error) -> u8 {
    match err {
        Error::Io { .. } | Error::Parse { .. } | Error::CorruptCheckpoint(_) => EXIT_IO,
        Error::NonFinite { .. }
        | Error::Domain { .. }
        | Error::NonScalarRoot(_)
        | Error::GraphConsumed => EXIT_NUMERIC,
        Error::Config(_) | Error::ShapeMismatch { .. } | Error::ClassMismatch { .. } => EXIT_SHAPE,
    }
}

#[derive(Parser)]
#[command(
    name = "adura",
    about = "Uncertainty-aware dual-head image classifier",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shape corpus (PGM images plus labels.csv)
    Synth(SynthArgs),
    /// Train on a corpus directory, writing a checkpoint and epoch log
    Train(TrainArgs),
    /// Evaluate a checkpoint on a corpus and print the metrics report
    Eval(EvalArgs),
    /// Export energy-score histograms for in-distribution and OOD corpora
    Energy(EnergyArgs),
    /// Run finite-difference gradient checks over every operation
    Gradcheck(GradcheckArgs),
    /// Average several checkpoints' logits and evaluate the ensemble
    EnsembleEval(EnsembleArgs),
    /// Print the label distribution of a corpus
    Distribution(DistributionArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the corpus
    #[arg(long)]
    out: PathBuf,
    /// Number of images
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Number of label classes
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Square image edge length in pixels
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Probability that an entry is rendered and labeled uncertain
    #[arg(long, default_value_t = 0.2)]
    uncertain_frac: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Render out-of-distribution textures with blank labels instead
    #[arg(long)]
    ood: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory (images plus labels.csv)
    #[arg(long)]
    data: PathBuf,
    /// key = value config file layered over the defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint output path; `<out>.last` and `<out>.log.csv` appear beside it
    #[arg(long)]
    out: PathBuf,
    /// Uncertain-label strategy override (u-mask|u-zero|u-one|u-ignore)
    #[arg(long)]
    strategy: Option<String>,
    /// Seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of the corpus held out for validation
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Continue from `<out>.last` instead of starting fresh
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Abstention threshold on the uncertainty u
    #[arg(long, default_value_t = 0.4)]
    tau: f64,
    /// Also write the JSON report to this path
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EnergyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// In-distribution corpus directory
    #[arg(long)]
    in_dist: PathBuf,
    /// Out-of-distribution corpus directory
    #[arg(long)]
    ood: PathBuf,
    /// Stem for the two histogram CSVs, `<out>.in.csv` and `<out>.ood.csv`
    #[arg(long)]
    out: PathBuf,
    /// Histogram bin count
    #[arg(long, default_value_t = 16)]
    bins: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct EnsembleArgs {
    /// Comma-separated checkpoint paths (at least two)
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    ckpts: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    tau: f64,
    /// Also write the ensemble JSON report to this path
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct DistributionArgs {
    #[arg(long)]
    data: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Energy(a) => run_energy(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::EnsembleEval(a) => {
            if a.ckpts.len() < 2 {
                eprintln!("error: --ckpts needs at least two checkpoint paths");
                return ExitCode::from(EXIT_USAGE);
            }
            run_ensemble(a)
        }
        Command::Distribution(a) => run_distribution(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_for(&e))
        }
    }
}

fn echo(key: &str, value: impl std::fmt::Display) {
    println!("# {key} = {value}");
}

fn check_image_geometry(net: &NetworkConfig, images: &Tensor) -> Result<()> {
    let s = images.shape();
    if s[1] != net.input_channels || s[2] != net.input_size || s[3] != net.input_size {
        return Err(Error::config(format!(
            "corpus images are [{}, {}, {}], the checkpoint expects [{}, {}, {}]",
            s[1], s[2], s[3], net.input_channels, net.input_size, net.input_size
        )));
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into())
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = SynthConfig::default();
    cfg.n = args.n;
    cfg.classes = args.classes;
    cfg.image_size = args.image_size;
    cfg.uncertain_frac = args.uncertain_frac;
    cfg.seed = args.seed;
    cfg.validate()?;
    for (k, v) in cfg.echo_pairs() {
        echo(&k, v);
    }
    echo("out", args.out.display());
    echo("ood", args.ood);
    let mut rng = Rng::new(cfg.seed);
    let ds = if args.ood {
        generate_ood(&args.out, &cfg, &mut rng)?
    } else {
        generate_synthetic(&args.out, &cfg, &mut rng)?
    };
    println!("wrote {} images to {}", ds.n(), args.out.display());
    Ok(())
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut cfg = Config::default();
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        cfg.merge_text(&text)?;
    }
    if let Some(s) = &args.strategy {
        cfg.set("strategy", s)?;
    }
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    cfg.validate()?;
    if !(args.val_fraction > 0.0 && args.val_fraction < 1.0) {
        return Err(Error::config(format!(
            "--val-fraction must lie strictly between 0 and 1, got {}",
            args.val_fraction
        )));
    }
    for (k, v) in cfg.echo_pairs() {
        echo(k, v);
    }
    echo("data", args.data.display());
    echo("out", args.out.display());
    echo("val_fraction", args.val_fraction);
    echo("resume", args.resume);

    let ds = Dataset::load(&args.data)?;
    if ds.n() < 2 {
        return Err(Error::config(
            "corpus needs at least two samples to split off a validation set",
        ));
    }
    let (h, w, _) = ds.image_pixels(0)?;
    if (h, w) != (cfg.network.input_size, cfg.network.input_size) {
        return Err(Error::config(format!(
            "corpus images are {w}x{h}, the configured input_size is {}",
            cfg.network.input_size
        )));
    }
    let spec = SplitSpec {
        train_fraction: 1.0 - args.val_fraction,
        seed: cfg.train.seed,
    };
    let (train_ds, val_ds) = split(&ds, &spec);
    println!(
        "split: {} training / {} validation samples",
        train_ds.n(),
        val_ds.n()
    );

    let mut trainer = if args.resume {
        let last = sibling_path(&args.out, "last");
        let mut t = Trainer::from_checkpoint(&load_checkpoint(&last)?)?;
        t.config.train.epochs = cfg.train.epochs;
        println!("resumed from {} at epoch {}", last.display(), t.epoch);
        t
    } else {
        Trainer::new(cfg)?
    };
    let summary = trainer.fit(&train_ds, &val_ds, &args.out)?;
    for r in &summary.records {
        println!(
            "epoch {:>3}  lr {:.3e}  loss {:.4}  micro_auc {}  coverage {:.3}",
            r.epoch,
            r.lr,
            r.loss_total,
            fmt_opt(r.micro_auc),
            r.coverage
        );
    }
    match summary.best_metric {
        Some(m) => println!(
            "best val micro-AUC {m:.4}; checkpoint at {}",
            args.out.display()
        ),
        None => println!(
            "micro-AUC undefined on this split; final state at {}",
            args.out.display()
        ),
    }
    Ok(())
}

fn validate_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::config(format!(
            "--tau must lie in (0, 1], got {tau}"
        )));
    }
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    validate_tau(args.tau)?;
    let trainer = Trainer::from_checkpoint(&load_checkpoint(&args.ckpt)?)?;
    for (k, v) in trainer.config.echo_pairs() {
        echo(k, v);
    }
    echo("ckpt", args.ckpt.display());
    echo("data", args.data.display());
    echo("tau", args.tau);
    let ds = Dataset::load(&args.data)?;
    let classes = trainer.config.network.num_classes;
    if ds.labels.classes() != classes {
        return Err(Error::ClassMismatch {
            checkpoint: classes,
            data: ds.labels.classes(),
        });
    }
    let images = ds.load_images()?;
    check_image_geometry(&trainer.config.network, &images)?;
    let out = evaluate(&trainer.model, &trainer.store, &images);
    let mut report = compute_report(&out.probs, &out.u, &ds.labels, args.tau);
    report
        .energy
        .push(summarize_energy("data", &energy_score(&out.logits)));
    let json = report.to_json();
    println!("{json}");
    if let Some(path) = &args.report {
        fs::write(path, &json).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn run_energy(args: EnergyArgs) -> Result<()> {
    let trainer = Trainer::from_checkpoint(&load_checkpoint(&args.ckpt)?)?;
    for (k, v) in trainer.config.echo_pairs() {
        echo(k, v);
    }
    echo("ckpt", args.ckpt.display());
    echo("in_dist", args.in_dist.display());
    echo("ood", args.ood.display());
    echo("out", args.out.display());
    echo("bins", args.bins);
    if args.bins == 0 {
        return Err(Error::config("--bins must be at least 1"));
    }
    let mut means = Vec::new();
    for (tag, dir) in [("in", &args.in_dist), ("ood", &args.ood)] {
        let ds = Dataset::load(dir)?;
        let images = ds.load_images()?;
        check_image_geometry(&trainer.config.network, &images)?;
        let out = evaluate(&trainer.model, &trainer.store, &images);
        let energies = energy_score(&out.logits);
        let hist = histogram(&energies, args.bins);
        let path = sibling_path(&args.out, &format!("{tag}.csv"));
        fs::write(&path, histogram_csv(&hist)).map_err(|e| Error::io(&path, e))?;
        let summary = summarize_energy(tag, &energies);
        println!(
            "{tag}: {} samples, mean energy {:.6} -> {}",
            summary.count,
            summary.mean,
            path.display()
        );
        means.push(summary.mean);
    }
    println!(
        "summary: mean energy in-dist {:.6}, ood {:.6}",
        means[0], means[1]
    );
    Ok(())
}

fn run_gradcheck(args: GradcheckArgs) -> Result<()> {
    echo("seed", args.seed);
    let reports = gradcheck::run_all(args.seed);
    print!("{}", gradcheck::table(&reports));
    if gradcheck::all_passed(&reports) {
        println!("all {} checks passed", reports.len());
        Ok(())
    } else {
        let failed = reports.iter().filter(|r| !r.passed).count();
        Err(Error::Domain {
            op: "gradcheck",
            msg: format!("{failed} of {} checks exceeded tolerance", reports.len()),
        })
    }
}

fn run_ensemble(args: EnsembleArgs) -> Result<()> {
    validate_tau(args.tau)?;
    let mut trainers = Vec::new();
    for path in &args.ckpts {
        trainers.push(Trainer::from_checkpoint(&load_checkpoint(path)?)?);
    }
    let classes = trainers[0].config.network.num_classes;
    for t in &trainers[1..] {
        if t.config.network.num_classes != classes {
            return Err(Error::ClassMismatch {
                checkpoint: t.config.network.num_classes,
                data: classes,
            });
        }
    }
    for (k, v) in trainers[0].config.echo_pairs() {
        echo(k, v);
    }
    for path in &args.ckpts {
        echo("ckpt", path.display());
    }
    echo("data", args.data.display());
    echo("tau", args.tau);

    let ds = Dataset::load(&args.data)?;
    if ds.labels.classes() != classes {
        return Err(Error::ClassMismatch {
            checkpoint: classes,
            data: ds.labels.classes(),
        });
    }
    let images = ds.load_images()?;
    check_image_geometry(&trainers[0].config.network, &images)?;
    let n = images.shape()[0];

    let mut logit_runs = Vec::new();
    let mut u_acc = vec![0.0; n * classes];
    for (t, path) in trainers.iter().zip(&args.ckpts) {
        let out = evaluate(&t.model, &t.store, &images);
        let report = compute_report(&out.probs, &out.u, &ds.labels, args.tau);
        println!(
            "model {}: micro-AUC {}",
            path.display(),
            fmt_opt(report.micro_auc)
        );
        for (acc, &v) in u_acc.iter_mut().zip(out.u.data()) {
            *acc += v;
        }
        logit_runs.push(out.logits);
    }
    let k = logit_runs.len() as f64;
    let mean_logits = ensemble_logits(&logit_runs);
    let probs = mean_logits.map(stable_sigmoid);
    let u = Tensor::new(
        vec![n, classes],
        u_acc.into_iter().map(|x| x / k).collect(),
    );
    let mut report = compute_report(&probs, &u, &ds.labels, args.tau);
    report
        .energy
        .push(summarize_energy("ensemble", &energy_score(&mean_logits)));
    println!("ensemble micro-AUC {}", fmt_opt(report.micro_auc));
    let json = report.to_json();
    println!("{json}");
    if let Some(path) = &args.report {
        fs::write(path, &json).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn run_distribution(args: DistributionArgs) -> Result<()> {
    echo("data", args.data.display());
    let ds = Dataset::load(&args.data)?;
    let counts = class_distribution(&ds.labels);
    println!(
        "{:<12} {:>8} {:>8} {:>8} {:>8}",
        "class", "pos", "neg", "unc", "blank"
    );
    for (name, c) in ds.labels.class_names.iter().zip(&counts) {
        println!(
            "{:<12} {:>8} {:>8} {:>8} {:>8}",
            name, c.pos, c.neg, c.unc, c.blank
        );
    }
    println!("samples: {}", ds.n());
    Ok(())
}
