//! Command-line front end: train / eval / sample / sweep / cl / verify.
//!
//! Every setting resolves as flag > config key > default, and the complete
//! resolution is echoed to `manifest.cfg` in the output directory. A manifest
//! re-parses as a config, so rerunning a command from its own manifest
//! reproduces the run bit for bit (wall-clock `seconds` excepted).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{self, AnalysisError, SweepSpec};
use crate::checkpoint;
use crate::config::{format_config, ConfigReader};
use crate::data::{self, ImageDataset};
use crate::latent::{collect_latent_stats, LatentPriorConfig};
use crate::metrics::{self, EpochRow};
use crate::model::{
    self, ModelError, SampleMode, TrainConfig, VaeModel, VariantConfig, VariantKind,
};
use crate::optim::AdamParams;
use crate::pgm;
use crate::replay::{self, ReplayConfig, ReplayError};
use crate::rng::{fnv1a64, Rng, ALGORITHM};

/// Exit 1: the request itself is bad (config, paths, shapes). Exit 2: the
/// request was sound but the run failed (divergence, write errors).
enum CmdError {
    Validation(String),
    Runtime(String),
}

fn validation(e: impl std::fmt::Display) -> CmdError {
    CmdError::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> CmdError {
    CmdError::Runtime(e.to_string())
}

fn model_err(e: ModelError) -> CmdError {
    match e {
        ModelError::NonFiniteLoss { .. } => runtime(e),
        _ => validation(e),
    }
}

fn replay_err(e: ReplayError) -> CmdError {
    match e {
        ReplayError::BadSchedule(_) | ReplayError::BadConfig(_) => validation(e),
        ReplayError::Model(m) => model_err(m),
        _ => runtime(e),
    }
}

fn analysis_err(e: AnalysisError) -> CmdError {
    match e {
        AnalysisError::BadSweep(_) => validation(e),
        AnalysisError::Cell { .. } => runtime(e),
    }
}

#[derive(Parser)]
#[command(name = "bvae", version, about = "Binarized-latent VAE toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a VAE; writes checkpoint.bvae, metrics.csv and manifest.cfg
    Train(CommonArgs),
    /// Evaluate a checkpoint: BCE / KL / ELBO, NMI, active units
    Eval(CkptArgs),
    /// Decode prior samples from a checkpoint into a PGM grid
    Sample(SampleArgs),
    /// Train a grid of models over latent size and binarizing radius
    Sweep(SweepArgs),
    /// Class-incremental split MNIST with generative replay
    Cl(CommonArgs),
    /// Check the density-difference derivation numerically
    Verify(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Config file of `key = value` lines
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// RNG seed; overrides the config's `seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default bvae-out/<command>)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// MNIST directory; overrides the config and BVAE_DATA_DIR
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct CkptArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to load; overrides the config's `checkpoint`
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint to load; overrides the config's `checkpoint`
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Number of images, tiled 10 per row
    #[arg(long)]
    n: Option<usize>,
    /// reduced_bias or biased
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Print the planned cells and their seeds without training
    #[arg(long)]
    dry_run: bool,
}

/// Parses arguments, dispatches, and returns the process exit code:
/// 0 success, 1 validation error, 2 runtime failure.
pub fn run(args: impl IntoIterator<Item = String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and succeed.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Sample(a) => cmd_sample(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Cl(a) => cmd_cl(a),
        Cmd::Verify(a) => cmd_verify(a),
    };
    match result {
        Ok(()) => 0,
        Err(CmdError::Validation(msg)) => {
            eprintln!("error: {}", msg);
            1
        }
        Err(CmdError::Runtime(msg)) => {
            eprintln!("error: {}", msg);
            2
        }
    }
}

/// Flag > config key > default resolution, recording every resolved value so
/// the manifest holds the full effective configuration.
struct Resolver {
    reader: ConfigReader,
    manifest: Vec<(&'static str, String)>,
}

impl Resolver {
    fn new(common: &CommonArgs, command: &'static str) -> Result<Resolver, CmdError> {
        let reader = match &common.config {
            Some(path) => ConfigReader::from_file(path).map_err(validation)?,
            None => ConfigReader::empty(),
        };
        let mut rs = Resolver {
            reader,
            manifest: Vec::new(),
        };
        if let Some(found) = rs.reader.str_opt("command") {
            if found != command {
                return Err(CmdError::Validation(format!(
                    "config says `command = {}`, but the `{}` subcommand is running",
                    found, command
                )));
            }
        }
        rs.record("command", command.to_string());
        if let Some(found) = rs.reader.str_opt("rng_algorithm") {
            if found != ALGORITHM {
                return Err(CmdError::Validation(format!(
                    "config wants rng_algorithm `{}`, this build uses `{}`",
                    found, ALGORITHM
                )));
            }
        }
        rs.record("rng_algorithm", ALGORITHM.to_string());
        // Accepted from old manifests, always re-stamped with this build.
        let _ = rs.reader.str_opt("tool_version");
        rs.record("tool_version", env!("CARGO_PKG_VERSION").to_string());
        Ok(rs)
    }

    fn record(&mut self, key: &'static str, value: String) {
        self.manifest.push((key, value));
    }

    fn seed(&mut self, common: &CommonArgs) -> Result<u64, CmdError> {
        let from_config = self.reader.u64_opt("seed").map_err(validation)?;
        let seed = common.seed.or(from_config).unwrap_or(0);
        self.record("seed", seed.to_string());
        Ok(seed)
    }

    fn out_dir(&mut self, common: &CommonArgs, command: &str) -> PathBuf {
        let from_config = self.reader.path_opt("out");
        let dir = common
            .out
            .clone()
            .or(from_config)
            .unwrap_or_else(|| Path::new("bvae-out").join(command));
        self.record("out", dir.display().to_string());
        dir
    }

    fn data_dir(&mut self, common: &CommonArgs) -> PathBuf {
        let from_config = self.reader.path_opt("data_dir");
        let dir = common
            .data_dir
            .clone()
            .or(from_config)
            .unwrap_or_else(data::default_data_dir);
        self.record("data_dir", dir.display().to_string());
        dir
    }

    fn checkpoint_path(&mut self, flag: &Option<PathBuf>) -> Result<PathBuf, CmdError> {
        let from_config = self.reader.path_opt("checkpoint");
        let path = flag.clone().or(from_config).ok_or_else(|| {
            CmdError::Validation(
                "a checkpoint is required (--checkpoint PATH or `checkpoint` config key)".into(),
            )
        })?;
        self.record("checkpoint", path.display().to_string());
        Ok(path)
    }

    fn usize_key(&mut self, key: &'static str, default: usize) -> Result<usize, CmdError> {
        let v = self.reader.usize_or(key, default).map_err(validation)?;
        self.record(key, v.to_string());
        Ok(v)
    }

    fn f64_key(&mut self, key: &'static str, default: f64) -> Result<f64, CmdError> {
        let v = self.reader.f64_or(key, default).map_err(validation)?;
        self.record(key, format!("{}", v));
        Ok(v)
    }

    fn bool_key(&mut self, key: &'static str, default: bool) -> Result<bool, CmdError> {
        let v = self.reader.bool_or(key, default).map_err(validation)?;
        self.record(key, v.to_string());
        Ok(v)
    }

    fn adam(&mut self) -> Result<AdamParams, CmdError> {
        let d = AdamParams::default();
        Ok(AdamParams {
            lr: self.f64_key("lr", d.lr)?,
            beta1: self.f64_key("beta1", d.beta1)?,
            beta2: self.f64_key("beta2", d.beta2)?,
            eps: self.f64_key("adam_eps", d.eps)?,
        })
    }

    /// Rejects keys that were present but never requested, then hands back
    /// the manifest pairs.
    fn finish(self) -> Result<Vec<(&'static str, String)>, CmdError> {
        self.reader.finish().map_err(validation)?;
        Ok(self.manifest)
    }
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(", ")
}

fn write_manifest(dir: &Path, pairs: Vec<(&'static str, String)>) -> Result<(), CmdError> {
    std::fs::write(dir.join("manifest.cfg"), format_config(pairs)).map_err(runtime)
}

fn cap(ds: ImageDataset, subset: usize) -> ImageDataset {
    if subset == 0 || subset >= ds.n() {
        ds
    } else {
        ds.take(subset)
    }
}

fn load_data(dir: &Path, subset: usize) -> Result<(ImageDataset, ImageDataset), CmdError> {
    let (train, test) = data::load_mnist(dir).map_err(validation)?;
    Ok((cap(train, subset), cap(test, subset)))
}

fn load_checkpoint(path: &Path) -> Result<checkpoint::Checkpoint, CmdError> {
    checkpoint::load(path).map_err(|e| CmdError::Validation(format!("{}: {}", path.display(), e)))
}

fn square_side(dim: usize) -> Result<usize, CmdError> {
    let side = (dim as f64).sqrt().round() as usize;
    if side > 0 && side * side == dim {
        Ok(side)
    } else {
        Err(CmdError::Validation(format!(
            "cannot tile: images have {} pixels, not a perfect square",
            dim
        )))
    }
}

fn cmd_train(common: &CommonArgs) -> Result<(), CmdError> {
    let mut rs = Resolver::new(common, "train")?;
    let seed = rs.seed(common)?;
    let out = rs.out_dir(common, "train");
    let data_dir = rs.data_dir(common);

    let kind = VariantKind::parse(&rs.reader.str_or("variant", "vae")).map_err(validation)?;
    rs.record("variant", kind.as_str().to_string());
    let variant = VariantConfig {
        kind,
        beta_gamma: rs.f64_key("beta_gamma", 1.0)?,
        capacity: rs.f64_key("capacity", 0.0)?,
        capacity_ramp_steps: rs.usize_key("capacity_ramp_steps", 0)?,
        binarize: rs.bool_key("binarize", false)?,
        r: rs.f64_key("r", 0.0)?,
    };
    variant.validate().map_err(validation)?;

    let latent_dim = rs.usize_key("latent_dim", 16)?;
    let hidden = rs.usize_key("hidden", 256)?;
    let epochs = rs.usize_key("epochs", 10)?;
    let batch_size = rs.usize_key("batch_size", 128)?;
    let adam = rs.adam()?;
    let subset = rs.usize_key("subset", 0)?;
    // Per-epoch NMI / active-unit logging runs on at most this many training
    // examples (0 = all); final latent stats always use the full set.
    let nmi_subset = rs.usize_key("nmi_subset", 10_000)?;
    let manifest = rs.finish()?;

    let (train, test) = load_data(&data_dir, subset)?;
    std::fs::create_dir_all(&out).map_err(runtime)?;

    let prior = LatentPriorConfig::standard(latent_dim, 0.0).map_err(validation)?;
    let mut model =
        VaeModel::new(train.dim(), hidden, latent_dim, prior, variant, seed).map_err(model_err)?;
    println!(
        "training {} (d={}, r={}) for {} epochs on {} examples",
        kind.as_str(),
        latent_dim,
        variant.effective_r(),
        epochs,
        train.n()
    );

    let log_ds = cap(train.clone(), nmi_subset);
    let log_labels = metrics::labels_to_usize(log_ds.labels());
    let nmi_seed = seed ^ fnv1a64("train-nmi");
    let tc = TrainConfig {
        epochs,
        batch_size,
        adam,
        seed,
    };
    let mut rows: Vec<EpochRow> = Vec::with_capacity(epochs);
    model::train_with(&mut model, train.images(), test.images(), &tc, |m, es| {
        let post = m.encode_dataset(log_ds.images(), 256);
        let fit = metrics::cluster_latents(&post.mu_q, 10, nmi_seed);
        let nmi = metrics::nmi(&log_labels, &fit.labels).unwrap();
        let (active, _) = metrics::active_units(&post.mu_q, 0.01);
        println!(
            "epoch {:>2}/{}  bce {:.4}  kl {:.4}  nmi {:.4}  active {}  {:.1}s",
            es.epoch, epochs, es.recon_bce, es.kl, nmi, active, es.seconds
        );
        rows.push(EpochRow {
            epoch: es.epoch,
            recon_bce: es.recon_bce,
            kl: es.kl,
            elbo: es.elbo(),
            nmi,
            active_units: active,
            seconds: es.seconds,
        });
    })
    .map_err(model_err)?;

    let post = model.encode_dataset(train.images(), 256);
    let stats = collect_latent_stats(std::iter::once(post), model.effective_prior());
    checkpoint::save(&out.join("checkpoint.bvae"), &model, Some(&stats)).map_err(runtime)?;
    metrics::write_metrics_csv(&out.join("metrics.csv"), &rows).map_err(runtime)?;
    write_manifest(&out, manifest)?;
    println!("wrote {}", out.join("checkpoint.bvae").display());
    Ok(())
}

fn cmd_eval(args: &CkptArgs) -> Result<(), CmdError> {
    let common = &args.common;
    let mut rs = Resolver::new(common, "eval")?;
    let seed = rs.seed(common)?;
    let out = rs.out_dir(common, "eval");
    let data_dir = rs.data_dir(common);
    let ckpt_path = rs.checkpoint_path(&args.checkpoint)?;
    let subset = rs.usize_key("subset", 0)?;
    let manifest = rs.finish()?;

    let ck = load_checkpoint(&ckpt_path)?;
    let (train, test) = load_data(&data_dir, subset)?;
    if ck.model.input_dim() != train.dim() {
        return Err(CmdError::Validation(format!(
            "checkpoint expects {} pixels per image, dataset has {}",
            ck.model.input_dim(),
            train.dim()
        )));
    }
    std::fs::create_dir_all(&out).map_err(runtime)?;

    let mut rng = Rng::derive(seed, "eval");
    let report = metrics::elbo_report(&ck.model, test.images(), &mut rng);
    let post = ck.model.encode_dataset(train.images(), 256);
    let fit = metrics::cluster_latents(&post.mu_q, 10, seed ^ fnv1a64("eval-nmi"));
    let nmi = metrics::nmi(&metrics::labels_to_usize(train.labels()), &fit.labels).unwrap();
    let (active, _) = metrics::active_units(&post.mu_q, 0.01);

    let csv = format!(
        "recon_bce,kl,elbo,nmi,active_units\n{},{},{},{},{}\n",
        report.recon, report.kl, report.elbo, nmi, active
    );
    std::fs::write(out.join("eval.csv"), csv).map_err(runtime)?;
    write_manifest(&out, manifest)?;
    println!(
        "bce {:.4}  kl {:.4}  elbo {:.4}  nmi {:.4}  active {}",
        report.recon, report.kl, report.elbo, nmi, active
    );
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<(), CmdError> {
    let common = &args.common;
    let mut rs = Resolver::new(common, "sample")?;
    let seed = rs.seed(common)?;
    let out = rs.out_dir(common, "sample");
    let ckpt_path = rs.checkpoint_path(&args.checkpoint)?;

    let n = args
        .n
        .unwrap_or(rs.reader.usize_or("n", 100).map_err(validation)?);
    rs.record("n", n.to_string());
    let mode_key = rs.reader.str_or("mode", "reduced_bias");
    let mode = SampleMode::parse(args.mode.as_deref().unwrap_or(&mode_key)).map_err(validation)?;
    rs.record("mode", mode.as_str().to_string());
    let manifest = rs.finish()?;

    if n == 0 {
        return Err(CmdError::Validation("n must be positive".into()));
    }
    let ck = load_checkpoint(&ckpt_path)?;
    let mut rng = Rng::derive(seed, "sample");
    let images = ck
        .model
        .generate(n, mode, ck.stats.as_ref(), &mut rng)
        .map_err(model_err)?;
    let side = square_side(images.cols())?;

    std::fs::create_dir_all(&out).map_err(runtime)?;
    let grid = pgm::tile(&images, side, side, n.min(10));
    grid.write(&out.join("samples.pgm")).map_err(runtime)?;
    write_manifest(&out, manifest)?;
    println!(
        "wrote {} ({} tiles of {}x{}, mode {})",
        out.join("samples.pgm").display(),
        n,
        side,
        side,
        mode.as_str()
    );
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CmdError> {
    let common = &args.common;
    let mut rs = Resolver::new(common, "sweep")?;
    let seed = rs.seed(common)?;
    let out = rs.out_dir(common, "sweep");
    let data_dir = rs.data_dir(common);

    let d_values = rs
        .reader
        .list_or("d_values", &analysis::DEFAULT_D_VALUES, "an integer")
        .map_err(validation)?;
    rs.record("d_values", join(&d_values));
    let r_values = rs
        .reader
        .list_or("r_values", &analysis::DEFAULT_R_VALUES, "a number")
        .map_err(validation)?;
    rs.record("r_values", join(&r_values));
    let spec = SweepSpec {
        d_values,
        r_values,
        epochs: rs.usize_key("epochs", 10)?,
        batch_size: rs.usize_key("batch_size", 128)?,
        hidden: rs.usize_key("hidden", 256)?,
        adam: rs.adam()?,
        seed,
    };
    let subset = rs.usize_key("subset", 0)?;
    let manifest = rs.finish()?;

    if args.dry_run {
        for &d in &spec.d_values {
            for &r in &spec.r_values {
                println!(
                    "cell d={} r={} seed={}",
                    d,
                    r,
                    analysis::cell_seed(seed, d, r)
                );
            }
        }
        println!(
            "dry run: {} cells planned, nothing written",
            spec.d_values.len() * spec.r_values.len()
        );
        return Ok(());
    }

    let (train, test) = load_data(&data_dir, subset)?;
    std::fs::create_dir_all(&out).map_err(runtime)?;
    let total = spec.d_values.len() * spec.r_values.len();
    let mut done = 0;
    let grid = analysis::run_sweep(&spec, &train, &test, |cell| {
        done += 1;
        println!(
            "[{}/{}] d={} r={}  bce {:.4}  nmi {:.4}",
            done, total, cell.d, cell.r, cell.bce, cell.nmi
        );
    })
    .map_err(analysis_err)?;
    std::fs::write(out.join("sweep.csv"), analysis::format_sweep_csv(&grid)).map_err(runtime)?;
    write_manifest(&out, manifest)?;
    println!("wrote {}", out.join("sweep.csv").display());
    Ok(())
}

fn cmd_cl(common: &CommonArgs) -> Result<(), CmdError> {
    let mut rs = Resolver::new(common, "cl")?;
    let seed = rs.seed(common)?;
    let out = rs.out_dir(common, "cl");
    let data_dir = rs.data_dir(common);

    let classes_per_task = rs.usize_key("classes_per_task", 1)?;
    let binarize = rs.bool_key("binarize", false)?;
    let r = rs.f64_key("r", 0.0)?;
    let cfg = ReplayConfig {
        gen_variant: if binarize {
            VariantConfig::binarized(r)
        } else {
            VariantConfig::vae()
        },
        latent_dim: rs.usize_key("latent_dim", 32)?,
        gen_hidden: rs.usize_key("gen_hidden", 256)?,
        solver_hidden: rs.usize_key("solver_hidden", 256)?,
        replay_ratio: rs.f64_key("replay_ratio", 1.0)?,
        epochs_per_task: rs.usize_key("epochs_per_task", 3)?,
        batch_size: rs.usize_key("batch_size", 128)?,
        adam: rs.adam()?,
        seed,
    };
    let subset = rs.usize_key("subset", 0)?;
    // Images per class in the replayed-sample grids; 0 skips the grids.
    let grid_per_class = rs.usize_key("grid_per_class", 10)?;
    let manifest = rs.finish()?;

    let schedule = data::make_split_schedule(classes_per_task, seed).map_err(validation)?;
    let (train, test) = load_data(&data_dir, subset)?;
    std::fs::create_dir_all(&out).map_err(runtime)?;

    let total = schedule.num_tasks();
    println!(
        "split MNIST, {} tasks of {} classes, generator r={}",
        total,
        classes_per_task,
        cfg.gen_variant.effective_r()
    );
    let (result, state) = replay::run_generative_replay(&train, &test, &schedule, &cfg, |t| {
        println!("task {}/{} trained", t, total);
    })
    .map_err(replay_err)?;

    for (i, acc) in result.per_task.iter().enumerate() {
        println!("task {} accuracy {:.4}", i + 1, acc);
    }
    println!("average accuracy {:.4}", result.average);
    std::fs::write(out.join("cl_result.csv"), replay::format_cl_csv(&result)).map_err(runtime)?;

    if grid_per_class > 0 {
        let mut rng = Rng::derive(seed, "cl-grid");
        let report = replay::conditional_sample_report(&state, grid_per_class, &mut rng)
            .map_err(replay_err)?;
        for group in &report.groups {
            if group.images.rows() == 0 {
                continue;
            }
            let side = square_side(group.images.cols())?;
            let grid = pgm::tile(&group.images, side, side, group.images.rows().min(10));
            grid.write(&out.join(format!("replay_class_{}.pgm", group.class)))
                .map_err(runtime)?;
        }
    }
    write_manifest(&out, manifest)?;
    Ok(())
}

fn cmd_verify(common: &CommonArgs) -> Result<(), CmdError> {
    let mut rs = Resolver::new(common, "verify")?;
    let _ = rs.seed(common)?;
    let out = rs.out_dir(common, "verify");
    let manifest = rs.finish()?;

    let outcome = analysis::verify_derivation();
    print!("{}", outcome.report);
    std::fs::create_dir_all(&out).map_err(runtime)?;
    std::fs::write(out.join("verify.txt"), &outcome.report).map_err(runtime)?;
    write_manifest(&out, manifest)?;
    if outcome.passed {
        Ok(())
    } else {
        Err(CmdError::Runtime("verification failed".into()))
    }
}
