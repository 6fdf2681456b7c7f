//! `qagan`: data preparation, pretraining, adversarial training, evaluation
//! and sampling over one output root.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use qagan_core::config::Config;
use qagan_core::data::manifest::META_FILE;
use qagan_core::data::{generate_synthetic_dataset, Dataset, Split};
use qagan_core::data::ingest::{prepare_real_dataset, RealSources, SplitSources};
use qagan_core::evaluation::{evaluate_checkpoint, generate_images, write_sample_grid, EvalReport};
use qagan_core::objectives::Variant;
use qagan_core::trainer::{
    load_generator, pretrain_damsm, pretrain_vqa, read_checkpoint_series, select_best_checkpoint, train, DamsmModels,
    RunPaths, CHECKPOINTS_FILE,
};
use qagan_core::{checkpoint::Checkpoint, Error};

/// Environment variable naming the output root (default `./qagan-out`).
const OUT_ENV: &str = "QAGAN_OUT";
const LOCK_FILE: &str = ".qagan.lock";

#[derive(Parser, Debug)]
#[command(name = "qagan", version, about = "VQA-guided text-to-image GAN pipeline")]
struct Cli {
    /// TOML config laid over the preset it names (desk by default).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// The single seed behind data, batching, noise and evaluation sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root; overrides $QAGAN_OUT.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ingest COCO-style captions and VQA-style questions/annotations.
    PrepareData(PrepareArgs),
    /// Render the synthetic shapes dataset.
    SynthData {
        /// Number of images (synth.n_images).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Pretrain the text and image encoders of the matching model.
    PretrainDamsm,
    /// Pretrain the VQA critic (and its class head).
    PretrainVqa,
    /// Adversarial training of one variant.
    Train {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the run's latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint and write its report.
    Evaluate {
        /// `best`, `latest` or a checkpoint path.
        #[arg(long, default_value = "best")]
        checkpoint: String,
        #[arg(long)]
        n_samples: Option<usize>,
        /// Report path (default: <run dir>/eval.json).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Write an 8x8 grid of generated test images with a caption sidecar.
    Sample {
        #[arg(long, default_value = "best")]
        checkpoint: String,
        /// Grid path (default: <run dir>/samples.png).
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    captions: PathBuf,
    #[arg(long)]
    questions: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, requires_all = ["test_questions", "test_annotations"])]
    test_captions: Option<PathBuf>,
    #[arg(long)]
    test_questions: Option<PathBuf>,
    #[arg(long)]
    test_annotations: Option<PathBuf>,
    /// Directory holding the images referenced by the annotations.
    #[arg(long)]
    images: PathBuf,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn key_help() -> String {
    let mut s = String::from("Config keys (desk preset defaults; set with --set KEY=VALUE or a --config file):\n");
    match Config::default().keys() {
        Ok(keys) => {
            for (k, v) in keys {
                s.push_str(&format!("  {k} = {v}\n"));
            }
        }
        Err(e) => s.push_str(&format!("  <unavailable: {e}>\n")),
    }
    s.push_str(&format!("\nEnvironment:\n  {OUT_ENV}  output root (default ./qagan-out)\n"));
    s.push_str("\nExit codes: 0 success, 1 invalid input or missing prerequisite, 2 runtime failure\n");
    s
}

fn resolve_config(cli: &Cli) -> Outcome<Config> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &cli.overrides {
        cfg.set(o)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match &cli.command {
        Some(Command::SynthData { n: Some(n) }) => cfg.synth.n_images = *n,
        Some(Command::Train { variant, epochs, .. }) => {
            if let Some(v) = variant {
                cfg.train.variant = *v;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
        }
        Some(Command::Evaluate { n_samples: Some(n), .. }) => cfg.eval.n_samples = *n,
        _ => {}
    }
    cfg.sync_dims();
    cfg.validate()?;
    Ok(cfg)
}

/// Exclusive claim on an output root, released on drop. A lock left by a
/// process that no longer exists is taken over.
struct DirLock(PathBuf);

impl DirLock {
    fn acquire(root: &Path) -> Outcome<Self> {
        std::fs::create_dir_all(root).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", root.display())))?;
        let path = root.join(LOCK_FILE);
        for _ in 0..2 {
            match OpenOptions::new().write(true).create_new(true).open(&path) {
                Ok(mut f) => {
                    let _ = writeln!(f, "{}", std::process::id());
                    return Ok(DirLock(path));
                }
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                    let holder = std::fs::read_to_string(&path).unwrap_or_default();
                    let alive = holder
                        .trim()
                        .parse::<u32>()
                        .map(|pid| Path::new(&format!("/proc/{pid}")).exists())
                        .unwrap_or(false);
                    if alive {
                        return Err(Failure::Runtime(format!(
                            "{} is in use by process {} (lock {})",
                            root.display(),
                            holder.trim(),
                            path.display()
                        )));
                    }
                    log::warn!("removing stale lock {}", path.display());
                    let _ = std::fs::remove_file(&path);
                }
                Err(e) => return Err(Failure::Runtime(format!("cannot lock {}: {e}", path.display()))),
            }
        }
        Err(Failure::Runtime(format!("cannot lock {}", path.display())))
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

fn print_json<T: serde::Serialize>(v: &T) -> Outcome<()> {
    let s = serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{s}");
    Ok(())
}

fn load_dataset(cfg: &Config, paths: &RunPaths) -> Outcome<Dataset> {
    if !paths.data.join(META_FILE).exists() {
        return Err(Failure::Validation(format!(
            "no dataset at {}; run `synth-data` or `prepare-data` first",
            paths.data.display()
        )));
    }
    Ok(Dataset::load(&paths.data, cfg.generator.final_resolution())?)
}

fn require(path: &Path, what: &'static str, command: &'static str) -> Outcome<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingCheckpoint {
            what,
            path: path.to_path_buf(),
            command,
        }
        .into())
    }
}

/// Resolves `best`, `latest` or a path. `best` scores any checkpoint of the
/// run that has not been evaluated yet.
fn pick_checkpoint(cfg: &Config, paths: &RunPaths, ds: &Dataset, which: &str) -> Outcome<PathBuf> {
    if which != "best" && which != "latest" {
        let p = PathBuf::from(which);
        return if p.exists() {
            Ok(p)
        } else {
            Err(Failure::Validation(format!("checkpoint {} does not exist", p.display())))
        };
    }
    let run_dir = paths.run_dir(cfg);
    let mut series = read_checkpoint_series(&run_dir)?;
    if series.is_empty() {
        return Err(Failure::Validation(format!(
            "no checkpoints listed in {}; run `train` first",
            run_dir.join(CHECKPOINTS_FILE).display()
        )));
    }
    if which == "latest" {
        return Ok(series.iter().max_by_key(|c| c.epoch).map(|c| c.path.clone()).unwrap_or_default());
    }
    require(&paths.vqa, "VQA", "pretrain-vqa")?;
    for c in series.iter_mut().filter(|c| c.is_mean.is_none()) {
        let r = evaluate_checkpoint(cfg, paths, ds, &c.path, cfg.eval.n_samples, cfg.seed)?;
        log::info!("epoch {}: IS {:.4}", c.epoch, r.is_mean);
        c.is_mean = Some(r.is_mean);
    }
    Ok(select_best_checkpoint(&series)?.path.clone())
}

fn execute(cli: &Cli, cfg: &Config, root: &Path) -> Outcome<()> {
    let paths = RunPaths::new(root, cfg);
    let Some(command) = &cli.command else {
        return Err(Failure::Validation("no command given; see --help".into()));
    };
    let _lock = DirLock::acquire(root)?;
    match command {
        Command::PrepareData(a) => {
            let test = match (&a.test_captions, &a.test_questions, &a.test_annotations) {
                (Some(c), Some(q), Some(n)) => Some(SplitSources {
                    captions: c.clone(),
                    questions: q.clone(),
                    annotations: n.clone(),
                }),
                _ => None,
            };
            let src = RealSources {
                train: SplitSources {
                    captions: a.captions.clone(),
                    questions: a.questions.clone(),
                    annotations: a.annotations.clone(),
                },
                test,
                image_dir: a.images.clone(),
                min_frequency: cfg.data.min_frequency,
            };
            print_json(&prepare_real_dataset(&src, &paths.data)?)
        }
        Command::SynthData { .. } => {
            let summary = generate_synthetic_dataset(&cfg.synth.scene, cfg.synth.n_images, cfg.seed, &paths.data)?;
            print_json(&summary)
        }
        Command::PretrainDamsm => {
            let ds = load_dataset(cfg, &paths)?;
            print_json(&pretrain_damsm(cfg, &ds, &paths.damsm)?)
        }
        Command::PretrainVqa => {
            let ds = load_dataset(cfg, &paths)?;
            print_json(&pretrain_vqa(cfg, &ds, &paths.vqa)?)
        }
        Command::Train { resume, .. } => {
            require(&paths.damsm, "DAMSM", "pretrain-damsm")?;
            if cfg.train.variant.spec().vqa_loss_enabled || cfg.train.eval_every > 0 {
                require(&paths.vqa, "VQA", "pretrain-vqa")?;
            }
            let ds = load_dataset(cfg, &paths)?;
            let outcome = train(cfg, &ds, &paths, *resume)?;
            print_json(&serde_json::json!({
                "run_dir": outcome.run_dir,
                "steps": outcome.steps,
                "checkpoints": outcome.checkpoints.len(),
                "final_digests": outcome.final_digests,
                "d_accuracy_after_warmup": outcome.d_accuracy_after_warmup,
            }))
        }
        Command::Evaluate { checkpoint, report, .. } => {
            require(&paths.damsm, "DAMSM", "pretrain-damsm")?;
            require(&paths.vqa, "VQA", "pretrain-vqa")?;
            let ds = load_dataset(cfg, &paths)?;
            let ckpt = pick_checkpoint(cfg, &paths, &ds, checkpoint)?;
            let r: EvalReport = evaluate_checkpoint(cfg, &paths, &ds, &ckpt, cfg.eval.n_samples, cfg.seed)?;
            let out = report.clone().unwrap_or_else(|| paths.run_dir(cfg).join("eval.json"));
            r.write(&out)?;
            log::info!("evaluated {} -> {}", ckpt.display(), out.display());
            print_json(&r)
        }
        Command::Sample { checkpoint, output } => {
            require(&paths.damsm, "DAMSM", "pretrain-damsm")?;
            let ds = load_dataset(cfg, &paths)?;
            let ckpt_path = pick_checkpoint(cfg, &paths, &ds, checkpoint)?;
            let ckpt = Checkpoint::load(&ckpt_path)?;
            ckpt.check_vocab(&ds.meta.vocab_hash)?;
            let generator = load_generator(&ckpt)?;
            let damsm = DamsmModels::load(&paths.damsm, &ds.meta.vocab_hash)?;
            let picked: Vec<usize> = ds.caption_indices(Split::Test).into_iter().take(64).collect();
            if picked.is_empty() {
                return Err(Failure::Validation("the dataset has no test captions".into()));
            }
            let seqs: Vec<&[u32]> = picked.iter().map(|&i| ds.captions[i].token_ids.as_slice()).collect();
            let images = generate_images(&generator, &damsm.text, &seqs, cfg.eval.batch_size, cfg.seed, "sample-noise")?;
            let images = qagan_core::Tensor::cat(&images, 0).map_err(Error::from)?;
            let captions: Vec<String> = picked.iter().map(|&i| ds.captions[i].text.clone()).collect();
            let out = output.clone().unwrap_or_else(|| paths.run_dir(cfg).join("samples.png"));
            let side = write_sample_grid(&images, &captions, 8, &out)?;
            println!("{}\n{}", out.display(), side.display());
            Ok(())
        }
    }
}

fn run(argv: Vec<OsString>) -> u8 {
    let cmd = Cli::command().after_long_help(key_help());
    let matches = match cmd.try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind::*;
            let code = match e.kind() {
                DisplayHelp | DisplayVersion | DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    let result = resolve_config(&cli).and_then(|cfg| {
        if cli.print_config {
            let s = cfg.to_toml()?;
            print!("{s}");
            return Ok(());
        }
        let root = cli
            .out
            .clone()
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("qagan-out"));
        execute(&cli, &cfg, &root)
    });
    match result {
        Ok(()) => 0,
        Err(Failure::Validation(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    ExitCode::from(run(std::env::args_os().collect()))
}
