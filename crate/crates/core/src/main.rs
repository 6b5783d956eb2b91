use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mdir::category::Category;
use mdir::config::RunConfig;
use mdir::gradcheck::{run_suite, GradcheckConfig};
use mdir::synth::dataset::gen_clean;
use mdir::synth::{synth_dataset, Manifest, Split};
use mdir::train::{
    evaluate, evaluate_with, kernel_variants, load_classifier, load_model, load_split, run_ablation, standard_variants,
    train_classifier, train_restoration, write_log_csv, Checkpoint, RunFiles, Trainer,
};
use mdir::{Error, Image, Result};

/// Multiple-in-one image restoration: data synthesis, training, evaluation
/// and inference.
#[derive(Parser)]
#[command(name = "mdir", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write procedural clean scenes to seed a dataset.
    GenClean {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 60)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build the seven-category degraded dataset and its manifest.
    Synth {
        #[arg(long)]
        clean_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        per_category: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the degradation classifier.
    TrainClassifier {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Train the restoration network with the classifier frozen.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Classifier checkpoint (required when condition embedding is on).
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Continue from a restoration checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train on these categories only (e.g. `rain,haze_noise`).
        #[arg(long, value_delimiter = ',')]
        categories: Vec<Category>,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Score the clean images against themselves instead of a model.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Restore one image (sides divisible by 4).
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train and score network variants over several seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Sweep these dynamic-kernel sizes instead of the module variants.
        #[arg(long, value_delimiter = ',')]
        kernels: Vec<usize>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Dataset directory (or manifest file).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    crop: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    res_blocks: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    no_ldo: bool,
    #[arg(long)]
    no_cfe: bool,
    #[arg(long)]
    eval_every: Option<u64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = RunConfig::load_or_default(self.config.as_deref())?;
        let t = &mut c.train;
        set(&mut t.seed, self.seed);
        set(&mut t.batch_size, self.batch_size);
        set(&mut t.epochs, self.epochs);
        set(&mut t.lr0, self.lr);
        set(&mut t.crop, self.crop);
        set(&mut t.eval_every, self.eval_every);
        if self.steps.is_some() {
            t.max_steps = self.steps;
        }
        let n = &mut c.net;
        set(&mut n.base_channels, self.base_channels);
        set(&mut n.res_blocks, self.res_blocks);
        set(&mut n.ldo_kernel_size, self.kernel_size);
        n.use_ldo &= !self.no_ldo;
        n.use_cfe &= !self.no_cfe;
        c.validate()?;
        c.write_resolved(&self.out_dir)?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_manifest(path: &Path) -> Result<Manifest> {
    if !path.exists() {
        return Err(Error::Usage(format!("dataset {} does not exist", path.display())));
    }
    Manifest::load(path)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Checkpoint::load(path)
}

fn classifier_store(path: Option<&Path>, needed: bool) -> Result<Option<mdir::ParamStore<f32>>> {
    match path {
        Some(p) => Ok(Some(load_classifier(&load_checkpoint(p)?)?.1)),
        None if needed => Err(Error::Usage(
            "condition embedding is on; pass --classifier or --no-cfe".into(),
        )),
        None => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenClean {
            out_dir,
            count,
            size,
            seed,
        } => {
            let n = gen_clean(&out_dir, count, size, seed)?;
            println!("wrote {n} clean scenes to {}", out_dir.display());
        }
        Command::Synth {
            clean_dir,
            out_dir,
            per_category,
            size,
            seed,
            config,
        } => {
            let mut c = RunConfig::load_or_default(config.as_deref())?.synth;
            set(&mut c.per_category, per_category);
            set(&mut c.size, size);
            set(&mut c.seed, seed);
            let s = synth_dataset(&clean_dir, &out_dir, &c)?;
            for (cat, n) in &s.counts {
                println!("{:<16} {n}", cat.dir_name());
            }
            let images: usize = s.counts.values().sum();
            println!("{images} files reported");
            println!("{} files written, {} files changed", s.written, s.changed);
        }
        Command::TrainClassifier { run } => {
            let c = run.resolve()?;
            let m = load_manifest(&run.data)?;
            let train = load_split(&m, Split::Train)?;
            let test = load_split(&m, Split::Test)?;
            let out = train_classifier(&train, &test, &c.train)?;
            out.checkpoint(&c.train)?.save(&run.out_dir.join("classifier.ckpt"))?;
            write_log_csv(&run.out_dir.join("train_log.csv"), &out.log)?;
            let report = serde_json::json!({
                "epoch_losses": out.epoch_losses,
                "f1": {"rain": out.f1[0], "snow": out.f1[1], "haze": out.f1[2], "noise": out.f1[3]},
                "seconds": out.seconds,
            });
            write_json(&run.out_dir.join("report.json"), &report)?;
            println!("per-label F1 rain {:.3} snow {:.3} haze {:.3} noise {:.3}", out.f1[0], out.f1[1], out.f1[2], out.f1[3]);
        }
        Command::Train {
            run,
            classifier,
            resume,
            categories,
        } => {
            let c = run.resolve()?;
            let mut m = load_manifest(&run.data)?;
            if !categories.is_empty() {
                m = m.restrict(&categories);
            }
            let train = load_split(&m, Split::Train)?;
            let test = load_split(&m, Split::Test)?;
            let trainer = match resume {
                Some(p) => Trainer::from_checkpoint(&load_checkpoint(&p)?)?,
                None => {
                    let cls = classifier_store(classifier.as_deref(), c.net.use_cfe)?;
                    Trainer::new(c.net, c.train, c.loss, train.len(), cls.as_ref())?
                }
            };
            let files = RunFiles {
                dir: run.out_dir.clone(),
            };
            let out = train_restoration(trainer, &train, &test, Some(&files))?;
            if let Some((step, report)) = &out.best {
                write_json(&files.report(), report)?;
                println!("best at step {step}");
                print!("{}", report.table());
            }
        }
        Command::Eval {
            data,
            checkpoint,
            oracle,
            out_dir,
        } => {
            let m = load_manifest(&data)?;
            let test = load_split(&m, Split::Test)?;
            let report = if oracle {
                evaluate_with(&test, |s| Ok(s.clean.clone()))?
            } else {
                let path = checkpoint.ok_or_else(|| Error::Usage("--checkpoint is required".into()))?;
                let (net, store) = load_model(&load_checkpoint(&path)?)?;
                evaluate(&net, &store, &test)?
            };
            write_json(&out_dir.join("report.json"), &report)?;
            print!("{}", report.table());
        }
        Command::Infer {
            checkpoint,
            input,
            output,
        } => {
            let (net, store) = load_model(&load_checkpoint(&checkpoint)?)?;
            if !input.exists() {
                return Err(Error::Usage(format!("input {} does not exist", input.display())));
            }
            let img = Image::load_png(&input)?;
            let out = net.restore(&store, &img.to_tensor())?;
            Image::from_tensor(&out, 0)?.clipped().save_png(&output)?;
            println!("wrote {}x{} image to {}", img.width, img.height, output.display());
        }
        Command::Gradcheck { cases, seed, out_dir } => {
            let cfg = GradcheckConfig {
                cases,
                seed,
                ..Default::default()
            };
            let report = run_suite(&cfg)?;
            print!("{}", report.table());
            if let Some(dir) = out_dir {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                std::fs::write(dir.join("gradcheck.txt"), report.table()).map_err(|e| Error::io(&dir, e))?;
            }
            if !report.passed {
                return Err(Error::Numeric("gradient check failed".into()));
            }
        }
        Command::Ablate {
            run,
            classifier,
            seeds,
            kernels,
        } => {
            let c = run.resolve()?;
            let m = load_manifest(&run.data)?;
            let train = load_split(&m, Split::Train)?;
            let test = load_split(&m, Split::Test)?;
            let variants = if kernels.is_empty() {
                standard_variants(c.net)
            } else {
                kernel_variants(c.net, &kernels)
            };
            let needs_cls = variants.iter().any(|v| v.net.use_cfe);
            let cls = classifier_store(classifier.as_deref(), needs_cls)?;
            let report = run_ablation(&train, &test, &variants, &seeds, &c.train, c.loss, cls.as_ref(), Some(&run.out_dir))?;
            write_json(&run.out_dir.join("ablation.json"), &report)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
