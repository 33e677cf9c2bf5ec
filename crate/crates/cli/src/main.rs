use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use textdiff::data::{self, Dataset, SegmentationSample};
use textdiff::diffusion::{self, BlockRegistry, NoisePredictor, VarianceSchedule};
use textdiff::pipeline::{
    self, evaluate, run_variant, train_segmenter, Components, ExperimentConfig, RunDir, SegModel,
    SweepTable, Variant,
};
use textdiff::probe::{BlockSelection, FeatureCache};
use textdiff::report::{self, ablation_markdown};
use textdiff::text::HashedGaussianEncoder;
use textdiff::Error;

/// Text-guided segmentation on frozen diffusion features.
#[derive(Parser, Debug)]
#[command(name = "textdiff", version)]
struct Cli {
    #[command(flatten)]
    shared: Shared,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Shared {
    /// TOML config; flags override it, it overrides built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output root (for gen-data, the dataset folder).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Seeds every stochastic component.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Dataset folder.
    #[arg(long, global = true, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    #[arg(long, value_parser = parse_lr, allow_negative_numbers = true)]
    lr: Option<f64>,
    #[arg(long, value_parser = parse_positive)]
    epochs: Option<usize>,
    #[arg(long, value_parser = parse_positive)]
    batch_size: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct BackboneFlag {
    /// Backbone checkpoint; defaults to <out>/backbone/checkpoints/backbone.ckpt.
    #[arg(long, value_name = "PATH")]
    backbone: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes a synthetic text-disambiguation dataset folder.
    GenData {
        #[arg(long, value_parser = parse_positive)]
        n: Option<usize>,
    },
    /// Trains the noise predictor on every image in --data.
    TrainBackbone {
        #[command(flatten)]
        train: TrainFlags,
    },
    /// Trains the attention and pixel classifier for one variant.
    TrainSeg {
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long, value_parser = parse_csv, value_name = "CSV")]
        blocks: Option<Csv>,
        #[arg(long, value_parser = parse_csv, value_name = "CSV")]
        steps: Option<Csv>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        backbone: BackboneFlag,
    },
    /// Scores a trained run on the test split and writes metrics.csv.
    Eval {
        #[arg(long)]
        variant: Option<Variant>,
        /// Run directory; defaults to <out>/seg-<variant>.
        #[arg(long, value_name = "DIR")]
        run: Option<PathBuf>,
        #[command(flatten)]
        backbone: BackboneFlag,
    },
    /// Trains and evaluates several variants and tabulates them.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "full,zeta1,zeta2")]
        variants: Vec<Variant>,
        #[arg(long, value_parser = parse_csv, value_name = "CSV")]
        blocks: Option<Csv>,
        #[arg(long, value_parser = parse_csv, value_name = "CSV")]
        steps: Option<Csv>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        backbone: BackboneFlag,
    },
    /// Trains one model per (block set, step) pair.
    Sweep {
        /// Semicolon-separated block sets, e.g. "2,4;4,6".
        #[arg(long, value_parser = parse_sets, value_name = "SETS")]
        blocks: Option<Sets>,
        /// Each value becomes a single-step option.
        #[arg(long, value_parser = parse_csv, value_name = "CSV")]
        steps: Option<Csv>,
        #[arg(long, default_value_t = 1, value_parser = parse_positive)]
        jobs: usize,
        #[arg(long)]
        variant: Option<Variant>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        backbone: BackboneFlag,
    },
    /// Aggregates run directories into report.md and plots.
    Report {
        /// Run directories; defaults to every run under --out.
        runs: Vec<PathBuf>,
    },
}

fn parse_positive(s: &str) -> Result<usize, String> {
    match s.trim().parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("expected a positive integer, got '{s}'")),
    }
}

fn parse_lr(s: &str) -> Result<f64, String> {
    match s.trim().parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got '{s}'")),
    }
}

/// Comma-separated, strictly increasing positive integers.
#[derive(Debug, Clone)]
struct Csv(Vec<usize>);

/// Semicolon-separated [`Csv`] lists.
#[derive(Debug, Clone)]
struct Sets(Vec<Vec<usize>>);

fn parse_csv(s: &str) -> Result<Csv, String> {
    let v = s
        .split(',')
        .map(parse_positive)
        .collect::<Result<Vec<_>, _>>()?;
    if v.windows(2).any(|w| w[0] >= w[1]) {
        return Err(format!("values must be strictly increasing, got '{s}'"));
    }
    Ok(Csv(v))
}

fn parse_sets(s: &str) -> Result<Sets, String> {
    s.split(';').map(|p| parse_csv(p).map(|c| c.0)).collect::<Result<_, _>>().map(Sets)
}

enum Failure {
    Validation(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(inner) => match validation_hint(inner) {
                Some(flag) => Failure::Validation(format!("{flag}: {e:#}")),
                None => Failure::Runtime(e),
            },
            None => Failure::Runtime(e),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        anyhow::Error::new(e).into()
    }
}

/// Flag (or config key) responsible for a validation error.
fn validation_hint(e: &Error) -> Option<&'static str> {
    Some(match e {
        Error::StepOutOfRange { .. } => "--steps",
        Error::UnknownBlockIndex(..) | Error::EncoderBlockRequested(..) => "--blocks",
        Error::SelectionMismatch { .. } => "--blocks/--steps",
        Error::TrainNTooLarge { .. } => "--data (data.train_n)",
        Error::UnknownVariant(_) => "--variant",
        Error::InvalidConfig(_) => "configuration",
        _ => return None,
    })
}

type Outcome<T> = Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let args = match Cli::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Defaults, then the config file, then flags.
fn base_config(shared: &Shared) -> Outcome<ExperimentConfig> {
    let mut cfg = match &shared.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Validation(format!("--config {}: {e}", p.display())))?;
            ExperimentConfig::from_toml(&text)
                .map_err(|e| Failure::Validation(format!("--config {}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = shared.seed {
        cfg.set_seed(seed);
    }
    if let Some(d) = &shared.data {
        cfg.data.root = d.clone();
    }
    Ok(cfg)
}

fn apply_train(cfg: &mut ExperimentConfig, t: &TrainFlags) {
    if let Some(v) = t.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = t.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = t.batch_size {
        cfg.train.batch_size = v;
    }
}

fn validate(cfg: &ExperimentConfig) -> Outcome<()> {
    cfg.validate()
        .map_err(|e| Failure::Validation(format!("invalid configuration: {e}")))?;
    let sel = cfg
        .selection()
        .map_err(|e| Failure::Validation(format!("--blocks/--steps: {e}")))?;
    check_selection(&sel, cfg)
}

fn check_selection(sel: &BlockSelection, cfg: &ExperimentConfig) -> Outcome<()> {
    sel.validate(&BlockRegistry::for_config(&cfg.diffusion), cfg.diffusion.steps)
        .map_err(Failure::from)
}

fn out_root(shared: &Shared) -> PathBuf {
    shared.out.clone().unwrap_or_else(|| PathBuf::from("runs"))
}

fn backbone_path(out: &Path, flag: &BackboneFlag) -> PathBuf {
    flag.backbone
        .clone()
        .unwrap_or_else(|| out.join("backbone").join("checkpoints").join("backbone.ckpt"))
}

fn load_data(cfg: &ExperimentConfig) -> anyhow::Result<Dataset> {
    let root = &cfg.data.root;
    data::load_folder(
        root,
        (cfg.diffusion.height(), cfg.diffusion.width()),
        cfg.diffusion.channels,
    )
    .with_context(|| format!("loading dataset from {}", root.display()))
}

fn split_data(
    ds: &Dataset,
    cfg: &ExperimentConfig,
) -> Outcome<(Vec<SegmentationSample>, Vec<SegmentationSample>)> {
    let (train, test) = data::split(&ds.manifest, cfg.data.train_n, cfg.data.split_seed)?;
    Ok((ds.select(&train)?, ds.select(&test)?))
}

struct Frozen {
    backbone: NoisePredictor,
    sched: VarianceSchedule,
    encoder: HashedGaussianEncoder,
    cache: FeatureCache,
}

impl Frozen {
    fn load(path: &Path, cfg: &ExperimentConfig, out: &Path) -> Outcome<Self> {
        let (backbone, sched) = diffusion::load_backbone(path)
            .with_context(|| format!("loading backbone {}", path.display()))?;
        Ok(Self {
            backbone,
            sched,
            encoder: HashedGaussianEncoder::new(cfg.text.d_text, cfg.text.seed)?,
            cache: FeatureCache::from_env(out.join("cache")),
        })
    }

    fn components(&self) -> Components<'_> {
        Components::new(&self.backbone, &self.sched, &self.encoder).with_cache(&self.cache)
    }

    /// The selection must fit the backbone actually loaded.
    fn check(&self, sel: &BlockSelection) -> Outcome<()> {
        sel.validate(self.backbone.registry(), self.sched.len())
            .map_err(Failure::from)
    }
}

fn run(args: Cli) -> Outcome<()> {
    let shared = args.shared;
    let out = out_root(&shared);
    match args.cmd {
        Command::GenData { n } => {
            let mut cfg = base_config(&shared)?;
            if let Some(n) = n {
                cfg.data.n = n;
            }
            let root = shared.out.clone().unwrap_or_else(|| cfg.data.root.clone());
            cfg.data.root = root.clone();
            cfg.diffusion
                .validate()
                .map_err(|e| Failure::Validation(format!("invalid configuration: {e}")))?;
            let ds = data::generate_synthetic(
                cfg.data.n,
                (cfg.diffusion.height(), cfg.diffusion.width()),
                cfg.diffusion.seed,
            )?;
            data::save_folder(&ds, &root)?;
            std::fs::write(root.join("config.snapshot"), cfg.to_toml()?)
                .context("writing config snapshot")?;
            println!("wrote {} samples to {}", ds.samples.len(), root.display());
        }
        Command::TrainBackbone { train } => {
            let mut cfg = base_config(&shared)?;
            if let Some(v) = train.lr {
                cfg.diffusion.lr = v;
            }
            if let Some(v) = train.epochs {
                cfg.diffusion.epochs = v;
            }
            if let Some(v) = train.batch_size {
                cfg.diffusion.batch_size = v;
            }
            validate(&cfg)?;
            let ds = load_data(&cfg)?;
            let run = RunDir::create(&out, "backbone")?;
            run.write_snapshot(&cfg)?;
            let predictor = diffusion::train_backbone(&ds.images(), &cfg.diffusion)?;
            let sched = diffusion::build_linear_schedule(&cfg.diffusion)?;
            let path = run.checkpoints().join("backbone.ckpt");
            diffusion::save_backbone(&path, &predictor, &sched)?;
            run.write_losses(&predictor.loss_trace)?;
            let trace = &predictor.loss_trace;
            println!(
                "backbone loss {:.5} -> {:.5}; saved {}",
                trace[0],
                trace[trace.len() - 1],
                path.display()
            );
        }
        Command::TrainSeg {
            variant,
            blocks,
            steps,
            train,
            backbone,
        } => {
            let mut cfg = base_config(&shared)?;
            set_selection(&mut cfg, variant, blocks, steps, &train);
            validate(&cfg)?;
            let tc = cfg.train_config()?;
            let frozen = Frozen::load(&backbone_path(&out, &backbone), &cfg, &out)?;
            frozen.check(&tc.selection)?;
            let ds = load_data(&cfg)?;
            let (train_set, _) = split_data(&ds, &cfg)?;
            let run = RunDir::create(&out, &format!("seg-{}", tc.variant))?;
            run.write_snapshot(&cfg)?;
            let (model, rec) = train_segmenter(&train_set, &tc, &frozen.components())?;
            model.save(&run.checkpoints())?;
            run.write_losses(&rec.loss_trace)?;
            run.write_train_record(&rec)?;
            println!(
                "{} trained; best epoch {} of {}; saved {}",
                tc.variant,
                rec.best_epoch + 1,
                rec.loss_trace.len(),
                run.path().display()
            );
        }
        Command::Eval {
            variant,
            run,
            backbone,
        } => {
            let base = base_config(&shared)?;
            let dir = run.unwrap_or_else(|| {
                out.join(format!("seg-{}", variant.unwrap_or(base.train.variant)))
            });
            let snapshot = dir.join("config.snapshot");
            let mut cfg = if snapshot.exists() {
                ExperimentConfig::load(&snapshot)?
            } else {
                base.clone()
            };
            if shared.data.is_some() {
                cfg.data.root = base.data.root.clone();
            }
            validate(&cfg)?;
            let model = SegModel::load(&dir.join("checkpoints"))
                .with_context(|| format!("loading model from {}", dir.display()))?;
            if let Some(v) = variant {
                if v != model.variant {
                    return Err(Failure::Validation(format!(
                        "--variant {v} does not match the {} model in {}",
                        model.variant,
                        dir.display()
                    )));
                }
            }
            let frozen = Frozen::load(&backbone_path(&out, &backbone), &cfg, &out)?;
            frozen.check(&model.selection)?;
            let ds = load_data(&cfg)?;
            let (_, test) = split_data(&ds, &cfg)?;
            let sel = cfg.selection()?;
            let report = evaluate(&test, &model, &sel, &frozen.components())?;
            let run = RunDir::open(&dir);
            run.write_metrics(&report)?;
            println!(
                "{}: mean Dice {:.2} %, mean IoU {:.2} % over {} images",
                model.variant,
                report.mean_dice,
                report.mean_iou,
                report.rows.len()
            );
        }
        Command::Ablate {
            variants,
            blocks,
            steps,
            train,
            backbone,
        } => {
            let mut cfg = base_config(&shared)?;
            set_selection(&mut cfg, None, blocks, steps, &train);
            validate(&cfg)?;
            if variants.is_empty() {
                return Err(Failure::Validation("--variants: at least one variant".into()));
            }
            let tc = cfg.train_config()?;
            let frozen = Frozen::load(&backbone_path(&out, &backbone), &cfg, &out)?;
            frozen.check(&tc.selection)?;
            let ds = load_data(&cfg)?;
            let (train_set, test) = split_data(&ds, &cfg)?;
            let mut rows = Vec::new();
            for v in variants {
                let mut vcfg = cfg.clone();
                vcfg.train.variant = v;
                let run = RunDir::create(&out, &format!("ablate-{v}"))?;
                run.write_snapshot(&vcfg)?;
                let (model, rec) =
                    run_variant(v, &train_set, &test, &tc, &frozen.components())?;
                model.save(&run.checkpoints())?;
                run.write_losses(&rec.loss_trace)?;
                run.write_metrics(&rec.metrics)?;
                run.write_record(&rec)?;
                println!("{v}: Dice {:.2} %, IoU {:.2} %", rec.mean_dice, rec.mean_iou);
                rows.push((v, rec.mean_dice, rec.mean_iou));
            }
            let table_dir = out.join("ablate");
            std::fs::create_dir_all(&table_dir).context("creating ablate dir")?;
            let md = ablation_markdown(&rows);
            std::fs::write(table_dir.join("ablation.md"), &md).context("writing ablation.md")?;
            write_ablation_csv(&table_dir.join("ablation.csv"), &rows)?;
            std::fs::write(table_dir.join("config.snapshot"), cfg.to_toml()?)
                .context("writing config snapshot")?;
            print!("{md}");
        }
        Command::Sweep {
            blocks,
            steps,
            jobs,
            variant,
            train,
            backbone,
        } => {
            let mut cfg = base_config(&shared)?;
            set_selection(&mut cfg, variant, None, None, &train);
            let block_options = blocks.map_or_else(|| vec![cfg.selection.blocks.clone()], |b| b.0);
            let step_options: Vec<Vec<usize>> = match steps {
                Some(s) => s.0.into_iter().map(|t| vec![t]).collect(),
                None => vec![cfg.selection.steps.clone()],
            };
            validate(&cfg)?;
            for b in &block_options {
                for s in &step_options {
                    let sel = BlockSelection::new(b.clone(), s.clone())
                        .map_err(|e| Failure::Validation(format!("--blocks/--steps: {e}")))?;
                    check_selection(&sel, &cfg)?;
                }
            }
            let tc = cfg.train_config()?;
            let frozen = Frozen::load(&backbone_path(&out, &backbone), &cfg, &out)?;
            let ds = load_data(&cfg)?;
            let (train_set, test) = split_data(&ds, &cfg)?;
            let run = RunDir::create(&out, "sweep")?;
            run.write_snapshot(&cfg)?;
            let table = pipeline::sweep(
                &block_options,
                &step_options,
                &train_set,
                &test,
                &tc,
                &frozen.components(),
                jobs,
            )?;
            table.write_csv(&run.sweep_path())?;
            table.write_marginals(run.path())?;
            let cells = SweepTable::read_csv(&run.sweep_path())?;
            report::Report {
                runs: Vec::new(),
                sweeps: vec![("sweep".into(), cells)],
            }
            .write(run.path())?;
            println!(
                "{} cells written to {}",
                table.cells.len(),
                run.sweep_path().display()
            );
        }
        Command::Report { runs } => {
            let dirs = if runs.is_empty() {
                discover_runs(&out)?
            } else {
                runs
            };
            let rep = report::collect(&dirs)?;
            let files = rep.write(&out.join("report"))?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn set_selection(
    cfg: &mut ExperimentConfig,
    variant: Option<Variant>,
    blocks: Option<Csv>,
    steps: Option<Csv>,
    train: &TrainFlags,
) {
    if let Some(v) = variant {
        cfg.train.variant = v;
    }
    if let Some(b) = blocks {
        cfg.selection.blocks = b.0;
    }
    if let Some(s) = steps {
        cfg.selection.steps = s.0;
    }
    apply_train(cfg, train);
}

fn write_ablation_csv(path: &Path, rows: &[(Variant, f64, f64)]) -> anyhow::Result<()> {
    let mut text = String::from("variant,text,m_cro,dice_pct,iou_pct\n");
    for (v, d, i) in rows {
        text.push_str(&format!(
            "{v},{},{},{d:.2},{i:.2}\n",
            v.uses_text(),
            v.uses_attention()
        ));
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Subdirectories of `out` holding metrics.csv or sweep.csv, sorted by name.
fn discover_runs(out: &Path) -> Outcome<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    let entries = std::fs::read_dir(out).with_context(|| format!("reading {}", out.display()))?;
    for entry in entries {
        let p = entry.context("listing runs")?.path();
        if p.join("metrics.csv").exists() || p.join("sweep.csv").exists() {
            dirs.push(p);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Failure::Runtime(Error::MissingMetrics(out.to_path_buf()).into()));
    }
    Ok(dirs)
}
