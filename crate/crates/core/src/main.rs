use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ruig::app::{self, AppError, RunConfig};
use ruig::codec::{BBox, Variant};
use ruig::geometry::Prediction;
use ruig::objectives::LossWeights;
use ruig::synthgen::{GenSpec, Regime};

#[derive(Parser)]
#[command(
    name = "ruig",
    version,
    about = "Pixel-to-sequence UI instruction grounding with IoU policy gradients"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags that override values from `--config`.
#[derive(clap::Args, Clone, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    /// Monte Carlo samples per item.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    variant: Option<Variant>,
    /// Loss weights as `ce,pg`.
    #[arg(long)]
    weights: Option<LossWeights>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.train.seed = s;
            cfg.seeds = vec![s];
        }
        if let Some(k) = self.k {
            cfg.train.k = k;
        }
        if let Some(v) = self.variant {
            cfg.train.variant = v;
        }
        if let Some(w) = self.weights {
            cfg.train.weights = w;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test datasets.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Generator spec (key=value); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        train: usize,
        #[arg(long, default_value_t = 500)]
        test: usize,
        #[arg(long)]
        regime: Option<Regime>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `out/checkpoint.bin` when present.
        #[arg(long)]
        resume: bool,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Greedy-decode a test split and write a report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Ground one instruction on one image.
    Ground {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        instruction: String,
        /// Ground-truth box `x_min,y_min,x_max,y_max`, drawn in green.
        #[arg(long)]
        gt: Option<String>,
        /// Overlay PPM path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate the ablation arms.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds (overrides the config).
        #[arg(long)]
        seeds: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig, AppError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_box(s: &str) -> Result<BBox, AppError> {
    let v: Vec<u32> = s
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| AppError::Usage(format!("bad box `{s}`")))?;
    let arr: [u32; 4] = v
        .try_into()
        .map_err(|_| AppError::Usage(format!("box `{s}` needs 4 values")))?;
    Ok(BBox::from_array(arr))
}

fn run(cli: Cli) -> Result<(), AppError> {
    match cli.command {
        Command::GenData {
            out,
            config,
            train,
            test,
            regime,
            seed,
        } => {
            let mut spec = match config {
                Some(p) => {
                    let text = std::fs::read_to_string(&p)
                        .map_err(|e| AppError::Usage(format!("{}: {e}", p.display())))?;
                    GenSpec::from_text(&text).map_err(|e| AppError::Usage(e.to_string()))?
                }
                None => GenSpec::default(),
            };
            if let Some(r) = regime {
                spec.regime = r;
            }
            app::gen_data(&spec, &out, train, test, seed)?;
            eprintln!(
                "wrote {train} train / {test} test samples to {}",
                out.display()
            );
        }
        Command::Train {
            config,
            dataset,
            out,
            resume,
            overrides,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            overrides.apply(&mut cfg);
            let log = app::train_run(&cfg, &dataset, &out, resume, false)?;
            if let Some(last) = log.records.last() {
                eprintln!(
                    "trained {} steps; final loss {:.4}",
                    last.step + 1,
                    last.total
                );
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
            seed,
        } => {
            let r = app::eval_run(&checkpoint, &dataset, &out, seed)?;
            let s = &r.summary;
            eprintln!(
                "n {}  acc {:.4}  miou {:.4}  malformed {:.4}",
                s.n, s.acc, s.miou, s.malformed_fraction
            );
        }
        Command::Ground {
            checkpoint,
            image,
            instruction,
            gt,
            out,
            seed: _,
        } => {
            let model = app::load_model(&checkpoint)?;
            let gt = gt.as_deref().map(parse_box).transpose()?;
            let g = app::ground(&model, &image, &instruction, gt, out.as_deref())?;
            println!(
                "{}",
                serde_json::to_string(&g.prediction).expect("prediction serializes")
            );
            if g.prediction == Prediction::Malformed {
                eprintln!("decoded sequence is malformed: {}", g.tokens);
            }
        }
        Command::Ablate {
            config,
            dataset,
            out,
            seeds,
            overrides,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            overrides.apply(&mut cfg);
            if let Some(s) = seeds {
                cfg.seeds = s
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<Result<_, _>>()
                    .map_err(|_| AppError::Usage(format!("bad seed list `{s}`")))?;
            }
            let rows = app::ablate(&cfg, &dataset, &out, false)?;
            for r in rows {
                println!("{}", serde_json::to_string(&r).expect("row serializes"));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Ok(n) = std::env::var("RUIG_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build_global();
            }
            _ => {
                eprintln!("error: RUIG_THREADS must be a positive integer");
                return ExitCode::from(1);
            }
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
