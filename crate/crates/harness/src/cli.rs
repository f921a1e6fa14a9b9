use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use vpnext::{count_cost, Model, Phase};

use crate::ablation::{bar_plot_svg, run_ablation, to_csv, worker_count};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{generate, load_corpus, write_corpus, Corpus};
use crate::error::{HarnessError, Result};
use crate::train::{evaluate, train, RunManifest};

pub const CHECKPOINT_FILE: &str = "best.vpnx";
pub const MANIFEST_FILE: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "vpnx", version, about = "Synthetic-data training and ablation for vpnext models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus (PPM/PGM plus manifest) under --out.
    GenData(Common),
    /// Train one variant; writes the best checkpoint and a run manifest.
    Train(Common),
    /// Evaluate a checkpoint on the eval split.
    Eval(EvalArgs),
    /// Train every variant × seed of the ablation matrix.
    Ablate(Common),
    /// Print the analytic cost report of a variant as JSON.
    Flops(FlopsArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; defaults apply to missing fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Variant such as `vcr-2+real-3`; for `ablate`, a comma-separated list.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Defaults to `<out>/best.vpnx`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value = "inference")]
    pub phase: String,
    /// Square input side; defaults to the data image size.
    #[arg(long)]
    pub size: Option<usize>,
}

fn resolve(c: &Common, seed_target: SeedTarget) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        match seed_target {
            SeedTarget::Data => cfg.data.seed = s,
            SeedTarget::Train => cfg.train.seed = s,
            SeedTarget::Matrix => cfg.ablation.seeds = (0..cfg.ablation.seeds.len().max(1) as u64).map(|i| s + i).collect(),
        }
    }
    if let Some(n) = c.steps {
        cfg.train.steps = n;
    }
    if let Some(v) = &c.variant {
        match seed_target {
            SeedTarget::Matrix => cfg.ablation.variants = v.split(',').map(|s| s.trim().to_string()).collect(),
            _ => cfg.variant = v.clone(),
        }
    }
    if let Some(o) = &c.out {
        cfg.out = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Copy)]
enum SeedTarget {
    Data,
    Train,
    Matrix,
}

fn corpus_for(cfg: &RunConfig) -> Result<Corpus> {
    match &cfg.data_dir {
        Some(dir) => {
            let c = load_corpus(dir)?;
            if c.synth.image_size != cfg.data.image_size || c.synth.num_classes != cfg.data.num_classes {
                return Err(HarnessError::Config(format!(
                    "corpus in {} does not match the data section (imageSize/numClasses)",
                    dir.display()
                )));
            }
            Ok(c)
        }
        None => generate(&cfg.data),
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    let out = |stdout: &mut dyn Write, s: &str| writeln!(stdout, "{s}").map_err(|e| HarnessError::io("<stdout>", e));
    match cli.command {
        Command::GenData(c) => {
            let cfg = resolve(&c, SeedTarget::Data)?;
            let corpus = generate(&cfg.data)?;
            for d in &corpus.diagnostics {
                eprintln!("regenerated: {d}");
            }
            create_out(&cfg.out)?;
            let manifest = write_corpus(&corpus, &cfg.out)?;
            out(stdout, &format!("wrote {} pairs to {}", manifest.files.len(), cfg.out.display()))?;
        }
        Command::Train(c) => {
            let cfg = resolve(&c, SeedTarget::Train)?;
            let corpus = corpus_for(&cfg)?;
            let model_cfg = cfg.model_for(&cfg.variant)?;
            create_out(&cfg.out)?;
            let log_path = cfg.out.join("train.log");
            let mut log = fs::File::create(&log_path).map_err(|e| HarnessError::io(&log_path, e))?;
            let mut io_err = None;
            let outcome = train(&model_cfg, &corpus, &cfg.train, |s| {
                let line = format!("step {} loss {} lr {} gradNorm {}", s.step, s.loss, s.lr, s.grad_norm);
                eprintln!("{line}");
                if let Err(e) = writeln!(log, "{line}") {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(HarnessError::io(&log_path, e));
            }
            let ckpt = cfg.out.join(CHECKPOINT_FILE);
            checkpoint::save(&outcome.best_params, &ckpt)?;
            let manifest = RunManifest::new(&cfg.variant, &corpus, &cfg.train, &outcome, CHECKPOINT_FILE)?;
            manifest.write(&cfg.out.join(MANIFEST_FILE))?;
            write_text(&cfg.out.join("config.json"), &to_json(&cfg))?;
            out(stdout, &format!("mIoU {} (step {}), checkpoint {}", manifest.eval.miou, manifest.best_step, ckpt.display()))?;
        }
        Command::Eval(a) => {
            let cfg = resolve(&a.common, SeedTarget::Train)?;
            let corpus = corpus_for(&cfg)?;
            let path = a.checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
            let params = checkpoint::load(&path)?;
            let model = Model::from_params(cfg.model_for(&cfg.variant)?, &params)?;
            let report = evaluate(&model, &corpus.eval, cfg.train.eval_batch_size)?;
            create_out(&cfg.out)?;
            write_text(&cfg.out.join("eval.json"), &to_json(&report))?;
            out(stdout, &to_json(&report))?;
        }
        Command::Ablate(c) => {
            let cfg = resolve(&c, SeedTarget::Matrix)?;
            let corpus = corpus_for(&cfg)?;
            create_out(&cfg.out)?;
            let report = run_ablation(&cfg, &corpus, &cfg.ablation.variants, &cfg.ablation.seeds, worker_count(), |r| {
                let m = r.miou.map_or_else(|| "failed".into(), |m| format!("{m:.4}"));
                eprintln!("{} seed {}: mIoU {m}", r.variant, r.seed);
            })?;
            write_text(&cfg.out.join("ablation.csv"), &to_csv(&report.rows))?;
            write_text(&cfg.out.join("ablation.svg"), &bar_plot_svg(&report.summary))?;
            write_text(&cfg.out.join("ablation.json"), &to_json(&report))?;
            for s in &report.summary {
                let m = s.median_miou.map_or_else(|| "failed".into(), |m| format!("{m:.4}"));
                out(stdout, &format!("{}\tmedian mIoU {m}\tinferFlops {}", s.variant, s.infer_flops))?;
            }
        }
        Command::Flops(a) => {
            let cfg = resolve(&a.common, SeedTarget::Train)?;
            let phase: Phase = a.phase.parse()?;
            let model = Model::<f32>::new(cfg.model_for(&cfg.variant)?, cfg.train.seed)?;
            let size = a.size.unwrap_or(cfg.data.image_size);
            let report = count_cost(&model, size, phase)?;
            out(stdout, &to_json(&report))?;
        }
    }
    Ok(())
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn main_with(argv: impl IntoIterator<Item = impl Into<OsString> + Clone>) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli, &mut std::io::stdout().lock()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
