// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use circuit_unlearn::circuits::Circuit;
use circuit_unlearn::config::{DataSource, RunConfig};
use circuit_unlearn::interactions::SplitManifest;
use circuit_unlearn::model::{load_checkpoint, save_checkpoint, ModelState};
use circuit_unlearn::pipeline::{CircuitSet, Prepared};
use circuit_unlearn::unlearn::UnlearnMethod;
use circuit_unlearn::{report, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "circuit-unlearn", version, about = "Train, localize, and unlearn a tiny transformer recommender")]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream (overrides the file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 is fully deterministic in timing as well.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (overrides `out` in the file).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `section.key=value` override, repeatable.
    #[arg(long = "override", short = 'D', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the original model and write checkpoint, manifest, and config.
    Train {
        /// Use the synthetic dataset regardless of the config file.
        #[arg(long)]
        synth: bool,
    },
    /// Score edges over a set and write its circuit dump.
    Circuits {
        /// forget or retain
        #[arg(long, default_value = "forget")]
        set: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Share of edges kept (overrides attribution.circuit_fraction).
        #[arg(long)]
        circuit_fraction: Option<f64>,
    },
    /// Unlearn the forget set and write the model and its trace.
    Unlearn {
        /// cure, uniform or gradient_ascent (overrides unlearn.method)
        #[arg(long)]
        method: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        forget_circuit: Option<PathBuf>,
        #[arg(long)]
        retain_circuit: Option<PathBuf>,
    },
    /// Evaluate checkpoints against the retrain oracle.
    Eval {
        /// Checkpoints to score; defaults to every model in the output directory.
        checkpoints: Vec<PathBuf>,
    },
    /// Render plots and a summary from a run directory.
    Report {
        /// Defaults to the output directory.
        run: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out={:?}", o.display().to_string()));
    }
    if let Command::Train { synth: true } = cli.command {
        overrides.push("data.source=\"synth\"".into());
    }
    if let Command::Circuits { circuit_fraction: Some(f), .. } = cli.command {
        overrides.push(format!("attribution.circuit_fraction={f}"));
    }
    match &cli.config {
        Some(p) => RunConfig::load(p, &overrides),
        None => RunConfig::from_toml_with("", &overrides),
    }
}

/// Data and split, replaying the run's manifest when one exists.
fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let manifest = cfg.out.join("manifest.json");
    if manifest.exists() {
        let m: SplitManifest = serde_json::from_str(&std::fs::read_to_string(&manifest)?)?;
        Prepared::with_manifest(cfg, m)
    } else {
        Prepared::new(cfg)
    }
}

fn load_model(path: Option<&PathBuf>, cfg: &RunConfig) -> Result<(PathBuf, ModelState)> {
    let p = path.cloned().unwrap_or_else(|| cfg.out.join("model.ckpt"));
    if !p.exists() {
        return Err(Error::Config(format!("checkpoint {} not found (run `train` first)", p.display())));
    }
    let m = load_checkpoint(&p)?;
    Ok((p, m))
}

fn load_circuit(path: Option<&PathBuf>, cfg: &RunConfig, set: &str, state: &ModelState) -> Result<Circuit> {
    let p = path.cloned().unwrap_or_else(|| cfg.out.join(format!("circuit-{set}.json")));
    let text = std::fs::read_to_string(&p)
        .map_err(|e| Error::Config(format!("circuit dump {} unreadable (run `circuits` first): {e}", p.display())))?;
    Circuit::from_json(state.dag(), &text)
}

fn cache_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("cache")
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if let Some(t) = cfg.threads {
        // A second initialization only fails when a pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    std::fs::create_dir_all(&cfg.out)?;
    std::fs::write(cfg.out.join("config.toml"), cfg.to_toml()?)?;
    let out = &cfg.out;
    match &cli.command {
        Command::Train { .. } => {
            if cfg.data.source == DataSource::Tsv {
                log::info!("loading interactions from {:?}", cfg.data.path);
            }
            let prep = Prepared::new(&cfg)?;
            std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&prep.split.manifest)?)?;
            let run = prep.train_original(Some(&cache_dir(&cfg)))?;
            let path = out.join("model.ckpt");
            save_checkpoint(&run.model, &path)?;
            println!("{}", path.display());
        }
        Command::Circuits { set, checkpoint, .. } => {
            let which: CircuitSet = set.parse()?;
            let prep = prepare(&cfg)?;
            let (_, model) = load_model(checkpoint.as_ref(), &cfg)?;
            let run = prep.circuit(&model, which, Some(&cache_dir(&cfg).join("ppr.bin")))?;
            if let Some(s) = &run.corrupt {
                log::info!("corrupt prompts: {}", serde_json::to_string(s)?);
            }
            let name = format!("circuit-{set}.json");
            std::fs::write(out.join(&name), run.circuit.to_json(model.dag())? + "\n")?;
            std::fs::write(out.join(format!("scores-{set}.json")), run.scores.to_json(model.dag())? + "\n")?;
            println!("{}", out.join(name).display());
        }
        Command::Unlearn { method, checkpoint, forget_circuit, retain_circuit } => {
            let method: UnlearnMethod = match method {
                Some(m) => m.parse()?,
                None => cfg.unlearn.method,
            };
            let prep = prepare(&cfg)?;
            let (_, model) = load_model(checkpoint.as_ref(), &cfg)?;
            let f = load_circuit(forget_circuit.as_ref(), &cfg, "forget", &model)?;
            let r = load_circuit(retain_circuit.as_ref(), &cfg, "retain", &model)?;
            let partition = prep.partition(&model, &f, &r);
            let outcome = prep.unlearn(&model, &partition, Some(method))?;
            let label = method_label(method);
            let ckpt = out.join(format!("unlearned-{label}.ckpt"));
            save_checkpoint(&outcome.model, &ckpt)?;
            outcome.trace.save(&out.join(format!("trace-{label}.csv")))?;
            std::fs::write(
                out.join(format!("wall-{label}.json")),
                serde_json::to_string(&serde_json::json!({ "unlearn_wall_seconds": outcome.wall.as_secs_f64() }))?,
            )?;
            log::info!("unlearning took {:.2}s", outcome.wall.as_secs_f64());
            println!("{}", ckpt.display());
        }
        Command::Eval { checkpoints } => {
            let prep = prepare(&cfg)?;
            let oracle = prep.oracle(Some(&cache_dir(&cfg)))?;
            let oracle_path = out.join("oracle.ckpt");
            save_checkpoint(&oracle.model, &oracle_path)?;
            let targets = if checkpoints.is_empty() { default_checkpoints(out)? } else { checkpoints.clone() };
            let mut reports = Vec::new();
            for path in &targets {
                let model = load_checkpoint(path)?;
                let label = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
                let mut m = prep.metrics(&label, &model, &oracle.model, None)?;
                if let Some(method) = label.strip_prefix("unlearned-") {
                    m.unlearn_wall_seconds = read_wall(out, method);
                    if let Ok(t) = circuit_unlearn::unlearn::AlignmentTrace::load(&out.join(format!("trace-{method}.csv"))) {
                        m.conflict_rate = t.conflict_rate();
                    }
                }
                std::fs::write(out.join(format!("metrics-{label}.json")), m.to_json()? + "\n")?;
                m.append_csv(&out.join("runs.csv"))?;
                reports.push(m);
            }
            println!("{}", serde_json::to_string_pretty(&reports)?);
        }
        Command::Report { run } => {
            let dir = run.clone().unwrap_or_else(|| out.clone());
            for f in report::write_report(&dir)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn method_label(m: UnlearnMethod) -> &'static str {
    match m {
        UnlearnMethod::Cure => "cure",
        UnlearnMethod::Uniform => "uniform",
        UnlearnMethod::GradientAscent => "gradient_ascent",
    }
}

fn read_wall(out: &Path, label: &str) -> f64 {
    std::fs::read_to_string(out.join(format!("wall-{label}.json")))
        .ok()
        .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
        .and_then(|v| v["unlearn_wall_seconds"].as_f64())
        .unwrap_or(0.0)
}

/// `model.ckpt` plus every `unlearned-*.ckpt`, sorted.
fn default_checkpoints(out: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            name == "model.ckpt" || (name.starts_with("unlearned-") && name.ends_with(".ckpt"))
        })
        .collect();
    v.sort();
    if v.is_empty() {
        return Err(Error::Config(format!("no checkpoints in {} (run `train` first)", out.display())));
    }
    Ok(v)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
