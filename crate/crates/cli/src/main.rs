use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};

use d3p_core::checkpoint::Checkpoint;
use d3p_core::config::Config;
use d3p_core::criticality::{study, StudyError};
use d3p_core::eval::{evaluate, EvalReport};
use d3p_core::policy::{FixedStride, MeanStride, StridePolicy};
use d3p_core::train::{acceleration_ratio, init_state, pretrain_base, run_three_stage, MetricsRow, Trainer};

const OUT_DIR_VAR: &str = "D3P_OUT_DIR";

#[derive(Parser)]
#[command(name = "d3p", version, about = "Dynamic-stride diffusion policy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain, then run the staged fine-tuning schedule.
    Train {
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Deterministic evaluation of a checkpoint against the full-step baseline.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, value_enum, default_value_t = Mode::Adaptive)]
        mode: Mode,
        /// Stride used by `--mode fixed-k`.
        #[arg(long, default_value_t = 1)]
        k: usize,
        /// Evaluation seed; defaults to the run seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Perturbation study of action criticality.
    Criticality { config: PathBuf },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    FixedK,
    Adaptive,
}

/// Exit status 2 for configuration problems, 3 for everything else.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn config_error(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn load_config(path: &Path) -> Result<Config, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(config_error)?;
    Config::parse(&text)
        .with_context(|| format!("invalid config {}", path.display()))
        .map_err(config_error)
}

fn out_dir(default: PathBuf) -> Result<PathBuf> {
    let dir = std::env::var_os(OUT_DIR_VAR).map(PathBuf::from).unwrap_or(default);
    fs::create_dir_all(&dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    Ok(dir)
}

fn default_run_dir(config: &Path) -> PathBuf {
    let stem = config.file_stem().map_or("run".into(), |s| s.to_string_lossy().into_owned());
    PathBuf::from("runs").join(stem)
}

/// Opens `metrics.csv` for a run starting at `first_iter`, keeping rows of
/// earlier iterations when resuming.
fn open_metrics(path: &Path, first_iter: usize) -> Result<BufWriter<File>> {
    let mut kept = Vec::new();
    if first_iter > 0 {
        if let Ok(text) = fs::read_to_string(path) {
            kept = text
                .lines()
                .skip(1)
                .filter(|l| l.split(',').next().and_then(|i| i.parse::<usize>().ok()).is_some_and(|i| i < first_iter))
                .map(str::to_owned)
                .collect();
        }
    }
    let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", MetricsRow::HEADER)?;
    for l in kept {
        writeln!(w, "{l}")?;
    }
    Ok(w)
}

fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let dir = out_dir(default_run_dir(config))?;
    let state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p).with_context(|| format!("cannot resume from {}", p.display()))?;
            if ck.config.run.seed != cfg.run.seed {
                return Err(config_error(anyhow!(
                    "checkpoint seed {} differs from run.seed {}",
                    ck.config.run.seed,
                    cfg.run.seed
                )));
            }
            info!("resuming after iteration {}", ck.state.iteration);
            ck.state
        }
        None => {
            let (policy, _) = pretrain_base(&cfg)?;
            init_state(&cfg, policy)?
        }
    };
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut metrics = open_metrics(&dir.join("metrics.csv"), state.iteration)?;
    let interval = cfg.run.checkpoint_interval;
    let mut trainer = Trainer::new(cfg, state)?;
    let mut io_error = None;
    let result = run_three_stage(&mut trainer, |t, row| {
        let written = writeln!(metrics, "{}", row.csv_line()).and_then(|_| metrics.flush());
        if let Err(e) = written {
            io_error.get_or_insert(anyhow::Error::from(e));
        }
        let done = t.state.iteration;
        if interval > 0 && done % interval == 0 {
            let path = dir.join(format!("ckpt_{done:05}.bin"));
            let ck = Checkpoint {
                config: t.cfg.clone(),
                state: t.state.clone(),
            };
            if let Err(e) = ck.save(&path) {
                io_error.get_or_insert(anyhow::Error::from(e));
            }
        }
        Ok(())
    });
    drop(metrics);
    if let Some(e) = io_error {
        return Err(Failure::Runtime(e.context("cannot write run outputs")));
    }
    let rows = result?;
    let final_ck = Checkpoint {
        config: trainer.cfg.clone(),
        state: trainer.state.clone(),
    };
    final_ck.save(&dir.join("final.bin"))?;
    if let Some(last) = rows.last() {
        println!(
            "finished {} iterations: return {:.3}, success {:.3}, nfe/action {:.3}, stage {}",
            trainer.state.iteration, last.mean_return, last.success_rate, last.mean_nfe_per_action, last.stage
        );
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn write_episodes(path: &Path, runs: &[(&str, &EvalReport)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "run,episode,return,success,actions,total_steps")?;
    for (name, r) in runs {
        for (i, e) in r.episodes.iter().enumerate() {
            writeln!(w, "{name},{i},{},{},{},{}", e.ret, e.success as u8, e.actions, e.total_steps)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_eval(ckpt: &Path, episodes: usize, mode: Mode, k: usize, seed: Option<u64>) -> Result<(), Failure> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("cannot load {}", ckpt.display()))?;
    let cfg = &ck.config;
    let steps = cfg.diffusion.steps;
    if episodes == 0 {
        return Err(config_error(anyhow!("--episodes must be positive")));
    }
    if mode == Mode::FixedK && !(1..=steps).contains(&k) {
        return Err(config_error(anyhow!("--k must lie in 1..={steps}")));
    }
    let env = cfg.env.build()?;
    let l = &ck.state.learners;
    let seed = seed.unwrap_or(cfg.run.seed);
    let eta = cfg.diffusion.eta_eval;
    let fixed = FixedStride(k);
    let adaptive = MeanStride(&l.adaptor);
    let (name, strides): (String, &dyn StridePolicy) = match mode {
        Mode::FixedK => (format!("fixed-{k}"), &fixed),
        Mode::Adaptive => ("adaptive".into(), &adaptive),
    };
    let report = evaluate(&env, &l.policy, strides, eta, episodes, seed)?;
    let baseline = evaluate(&env, &l.policy, &FixedStride(1), eta, episodes, seed)?;
    let ratio = acceleration_ratio(&baseline.step_totals(), &report.step_totals())?;

    let dir = out_dir(ckpt.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf))?;
    let dump = dir.join("eval_episodes.csv");
    write_episodes(&dump, &[(name.as_str(), &report), ("baseline", &baseline)])?;
    let mut summary = String::new();
    for (n, r) in [(name.as_str(), &report), ("baseline", &baseline)] {
        summary.push_str(&format!(
            "{n}: success {:.4} return {:.4} nfe/action {:.4}\n",
            r.success_rate(),
            r.mean_return(),
            r.mean_nfe_per_action()
        ));
    }
    summary.push_str(&format!("acceleration_ratio {ratio}\n"));
    fs::write(dir.join("eval_report.txt"), &summary)?;
    print!("{summary}");
    println!("per-episode totals in {}", dump.display());
    Ok(())
}

fn cmd_criticality(config: &Path) -> Result<(), Failure> {
    let cfg = load_config(config)?;
    let env = cfg.env.build()?;
    let (run, report) = match study(&env, &cfg.study, cfg.run.seed) {
        Ok(r) => r,
        Err(e @ StudyError::NoEpisodes) => return Err(config_error(e)),
        Err(e) => return Err(e.into()),
    };
    let dir = out_dir(default_run_dir(config))?;

    let mut w = BufWriter::new(File::create(dir.join("criticality.csv"))?);
    writeln!(w, "t,predicted_return,mc_return,window")?;
    for p in &report.probes {
        writeln!(w, "{},{},{},{}", p.t, p.predicted_return, p.mc_return, p.window)?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("profile.csv"))?);
    writeln!(w, "t,predicted_return,window")?;
    for (t, (p, win)) in report.profile.iter().zip(&report.profile_windows).enumerate() {
        writeln!(w, "{t},{p},{}", win.as_str())?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("dataset.jsonl"))?);
    for r in run.buffer.iter() {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    w.flush()?;

    let mut w = BufWriter::new(File::create(dir.join("loss.csv"))?);
    writeln!(w, "episodes,loss")?;
    for (n, l) in &report.losses {
        writeln!(w, "{n},{l}")?;
    }
    w.flush()?;

    println!("spearman {:.4}", report.spearman);
    for (win, m) in &report.window_means {
        println!("window {} mean prediction {m:.3}", win.as_str());
    }
    if !report.approach_is_minimum() {
        warn!("the approach window is not the minimum of the profile");
    }
    println!("outputs in {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, resume } => cmd_train(config, resume.as_deref()),
        Command::Eval {
            checkpoint,
            episodes,
            mode,
            k,
            seed,
        } => cmd_eval(checkpoint, *episodes, *mode, *k, *seed),
        Command::Criticality { config } => cmd_criticality(config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
