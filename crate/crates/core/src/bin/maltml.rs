use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use maltml_core::experiment::{
    emit_plotdata, eval_episode, run_eval, run_gradcheck, run_training, variants_for, Algorithm,
    Checkpoint, EvalReport, EvalSettings, GradcheckSettings, TrainConfig,
};
use maltml_core::tasks::EPISODE_DUMP_HEADER;
use maltml_core::Error;

const LOG_ENV: &str = "MALTML_LOG";

#[derive(Parser)]
#[command(
    name = "maltml",
    version,
    about = "Family-level meta-learning experiments on sinusoid regression"
)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one algorithm and write its loss curve and checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on held-out families.
    Eval(EvalArgs),
    /// Check the outer gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Merge evaluation reports into plot data.
    Plotdata(PlotArgs),
}

/// Settings that override the config file or checkpoint.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "eta-fo")]
    eta_fo: Option<f64>,
    #[arg(long = "m-fo")]
    m_fo: Option<usize>,
    /// Meta tasks per family.
    #[arg(long = "L")]
    l: Option<usize>,
    /// Support samples per task.
    #[arg(long = "K")]
    k: Option<usize>,
    /// Query samples per task.
    #[arg(long = "Q")]
    q: Option<usize>,
    #[arg(long = "r-eval")]
    r_eval: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        let set_f = |dst: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *dst = v
            }
        };
        let set_u = |dst: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *dst = v
            }
        };
        set_f(&mut cfg.steps.alpha, self.alpha);
        set_f(&mut cfg.steps.beta, self.beta);
        set_f(&mut cfg.steps.gamma, self.gamma);
        set_f(&mut cfg.steps.eta, self.eta);
        set_f(&mut cfg.steps.eta_fo, self.eta_fo);
        set_u(&mut cfg.loops.m_fo, self.m_fo);
        set_u(&mut cfg.shots.tasks_per_family, self.l);
        set_u(&mut cfg.shots.support, self.k);
        set_u(&mut cfg.shots.query, self.q);
        set_u(&mut cfg.loops.r_eval, self.r_eval);
    }
}

#[derive(Args)]
struct TrainArgs {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the shorter 20,000-step schedule instead of 70,000.
    #[arg(long)]
    desk: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long = "outer-steps")]
    outer_steps: Option<u64>,
    #[arg(long = "family-batch")]
    family_batch: Option<usize>,
    /// Evaluation snapshot period; 0 disables.
    #[arg(long = "eval-every")]
    eval_every: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the `eval_<algorithm>.csv` reports.
    #[arg(long)]
    out: PathBuf,
    /// Evaluation seed; checkpoints evaluated with the same seed see the same episodes.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Report only this series (e.g. `maml_fair`).
    #[arg(long)]
    variant: Option<String>,
    /// Also write every sampled episode to this CSV.
    #[arg(long = "dump-episodes")]
    dump_episodes: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Hidden layer widths, comma separated.
    #[arg(long, default_value = "4,4", value_delimiter = ',')]
    hidden: Vec<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Perturb the analytic gradient; the check must then fail.
    #[arg(long, hide = true)]
    corrupt: bool,
}

#[derive(Args)]
struct PlotArgs {
    /// Evaluation reports to merge.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Output file; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let mut cfg = if a.desk {
        TrainConfig::desk(Algorithm::Maltml, 0)
    } else {
        TrainConfig::default()
    };
    if let Some(path) = &a.config {
        cfg.apply_text(&read(path)?)?;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.algorithm {
        cfg.algorithm = v;
    }
    if let Some(v) = a.out {
        cfg.output_dir = v;
    }
    if let Some(v) = a.outer_steps {
        cfg.outer_steps = v;
    }
    if let Some(v) = a.family_batch {
        cfg.family_batch = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    let outcome = run_training(&cfg)?;
    if outcome.skipped > 0 {
        log::warn!(
            "{} of {} steps were skipped",
            outcome.skipped,
            cfg.outer_steps
        );
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    println!("loss_csv {}", outcome.loss_csv.display());
    if let Some(l) = outcome.final_loss {
        println!("final_loss {l:?}");
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = ckpt.config.clone();
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    let settings = EvalSettings {
        steps: cfg.steps,
        loops: cfg.loops,
        shots: cfg.shots,
        episodes: a.episodes,
        seed: a.seed,
    };
    let mut variants = variants_for(cfg.algorithm);
    if let Some(name) = &a.variant {
        variants.retain(|v| &v.label == name);
        if variants.is_empty() {
            return Err(Error::config(format!(
                "checkpoint trained with {} has no series {name:?}",
                cfg.algorithm
            )));
        }
    }
    let spec = cfg.model_spec();
    for v in &variants {
        info!("evaluating {} on {} episodes", v.label, a.episodes);
        let report = run_eval(&spec, &ckpt.params, v, &settings)?;
        let path = a.out.join(format!("eval_{}.csv", v.label));
        write(&path, &report.to_csv())?;
        let pre = report.pre_meta();
        let last = report.at_step(report.r_eval);
        println!(
            "{} pre_meta {:.4} step_0 {:.4} step_{} {:.4} [{:.4}, {:.4}] -> {}",
            v.label,
            pre.mean,
            report.at_step(0).mean,
            report.r_eval,
            last.mean,
            last.ci_low,
            last.ci_high,
            path.display()
        );
    }
    if let Some(path) = &a.dump_episodes {
        let mut text = format!("{EPISODE_DUMP_HEADER}\n");
        for i in 0..a.episodes {
            text.push_str(&eval_episode(a.seed, i, &settings.shots)?.dump_rows(i));
        }
        write(path, &text)?;
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<bool, Error> {
    let mut s = GradcheckSettings {
        hidden: a.hidden,
        seed: a.seed,
        corrupt: a.corrupt,
        ..GradcheckSettings::default()
    };
    if let Some(v) = a.alpha {
        s.steps.alpha = v;
    }
    if let Some(v) = a.beta {
        s.steps.beta = v;
    }
    if let Some(v) = a.gamma {
        s.steps.gamma = v;
    }
    let report = run_gradcheck(&s)?;
    for c in &report.checks {
        let verdict = if c.passed() { "ok" } else { "FAIL" };
        println!(
            "{} error {:.3e} tolerance {:.0e} {verdict}",
            c.name, c.error, c.tolerance
        );
    }
    Ok(report.passed())
}

fn plotdata(a: PlotArgs) -> Result<(), Error> {
    let reports = a
        .reports
        .iter()
        .map(|p| EvalReport::from_csv(&read(p)?))
        .collect::<Result<Vec<_>, _>>()?;
    let text = emit_plotdata(&reports)?;
    match &a.out {
        Some(path) => write(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn exit_for(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_numerical() { 2 } else { 1 })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot start {n} workers: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => match gradcheck(a) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
        Command::Plotdata(a) => plotdata(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => exit_for(&e),
    }
}
