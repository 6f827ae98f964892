use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{debug, info, warn};

use crate::error::{Error, Result};
use crate::meta::{
    maltml_firstorder_step, maltml_outer_step, maml_outer_step, oracle_train_step, pretrain_step,
    AdamState, Stepped,
};
use crate::model::{ModelSpec, ParamVector};
use crate::tasks::{FamilyEpisode, SeedStreams, Stream, TaskEpisode};

use super::checkpoint::Checkpoint;
use super::config::{Algorithm, TrainConfig};
use super::eval::{run_eval, variants_for, EvalSettings};

pub const LOSS_CSV: &str = "train_loss.csv";
pub const LOSS_HEADER: &str = "step,mean_outer_loss";
pub const SNAPSHOT_CSV: &str = "eval_snapshots.csv";
pub const SNAPSHOT_HEADER: &str = "step,algorithm,mse_pre_meta,mse_step_0,mse_step_final";
pub const CHECKPOINT_FILE: &str = "checkpoint.txt";
/// Episodes per periodic evaluation snapshot.
pub const SNAPSHOT_EPISODES: usize = 20;
/// Largest outer loss an accepted step may report. A loss beyond the
/// single-precision range means an adaptation diverged; such a step would
/// overflow in float32 and is skipped like any other non-finite step.
pub const LOSS_LIMIT: f64 = f32::MAX as f64;

/// In-memory training state; one call to [`Trainer::step`] is one outer step.
#[derive(Clone, Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    spec: ModelSpec,
    seeds: SeedStreams,
    theta: ParamVector,
    adam: AdamState,
    step: u64,
    skipped: u64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.model_spec();
        let seeds = SeedStreams::new(cfg.seed);
        let theta = spec.init_params(seeds.seed(Stream::Init, &[]));
        let adam = AdamState::new(&theta);
        Ok(Self {
            cfg,
            spec,
            seeds,
            theta,
            adam,
            step: 0,
            skipped: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamVector {
        &self.theta
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            step: self.step,
            params: self.theta.clone(),
            adam: self.adam.clone(),
        }
    }

    fn family_batch(&self, step: u64) -> Result<Vec<FamilyEpisode>> {
        (0..self.cfg.family_batch as u64)
            .map(|d| FamilyEpisode::sample(&self.seeds, &[step, d], &self.cfg.shots))
            .collect()
    }

    fn joint_tasks(&self, step: u64) -> Result<Vec<TaskEpisode>> {
        let s = &self.cfg.shots;
        (0..self.cfg.tasks_per_step() as u64)
            .map(|i| TaskEpisode::sample_joint(&self.seeds, &[step, i], s.support, s.query))
            .collect()
    }

    fn try_step(&self, step: u64) -> Result<(ParamVector, AdamState, f64)> {
        let c = &self.cfg;
        let stepped = |s: Stepped| (s.theta, s.adam, s.loss);
        Ok(match c.algorithm {
            Algorithm::Maltml => {
                let batch = self.family_batch(step)?;
                stepped(maltml_outer_step(
                    &self.spec,
                    &self.theta,
                    &batch,
                    &c.steps,
                    &c.loops,
                    &c.adam,
                    &self.adam,
                )?)
            }
            Algorithm::MaltmlFo => {
                let batch = self.family_batch(step)?;
                let (theta, loss) =
                    maltml_firstorder_step(&self.spec, &self.theta, &batch, &c.steps, &c.loops)?;
                (theta, self.adam.clone(), loss)
            }
            Algorithm::Maml => {
                let tasks = self.joint_tasks(step)?;
                stepped(maml_outer_step(
                    &self.spec,
                    &self.theta,
                    &tasks,
                    &c.steps,
                    &c.loops,
                    &c.adam,
                    &self.adam,
                )?)
            }
            Algorithm::Pretrain => {
                let pooled: Vec<_> = self
                    .joint_tasks(step)?
                    .into_iter()
                    .map(|t| t.support.concat(&t.query))
                    .collect();
                stepped(pretrain_step(
                    &self.spec,
                    &self.theta,
                    &pooled,
                    c.steps.eta,
                    &c.adam,
                    &self.adam,
                )?)
            }
            Algorithm::Oracle => {
                let pooled: Vec<_> = self
                    .joint_tasks(step)?
                    .into_iter()
                    .map(|t| (t.task, t.support.concat(&t.query)))
                    .collect();
                stepped(oracle_train_step(
                    &self.spec,
                    &self.theta,
                    &pooled,
                    c.steps.eta,
                    &c.adam,
                    &self.adam,
                )?)
            }
        })
    }

    /// Runs the next outer step. A step whose loss or gradient is not
    /// finite, or whose loss exceeds [`LOSS_LIMIT`], leaves the state
    /// untouched and returns `Ok(None)`; other errors propagate.
    pub fn step(&mut self) -> Result<Option<f64>> {
        let step = self.step;
        self.step += 1;
        match self.try_step(step) {
            Ok((theta, adam, loss)) if theta.is_finite() && loss.abs() <= LOSS_LIMIT => {
                self.theta = theta;
                self.adam = adam;
                Ok(Some(loss))
            }
            Ok((_, _, loss)) => {
                self.skipped += 1;
                warn!(
                    "step {}: diverged update (loss {loss:e}); skipped",
                    step + 1
                );
                Ok(None)
            }
            Err(e) if e.is_numerical() => {
                self.skipped += 1;
                warn!("step {}: {e}; skipped", step + 1);
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }
}

/// Files written by [`run_training`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub snapshot_csv: Option<PathBuf>,
    pub final_loss: Option<f64>,
    pub skipped: u64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_line(w: &mut impl Write, path: &Path, line: &str) -> Result<()> {
    writeln!(w, "{line}").map_err(|e| Error::io(path, e))
}

/// Trains for `cfg.outer_steps` steps, writing the loss curve, optional
/// evaluation snapshots and the final checkpoint into `cfg.output_dir`.
/// Fails with a numerical error if no step produced a finite update.
pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg.clone())?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let loss_path = dir.join(LOSS_CSV);
    let mut loss_out = create(&loss_path)?;
    write_line(&mut loss_out, &loss_path, LOSS_HEADER)?;
    let snap_path = dir.join(SNAPSHOT_CSV);
    let mut snap_out = if cfg.eval_every > 0 {
        let mut w = create(&snap_path)?;
        write_line(&mut w, &snap_path, SNAPSHOT_HEADER)?;
        Some(w)
    } else {
        None
    };
    info!(
        "training {} for {} steps (config {}) into {}",
        cfg.algorithm,
        cfg.outer_steps,
        cfg.hash(),
        dir.display()
    );

    let mut final_loss = None;
    let report_every = (cfg.outer_steps / 100).max(1);
    for _ in 0..cfg.outer_steps {
        let loss = trainer.step()?;
        let step = trainer.steps_done();
        let shown = loss.map_or("nan".to_string(), |l| format!("{l:?}"));
        write_line(&mut loss_out, &loss_path, &format!("{step},{shown}"))?;
        final_loss = loss.or(final_loss);
        if step % report_every == 0 {
            info!("step {step}: loss {shown}");
        }
        if let Some(w) = snap_out.as_mut() {
            if step % cfg.eval_every == 0 {
                for line in snapshot_lines(&trainer)? {
                    write_line(w, &snap_path, &line)?;
                }
                w.flush().map_err(|e| Error::io(&snap_path, e))?;
            }
        }
    }
    loss_out.flush().map_err(|e| Error::io(&loss_path, e))?;
    if cfg.outer_steps > 0 && trainer.skipped() == cfg.outer_steps {
        return Err(Error::NonFinite {
            what: "training",
            detail: "every outer step was non-finite".into(),
        });
    }
    let checkpoint = dir.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&checkpoint)?;
    debug!("wrote {}", checkpoint.display());
    Ok(TrainOutcome {
        checkpoint,
        loss_csv: loss_path,
        snapshot_csv: snap_out.map(|_| snap_path),
        final_loss,
        skipped: trainer.skipped(),
    })
}

fn snapshot_lines(trainer: &Trainer) -> Result<Vec<String>> {
    let cfg = trainer.config();
    let settings = EvalSettings {
        steps: cfg.steps,
        loops: cfg.loops,
        shots: cfg.shots,
        episodes: SNAPSHOT_EPISODES,
        seed: cfg.seed,
    };
    variants_for(cfg.algorithm)
        .iter()
        .map(|v| {
            let rep = run_eval(trainer.spec(), trainer.params(), v, &settings)?;
            Ok(format!(
                "{},{},{:?},{:?},{:?}",
                trainer.steps_done(),
                v.label,
                rep.pre_meta().mean,
                rep.at_step(0).mean,
                rep.at_step(rep.r_eval).mean
            ))
        })
        .collect()
}
