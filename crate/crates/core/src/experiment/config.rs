//! Run configuration and its flat `key = value` file format.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional and falls back to the regression defaults; unknown keys and
//! malformed values are errors.

use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::meta::{AdamConfig, LoopCounts, StepSizes};
use crate::model::ModelSpec;
use crate::tasks::ShotConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Maltml,
    MaltmlFo,
    Maml,
    Pretrain,
    Oracle,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Maltml,
        Algorithm::MaltmlFo,
        Algorithm::Maml,
        Algorithm::Pretrain,
        Algorithm::Oracle,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Maltml => "maltml",
            Algorithm::MaltmlFo => "maltml_fo",
            Algorithm::Maml => "maml",
            Algorithm::Pretrain => "pretrain",
            Algorithm::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown algorithm {s:?} (expected one of maltml, maltml_fo, maml, pretrain, oracle)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub steps: StepSizes,
    pub loops: LoopCounts,
    pub shots: ShotConfig,
    pub adam: AdamConfig,
    pub hidden: Vec<usize>,
    pub outer_steps: u64,
    pub family_batch: usize,
    pub seed: u64,
    /// Evaluation snapshot period in outer steps; 0 disables snapshots.
    pub eval_every: u64,
    pub output_dir: PathBuf,
}

/// Outer steps of the full-length run.
pub const FULL_OUTER_STEPS: u64 = 70_000;
/// Outer steps of the shorter desk-scale run.
pub const DESK_OUTER_STEPS: u64 = 20_000;

impl Default for TrainConfig {
    /// 5-task 5-shot, α = 0.001, β = 0.01, γ = 0.001, Adam η = 0.001,
    /// family batch 10, 70,000 outer steps.
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Maltml,
            steps: StepSizes::default(),
            loops: LoopCounts::default(),
            shots: ShotConfig::default(),
            adam: AdamConfig::default(),
            hidden: vec![40, 40],
            outer_steps: FULL_OUTER_STEPS,
            family_batch: 10,
            seed: 0,
            eval_every: 1000,
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl TrainConfig {
    pub fn desk(algorithm: Algorithm, seed: u64) -> Self {
        Self {
            algorithm,
            seed,
            outer_steps: DESK_OUTER_STEPS,
            ..Self::default()
        }
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: if self.algorithm == Algorithm::Oracle {
                3
            } else {
                1
            },
            hidden: self.hidden.clone(),
            output_dim: 1,
        }
    }

    /// Tasks per outer step for the task-level baselines, matching the number
    /// of tasks a family batch contains.
    pub fn tasks_per_step(&self) -> usize {
        self.family_batch * (self.shots.tasks_per_family + self.shots.validation_tasks)
    }

    pub fn validate(&self) -> Result<()> {
        self.steps.validate()?;
        self.loops.validate()?;
        self.shots.validate()?;
        self.model_spec().validate()?;
        if self.family_batch == 0 {
            return Err(Error::config("family_batch must be positive"));
        }
        if self.hidden.is_empty() {
            return Err(Error::config("hidden must list at least one layer"));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.epsilon <= 0.0 {
            return Err(Error::config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }

    /// Canonical `key = value` listing; parsing it gives back `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        vec![
            ("algorithm", self.algorithm.to_string()),
            ("alpha", format!("{:?}", self.steps.alpha)),
            ("beta", format!("{:?}", self.steps.beta)),
            ("gamma", format!("{:?}", self.steps.gamma)),
            ("eta", format!("{:?}", self.steps.eta)),
            ("eta_fo", format!("{:?}", self.steps.eta_fo)),
            ("r", self.loops.r.to_string()),
            ("m", self.loops.m.to_string()),
            ("r_eval", self.loops.r_eval.to_string()),
            ("m_fo", self.loops.m_fo.to_string()),
            ("L", self.shots.tasks_per_family.to_string()),
            ("K", self.shots.support.to_string()),
            ("Q", self.shots.query.to_string()),
            ("validation_tasks", self.shots.validation_tasks.to_string()),
            ("adam_beta1", format!("{:?}", self.adam.beta1)),
            ("adam_beta2", format!("{:?}", self.adam.beta2)),
            ("adam_epsilon", format!("{:?}", self.adam.epsilon)),
            ("hidden", hidden.join(",")),
            ("outer_steps", self.outer_steps.to_string()),
            ("family_batch", self.family_batch.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("output_dir", self.output_dir.display().to_string()),
        ]
    }

    /// Short stable digest of everything except the output directory.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "output_dir" {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize()[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T>
        where
            T::Err: fmt::Display,
        {
            v.parse()
                .map_err(|e| Error::config(format!("{key}: cannot parse {v:?}: {e}")))
        }
        match key {
            "algorithm" => self.algorithm = value.parse()?,
            "alpha" => self.steps.alpha = num(key, value)?,
            "beta" => self.steps.beta = num(key, value)?,
            "gamma" => self.steps.gamma = num(key, value)?,
            "eta" => self.steps.eta = num(key, value)?,
            "eta_fo" => self.steps.eta_fo = num(key, value)?,
            "r" => self.loops.r = num(key, value)?,
            "m" => self.loops.m = num(key, value)?,
            "r_eval" => self.loops.r_eval = num(key, value)?,
            "m_fo" => self.loops.m_fo = num(key, value)?,
            "L" => self.shots.tasks_per_family = num(key, value)?,
            "K" => self.shots.support = num(key, value)?,
            "Q" => self.shots.query = num(key, value)?,
            "validation_tasks" => self.shots.validation_tasks = num(key, value)?,
            "adam_beta1" => self.adam.beta1 = num(key, value)?,
            "adam_beta2" => self.adam.beta2 = num(key, value)?,
            "adam_epsilon" => self.adam.epsilon = num(key, value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "outer_steps" => self.outer_steps = num(key, value)?,
            "family_batch" => self.family_batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Settings from `text` applied on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, found {line:?}"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }
}
