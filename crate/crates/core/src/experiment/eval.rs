//! Held-out evaluation: meta-finetune on a fresh family, then fine-tune on a
//! K-shot goal task and record the dense-grid error after each step.

use std::fmt::Write as _;

use log::warn;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::meta::{
    adapt_values, family_meta_finetune, firstorder_meta_finetune, oracle_predict, LoopCounts,
    StepSizes,
};
use crate::model::{mse, ModelSpec, ParamVector};
use crate::tasks::{grid, FamilyEpisode, SeedStreams, ShotConfig, EVAL_STREAMS};

use super::config::Algorithm;

/// Points in the dense evaluation grid over [-5, 5].
pub const GRID_POINTS: usize = 100;

/// How a checkpoint is turned into goal-task predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Exact family meta-finetuning, then goal fine-tuning.
    MetaFinetune,
    /// First-order family meta-finetuning; optionally followed by goal fine-tuning.
    FirstOrder { finetune: bool },
    /// Goal fine-tuning directly from the checkpoint.
    Plain,
    /// `m` plain fine-tuning steps with step `α` on the pooled samples of
    /// the family's meta tasks, then goal fine-tuning: the same task budget
    /// as meta-finetuning, used as extra fine-tuning data.
    PooledFinetune,
    /// The task identity is an input; no adaptation.
    Oracle,
}

/// A named protocol; the name becomes the `algorithm` column of reports.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub label: String,
    pub protocol: Protocol,
}

impl Variant {
    fn new(label: &str, protocol: Protocol) -> Self {
        Self {
            label: label.to_string(),
            protocol,
        }
    }
}

/// The reported series for a checkpoint trained with `algorithm`. MAML is
/// reported both with plain fine-tuning and with the family's meta tasks as
/// extra fine-tuning data; the first-order variant both with and without
/// goal fine-tuning.
pub fn variants_for(algorithm: Algorithm) -> Vec<Variant> {
    match algorithm {
        Algorithm::Maltml => vec![Variant::new("maltml", Protocol::MetaFinetune)],
        Algorithm::MaltmlFo => vec![
            Variant::new("maltml_fo", Protocol::FirstOrder { finetune: true }),
            Variant::new("maltml_fo_noft", Protocol::FirstOrder { finetune: false }),
        ],
        Algorithm::Maml => vec![
            Variant::new("maml", Protocol::Plain),
            Variant::new("maml_fair", Protocol::PooledFinetune),
        ],
        Algorithm::Pretrain => vec![Variant::new("pretrain", Protocol::MetaFinetune)],
        Algorithm::Oracle => vec![Variant::new("oracle", Protocol::Oracle)],
    }
}

#[derive(Clone, Debug)]
pub struct EvalSettings {
    pub steps: StepSizes,
    pub loops: LoopCounts,
    /// `validation_tasks` is ignored: each episode has exactly one goal task.
    pub shots: ShotConfig,
    pub episodes: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub family_phase: f64,
    pub goal_amplitude: f64,
    /// Grid MSE of the checkpoint itself.
    pub mse_pre_meta: f64,
    /// Grid MSE after meta-finetuning and `k` goal steps, `k = 0..=r_eval`.
    pub curve: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub r_eval: usize,
    pub records: Vec<EpisodeRecord>,
}

/// Mean and normal-approximation 95% interval of the mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let half = if values.len() > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            1.96 * (var / n).sqrt()
        } else {
            0.0
        };
        Self {
            mean,
            ci_low: mean - half,
            ci_high: mean + half,
        }
    }
}

/// Episode `i` of the evaluation stream: a family with `L` meta tasks and
/// one goal task.
pub fn eval_episode(seed: u64, index: usize, shots: &ShotConfig) -> Result<FamilyEpisode> {
    let shots = ShotConfig {
        validation_tasks: 1,
        ..*shots
    };
    FamilyEpisode::sample_from(
        &SeedStreams::new(seed),
        EVAL_STREAMS,
        &[index as u64],
        &shots,
    )
}

/// Grid MSE; a non-finite error is reported as +inf.
fn grid_mse(spec: &ModelSpec, params: &ParamVector, xs: &Tensor, ys: &[f64]) -> Result<f64> {
    let err = mse(&spec.predict(params, xs)?, ys);
    Ok(if err.is_finite() { err } else { f64::INFINITY })
}

/// Turns a numerical failure into `None`; a diverged adaptation is a result
/// to report, not a reason to abandon the evaluation.
fn diverged<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.is_numerical() => Ok(None),
        Err(e) => Err(e),
    }
}

fn evaluate_episode(
    spec: &ModelSpec,
    params: &ParamVector,
    protocol: Protocol,
    settings: &EvalSettings,
    ep: &FamilyEpisode,
) -> Result<EpisodeRecord> {
    let goal = &ep.goal_tasks[0];
    let xs = grid(GRID_POINTS);
    let ys: Vec<f64> = xs.iter().map(|&x| goal.task.target(x)).collect();
    let steps = &settings.steps;
    let r_eval = settings.loops.r_eval;
    let record = |pre, curve| EpisodeRecord {
        family_phase: ep.family.phase(),
        goal_amplitude: goal.task.amplitude(),
        mse_pre_meta: pre,
        curve,
    };

    if protocol == Protocol::Oracle {
        let err = mse(&oracle_predict(spec, params, &goal.task, &xs)?, &ys);
        return Ok(record(err, vec![err; r_eval + 1]));
    }

    let grid_x = Tensor::column(xs);
    let pre = grid_mse(spec, params, &grid_x, &ys)?;
    let adapted = diverged(match protocol {
        Protocol::MetaFinetune => {
            let tape = Tape::new();
            let leaves = params.to_tape(&tape, true);
            family_meta_finetune(
                spec,
                &leaves,
                &ep.meta_tasks,
                steps.alpha,
                steps.beta,
                &settings.loops,
                false,
            )
            .map(|p| p.to_param_vector())
        }
        Protocol::FirstOrder { .. } => firstorder_meta_finetune(
            spec,
            params,
            &ep.meta_tasks,
            steps.alpha,
            steps.beta,
            &settings.loops,
        ),
        Protocol::PooledFinetune => {
            let pooled = ep
                .meta_tasks
                .iter()
                .map(|t| t.support.concat(&t.query))
                .reduce(|a, b| a.concat(&b))
                .ok_or(Error::EmptyBatch("pooled fine-tuning"))?;
            adapt_values(spec, params, &pooled, steps.alpha, settings.loops.m)
        }
        Protocol::Plain | Protocol::Oracle => Ok(params.clone()),
    })?;
    let mut curve = vec![f64::INFINITY; r_eval + 1];
    let Some(mut current) = adapted else {
        return Ok(record(pre, curve));
    };
    curve[0] = grid_mse(spec, &current, &grid_x, &ys)?;
    let finetune = !matches!(protocol, Protocol::FirstOrder { finetune: false });
    for k in 1..=r_eval {
        if !finetune {
            curve[k] = curve[0];
            continue;
        }
        match diverged(adapt_values(spec, &current, &goal.support, steps.gamma, 1))? {
            Some(next) => current = next,
            None => break,
        }
        curve[k] = grid_mse(spec, &current, &grid_x, &ys)?;
    }
    Ok(record(pre, curve))
}

/// Evaluates `params` over `settings.episodes` held-out episodes. Episodes
/// run in parallel but the report is in episode order and independent of
/// the worker count.
pub fn run_eval(
    spec: &ModelSpec,
    params: &ParamVector,
    variant: &Variant,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    settings.steps.validate()?;
    settings.loops.validate()?;
    if settings.episodes == 0 {
        return Err(Error::config("evaluation needs at least one episode"));
    }
    let expected = if variant.protocol == Protocol::Oracle {
        3
    } else {
        1
    };
    if spec.input_dim != expected {
        return Err(Error::config(format!(
            "{} evaluation needs a model with {expected} inputs, checkpoint has {}",
            variant.label, spec.input_dim
        )));
    }
    if params.layout().as_ref() != &spec.layout() {
        return Err(Error::LayoutMismatch);
    }
    let records = (0..settings.episodes)
        .into_par_iter()
        .map(|i| {
            let ep = eval_episode(settings.seed, i, &settings.shots)?;
            evaluate_episode(spec, params, variant.protocol, settings, &ep)
        })
        .collect::<Result<Vec<_>>>()?;
    let failed = records
        .iter()
        .filter(|r| r.curve.iter().any(|v| v.is_infinite()))
        .count();
    if failed > 0 {
        warn!(
            "{}: {failed} of {} episodes diverged (recorded as inf)",
            variant.label, settings.episodes
        );
    }
    Ok(EvalReport {
        label: variant.label.clone(),
        r_eval: settings.loops.r_eval,
        records,
    })
}

impl EvalReport {
    /// Aggregate before meta-finetuning.
    pub fn pre_meta(&self) -> Aggregate {
        let v: Vec<f64> = self.records.iter().map(|r| r.mse_pre_meta).collect();
        Aggregate::of(&v)
    }

    /// Aggregate after `k` fine-tuning steps.
    pub fn at_step(&self, k: usize) -> Aggregate {
        let v: Vec<f64> = self.records.iter().map(|r| r.curve[k]).collect();
        Aggregate::of(&v)
    }

    pub fn csv_header(r_eval: usize) -> String {
        let mut h = String::from("algorithm,episode,family_phase,goal_amplitude,mse_pre_meta");
        for k in 0..=r_eval {
            write!(h, ",mse_step_{k}").unwrap();
        }
        h
    }

    /// One row per episode; floats are written in round-trip form.
    pub fn to_csv(&self) -> String {
        let mut out = Self::csv_header(self.r_eval);
        out.push('\n');
        for (i, r) in self.records.iter().enumerate() {
            write!(
                out,
                "{},{i},{:?},{:?},{:?}",
                self.label, r.family_phase, r.goal_amplitude, r.mse_pre_meta
            )
            .unwrap();
            for v in &r.curve {
                write!(out, ",{v:?}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "empty report".into(),
        })?;
        let columns = header.split(',').count();
        let r_eval = columns
            .checked_sub(6)
            .filter(|&r| Self::csv_header(r) == header.trim())
            .ok_or(Error::Parse {
                line: 1,
                msg: format!("unexpected header {header:?}"),
            })?;
        let mut label = None;
        let mut records = Vec::new();
        for (i, line) in lines {
            let bad = |msg: String| Error::Parse { line: i + 1, msg };
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != columns {
                return Err(bad(format!(
                    "expected {columns} fields, found {}",
                    fields.len()
                )));
            }
            match &label {
                None => label = Some(fields[0].to_string()),
                Some(l) if l != fields[0] => {
                    return Err(bad(format!("mixed algorithms {l} and {}", fields[0])))
                }
                _ => {}
            }
            let nums = fields[2..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|e| bad(format!("bad number {f:?}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            records.push(EpisodeRecord {
                family_phase: nums[0],
                goal_amplitude: nums[1],
                mse_pre_meta: nums[2],
                curve: nums[3..].to_vec(),
            });
        }
        let label = label.ok_or(Error::Parse {
            line: 2,
            msg: "report has no episodes".into(),
        })?;
        Ok(Self {
            label,
            r_eval,
            records,
        })
    }
}

/// Long-format plot data for several reports. Step `-1` is the error before
/// meta-finetuning; steps `0..=r_eval` follow it.
pub fn emit_plotdata(reports: &[EvalReport]) -> Result<String> {
    let Some(first) = reports.first() else {
        return Err(Error::config("plotdata needs at least one report"));
    };
    let mut out = String::from("algorithm,step,mean_mse,ci_low,ci_high\n");
    for rep in reports {
        if rep.r_eval != first.r_eval {
            return Err(Error::config(format!(
                "reports disagree on r_eval: {} has {}, {} has {}",
                first.label, first.r_eval, rep.label, rep.r_eval
            )));
        }
        if rep.records.is_empty() {
            return Err(Error::config(format!(
                "report {} has no episodes",
                rep.label
            )));
        }
        let rows = std::iter::once((-1, rep.pre_meta()))
            .chain((0..=rep.r_eval).map(|k| (k as i64, rep.at_step(k))));
        for (step, a) in rows {
            writeln!(
                out,
                "{},{step},{:?},{:?},{:?}",
                rep.label, a.mean, a.ci_low, a.ci_high
            )
            .unwrap();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn settings(episodes: usize) -> EvalSettings {
        EvalSettings {
            steps: StepSizes::default(),
            loops: LoopCounts {
                r_eval: 3,
                ..LoopCounts::default()
            },
            shots: ShotConfig::default(),
            episodes,
            seed: 9,
        }
    }

    #[test]
    fn aggregate_interval() {
        let a = Aggregate::of(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(a.mean, 2.5);
        let half = 1.96 * (5.0f64 / 3.0 / 4.0).sqrt();
        assert!((a.ci_high - a.mean - half).abs() < 1e-15);
        assert!((a.mean - a.ci_low - half).abs() < 1e-15);
        let single = Aggregate::of(&[0.7]);
        assert_eq!((single.ci_low, single.ci_high), (0.7, 0.7));
    }

    #[test]
    fn report_shape_and_csv_round_trip() {
        let spec = ModelSpec::regression();
        let params = spec.init_params(1);
        let v = &variants_for(Algorithm::Maltml)[0];
        let rep = run_eval(&spec, &params, v, &settings(4)).unwrap();
        assert_eq!(rep.records.len(), 4);
        assert!(rep.records.iter().all(|r| r.curve.len() == 4));
        let back = EvalReport::from_csv(&rep.to_csv()).unwrap();
        assert_eq!(back, rep);
    }

    #[test]
    fn no_finetune_curve_is_flat_and_plain_starts_at_checkpoint() {
        let spec = ModelSpec::regression();
        let params = spec.init_params(2);
        let s = settings(2);
        let fo = run_eval(&spec, &params, &variants_for(Algorithm::MaltmlFo)[1], &s).unwrap();
        for r in &fo.records {
            assert!(r.curve.iter().all(|&v| v == r.curve[0]));
        }
        let plain = run_eval(&spec, &params, &variants_for(Algorithm::Maml)[0], &s).unwrap();
        for r in &plain.records {
            assert_eq!(r.curve[0], r.mse_pre_meta);
            assert_ne!(r.curve[1], r.curve[0]);
        }
    }

    #[test]
    fn diverged_episodes_are_recorded_as_inf() {
        let spec = ModelSpec::regression();
        let params = spec.init_params(2);
        let mut s = settings(3);
        s.steps.beta = 1e300;
        let rep = run_eval(&spec, &params, &variants_for(Algorithm::Maltml)[0], &s).unwrap();
        for r in &rep.records {
            assert!(r.mse_pre_meta.is_finite());
            assert!(r.curve.iter().all(|v| *v == f64::INFINITY), "{:?}", r.curve);
        }
        assert_eq!(rep.at_step(0).mean, f64::INFINITY);
        let back = EvalReport::from_csv(&rep.to_csv()).unwrap();
        assert_eq!(back.records, rep.records);
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let spec = ModelSpec::regression();
        let params = spec.init_params(0);
        let oracle = &variants_for(Algorithm::Oracle)[0];
        assert!(run_eval(&spec, &params, oracle, &settings(1)).is_err());
        let wide = ModelSpec::oracle();
        let p = wide.init_params(0);
        assert!(run_eval(
            &wide,
            &p,
            &variants_for(Algorithm::Pretrain)[0],
            &settings(1)
        )
        .is_err());
        assert!(run_eval(&wide, &p, oracle, &settings(1)).is_ok());
    }

    #[test]
    fn plotdata_rows_and_r_eval_mismatch() {
        let rec = EpisodeRecord {
            family_phase: 1.0,
            goal_amplitude: 2.0,
            mse_pre_meta: 4.0,
            curve: vec![3.0, 2.0],
        };
        let a = EvalReport {
            label: "a".into(),
            r_eval: 1,
            records: vec![rec.clone(), rec.clone()],
        };
        let out = emit_plotdata(std::slice::from_ref(&a)).unwrap();
        assert_eq!(
            out,
            "algorithm,step,mean_mse,ci_low,ci_high\na,-1,4.0,4.0,4.0\na,0,3.0,3.0,3.0\na,1,2.0,2.0,2.0\n"
        );
        let b = EvalReport {
            label: "b".into(),
            r_eval: 2,
            records: vec![EpisodeRecord {
                curve: vec![1.0; 3],
                ..rec
            }],
        };
        assert!(emit_plotdata(&[a, b]).is_err());
        assert!(emit_plotdata(&[]).is_err());
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(EvalReport::from_csv("").is_err());
        assert!(EvalReport::from_csv("algorithm,episode\n").is_err());
        let h = EvalReport::csv_header(0);
        assert!(EvalReport::from_csv(&format!("{h}\nx,0,1,2,3\n")).is_err());
        assert!(EvalReport::from_csv(&format!("{h}\nx,0,1,2,3,z\n")).is_err());
        assert!(EvalReport::from_csv(&format!("{h}\nx,0,1,2,3,4\ny,1,1,2,3,4\n")).is_err());
    }
}
