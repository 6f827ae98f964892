//! Update rules.
//!
//! * [`task_adapt`]: `U(θ) = θ − α ∇L_support(θ)`, repeated `r` times.
//! * [`family_meta_finetune`]: `V(θ) = θ − β ∇_θ Σ_i L_query_i(U_i(θ))`,
//!   repeated `m` times.
//! * [`maltml_outer_gradient`]: `∇_θ Σ_d Σ_c L_val_c(U^γ_c(V_d(θ)))`, with the
//!   whole chain kept differentiable (third order in `θ`).
//! * [`maltml_firstorder_step`]: first-order family updates followed by
//!   `θ ← θ + η_fo Σ_d (θ′_d − θ)`.
//! * MAML, pretraining and oracle baselines, all stepping with Adam.
//!
//! Per-family (and per-task) work runs on independent tapes and is summed in
//! index order, so results do not depend on the number of worker threads.

use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::{grad, sum_all, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{flatten_vars, mse_loss, ModelSpec, ParamVars, ParamVector};
use crate::tasks::{FamilyEpisode, SampleSet, Task, TaskEpisode};

/// Anything whose loss on a sample set can be written on the tape.
pub trait Learner: Sync {
    fn loss<'t>(&self, params: &ParamVars<'t>, data: &SampleSet) -> Result<Var<'t>>;
}

impl Learner for ModelSpec {
    fn loss<'t>(&self, params: &ParamVars<'t>, data: &SampleSet) -> Result<Var<'t>> {
        let tape = params.vars()[0].tape();
        let x = tape.constant(Tensor::column(data.xs.clone()));
        mse_loss(self.forward(params, x)?, &data.ys)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSizes {
    /// Task-level step inside `U` during meta-finetuning (and MAML's inner rate).
    pub alpha: f64,
    /// Family-level meta step inside `V`.
    pub beta: f64,
    /// Goal-task fine-tuning step.
    pub gamma: f64,
    /// Outer Adam learning rate.
    pub eta: f64,
    /// Interpolation rate of the first-order outer update.
    pub eta_fo: f64,
}

impl Default for StepSizes {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            beta: 0.01,
            gamma: 0.001,
            eta: 0.001,
            eta_fo: 0.03,
        }
    }
}

impl StepSizes {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("eta_fo", self.eta_fo),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoopCounts {
    /// Gradient steps inside `U`.
    pub r: usize,
    /// Meta steps inside `V`.
    pub m: usize,
    /// Goal-task fine-tuning steps reported at evaluation.
    pub r_eval: usize,
    /// First-order meta steps per family in the first-order variant.
    pub m_fo: usize,
}

impl Default for LoopCounts {
    fn default() -> Self {
        Self {
            r: 1,
            m: 1,
            r_eval: 10,
            m_fo: 5,
        }
    }
}

impl LoopCounts {
    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || self.m == 0 {
            return Err(Error::config("r and m must be at least 1"));
        }
        if self.m_fo < 2 {
            return Err(Error::config("m_fo must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: ParamVector,
    pub second_moment: ParamVector,
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &ParamVector) -> Self {
        Self {
            first_moment: ParamVector::zeros(Arc::clone(like.layout())),
            second_moment: ParamVector::zeros(Arc::clone(like.layout())),
            t: 0,
        }
    }
}

/// One bias-corrected Adam step.
pub fn adam_update(
    params: &ParamVector,
    grads: &ParamVector,
    state: &AdamState,
    cfg: &AdamConfig,
    eta: f64,
) -> Result<(ParamVector, AdamState)> {
    if !(params.same_layout(grads)
        && params.same_layout(&state.first_moment)
        && params.same_layout(&state.second_moment))
    {
        return Err(Error::LayoutMismatch);
    }
    let t = state.t + 1;
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let n = params.len();
    let (mut p, mut m, mut v) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for i in 0..n {
        let g = grads.entries()[i];
        let mi = cfg.beta1 * state.first_moment.entries()[i] + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * state.second_moment.entries()[i] + (1.0 - cfg.beta2) * g * g;
        let step = eta * (mi / c1) / ((vi / c2).sqrt() + cfg.epsilon);
        p.push(params.entries()[i] - step);
        m.push(mi);
        v.push(vi);
    }
    Ok((
        params.with_entries(p)?,
        AdamState {
            first_moment: params.with_entries(m)?,
            second_moment: params.with_entries(v)?,
            t,
        },
    ))
}

fn finite(what: &'static str, v: Var<'_>) -> Result<()> {
    let value = v.value();
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            what,
            detail: format!("{:?}", value.data()),
        })
    }
}

/// `r` gradient steps with step size `step` on `support`. With
/// `create_graph` the result is differentiable to any order in `theta`;
/// without it the gradients are constants.
pub fn task_adapt<'t, M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVars<'t>,
    support: &SampleSet,
    step: f64,
    r: usize,
    create_graph: bool,
) -> Result<ParamVars<'t>> {
    if support.is_empty() {
        return Err(Error::EmptyBatch("task_adapt"));
    }
    let mut current = theta.clone();
    for _ in 0..r {
        let loss = model.loss(&current, support)?;
        finite("task loss", loss)?;
        let g = grad(loss, current.vars(), create_graph)?;
        current = current.descend(&g, step)?;
    }
    Ok(current)
}

/// `m` meta steps: `θ ← θ − β ∇_θ Σ_i L_query_i(U^{r,α}_i(θ))`. The inner
/// adaptation is always differentiable, so each meta gradient is exact;
/// `create_graph` controls whether the meta gradients are too.
pub fn family_meta_finetune<'t, M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVars<'t>,
    tasks: &[TaskEpisode],
    alpha: f64,
    beta: f64,
    counts: &LoopCounts,
    create_graph: bool,
) -> Result<ParamVars<'t>> {
    if tasks.is_empty() {
        return Err(Error::EmptyBatch("family_meta_finetune"));
    }
    let mut current = theta.clone();
    for _ in 0..counts.m {
        let losses = tasks
            .iter()
            .map(|t| {
                let adapted = task_adapt(model, &current, &t.support, alpha, counts.r, true)?;
                model.loss(&adapted, &t.query)
            })
            .collect::<Result<Vec<_>>>()?;
        let total = sum_all(&losses)?;
        finite("meta-finetune loss", total)?;
        let g = grad(total, current.vars(), create_graph)?;
        current = current.descend(&g, beta)?;
    }
    Ok(current)
}

/// Loss value and gradient of `objective` with respect to fresh leaves
/// holding `theta`.
pub fn value_and_grad<F>(theta: &ParamVector, objective: F) -> Result<(f64, ParamVector)>
where
    F: for<'t> FnOnce(&'t Tape, &ParamVars<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let leaves = theta.to_tape(&tape, true);
    let loss = objective(&tape, &leaves)?;
    finite("objective", loss)?;
    let g = grad(loss, leaves.vars(), false)?;
    let g = flatten_vars(theta.layout(), &g)?;
    if !g.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            detail: format!("norm {}", g.norm()),
        });
    }
    Ok((loss.item(), g))
}

/// Sums `(loss, gradient)` pairs in index order.
fn accumulate(theta: &ParamVector, parts: Vec<(f64, ParamVector)>) -> Result<(f64, ParamVector)> {
    let mut total = 0.0;
    let mut g = ParamVector::zeros(Arc::clone(theta.layout()));
    for (l, gi) in parts {
        total += l;
        g = g.add_scaled(&gi, 1.0)?;
    }
    Ok((total, g))
}

/// Outer loss of one family: `Σ_c L_val_c(U^{r,γ}_c(V(θ)))`.
pub fn maltml_family_loss<'t, M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVars<'t>,
    episode: &FamilyEpisode,
    steps: &StepSizes,
    counts: &LoopCounts,
) -> Result<Var<'t>> {
    let family_theta = family_meta_finetune(
        model,
        theta,
        &episode.meta_tasks,
        steps.alpha,
        steps.beta,
        counts,
        true,
    )?;
    let losses = episode
        .goal_tasks
        .iter()
        .map(|goal| {
            let tuned = task_adapt(
                model,
                &family_theta,
                &goal.support,
                steps.gamma,
                counts.r,
                true,
            )?;
            model.loss(&tuned, &goal.query)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sum_all(&losses)?)
}

/// Summed outer loss over the family batch and its exact gradient in `θ`.
pub fn maltml_outer_gradient<M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVector,
    batch: &[FamilyEpisode],
    steps: &StepSizes,
    counts: &LoopCounts,
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("maltml_outer_step"));
    }
    let parts = batch
        .par_iter()
        .map(|ep| {
            value_and_grad(theta, |_, leaves| {
                maltml_family_loss(model, leaves, ep, steps, counts)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    accumulate(theta, parts)
}

/// Result of one outer training step. `loss` is the mean per-term loss.
#[derive(Clone, Debug)]
pub struct Stepped {
    pub theta: ParamVector,
    pub adam: AdamState,
    pub loss: f64,
}

/// One MALTML outer step with Adam. On a non-finite loss or gradient the
/// error is returned and the caller keeps its previous state.
pub fn maltml_outer_step<M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVector,
    batch: &[FamilyEpisode],
    steps: &StepSizes,
    counts: &LoopCounts,
    adam_cfg: &AdamConfig,
    adam: &AdamState,
) -> Result<Stepped> {
    let (total, g) = maltml_outer_gradient(model, theta, batch, steps, counts)?;
    let terms: usize = batch.iter().map(|e| e.goal_tasks.len()).sum();
    let (theta, adam) = adam_update(theta, &g, adam, adam_cfg, steps.eta)?;
    Ok(Stepped {
        theta,
        adam,
        loss: total / terms.max(1) as f64,
    })
}

fn loss_and_grad_on<M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVector,
    data: &SampleSet,
) -> Result<(f64, ParamVector)> {
    value_and_grad(theta, |_, p| model.loss(p, data))
}

/// `r` plain gradient steps on values, no graph kept.
pub fn adapt_values<M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVector,
    support: &SampleSet,
    step: f64,
    r: usize,
) -> Result<ParamVector> {
    let mut current = theta.clone();
    for _ in 0..r {
        let (_, g) = loss_and_grad_on(model, &current, support)?;
        current = current.add_scaled(&g, -step)?;
    }
    Ok(current)
}

/// First-order family meta-finetuning: `m_fo` steps of
/// `θ ← θ − β Σ_i ∇L_query_i(θ_i)` where `θ_i` is the first-order adapted
/// point and the inner Jacobian is dropped. Only first derivatives are taken.
pub fn firstorder_meta_finetune<M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVector,
    tasks: &[TaskEpisode],
    alpha: f64,
    beta: f64,
    counts: &LoopCounts,
) -> Result<ParamVector> {
    if tasks.is_empty() {
        return Err(Error::EmptyBatch("firstorder_meta_finetune"));
    }
    let mut current = theta.clone();
    for _ in 0..counts.m_fo {
        let mut step = ParamVector::zeros(Arc::clone(theta.layout()));
        for t in tasks {
            let adapted = adapt_values(model, &current, &t.support, alpha, counts.r)?;
            let (_, g) = loss_and_grad_on(model, &adapted, &t.query)?;
            step = step.add_scaled(&g, 1.0)?;
        }
        current = current.add_scaled(&step, -beta)?;
    }
    Ok(current)
}

/// Mean validation loss of a family's goal tasks at `params`, no fine-tuning.
fn goal_loss<M: Learner + ?Sized>(
    model: &M,
    params: &ParamVector,
    ep: &FamilyEpisode,
) -> Result<f64> {
    let tape = Tape::new();
    let p = params.to_tape(&tape, false);
    let mut total = 0.0;
    for g in &ep.goal_tasks {
        total += model.loss(&p, &g.query)?.item();
    }
    Ok(total / ep.goal_tasks.len().max(1) as f64)
}

/// First-order outer step `θ ← θ + η_fo Σ_d (θ′_d − θ)`. The reported loss
/// is the mean goal-task validation loss at the family-adapted parameters.
pub fn maltml_firstorder_step<M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVector,
    batch: &[FamilyEpisode],
    steps: &StepSizes,
    counts: &LoopCounts,
) -> Result<(ParamVector, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("maltml_firstorder_step"));
    }
    if counts.m_fo < 2 {
        return Err(Error::config("first-order variant needs m_fo >= 2"));
    }
    let parts = batch
        .par_iter()
        .map(|ep| {
            let adapted = firstorder_meta_finetune(
                model,
                theta,
                &ep.meta_tasks,
                steps.alpha,
                steps.beta,
                counts,
            )?;
            let loss = goal_loss(model, &adapted, ep)?;
            Ok((loss, adapted.sub(theta)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (total, displacement) = accumulate(theta, parts)?;
    let next = theta.add_scaled(&displacement, steps.eta_fo)?;
    if !next.is_finite() || !total.is_finite() {
        return Err(Error::NonFinite {
            what: "first-order update",
            detail: format!("loss {total}"),
        });
    }
    Ok((next, total / batch.len() as f64))
}

/// Summed MAML loss `Σ_t L_query_t(U^{r,α}_t(θ))` and its exact gradient.
pub fn maml_outer_gradient<M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVector,
    tasks: &[TaskEpisode],
    alpha: f64,
    r: usize,
) -> Result<(f64, ParamVector)> {
    if tasks.is_empty() {
        return Err(Error::EmptyBatch("maml_outer_step"));
    }
    let parts = tasks
        .par_iter()
        .map(|t| {
            value_and_grad(theta, |_, leaves| {
                let adapted = task_adapt(model, leaves, &t.support, alpha, r, true)?;
                model.loss(&adapted, &t.query)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    accumulate(theta, parts)
}

pub fn maml_outer_step<M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVector,
    tasks: &[TaskEpisode],
    steps: &StepSizes,
    counts: &LoopCounts,
    adam_cfg: &AdamConfig,
    adam: &AdamState,
) -> Result<Stepped> {
    let (total, g) = maml_outer_gradient(model, theta, tasks, steps.alpha, counts.r)?;
    let (theta, adam) = adam_update(theta, &g, adam, adam_cfg, steps.eta)?;
    Ok(Stepped {
        theta,
        adam,
        loss: total / tasks.len() as f64,
    })
}

/// Summed per-task MSE over pooled samples and its gradient.
pub fn pretrain_gradient<M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVector,
    batch: &[SampleSet],
) -> Result<(f64, ParamVector)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("pretrain_step"));
    }
    value_and_grad(theta, |_, p| {
        let losses = batch
            .iter()
            .map(|s| model.loss(p, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(sum_all(&losses)?)
    })
}

pub fn pretrain_step<M: Learner + ?Sized>(
    model: &M,
    theta: &ParamVector,
    batch: &[SampleSet],
    eta: f64,
    adam_cfg: &AdamConfig,
    adam: &AdamState,
) -> Result<Stepped> {
    let (total, g) = pretrain_gradient(model, theta, batch)?;
    let (theta, adam) = adam_update(theta, &g, adam, adam_cfg, eta)?;
    Ok(Stepped {
        theta,
        adam,
        loss: total / batch.len() as f64,
    })
}

/// Rows `(x, amplitude, phase)` fed to the oracle network.
pub fn oracle_inputs(task: &Task, xs: &[f64]) -> Tensor {
    let rows: Vec<Vec<f64>> = xs
        .iter()
        .map(|&x| vec![x, task.amplitude(), task.phase()])
        .collect();
    Tensor::from_rows(&rows)
}

fn check_oracle(spec: &ModelSpec) -> Result<()> {
    if spec.input_dim != 3 {
        return Err(Error::WidthMismatch {
            expected: 3,
            got: spec.input_dim,
        });
    }
    Ok(())
}

pub fn oracle_loss<'t>(
    spec: &ModelSpec,
    params: &ParamVars<'t>,
    task: &Task,
    data: &SampleSet,
) -> Result<Var<'t>> {
    check_oracle(spec)?;
    let tape = params.vars()[0].tape();
    let x = tape.constant(oracle_inputs(task, &data.xs));
    mse_loss(spec.forward(params, x)?, &data.ys)
}

pub fn oracle_train_step(
    spec: &ModelSpec,
    theta: &ParamVector,
    batch: &[(Task, SampleSet)],
    eta: f64,
    adam_cfg: &AdamConfig,
    adam: &AdamState,
) -> Result<Stepped> {
    check_oracle(spec)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch("oracle_train_step"));
    }
    let (total, g) = value_and_grad(theta, |_, p| {
        let losses = batch
            .iter()
            .map(|(task, s)| oracle_loss(spec, p, task, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(sum_all(&losses)?)
    })?;
    let (theta, adam) = adam_update(theta, &g, adam, adam_cfg, eta)?;
    Ok(Stepped {
        theta,
        adam,
        loss: total / batch.len() as f64,
    })
}

/// Oracle predictions given the true task identity; no adaptation.
pub fn oracle_predict(
    spec: &ModelSpec,
    params: &ParamVector,
    task: &Task,
    xs: &[f64],
) -> Result<Vec<f64>> {
    check_oracle(spec)?;
    spec.predict(params, &oracle_inputs(task, xs))
}
