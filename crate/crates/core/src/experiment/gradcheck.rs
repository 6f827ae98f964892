//! Self-test of the outer gradients against central finite differences.

use crate::autodiff::{finite_diff_check, Shape, Var};
use crate::error::Result;
use crate::meta::{maltml_outer_gradient, maml_outer_gradient, Learner, LoopCounts, StepSizes};
use crate::model::{Layout, ModelSpec, ParamVars, ParamVector, TensorSpec};
use crate::tasks::{FamilyEpisode, SampleSet, SeedStreams, ShotConfig};

/// Largest accepted relative error for the finite-difference checks.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Largest accepted error for the closed-form scalar check.
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-10;
pub const FD_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradcheckSettings {
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub steps: StepSizes,
    pub loops: LoopCounts,
    /// Perturb the analytic gradient before comparing; every check must then fail.
    pub corrupt: bool,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            hidden: vec![4, 4],
            seed: 0,
            // Large enough that second- and third-order terms are visible.
            steps: StepSizes {
                alpha: 0.05,
                beta: 0.05,
                gamma: 0.05,
                ..StepSizes::default()
            },
            loops: LoopCounts {
                r: 2,
                m: 2,
                ..LoopCounts::default()
            },
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error <= self.tolerance
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub checks: Vec<CheckResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }
}

/// Loss ½θ² for a scalar θ, whatever the data.
struct HalfSquare;

impl Learner for HalfSquare {
    fn loss<'t>(&self, params: &ParamVars<'t>, _: &SampleSet) -> Result<Var<'t>> {
        Ok(params.vars()[0].square().sum().scale(0.5))
    }
}

fn corrupted(mut g: Vec<f64>, corrupt: bool) -> Vec<f64> {
    if corrupt {
        g[0] += 1e-2 * g[0].abs().max(1.0);
    }
    g
}

/// Initial parameters nudged off zero so no ReLU sits exactly on its kink.
pub fn jittered_params(spec: &ModelSpec, seed: u64) -> ParamVector {
    let p = spec.init_params(seed);
    let shift: Vec<f64> = (0..p.len())
        .map(|i| 0.05 * ((i as f64) * 1.7 + seed as f64).sin())
        .collect();
    p.with_entries(p.entries().iter().zip(shift).map(|(a, b)| a + b).collect())
        .expect("same length")
}

fn small_shots() -> ShotConfig {
    ShotConfig {
        tasks_per_family: 2,
        support: 3,
        query: 3,
        validation_tasks: 2,
    }
}

pub fn run_gradcheck(s: &GradcheckSettings) -> Result<GradcheckReport> {
    s.steps.validate()?;
    s.loops.validate()?;
    let spec = ModelSpec {
        input_dim: 1,
        hidden: s.hidden.clone(),
        output_dim: 1,
    };
    spec.validate()?;
    let theta = jittered_params(&spec, s.seed);
    let seeds = SeedStreams::new(s.seed);
    let batch = (0..2)
        .map(|d| FamilyEpisode::sample(&seeds, &[0, d], &small_shots()))
        .collect::<Result<Vec<_>>>()?;
    let mut checks = Vec::new();

    let (_, g) = maltml_outer_gradient(&spec, &theta, &batch, &s.steps, &s.loops)?;
    let fd = finite_diff_check(
        |p: &[f64]| -> Result<f64> {
            let q = theta.with_entries(p.to_vec())?;
            Ok(maltml_outer_gradient(&spec, &q, &batch, &s.steps, &s.loops)?.0)
        },
        &corrupted(g.entries().to_vec(), s.corrupt),
        theta.entries(),
        FD_EPSILON,
    )?;
    checks.push(CheckResult {
        name: "maltml_outer_gradient",
        error: fd.max_rel_error,
        tolerance: FD_TOLERANCE,
    });

    let tasks = &batch[0].meta_tasks;
    let (_, g) = maml_outer_gradient(&spec, &theta, tasks, s.steps.alpha, s.loops.r)?;
    let fd = finite_diff_check(
        |p: &[f64]| -> Result<f64> {
            let q = theta.with_entries(p.to_vec())?;
            Ok(maml_outer_gradient(&spec, &q, tasks, s.steps.alpha, s.loops.r)?.0)
        },
        &corrupted(g.entries().to_vec(), s.corrupt),
        theta.entries(),
        FD_EPSILON,
    )?;
    checks.push(CheckResult {
        name: "maml_outer_gradient",
        error: fd.max_rel_error,
        tolerance: FD_TOLERANCE,
    });

    // ½θ² with r = m = 1: the cascade is linear, so the gradient is
    // (1−γ)²(1−β(1−α)²)²θ exactly.
    let layout = Layout::new(vec![TensorSpec {
        name: "theta".into(),
        shape: Shape::SCALAR,
    }]);
    let scalar = ParamVector::new(std::sync::Arc::new(layout), vec![1.7])?;
    let unit = LoopCounts {
        r: 1,
        m: 1,
        ..s.loops
    };
    let (_, g) = maltml_outer_gradient(&HalfSquare, &scalar, &batch[..1], &s.steps, &unit)?;
    let (a, b, c) = (s.steps.alpha, s.steps.beta, s.steps.gamma);
    let goals = batch[0].goal_tasks.len() as f64;
    let expected = goals
        * (1.0 - c).powi(2)
        * (1.0 - b * tasks.len() as f64 * (1.0 - a).powi(2)).powi(2)
        * 1.7;
    let got = corrupted(g.entries().to_vec(), s.corrupt)[0];
    checks.push(CheckResult {
        name: "scalar_closed_form",
        error: (got - expected).abs(),
        tolerance: CLOSED_FORM_TOLERANCE,
    });
    Ok(GradcheckReport { checks })
}
