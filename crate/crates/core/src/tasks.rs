//! Hierarchical sinusoid tasks.
//!
//! A family fixes a phase `j ~ U[0, π]`; a task in that family draws an
//! amplitude `a ~ U[0.1, 5.0]` and maps `x ~ U[-5, 5]` to `a·sin(x + j)`.
//!
//! Randomness is split into substreams keyed by purpose and an index path
//! (for example `[step, family]`), so resizing one batch does not shift the
//! draws of any other.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const PHASE_RANGE: (f64, f64) = (0.0, PI);
pub const AMPLITUDE_RANGE: (f64, f64) = (0.1, 5.0);
pub const X_RANGE: (f64, f64) = (-5.0, 5.0);

/// One task distribution: all sinusoids sharing a phase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FamilyParams {
    phase: f64,
}

impl FamilyParams {
    pub fn new(phase: f64) -> Result<Self> {
        if !(PHASE_RANGE.0..=PHASE_RANGE.1).contains(&phase) {
            return Err(Error::config(format!("phase {phase} outside [0, π]")));
        }
        Ok(Self { phase })
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Task {
    amplitude: f64,
    phase: f64,
}

impl Task {
    pub fn new(family: FamilyParams, amplitude: f64) -> Result<Self> {
        if !(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1).contains(&amplitude) {
            return Err(Error::config(format!(
                "amplitude {amplitude} outside [0.1, 5.0]"
            )));
        }
        Ok(Self {
            amplitude,
            phase: family.phase,
        })
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn phase(&self) -> f64 {
        self.phase
    }

    /// `amplitude · sin(x + phase)`
    pub fn target(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }

    /// Labels an arbitrary set of inputs, for example an evaluation grid.
    pub fn label(&self, xs: Vec<f64>, role: SampleRole) -> SampleSet {
        let ys = xs.iter().map(|&x| self.target(x)).collect();
        SampleSet { xs, ys, role }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleRole {
    Support,
    Query,
}

impl SampleRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleRole::Support => "support",
            SampleRole::Query => "query",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub role: SampleRole,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Concatenation, keeping `self`'s role.
    pub fn concat(&self, other: &SampleSet) -> SampleSet {
        let mut out = self.clone();
        out.xs.extend(&other.xs);
        out.ys.extend(&other.ys);
        out
    }
}

/// Shot counts of the few-task few-shot setting.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShotConfig {
    /// L: tasks per family used for meta-finetuning.
    pub tasks_per_family: usize,
    /// K: support examples per task.
    pub support: usize,
    /// Q: query examples per meta-finetuning task.
    pub query: usize,
    /// Goal tasks per family in the outer loss.
    pub validation_tasks: usize,
}

impl Default for ShotConfig {
    /// 5-task 5-shot, Q = 5, two validation tasks per family.
    fn default() -> Self {
        Self {
            tasks_per_family: 5,
            support: 5,
            query: 5,
            validation_tasks: 2,
        }
    }
}

impl ShotConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("L", self.tasks_per_family),
            ("K", self.support),
            ("Q", self.query),
            ("validation_tasks", self.validation_tasks),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

pub fn sample_family(rng: &mut impl Rng) -> FamilyParams {
    FamilyParams {
        phase: rng.gen_range(PHASE_RANGE.0..=PHASE_RANGE.1),
    }
}

pub fn sample_task(family: FamilyParams, rng: &mut impl Rng) -> Task {
    Task {
        amplitude: rng.gen_range(AMPLITUDE_RANGE.0..=AMPLITUDE_RANGE.1),
        phase: family.phase,
    }
}

/// `n` fresh inputs drawn uniformly from [-5, 5], labeled by `task`.
pub fn draw_samples(
    task: &Task,
    n: usize,
    role: SampleRole,
    rng: &mut impl Rng,
) -> Result<SampleSet> {
    if n == 0 {
        return Err(Error::EmptyBatch("draw_samples"));
    }
    let xs = (0..n)
        .map(|_| rng.gen_range(X_RANGE.0..=X_RANGE.1))
        .collect();
    Ok(task.label(xs, role))
}

/// `n` evenly spaced points covering [-5, 5] inclusive.
pub fn grid(n: usize) -> Vec<f64> {
    let (lo, hi) = X_RANGE;
    match n {
        0 => vec![],
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Independent random substreams derived from one master seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedStreams {
    master: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Families = 2,
    Tasks = 3,
    Samples = 4,
    EvalFamilies = 5,
    EvalTasks = 6,
    EvalSamples = 7,
    /// Tasks drawn each from its own family, for the task-level baselines.
    Joint = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SeedStreams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    /// Seed for `purpose` at the index path `keys`: the master seed, the
    /// purpose tag and each key are folded in turn through splitmix64.
    pub fn seed(&self, purpose: Stream, keys: &[u64]) -> u64 {
        let mut h = splitmix64(self.master ^ splitmix64(purpose as u64));
        for &k in keys {
            h = splitmix64(h ^ splitmix64(k.wrapping_add(0x632B_E59B_D9B4_E019)));
        }
        h
    }

    pub fn rng(&self, purpose: Stream, keys: &[u64]) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed(purpose, keys))
    }
}

/// A task with its support and query samples.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEpisode {
    pub task: Task,
    pub support: SampleSet,
    pub query: SampleSet,
}

impl TaskEpisode {
    pub fn sample(task: Task, support: usize, query: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            task,
            support: draw_samples(&task, support, SampleRole::Support, rng)?,
            query: draw_samples(&task, query, SampleRole::Query, rng)?,
        })
    }

    /// A task from a freshly drawn family, for baselines that ignore family
    /// structure. `keys` identifies the slot, e.g. `[step, index]`.
    pub fn sample_joint(
        seeds: &SeedStreams,
        keys: &[u64],
        support: usize,
        query: usize,
    ) -> Result<Self> {
        let mut rng = seeds.rng(Stream::Joint, keys);
        let family = sample_family(&mut rng);
        let task = sample_task(family, &mut rng);
        Self::sample(task, support, query, &mut rng)
    }
}

/// Everything one family contributes to a training step: `L` meta tasks with
/// K support and Q query samples, and goal tasks with K support samples plus
/// Q fresh validation samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FamilyEpisode {
    pub family: FamilyParams,
    pub meta_tasks: Vec<TaskEpisode>,
    pub goal_tasks: Vec<TaskEpisode>,
}

/// Which substreams an episode draws from.
#[derive(Clone, Copy, Debug)]
pub(crate) struct EpisodeStreams {
    pub families: Stream,
    pub tasks: Stream,
    pub samples: Stream,
}

pub(crate) const TRAIN_STREAMS: EpisodeStreams = EpisodeStreams {
    families: Stream::Families,
    tasks: Stream::Tasks,
    samples: Stream::Samples,
};

pub(crate) const EVAL_STREAMS: EpisodeStreams = EpisodeStreams {
    families: Stream::EvalFamilies,
    tasks: Stream::EvalTasks,
    samples: Stream::EvalSamples,
};

impl FamilyEpisode {
    /// The episode for family slot `keys` (e.g. `[step, index]`).
    pub fn sample(seeds: &SeedStreams, keys: &[u64], shots: &ShotConfig) -> Result<Self> {
        Self::sample_from(seeds, TRAIN_STREAMS, keys, shots)
    }

    pub(crate) fn sample_from(
        seeds: &SeedStreams,
        streams: EpisodeStreams,
        keys: &[u64],
        shots: &ShotConfig,
    ) -> Result<Self> {
        shots.validate()?;
        let family = sample_family(&mut seeds.rng(streams.families, keys));
        let mut task_rng = seeds.rng(streams.tasks, keys);
        let mut sample_rng = seeds.rng(streams.samples, keys);
        let mut draw = |count: usize| -> Result<Vec<TaskEpisode>> {
            (0..count)
                .map(|_| {
                    let task = sample_task(family, &mut task_rng);
                    TaskEpisode::sample(task, shots.support, shots.query, &mut sample_rng)
                })
                .collect()
        };
        let meta_tasks = draw(shots.tasks_per_family)?;
        let goal_tasks = draw(shots.validation_tasks)?;
        Ok(Self {
            family,
            meta_tasks,
            goal_tasks,
        })
    }

    /// Rows of the episode dump CSV for this episode (no header). Meta tasks
    /// are numbered `0..L`, goal tasks continue from `L`.
    pub fn dump_rows(&self, episode: usize) -> String {
        let mut out = String::new();
        let tasks = self.meta_tasks.iter().chain(&self.goal_tasks);
        for (id, t) in tasks.enumerate() {
            for set in [&t.support, &t.query] {
                for (x, y) in set.xs.iter().zip(&set.ys) {
                    writeln!(
                        out,
                        "{episode},{:?},{id},{:?},{},{x:?},{y:?}",
                        self.family.phase,
                        t.task.amplitude,
                        set.role.as_str()
                    )
                    .unwrap();
                }
            }
        }
        out
    }
}

pub const EPISODE_DUMP_HEADER: &str = "episode,family_phase,task_id,amplitude,role,x,y";

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn family_phase_statistics() {
        let mut rng = SeedStreams::new(1).rng(Stream::Families, &[]);
        let phases: Vec<f64> = (0..10_000)
            .map(|_| sample_family(&mut rng).phase())
            .collect();
        assert!(phases.iter().all(|p| (0.0..=PI).contains(p)));
        let mean = phases.iter().sum::<f64>() / phases.len() as f64;
        assert!((mean - PI / 2.0).abs() < 0.05, "mean phase {mean}");
    }

    #[test]
    fn amplitude_statistics_and_phase_inheritance() {
        let mut rng = SeedStreams::new(2).rng(Stream::Tasks, &[]);
        let family = FamilyParams::new(1.25).unwrap();
        let tasks: Vec<Task> = (0..10_000).map(|_| sample_task(family, &mut rng)).collect();
        assert!(tasks.iter().all(|t| t.phase() == family.phase()));
        assert!(tasks.iter().all(|t| (0.1..=5.0).contains(&t.amplitude())));
        let mean = tasks.iter().map(Task::amplitude).sum::<f64>() / tasks.len() as f64;
        assert!((mean - 2.55).abs() < 0.05, "mean amplitude {mean}");
    }

    #[test]
    fn fixed_seed_repeats_and_distinct_seeds_differ() {
        let draw = |seed| {
            let mut rng = SeedStreams::new(seed).rng(Stream::Families, &[0]);
            let f = sample_family(&mut rng);
            (f, sample_task(f, &mut rng))
        };
        assert_eq!(draw(5), draw(5));
        assert_ne!(draw(5).0, draw(6).0);
    }

    #[test]
    fn sine_convention() {
        let t = Task::new(FamilyParams::new(0.0).unwrap(), 1.0).unwrap();
        assert!((t.target(PI / 2.0) - 1.0).abs() < 1e-15);
        let t = Task::new(FamilyParams::new(PI / 2.0).unwrap(), 2.0).unwrap();
        assert_eq!(t.target(0.0), 2.0);
    }

    #[test]
    fn small_amplitude_bounds_outputs() {
        let t = Task::new(FamilyParams::new(0.3).unwrap(), 0.1).unwrap();
        let mut rng = SeedStreams::new(3).rng(Stream::Samples, &[]);
        let s = draw_samples(&t, 1000, SampleRole::Support, &mut rng).unwrap();
        assert!(s.ys.iter().all(|y| y.abs() <= 0.1));
    }

    #[test]
    fn zero_samples_is_an_error() {
        let t = Task::new(FamilyParams::new(0.3).unwrap(), 1.0).unwrap();
        let mut rng = SeedStreams::new(3).rng(Stream::Samples, &[]);
        assert!(draw_samples(&t, 0, SampleRole::Query, &mut rng).is_err());
    }

    #[test]
    fn constructors_validate_ranges() {
        assert!(FamilyParams::new(-0.1).is_err());
        assert!(FamilyParams::new(3.2).is_err());
        let f = FamilyParams::new(1.0).unwrap();
        assert!(Task::new(f, 0.05).is_err());
        assert!(Task::new(f, 5.5).is_err());
    }

    #[test]
    fn episode_shapes_and_independent_query() {
        let shots = ShotConfig::default();
        let ep = FamilyEpisode::sample(&SeedStreams::new(9), &[0, 0], &shots).unwrap();
        assert_eq!(ep.meta_tasks.len(), 5);
        assert_eq!(ep.goal_tasks.len(), 2);
        for t in ep.meta_tasks.iter().chain(&ep.goal_tasks) {
            assert_eq!(t.task.phase(), ep.family.phase());
            assert_eq!(t.support.len(), 5);
            assert_eq!(t.query.len(), 5);
            assert_ne!(t.support.xs, t.query.xs);
        }
    }

    #[test]
    fn episode_slots_do_not_depend_on_batch_size() {
        let seeds = SeedStreams::new(4);
        let shots = ShotConfig::default();
        let a = FamilyEpisode::sample(&seeds, &[3, 1], &shots).unwrap();
        let more = ShotConfig {
            validation_tasks: 4,
            ..shots
        };
        let b = FamilyEpisode::sample(&seeds, &[3, 1], &more).unwrap();
        assert_eq!(a.family, b.family);
        assert_eq!(a.meta_tasks, b.meta_tasks);
        assert_eq!(a.goal_tasks[..], b.goal_tasks[..2]);
    }

    #[test]
    fn grid_covers_range() {
        let g = grid(100);
        assert_eq!(g.len(), 100);
        assert_eq!(g[0], -5.0);
        assert_eq!(g[99], 5.0);
    }

    #[test]
    fn dump_rows_follow_schema() {
        let shots = ShotConfig {
            tasks_per_family: 1,
            support: 1,
            query: 1,
            validation_tasks: 1,
        };
        let ep = FamilyEpisode::sample(&SeedStreams::new(1), &[0], &shots).unwrap();
        let rows = ep.dump_rows(7);
        let lines: Vec<&str> = rows.lines().collect();
        assert_eq!(lines.len(), 4);
        for l in &lines {
            assert_eq!(l.split(',').count(), EPISODE_DUMP_HEADER.split(',').count());
            assert!(l.starts_with("7,"));
        }
        assert!(lines[0].contains(",0,") && lines[0].contains(",support,"));
        assert!(lines[3].contains(",1,") && lines[3].contains(",query,"));
    }

    proptest! {
        #[test]
        fn samples_respect_ranges(seed in any::<u64>(), n in 1usize..50) {
            let seeds = SeedStreams::new(seed);
            let mut rng = seeds.rng(Stream::Samples, &[1, 2]);
            let f = sample_family(&mut rng);
            let t = sample_task(f, &mut rng);
            let s = draw_samples(&t, n, SampleRole::Query, &mut rng).unwrap();
            prop_assert_eq!(s.len(), n);
            for (x, y) in s.xs.iter().zip(&s.ys) {
                prop_assert!((-5.0..=5.0).contains(x));
                prop_assert_eq!(*y, t.amplitude() * (x + t.phase()).sin());
            }
        }
    }
}
