//! Projection of a mixed policy back onto a programmatic family by
//! DAgger-style imitation.

mod synth;

pub use synth::{synthesize, SynthConfig, SynthResult};

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dsl::{Program, ProgramPolicy};
use crate::env::{rollout, Env, EnvId};
use crate::error::{Error, Result};
use crate::policy::{empirical_distance, Action, ObservationWindow, Policy, StateSampleSet};
use crate::seed::{derive_rng, derive_seed, STREAM_ENV, STREAM_SYNTH};
use crate::tree::{fit_tree, RegressionTree, TreeNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Dsl,
    Tree,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Dsl => "dsl",
            Family::Tree => "tree",
        })
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dsl" => Ok(Family::Dsl),
            "tree" => Ok(Family::Tree),
            other => Err(Error::Config(format!("family: unknown family {other:?} (expected dsl or tree)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    /// DAgger rounds after the initial oracle rollouts.
    pub rounds: usize,
    pub episodes_per_round: usize,
    /// Every `heldout_every`-th trajectory is held out from fitting.
    pub heldout_every: u64,
    pub synth: SynthConfig,
    pub tree_max_depth: usize,
    pub tree_min_leaf: usize,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            episodes_per_round: 10,
            heldout_every: 5,
            synth: SynthConfig::default(),
            tree_max_depth: 6,
            tree_min_leaf: 1,
        }
    }
}

/// A policy from one of the programmatic families.
#[derive(Debug, Clone, PartialEq)]
pub enum Programmatic {
    Program(ProgramPolicy),
    Tree(RegressionTree),
}

impl Programmatic {
    pub fn family(&self) -> Family {
        match self {
            Programmatic::Program(_) => Family::Dsl,
            Programmatic::Tree(_) => Family::Tree,
        }
    }

    /// DSL text for programs, JSON for trees.
    pub fn to_checkpoint(&self) -> Result<String> {
        match self {
            Programmatic::Program(p) => Ok(format!("{}\n", p.program())),
            Programmatic::Tree(t) => t.to_json(),
        }
    }

    pub fn checkpoint_extension(&self) -> &'static str {
        match self {
            Programmatic::Program(_) => "prog",
            Programmatic::Tree(_) => "json",
        }
    }

    /// The best constant action for `env`: all zeros.
    pub fn zero(env: EnvId, family: Family) -> Self {
        let spec = env.spec();
        match family {
            Family::Dsl => Programmatic::Program(
                ProgramPolicy::new(Program::Const(vec![0.0; spec.action_dim]), spec.obs_dim, spec.action_dim)
                    .expect("constant program is well typed"),
            ),
            Family::Tree => Programmatic::Tree(RegressionTree {
                obs_dim: spec.obs_dim,
                action_dim: spec.action_dim,
                max_depth: 0,
                min_leaf: 1,
                root: crate::tree::TreeNode::Leaf { value: vec![0.0; spec.action_dim] },
            }),
        }
    }
}

impl Policy for Programmatic {
    fn action_dim(&self) -> usize {
        match self {
            Programmatic::Program(p) => p.action_dim(),
            Programmatic::Tree(t) => t.action_dim(),
        }
    }

    fn act(&self, w: &ObservationWindow) -> Result<Action> {
        match self {
            Programmatic::Program(p) => p.act(w),
            Programmatic::Tree(t) => t.act(w),
        }
    }
}

/// One labelled state and where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo {
    pub window: ObservationWindow,
    pub action: Vec<f64>,
    /// Global trajectory index; drives the held-out split.
    pub trajectory: u64,
    /// Projection call that collected the state.
    pub projection: u32,
    /// DAgger round within that projection.
    pub round: u32,
}

/// Aggregated demonstrations; only ever appended to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DemoSet {
    demos: Vec<Demo>,
    trajectories: u64,
    projections: u32,
}

impl DemoSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn demos(&self) -> &[Demo] {
        &self.demos
    }

    pub fn trajectories(&self) -> u64 {
        self.trajectories
    }

    /// Appends one trajectory's labelled windows and returns its index.
    pub fn push_trajectory(&mut self, windows: Vec<ObservationWindow>, labels: Vec<Vec<f64>>, round: u32) -> u64 {
        let t = self.trajectories;
        self.trajectories += 1;
        for (window, action) in windows.into_iter().zip(labels) {
            self.demos.push(Demo { window, action, trajectory: t, projection: self.projections, round });
        }
        t
    }

    /// Replaces every label by `h` evaluated on the stored window.
    pub fn relabel<P: Policy + ?Sized>(&mut self, h: &P) -> Result<()> {
        h.reset();
        for d in &mut self.demos {
            d.action = h.act(&d.window)?.into_inner();
        }
        Ok(())
    }

    pub fn is_heldout(&self, d: &Demo, every: u64) -> bool {
        every > 0 && d.trajectory % every == every - 1
    }

    /// Held-out windows grouped by trajectory, in order.
    pub fn heldout_samples(&self, every: u64) -> StateSampleSet {
        let mut set = StateSampleSet::new();
        let mut current: Option<(u64, Vec<ObservationWindow>)> = None;
        for d in self.demos.iter().filter(|d| self.is_heldout(d, every)) {
            match &mut current {
                Some((t, ws)) if *t == d.trajectory => ws.push(d.window.clone()),
                _ => {
                    if let Some((_, ws)) = current.take() {
                        set.push_episode(ws);
                    }
                    current = Some((d.trajectory, vec![d.window.clone()]));
                }
            }
        }
        if let Some((_, ws)) = current {
            set.push_episode(ws);
        }
        set
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for d in &self.demos {
            serde_json::to_writer(&mut out, d)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut set = DemoSet::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let d: Demo = serde_json::from_str(&line)?;
            set.trajectories = set.trajectories.max(d.trajectory + 1);
            set.projections = set.projections.max(d.projection + 1);
            set.demos.push(d);
        }
        Ok(set)
    }
}

#[derive(Debug, Clone)]
pub struct ProjectionReport {
    pub policy: Programmatic,
    /// Imitation RMSE of the round-`k` fit on the round-`k` training data.
    pub round_rmse: Vec<f64>,
    /// Aggregated dataset size after each round.
    pub sizes: Vec<usize>,
    /// States labelled in each round.
    pub labeled: Vec<usize>,
    /// Carried states re-labelled before round 0.
    pub carried: usize,
    /// Held-out RMS distance between the returned policy and the oracle.
    pub epsilon_hat: f64,
    pub heldout_states: usize,
    /// Synthesis fell back to a constant or ran out of budget.
    pub flagged: bool,
    pub demos: DemoSet,
}

impl ProjectionReport {
    pub fn aggregation(&self) -> AggregationLog {
        AggregationLog { carried: self.carried, sizes: self.sizes.clone(), labeled: self.labeled.clone() }
    }
}

/// Dataset sizes of one projection, round by round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationLog {
    pub carried: usize,
    pub sizes: Vec<usize>,
    pub labeled: Vec<usize>,
}

impl AggregationLog {
    /// Every round grew the dataset by exactly the states it labelled.
    pub fn holds(&self) -> bool {
        self.sizes.len() == self.labeled.len()
            && self.sizes.iter().zip(&self.labeled).enumerate().all(|(k, (&size, &lab))| {
                let before = if k == 0 { self.carried } else { self.sizes[k - 1] };
                size == before + lab
            })
    }
}

/// Empirical distance between `pi` and `h` on held-out states.
pub fn measure_residual<A, B>(pi: &A, h: &B, heldout: &StateSampleSet) -> Result<f64>
where
    A: Policy + ?Sized,
    B: Policy + ?Sized,
{
    empirical_distance(pi, h, heldout)
}

fn fit<H: Policy + ?Sized>(
    family: Family,
    env: EnvId,
    demos: &DemoSet,
    cfg: &ProjectConfig,
    h: &H,
    seed: u64,
) -> Result<(Programmatic, f64, bool)> {
    let spec = env.spec();
    let train: Vec<&Demo> = demos.demos.iter().filter(|d| !demos.is_heldout(d, cfg.heldout_every)).collect();
    let train: Vec<&Demo> = if train.is_empty() { demos.demos.iter().collect() } else { train };
    let windows: Vec<&ObservationWindow> = train.iter().map(|d| &d.window).collect();
    let targets: Vec<&[f64]> = train.iter().map(|d| d.action.as_slice()).collect();
    match family {
        Family::Dsl => {
            let mut rng = derive_rng(seed, STREAM_SYNTH, 0);
            let r = synthesize(&windows, &targets, spec.action_dim, &cfg.synth, &mut rng)?;
            if r.constant_fallback {
                warn!("synthesis found nothing better than a constant");
            }
            let policy = ProgramPolicy::new(r.program, spec.obs_dim, spec.action_dim)?;
            Ok((Programmatic::Program(policy), r.rmse, r.constant_fallback))
        }
        Family::Tree => {
            let feats: Vec<&[f64]> = windows.iter().map(|w| w.newest()).collect();
            let mut tree = fit_tree(&feats, &targets, cfg.tree_max_depth, cfg.tree_min_leaf)?;
            sharpen(&mut tree.root, (0..windows.len()).collect(), &windows, h)?;
            let mse = crate::tree::tree_mse(&tree, &feats, &targets);
            Ok((Programmatic::Tree(tree), mse.sqrt(), false))
        }
    }
}

/// Moves each split threshold, within the gap between the nearest training
/// values on either side, to where `h` changes along the split feature,
/// found by bisection on a line through one of the two bracketing states.
/// The training partition is unchanged.
fn sharpen<H: Policy + ?Sized>(node: &mut TreeNode, idx: Vec<usize>, windows: &[&ObservationWindow], h: &H) -> Result<()> {
    let TreeNode::Split { feature, threshold, left, right } = node else { return Ok(()) };
    let f = *feature;
    let x = |i: usize| windows[i].newest()[f];
    let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| x(i) < *threshold);
    let a = l.iter().copied().max_by(|&i, &j| x(i).total_cmp(&x(j)));
    let b = r.iter().copied().min_by(|&i, &j| x(i).total_cmp(&x(j)));
    if let (Some(a), Some(b)) = (a, b) {
        let (lo, hi) = (x(a), x(b));
        for base in [a, b] {
            let mut line = Line::new(windows[base], f)?;
            let (ya, yb) = (line.eval(h, lo)?, line.eval(h, hi)?);
            if ya == yb {
                continue;
            }
            let (mut lo, mut hi) = (lo, hi);
            for _ in 0..64 {
                let mid = lo + 0.5 * (hi - lo);
                if mid <= lo || mid >= hi {
                    break;
                }
                let y = line.eval(h, mid)?;
                if sq_dist(&y, &ya) <= sq_dist(&y, &yb) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            *threshold = hi;
            break;
        }
    }
    sharpen(left, l, windows, h)?;
    sharpen(right, r, windows, h)
}

/// A window whose newest value of one sensor can be varied.
struct Line {
    rows: Vec<Vec<f64>>,
    sensor: usize,
    dt: f64,
}

impl Line {
    fn new(w: &ObservationWindow, sensor: usize) -> Result<Self> {
        Ok(Self { rows: w.samples().map(<[f64]>::to_vec).collect(), sensor, dt: w.dt() })
    }

    fn eval<H: Policy + ?Sized>(&mut self, h: &H, v: f64) -> Result<Vec<f64>> {
        let last = self.rows.len() - 1;
        self.rows[last][self.sensor] = v;
        let w = ObservationWindow::from_samples(&self.rows, self.dt)?;
        h.reset();
        Ok(h.act(&w)?.into_inner())
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Projects `h` onto `family`.
///
/// Round 0 rolls out `h`; rounds `1..=cfg.rounds` roll out the previous fit.
/// Every visited state is labelled by `h` and appended to the carried
/// demonstrations, which are first re-labelled by `h`. Returns the last fit.
pub fn project<H: Policy + ?Sized>(
    h: &H,
    env: EnvId,
    family: Family,
    cfg: &ProjectConfig,
    carried: &DemoSet,
    seed: u64,
) -> Result<ProjectionReport> {
    let mut demos = carried.clone();
    demos.relabel(h)?;
    let carried_len = demos.len();
    let mut sizes = Vec::with_capacity(cfg.rounds + 1);
    let mut labeled = Vec::with_capacity(cfg.rounds + 1);
    let mut round_rmse = Vec::with_capacity(cfg.rounds + 1);
    let mut flagged = false;
    let mut current: Option<Programmatic> = None;
    let mut env_inst = Env::new(env);
    for round in 0..=cfg.rounds {
        let before = demos.len();
        let mut count = 0;
        for ep in 0..cfg.episodes_per_round {
            let ep_seed = derive_seed(seed, STREAM_ENV, (round * cfg.episodes_per_round + ep) as u64);
            let traj = match &current {
                None => rollout(&mut env_inst, h, ep_seed, None)?,
                Some(pi) => rollout(&mut env_inst, pi, ep_seed, None)?,
            };
            let windows: Vec<ObservationWindow> = traj.windows().cloned().collect();
            h.reset();
            let labels = windows.iter().map(|w| h.act(w).map(Action::into_inner)).collect::<Result<Vec<_>>>()?;
            count += windows.len();
            demos.push_trajectory(windows, labels, round as u32);
        }
        if demos.len() != before + count {
            return Err(Error::Config(format!(
                "aggregation invariant violated in round {round}: {} != {before} + {count}",
                demos.len()
            )));
        }
        info!("projection round {round}: |demos| = {} = {before} + {count}", demos.len());
        sizes.push(demos.len());
        labeled.push(count);
        let (pi, rmse, flag) = fit(family, env, &demos, cfg, h, derive_seed(seed, STREAM_SYNTH, round as u64))?;
        flagged |= flag;
        round_rmse.push(rmse);
        current = Some(pi);
    }
    demos.projections += 1;
    let policy = current.expect("at least one round runs");
    let heldout = demos.heldout_samples(cfg.heldout_every);
    let (epsilon_hat, heldout_states) = if heldout.is_empty() {
        warn!("no held-out trajectories; residual measured on all states");
        let all = StateSampleSet::from_windows(demos.demos.iter().map(|d| d.window.clone()).collect());
        (measure_residual(&policy, h, &all)?, 0)
    } else {
        (measure_residual(&policy, h, &heldout)?, heldout.len())
    };
    Ok(ProjectionReport {
        policy,
        round_rmse,
        sizes,
        labeled,
        carried: carried_len,
        epsilon_hat,
        heldout_states,
        flagged,
        demos,
    })
}

/// [`synthesize`] on the training part of a demonstration set.
pub fn synthesize_dsl(data: &DemoSet, env: EnvId, cfg: &SynthConfig, seed: u64) -> Result<SynthResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let windows: Vec<&ObservationWindow> = data.demos.iter().map(|d| &d.window).collect();
    let targets: Vec<&[f64]> = data.demos.iter().map(|d| d.action.as_slice()).collect();
    synthesize(&windows, &targets, env.spec().action_dim, cfg, &mut derive_rng(seed, STREAM_SYNTH, 0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ConstantPolicy;

    fn small() -> ProjectConfig {
        ProjectConfig { rounds: 1, episodes_per_round: 5, ..ProjectConfig::default() }
    }

    #[test]
    fn constant_oracle_projects_exactly() {
        let h = ConstantPolicy(vec![0.5]);
        let r = project(&h, EnvId::Pendulum, Family::Dsl, &small(), &DemoSet::new(), 1).unwrap();
        assert_eq!(r.epsilon_hat, 0.0);
        let Programmatic::Program(p) = &r.policy else { panic!() };
        assert_eq!(p.program(), &Program::constant(0.5));
    }

    #[test]
    fn sizes_grow_by_labelled_counts() {
        let h = ConstantPolicy(vec![0.2]);
        let first = project(&h, EnvId::MountainCar, Family::Tree, &small(), &DemoSet::new(), 2).unwrap();
        let r = project(&h, EnvId::MountainCar, Family::Tree, &small(), &first.demos, 3).unwrap();
        assert_eq!(r.carried, first.demos.len());
        assert_eq!(r.sizes[0], r.carried + r.labeled[0]);
        for k in 1..r.sizes.len() {
            assert_eq!(r.sizes[k], r.sizes[k - 1] + r.labeled[k]);
        }
    }

    #[test]
    fn carried_states_are_relabelled() {
        let a = ConstantPolicy(vec![0.2]);
        let b = ConstantPolicy(vec![-0.4]);
        let first = project(&a, EnvId::Pendulum, Family::Dsl, &small(), &DemoSet::new(), 4).unwrap();
        let r = project(&b, EnvId::Pendulum, Family::Dsl, &small(), &first.demos, 5).unwrap();
        assert!(r.demos.demos().iter().all(|d| d.action == vec![-0.4]));
        assert!(r.demos.demos().iter().any(|d| d.projection == 0));
        assert!(r.demos.demos().iter().any(|d| d.projection == 1));
    }

    #[test]
    fn residual_of_constant_gap() {
        let set = StateSampleSet::from_windows(vec![ObservationWindow::padded(&[0.0, 0.0], 10, 1.0).unwrap(); 3]);
        let d = measure_residual(&ConstantPolicy(vec![0.1]), &ConstantPolicy(vec![0.3]), &set).unwrap();
        assert!((d - 0.2).abs() < 1e-15);
        let mut doubled = set.clone();
        doubled.push_episode(set.windows().cloned().collect());
        let d2 = measure_residual(&ConstantPolicy(vec![0.1]), &ConstantPolicy(vec![0.3]), &doubled).unwrap();
        assert!((d2 - d).abs() < 1e-15);
    }

    #[test]
    fn demo_set_round_trips_through_jsonl() {
        let h = ConstantPolicy(vec![0.3]);
        let r = project(&h, EnvId::MountainCar, Family::Tree, &small(), &DemoSet::new(), 6).unwrap();
        let mut buf = Vec::new();
        r.demos.write_jsonl(&mut buf).unwrap();
        let back = DemoSet::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, r.demos);
    }

    #[test]
    fn heldout_is_every_fifth_trajectory() {
        let h = ConstantPolicy(vec![0.0]);
        let r = project(&h, EnvId::MountainCar, Family::Tree, &small(), &DemoSet::new(), 7).unwrap();
        assert_eq!(r.demos.trajectories(), 10);
        assert_eq!(r.heldout_states, 2 * 200);
    }
}
