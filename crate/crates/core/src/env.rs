//! Deterministic continuous Mountain-Car and Pendulum.
//!
//! Both follow the usual classic-control formulations with a 200-step
//! horizon. Start states are drawn from `Xoshiro256PlusPlus` seeded with the
//! episode seed, so a seed fully determines an episode given the policy.
//!
//! Mountain-Car: observation `(position, velocity)`, action force in `[-1, 1]`,
//! `v += 0.0015 a - 0.0025 cos(3 p)`, goal `p >= 0.45` with `v >= 0`, reward
//! `+100` on reaching the goal and `-0.1 a^2` every step.
//!
//! Pendulum: observation `(cos th, sin th, th_dot)`, torque in `[-2, 2]`,
//! `th_ddot = 3g/(2l) sin th + 3u/(m l^2)` with `g = 10, m = l = 1, dt = 0.05`,
//! reward `-(th^2 + 0.1 th_dot^2 + 0.001 u^2)` evaluated before the step.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Action, ObservationWindow, Policy, DEFAULT_WINDOW};
use crate::seed::{rng_from_seed, Rng};

pub const HORIZON: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    MountainCar,
    Pendulum,
}

impl EnvId {
    pub const ALL: [EnvId; 2] = [EnvId::MountainCar, EnvId::Pendulum];

    pub fn name(self) -> &'static str {
        match self {
            EnvId::MountainCar => "mountaincar",
            EnvId::Pendulum => "pendulum",
        }
    }

    pub fn spec(self) -> EnvSpec {
        match self {
            EnvId::MountainCar => EnvSpec {
                obs_dim: 2,
                action_dim: 1,
                action_low: vec![-1.0],
                action_high: vec![1.0],
                dt: 1.0,
                horizon: HORIZON,
                discount: 0.99,
            },
            EnvId::Pendulum => EnvSpec {
                obs_dim: 3,
                action_dim: 1,
                action_low: vec![-2.0],
                action_high: vec![2.0],
                dt: 0.05,
                horizon: HORIZON,
                discount: 0.99,
            },
        }
    }

    /// Sensor names accepted by the program parser.
    pub fn sensor_names(self) -> &'static [&'static str] {
        match self {
            EnvId::MountainCar => &["position", "velocity"],
            EnvId::Pendulum => &["cos", "sin", "thdot"],
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mountaincar" | "mountain-car" => Ok(EnvId::MountainCar),
            "pendulum" => Ok(EnvId::Pendulum),
            other => Err(Error::Config(format!(
                "env: unknown environment {other:?} (expected \"mountaincar\" or \"pendulum\")"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub action_low: Vec<f64>,
    pub action_high: Vec<f64>,
    /// Step duration used by PID integral and derivative terms. Mountain-Car
    /// has no physical time step, so one step counts as one unit.
    pub dt: f64,
    pub horizon: usize,
    pub discount: f64,
}

impl EnvSpec {
    pub fn clip(&self, action: &[f64]) -> Vec<f64> {
        action
            .iter()
            .zip(self.action_low.iter().zip(&self.action_high))
            .map(|(a, (lo, hi))| a.clamp(*lo, *hi))
            .collect()
    }

    /// Half-width of the action box per component.
    pub fn action_half_range(&self) -> Vec<f64> {
        self.action_low.iter().zip(&self.action_high).map(|(lo, hi)| 0.5 * (hi - lo)).collect()
    }
}

const MC_MIN_POS: f64 = -1.2;
const MC_MAX_POS: f64 = 0.6;
const MC_MAX_SPEED: f64 = 0.07;
const MC_GOAL: f64 = 0.45;
const MC_POWER: f64 = 0.0015;

const PEND_MAX_SPEED: f64 = 8.0;
const PEND_G: f64 = 10.0;
const PEND_M: f64 = 1.0;
const PEND_L: f64 = 1.0;

/// Maps an angle into `[-pi, pi)`.
pub fn normalize_angle(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Outcome of a single environment step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub window: ObservationWindow,
    pub next_obs: Vec<f64>,
    pub applied_action: Vec<f64>,
    pub reward: f64,
    /// The episode is over (goal reached or horizon hit).
    pub done: bool,
    /// The episode ended in an absorbing state (not a time-out).
    pub terminal: bool,
}

#[derive(Debug, Clone)]
pub struct Env {
    id: EnvId,
    spec: EnvSpec,
    window_len: usize,
    state: [f64; 2],
    steps: usize,
    done: bool,
    window: ObservationWindow,
}

impl Env {
    pub fn new(id: EnvId) -> Self {
        Self::with_window(id, DEFAULT_WINDOW)
    }

    pub fn with_window(id: EnvId, window_len: usize) -> Self {
        let spec = id.spec();
        let window = ObservationWindow::padded(&vec![0.0; spec.obs_dim], window_len.max(2), spec.dt)
            .expect("zero observation is valid");
        Self { id, spec, window_len: window_len.max(2), state: [0.0; 2], steps: 0, done: true, window }
    }

    pub fn id(&self) -> EnvId {
        self.id
    }

    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    /// Raw simulator state: `(position, velocity)` or `(theta, theta_dot)`.
    pub fn state(&self) -> [f64; 2] {
        self.state
    }

    pub fn window(&self) -> &ObservationWindow {
        &self.window
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn reset(&mut self, seed: u64) -> ObservationWindow {
        let mut rng = rng_from_seed(seed);
        let state = match self.id {
            EnvId::MountainCar => [rng.gen_range(-0.6..=-0.4), 0.0],
            EnvId::Pendulum => [rng.gen_range(-PI..=PI), rng.gen_range(-1.0..=1.0)],
        };
        self.set_state(state)
    }

    /// Starts an episode from an explicit simulator state.
    pub fn set_state(&mut self, state: [f64; 2]) -> ObservationWindow {
        self.state = match self.id {
            EnvId::MountainCar => state,
            EnvId::Pendulum => [normalize_angle(state[0]), state[1]],
        };
        self.steps = 0;
        self.done = false;
        self.window = ObservationWindow::padded(&self.observe(), self.window_len, self.spec.dt)
            .expect("simulator state is finite");
        self.window.clone()
    }

    pub fn observe(&self) -> Vec<f64> {
        match self.id {
            EnvId::MountainCar => vec![self.state[0], self.state[1]],
            EnvId::Pendulum => vec![self.state[0].cos(), self.state[0].sin(), self.state[1]],
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeDone);
        }
        if action.len() != self.spec.action_dim {
            return Err(Error::Dimension { expected: self.spec.action_dim, got: action.len() });
        }
        if !action.iter().all(|a| a.is_finite()) {
            return Err(Error::NonFinite { part: "action" });
        }
        let applied = self.spec.clip(action);
        let (reward, terminal) = match self.id {
            EnvId::MountainCar => self.step_mountain_car(applied[0]),
            EnvId::Pendulum => (self.step_pendulum(applied[0]), false),
        };
        self.steps += 1;
        self.done = terminal || self.steps >= self.spec.horizon;
        let next_obs = self.observe();
        self.window.push(&next_obs);
        Ok(StepOutcome {
            window: self.window.clone(),
            next_obs,
            applied_action: applied,
            reward,
            done: self.done,
            terminal,
        })
    }

    fn step_mountain_car(&mut self, force: f64) -> (f64, bool) {
        let [mut position, mut velocity] = self.state;
        velocity += force * MC_POWER - 0.0025 * (3.0 * position).cos();
        velocity = velocity.clamp(-MC_MAX_SPEED, MC_MAX_SPEED);
        position += velocity;
        position = position.clamp(MC_MIN_POS, MC_MAX_POS);
        if position == MC_MIN_POS && velocity < 0.0 {
            velocity = 0.0;
        }
        self.state = [position, velocity];
        let goal = position >= MC_GOAL && velocity >= 0.0;
        let mut reward = -0.1 * force * force;
        if goal {
            reward += 100.0;
        }
        (reward, goal)
    }

    fn step_pendulum(&mut self, u: f64) -> f64 {
        let [th, thdot] = self.state;
        let cost = normalize_angle(th).powi(2) + 0.1 * thdot * thdot + 0.001 * u * u;
        let mut new_thdot = thdot + (3.0 * PEND_G / (2.0 * PEND_L) * th.sin() + 3.0 / (PEND_M * PEND_L * PEND_L) * u) * self.spec.dt;
        new_thdot = new_thdot.clamp(-PEND_MAX_SPEED, PEND_MAX_SPEED);
        let new_th = th + new_thdot * self.spec.dt;
        self.state = [normalize_angle(new_th), new_thdot];
        -cost
    }
}

/// Exploration noise added to actions before clipping.
pub trait NoiseProcess {
    fn reset(&mut self);
    fn sample(&mut self) -> Vec<f64>;
}

/// Ornstein-Uhlenbeck process `x += theta (mu - x) + sigma N(0, 1)` with unit
/// time step and zero mean, scaled per component.
#[derive(Debug, Clone)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    pub scale: Vec<f64>,
    state: Vec<f64>,
    rng: Rng,
}

impl OuNoise {
    pub fn new(theta: f64, sigma: f64, scale: Vec<f64>, rng: Rng) -> Self {
        let state = vec![0.0; scale.len()];
        Self { theta, sigma, scale, state, rng }
    }
}

impl NoiseProcess for OuNoise {
    fn reset(&mut self) {
        self.state.iter_mut().for_each(|x| *x = 0.0);
    }

    fn sample(&mut self) -> Vec<f64> {
        for x in self.state.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut self.rng);
            *x += -self.theta * *x + self.sigma * n;
        }
        self.state.iter().zip(&self.scale).map(|(x, s)| x * s).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub window: ObservationWindow,
    /// Action requested by the policy (plus noise), before clipping.
    pub action: Vec<f64>,
    pub applied_action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub seed: u64,
    pub transitions: Vec<Transition>,
    pub total_reward: f64,
}

/// One line of the JSON-lines trajectory format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub t: usize,
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    pub applied_action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn windows(&self) -> impl Iterator<Item = &ObservationWindow> {
        self.transitions.iter().map(|t| &t.window)
    }

    pub fn reached_terminal(&self) -> bool {
        self.transitions.last().is_some_and(|t| t.terminal)
    }

    /// Writes one JSON object per transition.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (t, tr) in self.transitions.iter().enumerate() {
            let rec = TransitionRecord {
                t,
                obs: tr.window.newest().to_vec(),
                action: tr.action.clone(),
                applied_action: tr.applied_action.clone(),
                reward: tr.reward,
                done: tr.done,
            };
            serde_json::to_writer(&mut out, &rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TransitionRecord>> {
        let mut records = Vec::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(records)
    }
}

/// Runs one full episode. With `noise`, the executed action is
/// `policy(w) + noise` before clipping.
pub fn rollout<P: Policy + ?Sized>(
    env: &mut Env,
    policy: &P,
    seed: u64,
    mut noise: Option<&mut dyn NoiseProcess>,
) -> Result<Trajectory> {
    policy.reset();
    if let Some(n) = noise.as_deref_mut() {
        n.reset();
    }
    let mut window = env.reset(seed);
    let mut transitions = Vec::with_capacity(env.spec().horizon);
    let mut total_reward = 0.0;
    loop {
        let Action(mut action) = policy.act(&window)?;
        if let Some(n) = noise.as_deref_mut() {
            for (a, e) in action.iter_mut().zip(n.sample()) {
                *a += e;
            }
        }
        let out = env.step(&action)?;
        total_reward += out.reward;
        transitions.push(Transition {
            window,
            action,
            applied_action: out.applied_action,
            reward: out.reward,
            next_obs: out.next_obs,
            done: out.done,
            terminal: out.terminal,
        });
        window = out.window;
        if out.done {
            break;
        }
    }
    Ok(Trajectory { seed, transitions, total_reward })
}

/// Mean and population standard deviation of noise-free episode returns over
/// seeds `seed_base..seed_base + n`.
pub fn episode_score<P: Policy + ?Sized>(policy: &P, env: EnvId, n: usize, seed_base: u64) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::Config("episode count must be >= 1".into()));
    }
    let mut sim = Env::new(env);
    let mut returns = Vec::with_capacity(n);
    for i in 0..n as u64 {
        returns.push(rollout(&mut sim, policy, seed_base + i, None)?.total_reward);
    }
    Ok(mean_std(&returns))
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ConstantPolicy;

    #[test]
    fn reset_is_deterministic() {
        let mut env = Env::new(EnvId::Pendulum);
        let a = env.reset(7);
        let b = env.reset(7);
        assert_eq!(a, b);
        assert_ne!(a, env.reset(8));
    }

    #[test]
    fn start_distributions() {
        let mut mc = Env::new(EnvId::MountainCar);
        let mut pd = Env::new(EnvId::Pendulum);
        for seed in 0..500 {
            mc.reset(seed);
            let [p, v] = mc.state();
            assert!((-0.6..=-0.4).contains(&p) && v == 0.0);
            pd.reset(seed);
            let [th, thdot] = pd.state();
            assert!((-PI..=PI).contains(&th) && (-1.0..=1.0).contains(&thdot));
        }
    }

    #[test]
    fn pendulum_upright_is_a_fixed_point() {
        let mut env = Env::new(EnvId::Pendulum);
        env.set_state([0.0, 0.0]);
        let out = env.step(&[0.0]).unwrap();
        assert_eq!(env.state(), [0.0, 0.0]);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn pendulum_bottom_reward() {
        let mut env = Env::new(EnvId::Pendulum);
        env.set_state([PI, 0.0]);
        let out = env.step(&[0.0]).unwrap();
        assert!((out.reward + PI * PI).abs() < 1e-12);
    }

    #[test]
    fn mountain_car_gravity_step() {
        let mut env = Env::new(EnvId::MountainCar);
        env.set_state([-0.5, 0.0]);
        env.step(&[0.0]).unwrap();
        let v = -0.0025 * (-1.5f64).cos();
        assert_eq!(env.state(), [-0.5 + v, v]);
    }

    #[test]
    fn step_after_done_is_an_error() {
        let mut env = Env::new(EnvId::MountainCar);
        env.reset(0);
        for _ in 0..HORIZON {
            env.step(&[0.0]).unwrap();
        }
        assert!(matches!(env.step(&[0.0]), Err(Error::EpisodeDone)));
    }

    #[test]
    fn actions_are_clipped() {
        let mut env = Env::new(EnvId::Pendulum);
        env.reset(3);
        let out = env.step(&[10.0]).unwrap();
        assert_eq!(out.applied_action, vec![2.0]);
        let mut env = Env::new(EnvId::MountainCar);
        env.reset(3);
        let out = env.step(&[-4.0]).unwrap();
        assert_eq!(out.applied_action, vec![-1.0]);
        assert!((out.reward + 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_torque_pendulum_rollout_matches_hand_simulation() {
        let seed = 11;
        let mut env = Env::new(EnvId::Pendulum);
        let traj = rollout(&mut env, &ConstantPolicy(vec![0.0]), seed, None).unwrap();
        assert_eq!(traj.len(), HORIZON);

        // Independent re-simulation with zero torque.
        env.reset(seed);
        let [mut th, mut thdot] = env.state();
        let mut expected = 0.0;
        for _ in 0..HORIZON {
            let a = normalize_angle(th);
            expected -= a * a + 0.1 * thdot * thdot;
            thdot = (thdot + 15.0 * th.sin() * 0.05).clamp(-8.0, 8.0);
            th = normalize_angle(th + thdot * 0.05);
        }
        assert!((traj.total_reward - expected).abs() < 1e-9);
    }

    #[test]
    fn coasting_mountain_car_never_reaches_goal() {
        let mut env = Env::new(EnvId::MountainCar);
        env.set_state([-0.5, 0.0]);
        let policy = ConstantPolicy(vec![0.0]);
        let traj = rollout(&mut env, &policy, 0, None).unwrap();
        assert!(!traj.reached_terminal());
        assert!(traj.total_reward <= 0.0);
        for seed in 0..20 {
            let traj = rollout(&mut env, &policy, seed, None).unwrap();
            assert!(!traj.reached_terminal());
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let mut env = Env::new(EnvId::MountainCar);
        let policy = ConstantPolicy(vec![0.3]);
        let a = rollout(&mut env, &policy, 5, None).unwrap();
        let b = rollout(&mut env, &policy, 5, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noisy_rollout_records_noisy_action() {
        let mut env = Env::new(EnvId::Pendulum);
        let mut noise = OuNoise::new(0.15, 0.2, vec![2.0], rng_from_seed(1));
        let traj = rollout(&mut env, &ConstantPolicy(vec![0.0]), 5, Some(&mut noise)).unwrap();
        assert!(traj.transitions.iter().any(|t| t.action[0] != 0.0));
        for t in &traj.transitions {
            assert_eq!(t.applied_action[0], t.action[0].clamp(-2.0, 2.0));
        }
    }

    #[test]
    fn single_episode_score_has_zero_spread() {
        let (mean, std) = episode_score(&ConstantPolicy(vec![0.0]), EnvId::Pendulum, 1, 3).unwrap();
        let mut env = Env::new(EnvId::Pendulum);
        let traj = rollout(&mut env, &ConstantPolicy(vec![0.0]), 3, None).unwrap();
        assert_eq!(mean, traj.total_reward);
        assert_eq!(std, 0.0);
    }

    #[test]
    fn jsonl_lines_match_transitions() {
        let mut env = Env::new(EnvId::MountainCar);
        let traj = rollout(&mut env, &ConstantPolicy(vec![0.5]), 2, None).unwrap();
        let mut buf = Vec::new();
        traj.write_jsonl(&mut buf).unwrap();
        let records = Trajectory::read_jsonl(&buf[..]).unwrap();
        assert_eq!(records.len(), traj.len());
        assert_eq!(records[3].t, 3);
        assert_eq!(records[3].obs, traj.transitions[3].window.newest());
        assert!(records.last().unwrap().done);
    }

    #[test]
    fn unknown_env_is_rejected() {
        let err = "torcs".parse::<EnvId>().unwrap_err();
        assert!(err.to_string().contains("env"));
    }
}
