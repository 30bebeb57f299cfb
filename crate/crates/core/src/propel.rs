//! The lift-and-project loop and its degenerate baselines.

use std::sync::Arc;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::dsl::{parse, Program, ProgramPolicy};
use crate::env::{episode_score, EnvId};
use crate::error::{Error, Result};
use crate::neural::{DdpgConfig, LiftConfig, Lifter, NeuralPolicy};
use crate::policy::{ConstantPolicy, MixedPolicy, Policy};
use crate::project::{project, AggregationLog, DemoSet, Family, ProjectConfig, Programmatic};
use crate::seed::{derive_seed, EVAL_SEED_BASE, STREAM_INIT, STREAM_SYNTH};

const STREAM_LIFT: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IppgConfig {
    pub env: EnvId,
    pub family: Family,
    /// Lift/project iterations `T`.
    pub iterations: usize,
    /// Mirror-descent rate; scales the actor step size.
    pub mirror_rate: f64,
    /// `lambda` in `h = pi + lambda * f`.
    pub mixing: f64,
    /// Training episodes per lift (`m`).
    pub update_episodes: usize,
    pub eval_episodes: usize,
    pub eval_seed_base: u64,
    pub seed: u64,
    pub project: ProjectConfig,
    pub ddpg: DdpgConfig,
}

impl Default for IppgConfig {
    fn default() -> Self {
        Self {
            env: EnvId::MountainCar,
            family: Family::Dsl,
            iterations: 5,
            mirror_rate: 1.0,
            mixing: 0.3,
            update_episodes: 40,
            eval_episodes: 100,
            eval_seed_base: EVAL_SEED_BASE,
            seed: 0,
            project: ProjectConfig::default(),
            ddpg: DdpgConfig::default(),
        }
    }
}

impl IppgConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.iterations == 0 {
            return bad("iterations", "must be at least 1".into());
        }
        if !(self.mirror_rate > 0.0 && self.mirror_rate.is_finite()) {
            return bad("mirror_rate", format!("must be positive, got {}", self.mirror_rate));
        }
        if !(self.mixing > 0.0 && self.mixing <= 1.0) {
            return bad("mixing", format!("must be in (0, 1], got {}", self.mixing));
        }
        if self.eval_episodes == 0 {
            return bad("eval_episodes", "must be at least 1".into());
        }
        if self.project.episodes_per_round == 0 {
            return bad("project.episodes_per_round", "must be at least 1".into());
        }
        let d = &self.ddpg;
        for (name, v) in [
            ("ddpg.gamma", d.gamma),
            ("ddpg.tau", d.tau),
            ("ddpg.critic_lr", d.critic_lr),
            ("ddpg.divergence_limit", d.divergence_limit),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(name, format!("must be positive, got {v}"));
            }
        }
        if !(d.actor_lr >= 0.0) {
            return bad("ddpg.actor_lr", format!("must be non-negative, got {}", d.actor_lr));
        }
        if d.batch_size == 0 || d.buffer_capacity == 0 {
            return bad("ddpg.batch_size", "batch size and buffer capacity must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IterationStatus {
    Ok,
    /// The lift diverged and was cut short; the iteration still completed.
    Diverged,
    /// A sub-step failed and the previous policy was kept.
    Failed,
}

impl IterationStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            IterationStatus::Ok => "ok",
            IterationStatus::Diverged => "diverged",
            IterationStatus::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// Noise-free mean return of `pi_t`.
    pub score: f64,
    /// Noise-free mean return of `h_t`, absent for the initial policy.
    pub score_mixed: Option<f64>,
    pub epsilon_hat: f64,
    pub sigma2_hat: f64,
    pub wall_time_s: f64,
    pub status: IterationStatus,
    /// Demonstrations carried after this iteration.
    pub demos: usize,
    /// DSL text or tree JSON of `pi_t`.
    pub policy: String,
    /// Dataset sizes of the projection that produced `pi_t`, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<AggregationLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub method: String,
    pub env: EnvId,
    pub family: Family,
    pub seed: u64,
    pub iterations: Vec<IterationDiagnostics>,
    pub best_score: f64,
    pub best_iteration: usize,
}

impl RunHistory {
    fn new(method: &str, cfg: &IppgConfig) -> Self {
        Self {
            method: method.into(),
            env: cfg.env,
            family: cfg.family,
            seed: cfg.seed,
            iterations: Vec::new(),
            best_score: f64::NEG_INFINITY,
            best_iteration: 0,
        }
    }

    fn record(&mut self, d: IterationDiagnostics) {
        if d.status != IterationStatus::Failed && d.score > self.best_score {
            self.best_score = d.score;
            self.best_iteration = d.iteration;
        }
        self.iterations.push(d);
    }

    pub fn final_score(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |d| d.score)
    }

    pub fn initial_score(&self) -> f64 {
        self.iterations.first().map_or(f64::NAN, |d| d.score)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub history: RunHistory,
    pub final_policy: Programmatic,
    pub best_policy: Programmatic,
}

/// Where the loop starts.
#[derive(Clone)]
pub enum Init {
    /// A programmatic policy; projected first if it is not in the target family.
    Programmatic(Programmatic),
    /// Any policy, projected onto the target family before the first lift.
    Oracle(Arc<dyn Policy>),
}

/// Hand-written starting programs: a weak velocity-feedback controller for
/// the car and a poorly tuned stabiliser with a feeble swing for the pendulum.
pub fn hand_prior(env: EnvId) -> Program {
    let text = match env {
        EnvId::MountainCar => "pid<1, 0.0, -15.0, 0.0, 0.0>",
        EnvId::Pendulum => "if (s[0] > 0.8) then pid<1, 0.0, 10.0, 0.0, 0.0> + pid<2, 0.0, 2.0, 0.0, 0.0> else pid<2, 0.0, -0.2, 0.0, 0.0>",
    };
    parse(text).expect("hand prior parses")
}

pub fn hand_prior_policy(env: EnvId) -> Programmatic {
    let spec = env.spec();
    Programmatic::Program(ProgramPolicy::new(hand_prior(env), spec.obs_dim, spec.action_dim).expect("hand prior type-checks"))
}

fn score<P: Policy + ?Sized>(p: &P, cfg: &IppgConfig) -> Result<f64> {
    Ok(episode_score(p, cfg.env, cfg.eval_episodes, cfg.eval_seed_base)?.0)
}

struct Clock(Instant);

impl Clock {
    fn start() -> Self {
        Clock(Instant::now())
    }

    fn secs(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

fn initial(
    init: Init,
    cfg: &IppgConfig,
    carried: &mut DemoSet,
    history: &mut RunHistory,
) -> Result<Programmatic> {
    let clock = Clock::start();
    let seed = derive_seed(cfg.seed, STREAM_SYNTH, 0);
    let r = match init {
        Init::Programmatic(p) if p.family() == cfg.family => Err(p),
        Init::Programmatic(p) => Ok(project(&p, cfg.env, cfg.family, &cfg.project, carried, seed)?),
        Init::Oracle(f) => Ok(project(&*f, cfg.env, cfg.family, &cfg.project, carried, seed)?),
    };
    let (pi, eps, aggregation) = match r {
        Err(p) => (p, 0.0, None),
        Ok(r) => {
            let agg = r.aggregation();
            *carried = r.demos;
            (r.policy, r.epsilon_hat, Some(agg))
        }
    };
    let s = score(&pi, cfg)?;
    info!("{} {} seed {}: initial score {s:.3}", history.method, cfg.env, cfg.seed);
    history.record(IterationDiagnostics {
        iteration: 0,
        score: s,
        score_mixed: None,
        epsilon_hat: eps,
        sigma2_hat: 0.0,
        wall_time_s: clock.secs(),
        status: IterationStatus::Ok,
        demos: carried.len(),
        policy: pi.to_checkpoint()?,
        aggregation,
    });
    Ok(pi)
}

struct Step {
    policy: Programmatic,
    aggregation: AggregationLog,
    score_mixed: f64,
    epsilon_hat: f64,
    sigma2_hat: f64,
    diverged: bool,
    demos: DemoSet,
}

fn lift_and_project(
    pi: &Programmatic,
    lifter: &mut Lifter,
    carried: &DemoSet,
    cfg: &IppgConfig,
    t: usize,
) -> Result<Step> {
    let synth_seed = derive_seed(cfg.seed, STREAM_SYNTH, t as u64);
    if cfg.update_episodes == 0 {
        // No lift: h = pi, and the projection maps pi onto its own family.
        let r = project(pi, cfg.env, cfg.family, &cfg.project, carried, synth_seed)?;
        let sm = score(pi, cfg)?;
        return Ok(Step {
            aggregation: r.aggregation(),
            policy: r.policy,
            score_mixed: sm,
            epsilon_hat: r.epsilon_hat,
            sigma2_hat: 0.0,
            diverged: false,
            demos: r.demos,
        });
    }
    let lift = LiftConfig { mixing: cfg.mixing, episodes: cfg.update_episodes, mirror_rate: cfg.mirror_rate };
    let (h, out) = lifter.update_f(pi, &lift, derive_seed(cfg.seed, STREAM_LIFT, t as u64))?;
    let sm = score(&h, cfg)?;
    let r = project(&h, cfg.env, cfg.family, &cfg.project, carried, synth_seed)?;
    Ok(Step {
        aggregation: r.aggregation(),
        policy: r.policy,
        score_mixed: sm,
        epsilon_hat: r.epsilon_hat,
        sigma2_hat: out.sigma2,
        diverged: out.diverged,
        demos: r.demos,
    })
}

/// Alternates lifts into the mixed space with projections back onto the
/// programmatic family, `cfg.iterations` times. Returns `pi_T`.
pub fn run_ippg(cfg: &IppgConfig, init: Init) -> Result<RunOutput> {
    cfg.validate()?;
    let method = match cfg.family {
        Family::Dsl => "propel-prog",
        Family::Tree => "propel-tree",
    };
    let mut history = RunHistory::new(method, cfg);
    let mut carried = DemoSet::new();
    let mut pi = initial(init, cfg, &mut carried, &mut history)?;
    let mut best = pi.clone();
    let mut lifter = Lifter::new(cfg.env, cfg.ddpg.clone(), derive_seed(cfg.seed, STREAM_INIT, 1));
    for t in 1..=cfg.iterations {
        let clock = Clock::start();
        let step = lift_and_project(&pi, &mut lifter, &carried, cfg, t).and_then(|s| {
            let sc = score(&s.policy, cfg)?;
            Ok((s, sc))
        });
        let diag = match step {
            Ok((s, sc)) => {
                carried = s.demos;
                pi = s.policy;
                info!(
                    "{method} {} seed {} iteration {t}: score {sc:.3}, mixed {:.3}, eps {:.4}, sigma2 {:.3e}",
                    cfg.env, cfg.seed, s.score_mixed, s.epsilon_hat, s.sigma2_hat
                );
                IterationDiagnostics {
                    iteration: t,
                    score: sc,
                    score_mixed: Some(s.score_mixed),
                    epsilon_hat: s.epsilon_hat,
                    sigma2_hat: s.sigma2_hat,
                    wall_time_s: clock.secs(),
                    status: if s.diverged { IterationStatus::Diverged } else { IterationStatus::Ok },
                    demos: carried.len(),
                    policy: pi.to_checkpoint()?,
                    aggregation: Some(s.aggregation),
                }
            }
            Err(e) => {
                warn!("{method} {} seed {} iteration {t} failed, keeping previous policy: {e}", cfg.env, cfg.seed);
                let prev = history.iterations.last().expect("initial record exists");
                IterationDiagnostics {
                    iteration: t,
                    score: prev.score,
                    score_mixed: None,
                    epsilon_hat: 0.0,
                    sigma2_hat: 0.0,
                    wall_time_s: clock.secs(),
                    status: IterationStatus::Failed,
                    demos: carried.len(),
                    policy: pi.to_checkpoint()?,
                    aggregation: None,
                }
            }
        };
        let improved = diag.status != IterationStatus::Failed && diag.score > history.best_score;
        history.record(diag);
        if improved {
            best = pi.clone();
        }
    }
    Ok(RunOutput { history, final_policy: pi, best_policy: best })
}

/// A purely neural policy trained from scratch for `iterations * update_episodes`
/// episodes.
#[derive(Debug, Clone)]
pub struct NeuralRun {
    pub policy: MixedPolicy<ConstantPolicy, NeuralPolicy>,
    pub score: f64,
    pub sigma2: f64,
    pub diverged: bool,
}

pub fn train_neural(cfg: &IppgConfig) -> Result<NeuralRun> {
    cfg.validate()?;
    let spec = cfg.env.spec();
    let mut lifter = Lifter::new(cfg.env, cfg.ddpg.clone(), derive_seed(cfg.seed, STREAM_INIT, 1));
    let zero = ConstantPolicy(vec![0.0; spec.action_dim]);
    let lift = LiftConfig { mixing: 1.0, episodes: cfg.iterations * cfg.update_episodes, mirror_rate: cfg.mirror_rate };
    let (h, out) = lifter.update_f(&zero, &lift, derive_seed(cfg.seed, STREAM_LIFT, 0))?;
    let s = score(&h, cfg)?;
    info!("neural {} seed {}: score {s:.3}", cfg.env, cfg.seed);
    Ok(NeuralRun { policy: h, score: s, sigma2: out.sigma2, diverged: out.diverged })
}

/// One projection of an already trained neural policy onto `family`.
pub fn project_baseline(cfg: &IppgConfig, family: Family, neural: &NeuralRun) -> Result<RunOutput> {
    let method = match family {
        Family::Dsl => "ndps",
        Family::Tree => "viper",
    };
    let cfg = IppgConfig { family, ..cfg.clone() };
    let mut history = RunHistory::new(method, &cfg);
    let clock = Clock::start();
    let r = project(&neural.policy, cfg.env, family, &cfg.project, &DemoSet::new(), derive_seed(cfg.seed, STREAM_SYNTH, 0))?;
    let s = score(&r.policy, &cfg)?;
    info!("{method} {} seed {}: score {s:.3}", cfg.env, cfg.seed);
    history.record(IterationDiagnostics {
        iteration: 1,
        score: s,
        score_mixed: Some(neural.score),
        epsilon_hat: r.epsilon_hat,
        sigma2_hat: neural.sigma2,
        wall_time_s: clock.secs(),
        status: if neural.diverged { IterationStatus::Diverged } else { IterationStatus::Ok },
        demos: r.demos.len(),
        policy: r.policy.to_checkpoint()?,
        aggregation: Some(r.aggregation()),
    });
    Ok(RunOutput { history, final_policy: r.policy.clone(), best_policy: r.policy })
}

/// Neural training followed by a single projection onto programs.
pub fn run_ndps_baseline(cfg: &IppgConfig) -> Result<RunOutput> {
    project_baseline(cfg, Family::Dsl, &train_neural(cfg)?)
}

/// Neural training followed by a single projection onto trees.
pub fn run_viper_baseline(cfg: &IppgConfig) -> Result<RunOutput> {
    project_baseline(cfg, Family::Tree, &train_neural(cfg)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(env: EnvId, family: Family) -> IppgConfig {
        IppgConfig {
            env,
            family,
            iterations: 2,
            update_episodes: 0,
            eval_episodes: 3,
            project: ProjectConfig { rounds: 1, episodes_per_round: 5, ..ProjectConfig::default() },
            ..IppgConfig::default()
        }
    }

    #[test]
    fn priors_type_check() {
        for env in EnvId::ALL {
            let spec = env.spec();
            hand_prior(env).check(spec.obs_dim, spec.action_dim, crate::dsl::DEFAULT_MAX_DEPTH).unwrap();
        }
    }

    #[test]
    fn without_lifts_the_program_is_a_fixed_point() {
        let cfg = tiny(EnvId::MountainCar, Family::Dsl);
        let out = run_ippg(&cfg, Init::Programmatic(hand_prior_policy(EnvId::MountainCar))).unwrap();
        assert_eq!(out.history.iterations.len(), 3);
        let first = out.history.iterations[0].score;
        for d in &out.history.iterations {
            assert!((d.score - first).abs() < 1e-3, "{} vs {first}", d.score);
            assert!(d.epsilon_hat < 1e-4, "eps {}", d.epsilon_hat);
        }
    }

    #[test]
    fn tree_runs_start_from_a_projected_prior() {
        let cfg = tiny(EnvId::Pendulum, Family::Tree);
        let out = run_ippg(&cfg, Init::Programmatic(hand_prior_policy(EnvId::Pendulum))).unwrap();
        assert_eq!(out.final_policy.family(), Family::Tree);
        assert!(out.history.iterations[0].epsilon_hat.is_finite());
        let demos: Vec<usize> = out.history.iterations.iter().map(|d| d.demos).collect();
        assert!(demos.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn invalid_mixing_is_a_config_error() {
        let cfg = IppgConfig { mixing: 1.5, ..IppgConfig::default() };
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("mixing"));
    }

    #[test]
    fn best_score_is_running_maximum() {
        let mut h = RunHistory::new("x", &IppgConfig::default());
        for (i, s) in [1.0, 3.0, 2.0].into_iter().enumerate() {
            h.record(IterationDiagnostics {
                iteration: i,
                score: s,
                score_mixed: None,
                epsilon_hat: 0.0,
                sigma2_hat: 0.0,
                wall_time_s: 0.0,
                status: IterationStatus::Ok,
                demos: 0,
                policy: String::new(),
                aggregation: None,
            });
        }
        assert_eq!((h.best_score, h.best_iteration), (3.0, 1));
    }
}
