use log::{debug, warn};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::{Adam, ForwardCache, InputNorm, Mlp, NeuralPolicy};
use crate::env::{Env, EnvId, EnvSpec, NoiseProcess, OuNoise};
use crate::error::{Error, Result};
use crate::policy::{MixedPolicy, ObservationWindow, Policy};
use crate::seed::{derive_rng, derive_seed, Rng, STREAM_ENV, STREAM_INIT, STREAM_NOISE, STREAM_REPLAY};

/// Actor-critic hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DdpgConfig {
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    pub batch_size: usize,
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub ou_theta: f64,
    pub ou_sigma: f64,
    /// Range of the last actor layer at initialisation.
    pub actor_init_range: f64,
    /// Abort once any parameter exceeds this magnitude.
    pub divergence_limit: f64,
}

impl Default for DdpgConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            buffer_capacity: 100_000,
            batch_size: 64,
            gamma: 0.99,
            tau: 0.005,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            ou_theta: 0.15,
            ou_sigma: 0.2,
            actor_init_range: 3e-3,
            divergence_limit: 1e6,
        }
    }
}

/// Settings for one call of [`Lifter::update_f`].
#[derive(Debug, Clone, PartialEq)]
pub struct LiftConfig {
    /// Weight of the residual in `h = pi + mixing * f`.
    pub mixing: f64,
    /// Number of training episodes.
    pub episodes: usize,
    /// Multiplies the actor step size.
    pub mirror_rate: f64,
}

#[derive(Debug, Clone)]
pub struct Experience {
    pub window: ObservationWindow,
    /// Action actually applied to the environment, after clipping.
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_window: ObservationWindow,
    /// True only for genuine absorbing states, not time limits.
    pub terminal: bool,
}

/// Fixed-capacity ring buffer of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: Vec<Experience>,
    capacity: usize,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { entries: Vec::new(), capacity, next: 0 }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, e: Experience) {
        if self.entries.len() < self.capacity {
            self.entries.push(e);
        } else {
            self.entries[self.next] = e;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    pub fn get(&self, i: usize) -> &Experience {
        &self.entries[i]
    }

    /// Distinct indices drawn uniformly; fewer if the buffer is smaller.
    pub fn sample_indices(&self, batch: usize, rng: &mut Rng) -> Vec<usize> {
        let n = batch.min(self.entries.len());
        index::sample(rng, self.entries.len(), n).into_vec()
    }
}

#[derive(Debug, Clone)]
pub struct LiftOutcome {
    pub policy_f: NeuralPolicy,
    /// Sample variance of actor-gradient norms over the minibatches.
    pub sigma2: f64,
    pub diverged: bool,
    pub episode_returns: Vec<f64>,
    pub updates: usize,
}

/// Critic, target critic and replay memory, kept warm across successive lifts
/// of the same environment. The actor is fresh on every call.
#[derive(Debug, Clone)]
pub struct Lifter {
    env_id: EnvId,
    spec: EnvSpec,
    norm: InputNorm,
    cfg: DdpgConfig,
    critic: Mlp,
    critic_target: Mlp,
    critic_opt: Adam,
    buffer: ReplayBuffer,
    seed: u64,
    calls: u64,
}

struct Scratch {
    x: Vec<f64>,
    cache: ForwardCache,
    cache2: ForwardCache,
}

impl Lifter {
    pub fn new(env_id: EnvId, cfg: DdpgConfig, seed: u64) -> Self {
        let spec = env_id.spec();
        let critic = Self::fresh_critic(&spec, &cfg, seed, 0);
        Self {
            env_id,
            norm: InputNorm::for_env(env_id),
            critic_target: critic.clone(),
            critic_opt: Adam::new(critic.num_params(), cfg.critic_lr),
            critic,
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            spec,
            cfg,
            seed,
            calls: 0,
        }
    }

    fn fresh_critic(spec: &EnvSpec, cfg: &DdpgConfig, seed: u64, k: u64) -> Mlp {
        let mut sizes = vec![spec.obs_dim + spec.action_dim];
        sizes.extend(&cfg.hidden);
        sizes.push(1);
        let mut rng = derive_rng(seed, STREAM_INIT, 1_000 + k);
        Mlp::new(&sizes, None, 3e-3, &mut rng)
    }

    pub fn config(&self) -> &DdpgConfig {
        &self.cfg
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn env_id(&self) -> EnvId {
        self.env_id
    }

    /// A randomly initialised residual actor with output range equal to the
    /// action half-range.
    pub fn init_actor(&self, seed: u64) -> NeuralPolicy {
        let mut sizes = vec![self.spec.obs_dim];
        sizes.extend(&self.cfg.hidden);
        sizes.push(self.spec.action_dim);
        let mut rng = derive_rng(seed, STREAM_INIT, 0);
        let mlp = Mlp::new(&sizes, Some(self.spec.action_half_range()), self.cfg.actor_init_range, &mut rng);
        NeuralPolicy::new(mlp, self.norm.clone())
    }

    fn critic_input(&self, obs: &[f64], action: &[f64], out: &mut Vec<f64>) {
        self.norm.apply(obs, out);
        let half = self.spec.action_half_range();
        let mid = self.spec.action_low.iter().zip(&self.spec.action_high).map(|(l, h)| 0.5 * (l + h));
        out.extend(action.iter().zip(mid).zip(&half).map(|((a, m), r)| (a - m) / r));
    }

    /// Gradient of the actor loss `-mean Q(s, clip(pi(w) + mixing * f(s)))`
    /// over the given minibatch. The clip is passed straight through.
    pub fn actor_gradient<P: Policy + ?Sized>(
        &self,
        actor: &NeuralPolicy,
        pi: &P,
        mixing: f64,
        batch: &[usize],
    ) -> Result<Vec<f64>> {
        let mut s = Scratch { x: Vec::new(), cache: ForwardCache::default(), cache2: ForwardCache::default() };
        self.actor_gradient_inner(actor, pi, mixing, batch, &mut s)
    }

    fn actor_gradient_inner<P: Policy + ?Sized>(
        &self,
        actor: &NeuralPolicy,
        pi: &P,
        mixing: f64,
        batch: &[usize],
        s: &mut Scratch,
    ) -> Result<Vec<f64>> {
        let obs_dim = self.spec.obs_dim;
        let half = self.spec.action_half_range();
        let mut grad = vec![0.0; actor.mlp.num_params()];
        let mut d_in = vec![0.0; obs_dim + self.spec.action_dim];
        let mut dq = vec![0.0; 1];
        let scale = 1.0 / batch.len().max(1) as f64;
        for &i in batch {
            let e = self.buffer.get(i);
            let obs = e.window.newest();
            let base = pi.act(&e.window)?;
            actor.norm.apply(obs, &mut s.x);
            actor.mlp.forward_cached(&s.x, &mut s.cache);
            let total: Vec<f64> =
                base.iter().zip(s.cache.output()).map(|(p, f)| p + mixing * f).collect();
            let applied = self.spec.clip(&total);
            let mut x = Vec::with_capacity(d_in.len());
            self.critic_input(obs, &applied, &mut x);
            self.critic.forward_cached(&x, &mut s.cache2);
            let mut scratch = vec![0.0; self.critic.num_params()];
            dq[0] = 1.0;
            self.critic.backward(&s.cache2, &dq, &mut scratch, Some(&mut d_in));
            let d_f: Vec<f64> =
                d_in[obs_dim..].iter().zip(&half).map(|(g, r)| -scale * mixing * g / r).collect();
            actor.mlp.backward(&s.cache, &d_f, &mut grad, None);
        }
        Ok(grad)
    }

    fn critic_step<P: Policy + ?Sized>(
        &mut self,
        target_actor: &NeuralPolicy,
        pi: &P,
        mixing: f64,
        batch: &[usize],
        s: &mut Scratch,
    ) -> Result<()> {
        let mut grad = vec![0.0; self.critic.num_params()];
        let scale = 1.0 / batch.len().max(1) as f64;
        let mut x = Vec::new();
        for &i in batch {
            let e = self.buffer.get(i);
            let mut y = e.reward;
            if !e.terminal {
                let next_obs = e.next_window.newest();
                let base = pi.act(&e.next_window)?;
                let f = target_actor.forward_obs(next_obs);
                let total: Vec<f64> = base.iter().zip(&f).map(|(p, f)| p + mixing * f).collect();
                let applied = self.spec.clip(&total);
                self.critic_input(next_obs, &applied, &mut x);
                y += self.cfg.gamma * self.critic_target.forward(&x)[0];
            }
            self.critic_input(e.window.newest(), &e.action, &mut s.x);
            self.critic.forward_cached(&s.x, &mut s.cache);
            let d = scale * (s.cache.output()[0] - y);
            self.critic.backward(&s.cache, &[d], &mut grad, None);
        }
        self.critic_opt.step(self.critic.params_mut(), &grad);
        Ok(())
    }

    fn diverged(&self, actor: &NeuralPolicy) -> bool {
        let lim = self.cfg.divergence_limit;
        let bad = |m: f64| m.is_nan() || m > lim;
        bad(actor.mlp.max_abs_param()) || bad(self.critic.max_abs_param())
    }

    fn reset_critic(&mut self) {
        self.calls += 1;
        self.critic = Self::fresh_critic(&self.spec, &self.cfg, self.seed, self.calls);
        self.critic_target = self.critic.clone();
        self.critic_opt = Adam::new(self.critic.num_params(), self.cfg.critic_lr);
    }

    /// Trains a fresh residual `f` against the fixed `pi` and returns the
    /// mixed policy `pi + mixing * f`.
    pub fn update_f<P: Policy + Clone>(
        &mut self,
        pi: &P,
        lift: &LiftConfig,
        seed: u64,
    ) -> Result<(MixedPolicy<P, NeuralPolicy>, LiftOutcome)> {
        if !(lift.mirror_rate > 0.0) || !lift.mirror_rate.is_finite() {
            return Err(Error::Config(format!("mirror rate must be positive, got {}", lift.mirror_rate)));
        }
        let mixing = lift.mixing;
        let mut actor = self.init_actor(derive_seed(seed, STREAM_INIT, 0));
        // Validates mixing and dimensions up front.
        MixedPolicy::new(pi.clone(), actor.clone(), mixing)?;
        let mut target_actor = actor.clone();
        let mut actor_opt = Adam::new(actor.mlp.num_params(), self.cfg.actor_lr * lift.mirror_rate);
        let mut replay_rng = derive_rng(seed, STREAM_REPLAY, 0);
        let mut noise = OuNoise::new(
            self.cfg.ou_theta,
            self.cfg.ou_sigma,
            self.spec.action_half_range(),
            derive_rng(seed, STREAM_NOISE, 0),
        );
        let mut env = Env::new(self.env_id);
        let mut s = Scratch { x: Vec::new(), cache: ForwardCache::default(), cache2: ForwardCache::default() };
        let mut norms = Vec::new();
        let mut returns = Vec::with_capacity(lift.episodes);
        let mut best = (f64::NEG_INFINITY, actor.clone());
        let mut diverged = false;
        let mut updates = 0usize;

        'episodes: for ep in 0..lift.episodes {
            pi.reset();
            let mut window = env.reset(derive_seed(seed, STREAM_ENV, ep as u64));
            noise.reset();
            let mut ret = 0.0;
            loop {
                let base = pi.act(&window)?;
                let f = actor.act(&window)?;
                let n = noise.sample();
                let a: Vec<f64> =
                    base.iter().zip(f.iter()).zip(&n).map(|((p, f), n)| p + mixing * f + n).collect();
                let out = env.step(&a)?;
                ret += out.reward;
                self.buffer.push(Experience {
                    window: window.clone(),
                    action: out.applied_action.clone(),
                    reward: out.reward,
                    next_window: out.window.clone(),
                    terminal: out.terminal,
                });
                if self.buffer.len() >= self.cfg.batch_size {
                    let batch = self.buffer.sample_indices(self.cfg.batch_size, &mut replay_rng);
                    self.critic_step(&target_actor, pi, mixing, &batch, &mut s)?;
                    let g = self.actor_gradient_inner(&actor, pi, mixing, &batch, &mut s)?;
                    norms.push(g.iter().map(|v| v * v).sum::<f64>().sqrt());
                    actor_opt.step(actor.mlp.params_mut(), &g);
                    self.critic_target.soft_update(&self.critic, self.cfg.tau);
                    target_actor.mlp.soft_update(&actor.mlp, self.cfg.tau);
                    updates += 1;
                    if self.diverged(&actor) {
                        warn!("actor-critic diverged in episode {ep}; keeping best residual so far");
                        diverged = true;
                        break 'episodes;
                    }
                }
                window = out.window;
                if out.done {
                    break;
                }
            }
            debug!("lift episode {ep}: return {ret:.3}");
            returns.push(ret);
            if ret > best.0 {
                best = (ret, actor.clone());
            }
        }
        if diverged {
            actor = best.1;
            self.reset_critic();
        }
        let sigma2 = sample_variance(&norms);
        let h = MixedPolicy::new(pi.clone(), actor.clone(), mixing)?;
        Ok((h, LiftOutcome { policy_f: actor, sigma2, diverged, episode_returns: returns, updates }))
    }
}

fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::ConstantPolicy;
    use crate::seed::rng_from_seed;

    fn small_cfg() -> DdpgConfig {
        DdpgConfig { hidden: vec![16, 16], batch_size: 16, ..DdpgConfig::default() }
    }

    #[test]
    fn ring_buffer_respects_capacity() {
        let w = ObservationWindow::padded(&[0.0, 0.0], 3, 1.0).unwrap();
        let mut b = ReplayBuffer::new(4);
        for k in 0..10 {
            b.push(Experience {
                window: w.clone(),
                action: vec![k as f64],
                reward: 0.0,
                next_window: w.clone(),
                terminal: false,
            });
        }
        assert_eq!(b.len(), 4);
        let mut acts: Vec<f64> = (0..4).map(|i| b.get(i).action[0]).collect();
        acts.sort_by(f64::total_cmp);
        assert_eq!(acts, vec![6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn minibatch_indices_are_distinct_and_reproducible() {
        let w = ObservationWindow::padded(&[0.0], 2, 1.0).unwrap();
        let mut b = ReplayBuffer::new(100);
        for _ in 0..100 {
            b.push(Experience { window: w.clone(), action: vec![0.0], reward: 0.0, next_window: w.clone(), terminal: false });
        }
        let a = b.sample_indices(64, &mut rng_from_seed(3));
        let c = b.sample_indices(64, &mut rng_from_seed(3));
        assert_eq!(a, c);
        let mut d = a.clone();
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 64);
    }

    #[test]
    fn zero_learning_rate_keeps_initial_residual() {
        let cfg = DdpgConfig { actor_lr: 0.0, ..small_cfg() };
        let mut lifter = Lifter::new(EnvId::Pendulum, cfg, 7);
        let pi = ConstantPolicy(vec![0.1]);
        let lift = LiftConfig { mixing: 0.3, episodes: 1, mirror_rate: 1.0 };
        let (h, out) = lifter.update_f(&pi, &lift, 11).unwrap();
        let init = lifter.init_actor(derive_seed(11, STREAM_INIT, 0));
        assert_eq!(out.policy_f, init);
        let w = ObservationWindow::padded(&[0.6, 0.8, -1.0], 10, 0.05).unwrap();
        let expect = 0.1 + 0.3 * init.act(&w).unwrap()[0];
        assert!((h.act(&w).unwrap()[0] - expect).abs() < 1e-15);
        assert!(out.updates > 0);
    }

    #[test]
    fn actor_gradient_is_linear_in_mixing_for_unsaturated_actions() {
        let mut lifter = Lifter::new(EnvId::Pendulum, small_cfg(), 1);
        let pi = ConstantPolicy(vec![0.0]);
        let lift = LiftConfig { mixing: 0.3, episodes: 1, mirror_rate: 1.0 };
        lifter.update_f(&pi, &lift, 2).unwrap();
        let actor = lifter.init_actor(99);
        let batch: Vec<usize> = (0..32).collect();
        let g1 = lifter.actor_gradient(&actor, &pi, 1e-3, &batch).unwrap();
        let g2 = lifter.actor_gradient(&actor, &pi, 2e-3, &batch).unwrap();
        let n1 = g1.iter().map(|v| v * v).sum::<f64>().sqrt();
        let n2 = g2.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(n1 > 0.0);
        assert!((n2 / n1 - 2.0).abs() < 1e-3, "ratio {}", n2 / n1);
    }

    #[test]
    fn programmatic_part_is_untouched() {
        let mut lifter = Lifter::new(EnvId::MountainCar, small_cfg(), 4);
        let pi = crate::dsl::ProgramPolicy::new(crate::dsl::parse("pid<1, 0.0, 1.0, 0.0, 0.0>").unwrap(), 2, 1).unwrap();
        let before = pi.program().to_string();
        let lift = LiftConfig { mixing: 0.3, episodes: 1, mirror_rate: 1.0 };
        let (h, _) = lifter.update_f(&pi, &lift, 5).unwrap();
        assert_eq!(pi.program().to_string(), before);
        assert_eq!(h.programmatic.program().to_string(), before);
    }
}
