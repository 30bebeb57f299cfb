//! The ambient policy space: observation windows, actions, the evaluation
//! contract shared by every policy family, mixed policies `h = pi + lambda * f`
//! and the empirical L2 distance used for projection residuals.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// History length used by the built-in environments.
pub const DEFAULT_WINDOW: usize = 10;

/// Fixed-length history of raw observations, oldest first.
///
/// Stored flat: sample `t` occupies `data[t * obs_dim..(t + 1) * obs_dim]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationWindow {
    data: Vec<f64>,
    obs_dim: usize,
    dt: f64,
}

impl ObservationWindow {
    /// Starts a window by repeating `first` `len` times.
    pub fn padded(first: &[f64], len: usize, dt: f64) -> Result<Self> {
        if len < 2 {
            return Err(Error::Config(format!("window length must be >= 2, got {len}")));
        }
        if first.is_empty() {
            return Err(Error::Dimension { expected: 1, got: 0 });
        }
        if !first.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { part: "observation" });
        }
        let mut data = Vec::with_capacity(len * first.len());
        for _ in 0..len {
            data.extend_from_slice(first);
        }
        Ok(Self { data, obs_dim: first.len(), dt })
    }

    /// Builds a window from explicit samples (oldest first).
    pub fn from_samples(samples: &[Vec<f64>], dt: f64) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptySampleSet)?;
        let obs_dim = first.len();
        if samples.len() < 2 {
            return Err(Error::Config("window length must be >= 2".into()));
        }
        let mut data = Vec::with_capacity(samples.len() * obs_dim);
        for s in samples {
            if s.len() != obs_dim {
                return Err(Error::Dimension { expected: obs_dim, got: s.len() });
            }
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { part: "observation" });
            }
            data.extend_from_slice(s);
        }
        Ok(Self { data, obs_dim, dt })
    }

    /// Drops the oldest sample and appends `obs` as the newest.
    pub fn push(&mut self, obs: &[f64]) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        self.data.copy_within(self.obs_dim.., 0);
        let start = self.data.len() - self.obs_dim;
        self.data[start..].copy_from_slice(obs);
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.obs_dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn sample(&self, t: usize) -> &[f64] {
        &self.data[t * self.obs_dim..(t + 1) * self.obs_dim]
    }

    pub fn newest(&self) -> &[f64] {
        self.sample(self.len() - 1)
    }

    pub fn samples(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.obs_dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

/// An action in the environment's native units (force or torque).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Action(pub Vec<f64>);

impl Action {
    pub fn zeros(dim: usize) -> Self {
        Action(vec![0.0; dim])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Action {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Action {
    fn from(v: Vec<f64>) -> Self {
        Action(v)
    }
}

/// Evaluation contract for every policy family.
///
/// Policies in this crate are pure functions of the window, so `reset` is a
/// no-op by default. Implementations with hidden state must use interior
/// mutability and make `reset` restore the initial state.
pub trait Policy: Send + Sync {
    fn action_dim(&self) -> usize;

    fn act(&self, window: &ObservationWindow) -> Result<Action>;

    fn reset(&self) {}
}

impl<P: Policy + ?Sized> Policy for &P {
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }

    fn act(&self, window: &ObservationWindow) -> Result<Action> {
        (**self).act(window)
    }

    fn reset(&self) {
        (**self).reset()
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }

    fn act(&self, window: &ObservationWindow) -> Result<Action> {
        (**self).act(window)
    }

    fn reset(&self) {
        (**self).reset()
    }
}

impl<P: Policy + ?Sized> Policy for std::sync::Arc<P> {
    fn action_dim(&self) -> usize {
        (**self).action_dim()
    }

    fn act(&self, window: &ObservationWindow) -> Result<Action> {
        (**self).act(window)
    }

    fn reset(&self) {
        (**self).reset()
    }
}

/// A policy that always returns the same action.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    fn action_dim(&self) -> usize {
        self.0.len()
    }

    fn act(&self, _window: &ObservationWindow) -> Result<Action> {
        Ok(Action(self.0.clone()))
    }
}

/// `h(w) = pi(w) + lambda * f(w)`, with no clipping.
#[derive(Debug, Clone)]
pub struct MixedPolicy<P, F> {
    pub programmatic: P,
    pub neural: F,
    pub mixing: f64,
}

impl<P: Policy, F: Policy> MixedPolicy<P, F> {
    pub fn new(programmatic: P, neural: F, mixing: f64) -> Result<Self> {
        if !(mixing > 0.0 && mixing <= 1.0) {
            return Err(Error::Config(format!("mixing weight must be in (0, 1], got {mixing}")));
        }
        if programmatic.action_dim() != neural.action_dim() {
            return Err(Error::Dimension {
                expected: programmatic.action_dim(),
                got: neural.action_dim(),
            });
        }
        Ok(Self { programmatic, neural, mixing })
    }
}

/// Componentwise `pi + lambda * f`, rejecting non-finite parts.
pub fn combine(pi: &[f64], f: &[f64], lambda: f64) -> Result<Action> {
    if pi.len() != f.len() {
        return Err(Error::Dimension { expected: pi.len(), got: f.len() });
    }
    if !pi.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { part: "programmatic" });
    }
    if !f.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite { part: "neural" });
    }
    Ok(Action(pi.iter().zip(f).map(|(p, n)| p + lambda * n).collect()))
}

impl<P: Policy, F: Policy> Policy for MixedPolicy<P, F> {
    fn action_dim(&self) -> usize {
        self.programmatic.action_dim()
    }

    fn act(&self, window: &ObservationWindow) -> Result<Action> {
        let pi = self.programmatic.act(window)?;
        let f = self.neural.act(window)?;
        combine(&pi, &f, self.mixing)
    }

    fn reset(&self) {
        self.programmatic.reset();
        self.neural.reset();
    }
}

/// Windows sampled from rollouts, grouped by source trajectory.
#[derive(Debug, Clone, Default)]
pub struct StateSampleSet {
    episodes: Vec<Vec<ObservationWindow>>,
}

impl StateSampleSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_windows(windows: Vec<ObservationWindow>) -> Self {
        Self { episodes: vec![windows] }
    }

    pub fn push_episode(&mut self, windows: Vec<ObservationWindow>) {
        if !windows.is_empty() {
            self.episodes.push(windows);
        }
    }

    pub fn len(&self) -> usize {
        self.episodes.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn episodes(&self) -> &[Vec<ObservationWindow>] {
        &self.episodes
    }

    pub fn windows(&self) -> impl Iterator<Item = &ObservationWindow> {
        self.episodes.iter().flatten()
    }
}

/// `sqrt(mean_w |a(w) - b(w)|^2)` over the sample set.
pub fn empirical_distance<A, B>(a: &A, b: &B, samples: &StateSampleSet) -> Result<f64>
where
    A: Policy + ?Sized,
    B: Policy + ?Sized,
{
    if samples.is_empty() {
        return Err(Error::EmptySampleSet);
    }
    let mut total = 0.0;
    for episode in samples.episodes() {
        a.reset();
        b.reset();
        for w in episode {
            let xa = a.act(w)?;
            let xb = b.act(w)?;
            if xa.len() != xb.len() {
                return Err(Error::Dimension { expected: xa.len(), got: xb.len() });
            }
            total += xa.iter().zip(xb.iter()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
        }
    }
    Ok((total / samples.len() as f64).sqrt())
}
