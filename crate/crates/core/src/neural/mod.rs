//! Neural policies and the actor-critic lift of a programmatic policy.

mod ddpg;
mod mlp;

pub use ddpg::{DdpgConfig, Experience, LiftConfig, LiftOutcome, Lifter, ReplayBuffer};
pub use mlp::{Adam, ForwardCache, Loss, Mlp};

use serde::{Deserialize, Serialize};

use crate::env::EnvId;
use crate::error::{Error, Result};
use crate::policy::{Action, ObservationWindow, Policy};

/// Affine input normalisation `(x - shift) * scale`, fixed per environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn for_env(env: EnvId) -> Self {
        match env {
            EnvId::MountainCar => Self { shift: vec![-0.3, 0.0], scale: vec![1.0 / 0.9, 1.0 / 0.07] },
            EnvId::Pendulum => Self { shift: vec![0.0; 3], scale: vec![1.0, 1.0, 1.0 / 8.0] },
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self { shift: vec![0.0; dim], scale: vec![1.0; dim] }
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(x.iter().zip(self.shift.iter().zip(&self.scale)).map(|(v, (s, k))| (v - s) * k));
    }
}

/// An MLP reading the newest observation of the window.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralPolicy {
    pub mlp: Mlp,
    pub norm: InputNorm,
}

#[derive(Serialize, Deserialize)]
struct MlpCheckpoint {
    format: String,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
    #[serde(flatten)]
    mlp: Mlp,
}

impl NeuralPolicy {
    pub fn new(mlp: Mlp, norm: InputNorm) -> Self {
        Self { mlp, norm }
    }

    pub fn forward_obs(&self, obs: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(obs.len());
        self.norm.apply(obs, &mut x);
        self.mlp.forward(&x)
    }

    /// JSON checkpoint: `{"format": "mlp", "input_shift", "input_scale",
    /// "sizes", "params", "output_scale"}` with parameters flattened layer by
    /// layer (row-major weights, then biases).
    pub fn to_json(&self) -> Result<String> {
        let ck = MlpCheckpoint {
            format: "mlp".into(),
            input_shift: self.norm.shift.clone(),
            input_scale: self.norm.scale.clone(),
            mlp: self.mlp.clone(),
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: MlpCheckpoint = serde_json::from_str(text)?;
        if ck.format != "mlp" {
            return Err(Error::Checkpoint(format!("expected format \"mlp\", found {:?}", ck.format)));
        }
        let mlp = ck.mlp.rebuild()?;
        if ck.input_shift.len() != mlp.input_dim() || ck.input_scale.len() != mlp.input_dim() {
            return Err(Error::Checkpoint("input normalisation does not match layer sizes".into()));
        }
        Ok(Self { mlp, norm: InputNorm { shift: ck.input_shift, scale: ck.input_scale } })
    }
}

impl Policy for NeuralPolicy {
    fn action_dim(&self) -> usize {
        self.mlp.output_dim()
    }

    fn act(&self, w: &ObservationWindow) -> Result<Action> {
        let y = self.forward_obs(w.newest());
        if !y.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { part: "neural" });
        }
        Ok(Action(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rng_from_seed(1);
        let p = NeuralPolicy::new(Mlp::new(&[2, 4, 1], Some(vec![1.0]), 0.1, &mut rng), InputNorm::for_env(EnvId::MountainCar));
        let text = p.to_json().unwrap();
        let q = NeuralPolicy::from_json(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.forward_obs(&[-0.5, 0.01]), q.forward_obs(&[-0.5, 0.01]));
    }

    #[test]
    fn nan_parameters_are_an_evaluation_error() {
        let mut mlp = Mlp::zeros(&[1, 1], Some(vec![1.0]));
        mlp.params_mut()[0] = f64::NAN;
        let p = NeuralPolicy::new(mlp, InputNorm::identity(1));
        let w = ObservationWindow::padded(&[1.0], 4, 1.0).unwrap();
        assert!(matches!(p.act(&w), Err(Error::NonFinite { part: "neural" })));
    }
}
