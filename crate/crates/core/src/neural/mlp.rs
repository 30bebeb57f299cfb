use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fully connected network with `tanh` hidden units.
///
/// Parameters live in one flat vector; layer `l` stores its weight matrix
/// (`out x in`, row-major) followed by its bias. The output layer is linear,
/// or `scale * tanh(.)` when `output_scale` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    output_scale: Option<Vec<f64>>,
    #[serde(skip)]
    offsets: Vec<usize>,
}

/// Activations recorded by a forward pass, reused by [`Mlp::backward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    /// `acts[0]` is the input; `acts[l + 1]` is the output of layer `l`
    /// (after its activation).
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Losses with closed-form output gradients, used to drive [`Mlp::gradient`].
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    /// `0.5 * |y - target|^2`
    Squared(Vec<f64>),
    /// `w . y`
    Linear(Vec<f64>),
}

impl Loss {
    pub fn value(&self, y: &[f64]) -> f64 {
        match self {
            Loss::Squared(t) => 0.5 * y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(),
            Loss::Linear(w) => y.iter().zip(w).map(|(a, b)| a * b).sum(),
        }
    }

    pub fn output_grad(&self, y: &[f64]) -> Vec<f64> {
        match self {
            Loss::Squared(t) => y.iter().zip(t).map(|(a, b)| a - b).collect(),
            Loss::Linear(w) => w.clone(),
        }
    }
}

fn offsets(sizes: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut acc = 0;
    out.push(0);
    for w in sizes.windows(2) {
        acc += w[0] * w[1] + w[1];
        out.push(acc);
    }
    out
}

impl Mlp {
    /// Hidden layers draw from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`; the output
    /// layer from `U(-final_range, final_range)`.
    pub fn new(sizes: &[usize], output_scale: Option<Vec<f64>>, final_range: f64, rng: &mut impl rand::Rng) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs at least input and output sizes");
        let offsets = offsets(sizes);
        let mut params = vec![0.0; *offsets.last().unwrap()];
        let layers = sizes.len() - 1;
        for l in 0..layers {
            let bound = if l + 1 == layers { final_range } else { 1.0 / (sizes[l] as f64).sqrt() };
            if bound > 0.0 {
                for p in &mut params[offsets[l]..offsets[l + 1]] {
                    *p = rng.gen_range(-bound..bound);
                }
            }
        }
        if let Some(s) = &output_scale {
            assert_eq!(s.len(), *sizes.last().unwrap());
        }
        Self { sizes: sizes.to_vec(), params, output_scale, offsets }
    }

    pub fn zeros(sizes: &[usize], output_scale: Option<Vec<f64>>) -> Self {
        let offsets = offsets(sizes);
        let params = vec![0.0; *offsets.last().unwrap()];
        Self { sizes: sizes.to_vec(), params, output_scale, offsets }
    }

    pub fn from_parts(sizes: Vec<usize>, params: Vec<f64>, output_scale: Option<Vec<f64>>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Checkpoint(format!("invalid layer sizes {sizes:?}")));
        }
        let offsets = offsets(&sizes);
        if params.len() != *offsets.last().unwrap() {
            return Err(Error::Checkpoint(format!(
                "layer sizes {sizes:?} need {} parameters, found {}",
                offsets.last().unwrap(),
                params.len()
            )));
        }
        if let Some(s) = &output_scale {
            if s.len() != *sizes.last().unwrap() {
                return Err(Error::Checkpoint("output scale has wrong length".into()));
            }
        }
        Ok(Self { sizes, params, output_scale, offsets })
    }

    /// Restores derived fields after deserialisation.
    pub(crate) fn rebuild(mut self) -> Result<Self> {
        let sizes = std::mem::take(&mut self.sizes);
        let params = std::mem::take(&mut self.params);
        Self::from_parts(sizes, params, self.output_scale)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn output_scale(&self) -> Option<&[f64]> {
        self.output_scale.as_deref()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn max_abs_param(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| if p.is_nan() { f64::NAN } else { m.max(p.abs()) })
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache);
        cache.acts.pop().unwrap()
    }

    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) {
        debug_assert_eq!(x.len(), self.sizes[0]);
        let layers = self.sizes.len() - 1;
        cache.acts.resize(layers + 1, Vec::new());
        cache.acts[0].clear();
        cache.acts[0].extend_from_slice(x);
        for l in 0..layers {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let base = self.offsets[l];
            let w = &self.params[base..base + n_in * n_out];
            let b = &self.params[base + n_in * n_out..base + n_in * n_out + n_out];
            let (before, after) = cache.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            out.clear();
            for o in 0..n_out {
                let row = &w[o * n_in..(o + 1) * n_in];
                let z = b[o] + row.iter().zip(input).map(|(a, c)| a * c).sum::<f64>();
                out.push(z);
            }
            if l + 1 < layers {
                out.iter_mut().for_each(|z| *z = z.tanh());
            } else if let Some(scale) = &self.output_scale {
                out.iter_mut().zip(scale).for_each(|(z, s)| *z = s * z.tanh());
            }
        }
    }

    /// Back-propagates `d_out = dL/dy` through the cached pass, adding
    /// `dL/dparams` into `grad` and, if given, writing `dL/dx` into `d_in`.
    pub fn backward(&self, cache: &ForwardCache, d_out: &[f64], grad: &mut [f64], d_in: Option<&mut [f64]>) {
        let layers = self.sizes.len() - 1;
        let mut delta: Vec<f64> = d_out.to_vec();
        // Output activation derivative.
        if let Some(scale) = &self.output_scale {
            let y = &cache.acts[layers];
            for ((d, yv), s) in delta.iter_mut().zip(y).zip(scale) {
                if *s != 0.0 {
                    let t = yv / s;
                    *d *= s * (1.0 - t * t);
                } else {
                    *d = 0.0;
                }
            }
        }
        let mut d_in = d_in;
        for l in (0..layers).rev() {
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let base = self.offsets[l];
            let input = &cache.acts[l];
            {
                let (gw, gb) = grad[base..base + n_in * n_out + n_out].split_at_mut(n_in * n_out);
                for o in 0..n_out {
                    let d = delta[o];
                    gb[o] += d;
                    if d != 0.0 {
                        for (g, x) in gw[o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                            *g += d * x;
                        }
                    }
                }
            }
            let need_input_grad = l > 0 || d_in.is_some();
            if !need_input_grad {
                break;
            }
            let w = &self.params[base..base + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d != 0.0 {
                    for (p, wv) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                        *p += d * wv;
                    }
                }
            }
            if l > 0 {
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            } else if let Some(out) = d_in.as_deref_mut() {
                out.copy_from_slice(&prev);
            }
        }
    }

    /// Loss value and gradient w.r.t. every parameter for a single input.
    pub fn gradient(&self, x: &[f64], loss: &Loss) -> (f64, Vec<f64>) {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache);
        let y = cache.output();
        let value = loss.value(y);
        let d_out = loss.output_grad(y);
        let mut grad = vec![0.0; self.params.len()];
        self.backward(&cache, &d_out, &mut grad, None);
        (value, grad)
    }

    /// Loss gradient w.r.t. the input.
    pub fn input_gradient(&self, x: &[f64], loss: &Loss) -> Vec<f64> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache);
        let d_out = loss.output_grad(cache.output());
        let mut grad = vec![0.0; self.params.len()];
        let mut d_in = vec![0.0; x.len()];
        self.backward(&cache, &d_out, &mut grad, Some(&mut d_in));
        d_in
    }

    /// `self = (1 - tau) * self + tau * online`, parameterwise.
    pub fn soft_update(&mut self, online: &Mlp, tau: f64) {
        debug_assert_eq!(self.params.len(), online.params.len());
        for (t, o) in self.params.iter_mut().zip(&online.params) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
}

/// Adam with bias correction, minimising.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from_seed;

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[3, 8, 8, 2], Some(vec![2.0, 2.0]));
        assert_eq!(net.forward(&[0.3, -1.0, 2.0]), vec![0.0, 0.0]);
        let (_, grad) = net.gradient(&[0.3, -1.0, 2.0], &Loss::Squared(vec![0.0, 0.0]));
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn single_layer_hand_evaluation() {
        let r = 1.5;
        let net = Mlp::from_parts(vec![1, 1], vec![1.0, 0.0], Some(vec![r])).unwrap();
        assert!((net.forward(&[0.5])[0] - r * 0.5f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn output_is_bounded_by_scale() {
        let mut rng = rng_from_seed(3);
        for _ in 0..20 {
            let net = Mlp::new(&[3, 16, 16, 1], Some(vec![2.0]), 3.0, &mut rng);
            for k in 0..20 {
                let x = [k as f64 - 10.0, 0.5 * k as f64, -3.0];
                let y = net.forward(&x)[0];
                assert!(y.abs() <= 2.0);
            }
        }
    }

    #[test]
    fn scaled_loss_scales_gradient() {
        let mut rng = rng_from_seed(5);
        let net = Mlp::new(&[2, 5, 1], None, 0.5, &mut rng);
        let (_, g1) = net.gradient(&[0.2, -0.4], &Loss::Linear(vec![1.0]));
        let (_, g2) = net.gradient(&[0.2, -0.4], &Loss::Linear(vec![2.0]));
        for (a, b) in g1.iter().zip(&g2) {
            assert!((2.0 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_update_is_exact() {
        let mut rng = rng_from_seed(9);
        let online = Mlp::new(&[2, 4, 1], None, 1.0, &mut rng);
        let mut target = Mlp::new(&[2, 4, 1], None, 1.0, &mut rng);
        let before = target.params().to_vec();
        target.soft_update(&online, 0.005);
        for ((t, b), o) in target.params().iter().zip(&before).zip(online.params()) {
            assert_eq!(*t, (1.0 - 0.005) * b + 0.005 * o);
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = p.clone();
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn parameter_count_mismatch_is_rejected() {
        assert!(Mlp::from_parts(vec![2, 3, 1], vec![0.0; 5], None).is_err());
    }

    fn max_rel_error(net: &Mlp, x: &[f64], loss: &Loss) -> f64 {
        let (_, g) = net.gradient(x, loss);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..net.num_params() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let up = loss.value(&p.forward(x));
            p.params_mut()[i] -= 2.0 * h;
            let down = loss.value(&p.forward(x));
            let fd = (up - down) / (2.0 * h);
            let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-4);
            worst = worst.max(err);
        }
        worst
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = rng_from_seed(17);
        for k in 0..10 {
            let scale = if k % 2 == 0 { Some(vec![2.0, 0.5]) } else { None };
            let net = Mlp::new(&[3, 6, 5, 2], scale, 0.7, &mut rng);
            let x = [0.3, -0.7, 1.1];
            assert!(max_rel_error(&net, &x, &Loss::Squared(vec![0.4, -0.2])) < 1e-4);
            assert!(max_rel_error(&net, &x, &Loss::Linear(vec![-1.0, 0.5])) < 1e-4);
        }
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let mut rng = rng_from_seed(21);
        let net = Mlp::new(&[4, 8, 1], None, 0.5, &mut rng);
        let x = [0.1, -0.4, 0.9, 0.2];
        let loss = Loss::Linear(vec![1.0]);
        let g = net.input_gradient(&x, &loss);
        for i in 0..4 {
            let (mut a, mut b) = (x, x);
            a[i] += 1e-5;
            b[i] -= 1e-5;
            let fd = (net.forward(&a)[0] - net.forward(&b)[0]) / 2e-5;
            assert!((g[i] - fd).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }
}
