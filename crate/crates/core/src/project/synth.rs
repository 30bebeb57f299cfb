//! Imitation-driven synthesis of DSL programs.
//!
//! A leaf is a constant, one PID controller, or a sum of PID controllers over
//! every sensor. PID outputs are affine in `(1, s_new, sum_t s_t, s_new - s_prev)`
//! of their sensor, so leaves are fitted in closed form by least squares and
//! only the branch thresholds need search.

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dsl::{Cond, PidConfig, Program};
use crate::error::{Error, Result};
use crate::policy::ObservationWindow;
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Maximum conditional nesting depth.
    pub max_depth: usize,
    /// Candidate thresholds per sensor and node during structure search.
    pub quantiles: usize,
    /// Minimum samples on each side of a split.
    pub min_leaf: usize,
    /// Objective evaluations allowed for threshold refinement.
    pub budget: usize,
    pub restarts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { max_depth: crate::dsl::DEFAULT_MAX_DEPTH, quantiles: 21, min_leaf: 10, budget: 400, restarts: 2 }
    }
}

#[derive(Debug, Clone)]
pub struct SynthResult {
    pub program: Program,
    /// Imitation RMSE of `program` on the data.
    pub rmse: f64,
    pub evaluations: usize,
    pub budget_exhausted: bool,
    /// Set when nothing beat the constant predictor.
    pub constant_fallback: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LeafKind {
    Const,
    Pid(usize),
    PidSum,
}

/// Design rows `[1, s_new, sum, delta]` per sensor, column-scaled.
struct Data {
    n: usize,
    obs_dim: usize,
    action_dim: usize,
    cols: usize,
    dt: f64,
    k: usize,
    z: Vec<f64>,
    y: Vec<f64>,
    scale: Vec<f64>,
}

impl Data {
    fn new(windows: &[&ObservationWindow], targets: &[&[f64]], action_dim: usize) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if windows.len() != targets.len() {
            return Err(Error::Dimension { expected: windows.len(), got: targets.len() });
        }
        let obs_dim = windows[0].obs_dim();
        let k = windows[0].len();
        let dt = windows[0].dt();
        let cols = 1 + 3 * obs_dim;
        let n = windows.len();
        let mut z = Vec::with_capacity(n * cols);
        let mut y = Vec::with_capacity(n * action_dim);
        for (w, t) in windows.iter().zip(targets) {
            if w.obs_dim() != obs_dim || w.len() != k {
                return Err(Error::Dimension { expected: obs_dim, got: w.obs_dim() });
            }
            if t.len() != action_dim {
                return Err(Error::Dimension { expected: action_dim, got: t.len() });
            }
            z.push(1.0);
            let new = w.newest();
            let prev = w.sample(k.saturating_sub(2));
            for j in 0..obs_dim {
                let sum: f64 = w.samples().map(|s| s[j]).sum();
                z.extend([new[j], sum, new[j] - prev[j]]);
            }
            y.extend_from_slice(t);
        }
        let mut scale = vec![1.0; cols];
        for (c, s) in scale.iter_mut().enumerate().skip(1) {
            let ms = (0..n).map(|i| z[i * cols + c].powi(2)).sum::<f64>() / n as f64;
            *s = if ms > 0.0 { ms.sqrt() } else { 1.0 };
        }
        for row in z.chunks_mut(cols) {
            row.iter_mut().zip(&scale).for_each(|(v, s)| *v /= s);
        }
        Ok(Self { n, obs_dim, action_dim, cols, dt, k, z, y, scale })
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.z[i * self.cols..(i + 1) * self.cols]
    }

    fn target(&self, i: usize) -> &[f64] {
        &self.y[i * self.action_dim..(i + 1) * self.action_dim]
    }

    /// Raw newest value of `sensor` for sample `i`.
    fn sensor(&self, i: usize, sensor: usize) -> f64 {
        self.z[i * self.cols + 1 + 3 * sensor] * self.scale[1 + 3 * sensor]
    }

    fn kinds(&self) -> Vec<LeafKind> {
        let mut out = vec![LeafKind::Const];
        out.extend((0..self.obs_dim).map(LeafKind::Pid));
        if self.obs_dim > 1 {
            out.push(LeafKind::PidSum);
        }
        out
    }

    fn columns(&self, kind: LeafKind) -> Vec<usize> {
        match kind {
            LeafKind::Const => vec![0],
            LeafKind::Pid(j) => vec![0, 1 + 3 * j, 2 + 3 * j, 3 + 3 * j],
            LeafKind::PidSum => (0..self.cols).collect(),
        }
    }
}

/// Sufficient statistics of a sample subset.
#[derive(Clone)]
struct Stats {
    n: usize,
    gram: Vec<f64>,
    zy: Vec<f64>,
    yy: Vec<f64>,
    /// First target seen, used to centre constant fits.
    anchor: Option<Vec<f64>>,
    /// Sum of `y - anchor`, so a constant subset gives an exact mean.
    dev: Vec<f64>,
    dev2: Vec<f64>,
}

impl Stats {
    fn new(d: &Data) -> Self {
        Self {
            n: 0,
            gram: vec![0.0; d.cols * d.cols],
            zy: vec![0.0; d.cols * d.action_dim],
            yy: vec![0.0; d.action_dim],
            anchor: None,
            dev: vec![0.0; d.action_dim],
            dev2: vec![0.0; d.action_dim],
        }
    }

    fn of(d: &Data, idx: &[usize]) -> Self {
        let mut s = Self::new(d);
        idx.iter().for_each(|&i| s.add(d, i));
        s
    }

    fn add(&mut self, d: &Data, i: usize) {
        let z = d.row(i);
        let y = d.target(i);
        let c = d.cols;
        self.n += 1;
        for a in 0..c {
            let za = z[a];
            for b in a..c {
                self.gram[a * c + b] += za * z[b];
            }
            for (o, yo) in y.iter().enumerate() {
                self.zy[o * c + a] += za * yo;
            }
        }
        let anchor = self.anchor.get_or_insert_with(|| y.to_vec());
        for o in 0..y.len() {
            self.yy[o] += y[o] * y[o];
            let dv = y[o] - anchor[o];
            self.dev[o] += dv;
            self.dev2[o] += dv * dv;
        }
    }

    fn gram_at(&self, c: usize, a: usize, b: usize) -> f64 {
        if a <= b {
            self.gram[a * c + b]
        } else {
            self.gram[b * c + a]
        }
    }
}

struct LeafFit {
    kind: LeafKind,
    sse: f64,
    params: usize,
    /// Per output, coefficients on the scaled columns of `kind`.
    coef: Vec<Vec<f64>>,
}

fn solve(d: &Data, s: &Stats, cols: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let m = cols.len();
    let c = d.cols;
    let mut g = DMatrix::zeros(m, m);
    for (p, &a) in cols.iter().enumerate() {
        for (q, &b) in cols.iter().enumerate() {
            g[(p, q)] = s.gram_at(c, a, b);
        }
    }
    let trace = (0..m).map(|p| g[(p, p)]).sum::<f64>() / m as f64;
    let ridge = 1e-12 * trace.max(1e-300);
    let mut gr = g.clone();
    for p in 0..m {
        gr[(p, p)] += ridge;
    }
    let chol = gr.clone().cholesky();
    let mut sse = 0.0;
    let mut coef = Vec::with_capacity(d.action_dim);
    for o in 0..d.action_dim {
        let rhs = DVector::from_iterator(m, cols.iter().map(|&a| s.zy[o * c + a]));
        let b = match &chol {
            Some(ch) => ch.solve(&rhs),
            None => gr.clone().lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(m)),
        };
        let fit = 2.0 * b.dot(&rhs) - (b.transpose() * &g * &b)[(0, 0)];
        sse += (s.yy[o] - fit).max(0.0);
        coef.push(b.iter().copied().collect());
    }
    (sse, coef)
}

fn const_fit(d: &Data, s: &Stats) -> LeafFit {
    let n = s.n.max(1) as f64;
    let anchor = s.anchor.clone().unwrap_or_else(|| vec![0.0; d.action_dim]);
    let mut sse = 0.0;
    let mut coef = Vec::with_capacity(d.action_dim);
    for o in 0..d.action_dim {
        sse += (s.dev2[o] - s.dev[o] * s.dev[o] / n).max(0.0);
        coef.push(vec![anchor[o] + s.dev[o] / n]);
    }
    LeafFit { kind: LeafKind::Const, sse, coef, params: d.action_dim }
}

fn tolerance(s: &Stats) -> f64 {
    1e-9 * s.yy.iter().sum::<f64>() + 1e-12
}

/// Penalised loss `n ln(sse / n) + params ln n`. `floor` keeps exact fits
/// finite, so among them the one with fewest parameters wins.
fn penalised(n: usize, sse: f64, params: usize, floor: f64) -> f64 {
    let n = n.max(1) as f64;
    n * ((sse + floor) / n).ln() + params as f64 * n.ln()
}

/// Leaf with the lowest penalised loss; ties go to the simpler kind.
fn best_leaf(d: &Data, s: &Stats) -> LeafFit {
    let mut fits = vec![const_fit(d, s)];
    if s.n > 1 {
        for kind in d.kinds().into_iter().skip(1) {
            let cols = d.columns(kind);
            let (sse, coef) = solve(d, s, &cols);
            fits.push(LeafFit { kind, sse, coef, params: cols.len() * d.action_dim });
        }
    }
    let tol = tolerance(s);
    let score = |f: &LeafFit| penalised(s.n, f.sse, f.params, tol);
    let mut best = 0;
    for i in 1..fits.len() {
        if score(&fits[i]) < score(&fits[best]) - 1e-9 {
            best = i;
        }
    }
    fits.swap_remove(best)
}

#[derive(Debug, Clone, PartialEq)]
enum Shape {
    Leaf,
    Split { sensor: usize, threshold: f64, left: Box<Shape>, right: Box<Shape> },
}

impl Shape {
    fn depth(&self) -> usize {
        match self {
            Shape::Leaf => 0,
            Shape::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn truncate(&self, depth: usize) -> Shape {
        match self {
            Shape::Split { sensor, threshold, left, right } if depth > 0 => Shape::Split {
                sensor: *sensor,
                threshold: *threshold,
                left: Box::new(left.truncate(depth - 1)),
                right: Box::new(right.truncate(depth - 1)),
            },
            _ => Shape::Leaf,
        }
    }

    fn thresholds(&self, out: &mut Vec<f64>) {
        if let Shape::Split { threshold, left, right, .. } = self {
            out.push(*threshold);
            left.thresholds(out);
            right.thresholds(out);
        }
    }

    fn set_thresholds(&mut self, it: &mut impl Iterator<Item = f64>) {
        if let Shape::Split { threshold, left, right, .. } = self {
            *threshold = it.next().unwrap();
            left.set_thresholds(it);
            right.set_thresholds(it);
        }
    }

    /// Pre-order split nodes as `(sensor, children_are_leaves)`.
    fn splits(&self, out: &mut Vec<(usize, bool)>) {
        if let Shape::Split { sensor, left, right, .. } = self {
            out.push((*sensor, **left == Shape::Leaf && **right == Shape::Leaf));
            left.splits(out);
            right.splits(out);
        }
    }
}

fn partition(d: &Data, idx: &[usize], sensor: usize, threshold: f64) -> (Vec<usize>, Vec<usize>) {
    idx.iter().partition(|&&i| d.sensor(i, sensor) < threshold)
}

/// Total leaf loss and parameter count (thresholds included) of a shape
/// with closed-form leaves.
fn fit_of(d: &Data, shape: &Shape, idx: &[usize]) -> (f64, usize) {
    match shape {
        Shape::Leaf => {
            let f = best_leaf(d, &Stats::of(d, idx));
            (f.sse, f.params)
        }
        Shape::Split { sensor, threshold, left, right } => {
            let (l, r) = partition(d, idx, *sensor, *threshold);
            let (a, pa) = fit_of(d, left, &l);
            let (b, pb) = fit_of(d, right, &r);
            (a + b, pa + pb + 1)
        }
    }
}

/// Samples reaching the `target`-th split node in pre-order.
fn reaching(d: &Data, shape: &Shape, idx: Vec<usize>, target: usize, counter: &mut usize) -> Option<Vec<usize>> {
    if let Shape::Split { sensor, threshold, left, right } = shape {
        if *counter == target {
            return Some(idx);
        }
        *counter += 1;
        let (l, r) = partition(d, &idx, *sensor, *threshold);
        if let Some(found) = reaching(d, left, l, target, counter) {
            return Some(found);
        }
        return reaching(d, right, r, target, counter);
    }
    None
}

struct Synth<'a> {
    d: &'a Data,
    cfg: &'a SynthConfig,
    all: Vec<usize>,
    floor: f64,
    evaluations: usize,
}

impl Synth<'_> {
    fn grow(&self, idx: Vec<usize>, depth: usize) -> Shape {
        let stats = Stats::of(self.d, &idx);
        let leaf = best_leaf(self.d, &stats);
        let tol = tolerance(&stats);
        if depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_leaf.max(1) || leaf.sse <= tol {
            return Shape::Leaf;
        }
        let n = idx.len();
        let leaf_score = penalised(n, leaf.sse, leaf.params, tol);
        let mut best: Option<(f64, usize, f64)> = None;
        for sensor in 0..self.d.obs_dim {
            let mut order = idx.clone();
            order.sort_by(|&a, &b| self.d.sensor(a, sensor).total_cmp(&self.d.sensor(b, sensor)));
            let cuts = quantile_cuts(self.d, &order, sensor, self.cfg.quantiles, self.cfg.min_leaf.max(1));
            let mut left = Stats::new(self.d);
            let mut pos = 0;
            for (cut, threshold) in cuts {
                while pos < cut {
                    left.add(self.d, order[pos]);
                    pos += 1;
                }
                let right = Stats::of(self.d, &order[cut..]);
                let (l, r) = (best_leaf(self.d, &left), best_leaf(self.d, &right));
                let score = penalised(n, l.sse + r.sse, l.params + r.params + 1, tol);
                if score < leaf_score && best.map_or(true, |(b, _, _)| score < b) {
                    best = Some((score, sensor, threshold));
                }
            }
        }
        let Some((_, sensor, threshold)) = best else {
            return Shape::Leaf;
        };
        let (l, r) = partition(self.d, &idx, sensor, threshold);
        Shape::Split {
            sensor,
            threshold,
            left: Box::new(self.grow(l, depth + 1)),
            right: Box::new(self.grow(r, depth + 1)),
        }
    }

    /// Penalised loss of `shape` on all the data.
    fn eval(&mut self, shape: &Shape) -> f64 {
        self.evaluations += 1;
        let (sse, params) = fit_of(self.d, shape, &self.all);
        penalised(self.all.len(), sse, params, self.floor)
    }

    /// Exact scan over every data midpoint in `[lo, hi]` for a split whose
    /// children are leaves.
    fn scan(&mut self, shape: &mut Shape, node: usize, sensor: usize, lo: f64, hi: f64) {
        let mut counter = 0;
        let Some(mut idx) = reaching(self.d, shape, self.all.clone(), node, &mut counter) else { return };
        if idx.len() < 2 {
            return;
        }
        idx.sort_by(|&a, &b| self.d.sensor(a, sensor).total_cmp(&self.d.sensor(b, sensor)));
        let mut ths = Vec::new();
        thresholds_of(shape, node, &mut ths);
        let current = ths[0];
        let total = Stats::of(self.d, &idx);
        let suffix = Suffix::new(self.d, &idx);
        let mut left = Stats::new(self.d);
        let min_leaf = self.cfg.min_leaf.max(1);
        let mut best = (f64::INFINITY, current);
        for p in 1..idx.len() {
            left.add(self.d, idx[p - 1]);
            let (a, b) = (self.d.sensor(idx[p - 1], sensor), self.d.sensor(idx[p], sensor));
            if a == b || p < min_leaf || idx.len() - p < min_leaf {
                continue;
            }
            let t = 0.5 * (a + b);
            if t < lo || t > hi {
                continue;
            }
            let right = subtract(&total, &left, &suffix, p);
            let (l, r) = (best_leaf(self.d, &left), best_leaf(self.d, &right));
            let score = penalised(idx.len(), l.sse + r.sse, l.params + r.params, self.floor);
            if score < best.0 - 1e-12 * best.0.abs() {
                best = (score, t);
            }
        }
        self.evaluations += 1;
        let mut all = Vec::new();
        shape.thresholds(&mut all);
        all[node] = best.1;
        shape.set_thresholds(&mut all.into_iter());
    }

    fn golden(&mut self, shape: &mut Shape, node: usize, lo: f64, hi: f64, steps: usize) {
        let mut ths = Vec::new();
        shape.thresholds(&mut ths);
        let set = |shape: &mut Shape, t: f64, ths: &mut Vec<f64>| {
            ths[node] = t;
            shape.set_thresholds(&mut ths.clone().into_iter());
        };
        let base = self.eval(shape);
        let start = ths[node];
        let phi = 0.5 * (5f64.sqrt() - 1.0);
        let (mut a, mut b) = (lo, hi);
        let mut c = b - phi * (b - a);
        let mut e = a + phi * (b - a);
        set(shape, c, &mut ths);
        let mut fc = self.eval(shape);
        set(shape, e, &mut ths);
        let mut fe = self.eval(shape);
        for _ in 0..steps {
            if fc <= fe {
                b = e;
                e = c;
                fe = fc;
                c = b - phi * (b - a);
                set(shape, c, &mut ths);
                fc = self.eval(shape);
            } else {
                a = c;
                c = e;
                fc = fe;
                e = a + phi * (b - a);
                set(shape, e, &mut ths);
                fe = self.eval(shape);
            }
        }
        let (t, f) = if fc <= fe { (c, fc) } else { (e, fe) };
        set(shape, if f < base { t } else { start }, &mut ths);
    }

    /// One coordinate sweep over all thresholds.
    fn sweep(&mut self, shape: &mut Shape, widths: &[f64]) {
        let mut splits = Vec::new();
        shape.splits(&mut splits);
        for (node, (sensor, leaf_parent)) in splits.into_iter().enumerate() {
            if self.evaluations >= self.cfg.budget {
                return;
            }
            let mut ths = Vec::new();
            shape.thresholds(&mut ths);
            let (lo, hi) = (ths[node] - widths[node], ths[node] + widths[node]);
            if leaf_parent {
                self.scan(shape, node, sensor, lo, hi);
            } else {
                let steps = 12.min(self.cfg.budget.saturating_sub(self.evaluations + 3));
                self.golden(shape, node, lo, hi, steps);
            }
        }
    }

    fn refine(&mut self, shape: Shape, rng: &mut Rng) -> (Shape, f64) {
        let mut ths = Vec::new();
        shape.thresholds(&mut ths);
        if ths.is_empty() {
            let f = self.eval(&shape);
            return (shape, f);
        }
        let widths = self.widths(&shape);
        let mut best = shape.clone();
        self.sweep(&mut best, &widths);
        let mut best_f = self.eval(&best);
        for _ in 0..self.cfg.restarts {
            if self.evaluations >= self.cfg.budget {
                break;
            }
            let mut cand = best.clone();
            let mut t = Vec::new();
            cand.thresholds(&mut t);
            for (v, w) in t.iter_mut().zip(&widths) {
                *v += w * rng.gen_range(-1.0..1.0);
            }
            cand.set_thresholds(&mut t.into_iter());
            self.sweep(&mut cand, &widths);
            let f = self.eval(&cand);
            if f < best_f {
                best = cand;
                best_f = f;
            }
        }
        (best, best_f)
    }

    /// Search half-width per threshold: one quantile spacing of the data
    /// reaching that node.
    fn widths(&self, shape: &Shape) -> Vec<f64> {
        let mut splits = Vec::new();
        shape.splits(&mut splits);
        let q = self.cfg.quantiles.max(1) as f64 + 1.0;
        splits
            .iter()
            .enumerate()
            .map(|(node, (sensor, _))| {
                let mut counter = 0;
                let idx = reaching(self.d, shape, self.all.clone(), node, &mut counter).unwrap_or_default();
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = self.d.sensor(i, *sensor);
                    (lo.min(v), hi.max(v))
                });
                if hi > lo {
                    (hi - lo) / q
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// Moves each threshold to the midpoint between the neighbouring data
    /// values that reach it; the partition is unchanged.
    fn snap(&self, shape: &mut Shape) {
        let mut splits = Vec::new();
        shape.splits(&mut splits);
        for (node, (sensor, _)) in splits.into_iter().enumerate() {
            let mut counter = 0;
            let Some(idx) = reaching(self.d, shape, self.all.clone(), node, &mut counter) else { continue };
            let mut ths = Vec::new();
            shape.thresholds(&mut ths);
            let t = ths[node];
            let below = idx.iter().map(|&i| self.d.sensor(i, sensor)).filter(|v| *v < t).fold(f64::NEG_INFINITY, f64::max);
            let above = idx.iter().map(|&i| self.d.sensor(i, sensor)).filter(|v| *v >= t).fold(f64::INFINITY, f64::min);
            if below.is_finite() && above.is_finite() {
                let mid = 0.5 * (below + above);
                ths[node] = if mid > below { mid } else { above };
                shape.set_thresholds(&mut ths.into_iter());
            }
        }
    }

    fn build(&self, shape: &Shape, idx: &[usize]) -> Program {
        match shape {
            Shape::Leaf => leaf_program(self.d, &best_leaf(self.d, &Stats::of(self.d, idx))),
            Shape::Split { sensor, threshold, left, right } => {
                let (l, r) = partition(self.d, idx, *sensor, *threshold);
                Program::if_then_else(Cond::less(*sensor, *threshold), self.build(left, &l), self.build(right, &r))
            }
        }
    }
}

fn thresholds_of(shape: &Shape, node: usize, out: &mut Vec<f64>) {
    let mut all = Vec::new();
    shape.thresholds(&mut all);
    out.push(all[node]);
}

/// Statistics of `total` minus `left`. Constant-fit moments come from
/// `suffix`, which is anchored on a sample of the right part itself.
fn subtract(total: &Stats, left: &Stats, suffix: &Suffix, p: usize) -> Stats {
    let mut s = total.clone();
    s.n -= left.n;
    s.gram.iter_mut().zip(&left.gram).for_each(|(a, b)| *a -= b);
    s.zy.iter_mut().zip(&left.zy).for_each(|(a, b)| *a -= b);
    s.yy.iter_mut().zip(&left.yy).for_each(|(a, b)| *a -= b);
    let d = suffix.anchor.len();
    s.anchor = Some(suffix.anchor.clone());
    s.dev = suffix.dev[p * d..(p + 1) * d].to_vec();
    s.dev2 = suffix.dev2[p * d..(p + 1) * d].to_vec();
    s
}

/// Suffix sums of `y - anchor` and its square over an ordering, anchored on
/// its last sample.
struct Suffix {
    anchor: Vec<f64>,
    dev: Vec<f64>,
    dev2: Vec<f64>,
}

impl Suffix {
    fn new(d: &Data, order: &[usize]) -> Self {
        let a = d.action_dim;
        let anchor = d.target(*order.last().unwrap()).to_vec();
        let n = order.len();
        let mut dev = vec![0.0; (n + 1) * a];
        let mut dev2 = vec![0.0; (n + 1) * a];
        for p in (0..n).rev() {
            for (o, v) in d.target(order[p]).iter().enumerate() {
                let dv = v - anchor[o];
                dev[p * a + o] = dev[(p + 1) * a + o] + dv;
                dev2[p * a + o] = dev2[(p + 1) * a + o] + dv * dv;
            }
        }
        Self { anchor, dev, dev2 }
    }
}

/// Cut positions (left size) with midpoint thresholds at node-local quantiles.
fn quantile_cuts(d: &Data, order: &[usize], sensor: usize, q: usize, min_leaf: usize) -> Vec<(usize, f64)> {
    let n = order.len();
    let mut out: Vec<(usize, f64)> = Vec::new();
    for m in 1..=q {
        let mut p = (m * n) / (q + 1);
        // Move to the next change of value so the cut is realisable.
        while p < n && p > 0 && d.sensor(order[p - 1], sensor) == d.sensor(order[p], sensor) {
            p += 1;
        }
        if p < min_leaf || n - p < min_leaf || p >= n {
            continue;
        }
        if out.last().is_some_and(|(c, _)| *c == p) {
            continue;
        }
        let t = 0.5 * (d.sensor(order[p - 1], sensor) + d.sensor(order[p], sensor));
        out.push((p, t));
    }
    out
}

fn leaf_program(d: &Data, fit: &LeafFit) -> Program {
    let cols = d.columns(fit.kind);
    let mut parts: Vec<Program> = Vec::new();
    let mut constant = vec![0.0; d.action_dim];
    for (o, coef) in fit.coef.iter().enumerate() {
        let raw: Vec<f64> = coef.iter().zip(&cols).map(|(b, &c)| b / d.scale[c]).collect();
        let mut c0 = raw[0];
        let sensors: Vec<usize> = match fit.kind {
            LeafKind::Const => vec![],
            LeafKind::Pid(j) => vec![j],
            LeafKind::PidSum => (0..d.obs_dim).collect(),
        };
        let mut pids = Vec::new();
        for (slot, &j) in sensors.iter().enumerate() {
            let (a, b, dd) = (raw[1 + 3 * slot], raw[2 + 3 * slot], raw[3 + 3 * slot]);
            let kp = -a;
            let ki = -b / d.dt;
            let kd = -dd * d.dt;
            pids.push((j, kp, ki, kd, kp + ki * d.dt * d.k as f64));
        }
        // Fold the intercept into the target of the best-conditioned PID.
        let mut targets = vec![0.0; pids.len()];
        if let Some((slot, den)) =
            pids.iter().enumerate().map(|(s, p)| (s, p.4)).max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        {
            let t = c0 / den;
            if den != 0.0 && t.is_finite() && t.abs() <= 1e3 {
                targets[slot] = t;
                c0 = 0.0;
            }
        }
        for ((j, kp, ki, kd, _), target) in pids.into_iter().zip(targets) {
            let mut pid = PidConfig::new(j, target, kp, ki, kd);
            pid.output = o;
            parts.push(Program::Pid(pid));
        }
        constant[o] = c0;
    }
    let has_const = fit.kind == LeafKind::Const || constant.iter().any(|c| *c != 0.0);
    if has_const {
        parts.push(Program::Const(constant));
    }
    match parts.len() {
        1 => parts.pop().unwrap(),
        _ => Program::Add(parts),
    }
}

/// Synthesises a program imitating `targets` on `windows`.
///
/// Candidate structures are the greedy tree truncated at every depth; each
/// has its thresholds refined and the one with the lowest penalised loss is
/// returned.
pub fn synthesize(
    windows: &[&ObservationWindow],
    targets: &[&[f64]],
    action_dim: usize,
    cfg: &SynthConfig,
    rng: &mut Rng,
) -> Result<SynthResult> {
    let d = Data::new(windows, targets, action_dim)?;
    let all_stats = Stats::of(&d, &(0..d.n).collect::<Vec<_>>());
    let tol = tolerance(&all_stats);
    let const_sse = const_fit(&d, &all_stats).sse;
    let mut s = Synth { d: &d, cfg, all: (0..d.n).collect(), floor: tol, evaluations: 0 };
    let greedy = s.grow(s.all.clone(), 0);
    let mut best: Option<(Shape, f64)> = None;
    for depth in 0..=greedy.depth() {
        let (shape, f) = s.refine(greedy.truncate(depth), rng);
        debug!("structure depth {depth}: penalised loss {f:.6e}");
        if best.as_ref().map_or(true, |(_, bf)| f < *bf) {
            best = Some((shape, f));
        }
    }
    let (mut shape, _) = best.unwrap();
    s.snap(&mut shape);
    let constant_fallback = fit_of(&d, &shape, &s.all).0 > const_sse + tol;
    if constant_fallback {
        shape = Shape::Leaf;
    }
    let program = s.build(&shape, &s.all);
    let mut sq = 0.0;
    for (w, t) in windows.iter().zip(targets) {
        let p = program.eval(w, action_dim);
        sq += p.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    let rmse = (sq / d.n as f64).sqrt();
    Ok(SynthResult {
        program,
        rmse,
        evaluations: s.evaluations,
        budget_exhausted: s.evaluations >= cfg.budget,
        constant_fallback,
    })
}
