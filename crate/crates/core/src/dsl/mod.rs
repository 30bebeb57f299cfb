//! The programmatic policy language.
//!
//! A program maps an observation window to an action vector:
//!
//! ```text
//! program ::= const | program + program | c * program
//!           | if cond then program else program | pid<j, target, kp, ki, kd>
//! cond    ::= s[j] < c | s[j] > c | cond and cond | cond or cond | not cond
//! ```
//!
//! Conditions read the newest observation in the window. PID calls read the
//! whole window (see [`pid_response`]), which keeps programs pure functions
//! of their input. The concrete text syntax lives in [`syntax`].

mod syntax;

pub use syntax::{parse, parse_with_sensors, ParseError};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Action, ObservationWindow, Policy};

/// Default bound on nested conditionals.
pub const DEFAULT_MAX_DEPTH: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Comparator {
    Less,
    Greater,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cond {
    Atom { sensor: usize, cmp: Comparator, threshold: f64 },
    And(Box<Cond>, Box<Cond>),
    Or(Box<Cond>, Box<Cond>),
    Not(Box<Cond>),
}

impl Cond {
    pub fn less(sensor: usize, threshold: f64) -> Self {
        Cond::Atom { sensor, cmp: Comparator::Less, threshold }
    }

    pub fn greater(sensor: usize, threshold: f64) -> Self {
        Cond::Atom { sensor, cmp: Comparator::Greater, threshold }
    }

    pub fn holds(&self, obs: &[f64]) -> bool {
        match self {
            Cond::Atom { sensor, cmp: Comparator::Less, threshold } => obs[*sensor] < *threshold,
            Cond::Atom { sensor, cmp: Comparator::Greater, threshold } => obs[*sensor] > *threshold,
            Cond::And(a, b) => a.holds(obs) && b.holds(obs),
            Cond::Or(a, b) => a.holds(obs) || b.holds(obs),
            Cond::Not(a) => !a.holds(obs),
        }
    }

    fn check(&self, obs_dim: usize) -> Result<()> {
        match self {
            Cond::Atom { sensor, threshold, .. } => {
                if *sensor >= obs_dim {
                    return Err(Error::Type(format!("predicate reads s[{sensor}] but observations have {obs_dim} sensors")));
                }
                if !threshold.is_finite() {
                    return Err(Error::Type("non-finite threshold".into()));
                }
                Ok(())
            }
            Cond::And(a, b) | Cond::Or(a, b) => {
                a.check(obs_dim)?;
                b.check(obs_dim)
            }
            Cond::Not(a) => a.check(obs_dim),
        }
    }
}

/// `PID<sensor, target, kp, ki, kd>` driving action component `output`.
#[derive(Debug, Clone, PartialEq)]
pub struct PidConfig {
    pub sensor: usize,
    pub target: f64,
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub output: usize,
}

impl PidConfig {
    pub fn new(sensor: usize, target: f64, kp: f64, ki: f64, kd: f64) -> Self {
        Self { sensor, target, kp, ki, kd, output: 0 }
    }
}

/// PID output over the window with errors `e_t = target - s_t[sensor]`:
///
/// `kp * e_new + ki * dt * sum_t e_t + kd * (e_new - e_prev) / dt`
pub fn pid_response(pid: &PidConfig, w: &ObservationWindow) -> f64 {
    let k = w.len();
    let dt = w.dt();
    let mut sum = 0.0;
    for s in w.samples() {
        sum += pid.target - s[pid.sensor];
    }
    let e_new = pid.target - w.sample(k - 1)[pid.sensor];
    let e_prev = pid.target - w.sample(k - 2)[pid.sensor];
    pid.kp * e_new + pid.ki * dt * sum + pid.kd * (e_new - e_prev) / dt
}

#[derive(Debug, Clone, PartialEq)]
pub enum Program {
    Const(Vec<f64>),
    Add(Vec<Program>),
    Scale(f64, Box<Program>),
    If { cond: Cond, then: Box<Program>, otherwise: Box<Program> },
    Pid(PidConfig),
}

impl Program {
    pub fn constant(value: f64) -> Self {
        Program::Const(vec![value])
    }

    pub fn if_then_else(cond: Cond, then: Program, otherwise: Program) -> Self {
        Program::If { cond, then: Box::new(then), otherwise: Box::new(otherwise) }
    }

    /// Nesting depth of conditionals.
    pub fn branch_depth(&self) -> usize {
        match self {
            Program::Const(_) | Program::Pid(_) => 0,
            Program::Add(children) => children.iter().map(Program::branch_depth).max().unwrap_or(0),
            Program::Scale(_, p) => p.branch_depth(),
            Program::If { then, otherwise, .. } => 1 + then.branch_depth().max(otherwise.branch_depth()),
        }
    }

    /// Verifies sensor indices, action dimension, finiteness and depth.
    pub fn check(&self, obs_dim: usize, action_dim: usize, max_depth: usize) -> Result<()> {
        self.check_node(obs_dim, action_dim)?;
        let depth = self.branch_depth();
        if depth > max_depth {
            return Err(Error::Type(format!("conditional depth {depth} exceeds limit {max_depth}")));
        }
        Ok(())
    }

    fn check_node(&self, obs_dim: usize, action_dim: usize) -> Result<()> {
        match self {
            Program::Const(v) => {
                if v.len() != action_dim {
                    return Err(Error::Type(format!(
                        "constant has {} components, actions have {action_dim}",
                        v.len()
                    )));
                }
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::Type("non-finite constant".into()));
                }
                Ok(())
            }
            Program::Add(children) => {
                if children.is_empty() {
                    return Err(Error::Type("empty sum".into()));
                }
                children.iter().try_for_each(|c| c.check_node(obs_dim, action_dim))
            }
            Program::Scale(c, p) => {
                if !c.is_finite() {
                    return Err(Error::Type("non-finite scale factor".into()));
                }
                p.check_node(obs_dim, action_dim)
            }
            Program::If { cond, then, otherwise } => {
                cond.check(obs_dim)?;
                then.check_node(obs_dim, action_dim)?;
                otherwise.check_node(obs_dim, action_dim)
            }
            Program::Pid(pid) => {
                if pid.sensor >= obs_dim {
                    return Err(Error::Type(format!(
                        "pid reads s[{}] but observations have {obs_dim} sensors",
                        pid.sensor
                    )));
                }
                if pid.output >= action_dim {
                    return Err(Error::Type(format!(
                        "pid drives action {} but actions have {action_dim} components",
                        pid.output
                    )));
                }
                if ![pid.target, pid.kp, pid.ki, pid.kd].iter().all(|x| x.is_finite()) {
                    return Err(Error::Type("non-finite pid parameter".into()));
                }
                Ok(())
            }
        }
    }

    /// Adds this program's output into `out`.
    pub fn eval_into(&self, w: &ObservationWindow, out: &mut [f64]) {
        match self {
            Program::Const(v) => out.iter_mut().zip(v).for_each(|(o, c)| *o += c),
            Program::Add(children) => children.iter().for_each(|c| c.eval_into(w, out)),
            Program::Scale(c, p) => {
                let mut tmp = vec![0.0; out.len()];
                p.eval_into(w, &mut tmp);
                out.iter_mut().zip(tmp).for_each(|(o, t)| *o += c * t);
            }
            Program::If { cond, then, otherwise } => {
                if cond.holds(w.newest()) {
                    then.eval_into(w, out)
                } else {
                    otherwise.eval_into(w, out)
                }
            }
            Program::Pid(pid) => out[pid.output] += pid_response(pid, w),
        }
    }

    pub fn eval(&self, w: &ObservationWindow, action_dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; action_dim];
        self.eval_into(w, &mut out);
        out
    }

    /// Continuous parameters in pre-order: thresholds of a conditional come
    /// before its branches; a PID contributes `target, kp, ki, kd`.
    pub fn extract_params(&self) -> ParamVector {
        let mut pv = ParamVector::default();
        let mut node = 0;
        self.collect(&mut pv, &mut node);
        pv
    }

    fn collect(&self, pv: &mut ParamVector, node: &mut usize) {
        let here = *node;
        *node += 1;
        match self {
            Program::Const(v) => {
                for (i, x) in v.iter().enumerate() {
                    pv.push(*x, ParamKind::Constant(i), here);
                }
            }
            Program::Add(children) => children.iter().for_each(|c| c.collect(pv, node)),
            Program::Scale(c, p) => {
                pv.push(*c, ParamKind::Scale, here);
                p.collect(pv, node);
            }
            Program::If { cond, then, otherwise } => {
                collect_cond(cond, pv, here);
                then.collect(pv, node);
                otherwise.collect(pv, node);
            }
            Program::Pid(pid) => {
                pv.push(pid.target, ParamKind::Target, here);
                pv.push(pid.kp, ParamKind::Kp, here);
                pv.push(pid.ki, ParamKind::Ki, here);
                pv.push(pid.kd, ParamKind::Kd, here);
            }
        }
    }

    /// Replaces every continuous parameter, leaving structure untouched.
    pub fn inject_params(&self, values: &[f64]) -> Result<Program> {
        let expected = self.extract_params().len();
        if values.len() != expected {
            return Err(Error::ParamLength { expected, got: values.len() });
        }
        let mut it = values.iter().copied();
        Ok(self.rebuild(&mut it))
    }

    fn rebuild(&self, it: &mut impl Iterator<Item = f64>) -> Program {
        match self {
            Program::Const(v) => Program::Const(v.iter().map(|_| it.next().unwrap()).collect()),
            Program::Add(children) => Program::Add(children.iter().map(|c| c.rebuild(it)).collect()),
            Program::Scale(_, p) => {
                let c = it.next().unwrap();
                Program::Scale(c, Box::new(p.rebuild(it)))
            }
            Program::If { cond, then, otherwise } => {
                let cond = rebuild_cond(cond, it);
                let then = Box::new(then.rebuild(it));
                let otherwise = Box::new(otherwise.rebuild(it));
                Program::If { cond, then, otherwise }
            }
            Program::Pid(pid) => Program::Pid(PidConfig {
                target: it.next().unwrap(),
                kp: it.next().unwrap(),
                ki: it.next().unwrap(),
                kd: it.next().unwrap(),
                ..pid.clone()
            }),
        }
    }
}

fn collect_cond(cond: &Cond, pv: &mut ParamVector, node: usize) {
    match cond {
        Cond::Atom { threshold, .. } => pv.push(*threshold, ParamKind::Threshold, node),
        Cond::And(a, b) | Cond::Or(a, b) => {
            collect_cond(a, pv, node);
            collect_cond(b, pv, node);
        }
        Cond::Not(a) => collect_cond(a, pv, node),
    }
}

fn rebuild_cond(cond: &Cond, it: &mut impl Iterator<Item = f64>) -> Cond {
    match cond {
        Cond::Atom { sensor, cmp, .. } => Cond::Atom { sensor: *sensor, cmp: *cmp, threshold: it.next().unwrap() },
        Cond::And(a, b) => {
            let a = rebuild_cond(a, it);
            Cond::And(Box::new(a), Box::new(rebuild_cond(b, it)))
        }
        Cond::Or(a, b) => {
            let a = rebuild_cond(a, it);
            Cond::Or(Box::new(a), Box::new(rebuild_cond(b, it)))
        }
        Cond::Not(a) => Cond::Not(Box::new(rebuild_cond(a, it))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Threshold,
    Target,
    Kp,
    Ki,
    Kd,
    Constant(usize),
    Scale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSlot {
    pub kind: ParamKind,
    /// Pre-order index of the owning AST node.
    pub node: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub slots: Vec<ParamSlot>,
}

impl ParamVector {
    fn push(&mut self, value: f64, kind: ParamKind, node: usize) {
        self.values.push(value);
        self.slots.push(ParamSlot { kind, node });
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&syntax::print(self))
    }
}

/// A type-checked program bound to an action dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct ProgramPolicy {
    program: Program,
    action_dim: usize,
}

impl ProgramPolicy {
    pub fn new(program: Program, obs_dim: usize, action_dim: usize) -> Result<Self> {
        program.check(obs_dim, action_dim, usize::MAX)?;
        Ok(Self { program, action_dim })
    }

    pub fn program(&self) -> &Program {
        &self.program
    }

    pub fn into_program(self) -> Program {
        self.program
    }
}

impl Policy for ProgramPolicy {
    fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn act(&self, w: &ObservationWindow) -> Result<Action> {
        let out = self.program.eval(w, self.action_dim);
        if !out.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite { part: "programmatic" });
        }
        Ok(Action(out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn window_1d(values: &[f64], dt: f64) -> ObservationWindow {
        let samples: Vec<Vec<f64>> = values.iter().map(|v| vec![*v]).collect();
        ObservationWindow::from_samples(&samples, dt).unwrap()
    }

    fn track_program() -> Program {
        let cond = Cond::And(Box::new(Cond::less(0, 0.011)), Box::new(Cond::greater(0, -0.011)));
        Program::if_then_else(
            cond,
            Program::Pid(PidConfig::new(1, 0.45, 3.54, 0.03, 53.39)),
            Program::Pid(PidConfig::new(1, 0.39, 3.54, 0.03, 53.39)),
        )
    }

    #[test]
    fn constant_program() {
        let w = window_1d(&[0.3; 10], 0.05);
        assert_eq!(Program::constant(0.7).eval(&w, 1), vec![0.7]);
    }

    #[test]
    fn branch_reads_newest_observation() {
        let p = Program::if_then_else(Cond::less(0, 0.0), Program::constant(-1.0), Program::constant(1.0));
        let mut values = [0.5; 10];
        values[9] = -0.2;
        assert_eq!(p.eval(&window_1d(&values, 0.05), 1), vec![-1.0]);
        values[9] = 0.0;
        assert_eq!(p.eval(&window_1d(&values, 0.05), 1), vec![1.0]);
    }

    #[test]
    fn track_program_routes_by_position() {
        let p = track_program();
        p.check(2, 1, DEFAULT_MAX_DEPTH).unwrap();
        let inside = ObservationWindow::padded(&[0.005, 0.40], 10, 0.05).unwrap();
        let outside = ObservationWindow::padded(&[0.02, 0.40], 10, 0.05).unwrap();
        let then_pid = PidConfig::new(1, 0.45, 3.54, 0.03, 53.39);
        let else_pid = PidConfig::new(1, 0.39, 3.54, 0.03, 53.39);
        assert_eq!(p.eval(&inside, 1)[0], pid_response(&then_pid, &inside));
        assert_eq!(p.eval(&outside, 1)[0], pid_response(&else_pid, &outside));
    }

    #[test]
    fn pid_constant_error() {
        let (kp, ki, kd, dt, e) = (1.5, 0.7, 3.0, 0.05, 0.2);
        let pid = PidConfig::new(0, 1.0, kp, ki, kd);
        let w = window_1d(&[1.0 - e; 10], dt);
        let want = kp * e + ki * 10.0 * dt * e;
        assert!((pid_response(&pid, &w) - want).abs() < 1e-12);
    }

    #[test]
    fn pid_proportional_term() {
        let pid = PidConfig::new(0, 0.45, 1.0, 0.0, 0.0);
        let mut values = [0.0; 10];
        values[9] = 0.40;
        assert!((pid_response(&pid, &window_1d(&values, 1.0)) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn pid_derivative_term() {
        // errors 0.0 then 0.1 on the last two samples
        let pid = PidConfig::new(0, 0.0, 0.0, 0.0, 1.0);
        let mut values = [0.0; 10];
        values[9] = -0.1;
        assert!((pid_response(&pid, &window_1d(&values, 0.05)) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn type_errors() {
        let p = Program::Pid(PidConfig::new(5, 0.0, 1.0, 0.0, 0.0));
        assert!(p.check(2, 1, 3).is_err());
        assert!(Program::Const(vec![1.0, 2.0]).check(2, 1, 3).is_err());
        let deep = (0..4).fold(Program::constant(0.0), |acc, _| {
            Program::if_then_else(Cond::less(0, 0.0), acc, Program::constant(1.0))
        });
        assert_eq!(deep.branch_depth(), 4);
        assert!(deep.check(1, 1, 3).is_err());
        assert!(deep.check(1, 1, 4).is_ok());
    }

    #[test]
    fn param_extraction() {
        assert_eq!(Program::constant(0.5).extract_params().values, vec![0.5]);
        let p = track_program();
        let pv = p.extract_params();
        assert_eq!(pv.len(), 10);
        assert_eq!(pv.values[..2], [0.011, -0.011]);
        assert_eq!(pv.slots[2].kind, ParamKind::Target);
        assert_eq!(p.inject_params(&pv.values).unwrap(), p);
    }

    #[test]
    fn inject_zeros_keeps_shape() {
        let p = track_program();
        let zeroed = p.inject_params(&[0.0; 10]).unwrap();
        assert!(zeroed.extract_params().values.iter().all(|v| *v == 0.0));
        match &zeroed {
            Program::If { cond: Cond::And(a, b), then, otherwise } => {
                assert!(matches!(**a, Cond::Atom { sensor: 0, cmp: Comparator::Less, .. }));
                assert!(matches!(**b, Cond::Atom { sensor: 0, cmp: Comparator::Greater, .. }));
                assert!(matches!(**then, Program::Pid(PidConfig { sensor: 1, .. })));
                assert!(matches!(**otherwise, Program::Pid(PidConfig { sensor: 1, .. })));
            }
            other => panic!("shape changed: {other:?}"),
        }
    }

    #[test]
    fn inject_length_mismatch() {
        assert!(matches!(
            track_program().inject_params(&[0.0; 3]),
            Err(Error::ParamLength { expected: 10, got: 3 })
        ));
    }
}
