//! Experiment orchestration: configuration, training jobs, evaluation and
//! result aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{error, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsl::{parse_with_sensors, ProgramPolicy};
use crate::env::{episode_score, EnvId};
use crate::error::{Error, Result};
use crate::neural::NeuralPolicy;
use crate::policy::Policy;
use crate::project::Family;
use crate::propel::{
    hand_prior_policy, project_baseline, run_ippg, train_neural, Init, IppgConfig, RunHistory, RunOutput,
};
use crate::tree::RegressionTree;

/// Environment variable overriding the output directory.
pub const OUT_ENV: &str = "PROPEL_OUT";

/// Columns of `results.csv`, in order.
pub const RESULT_COLUMNS: [&str; 9] =
    ["method", "env", "seed", "iteration", "score", "epsilon_hat", "sigma2_hat", "wall_time_s", "status"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    PropelProg,
    PropelTree,
    Ndps,
    Viper,
    DdpgOnly,
    PriorOnly,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::PropelProg, Method::PropelTree, Method::Ndps, Method::Viper, Method::DdpgOnly, Method::PriorOnly];

    pub fn name(self) -> &'static str {
        match self {
            Method::PropelProg => "propel-prog",
            Method::PropelTree => "propel-tree",
            Method::Ndps => "ndps",
            Method::Viper => "viper",
            Method::DdpgOnly => "ddpg-only",
            Method::PriorOnly => "prior-only",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("method: unknown method {s:?} (expected one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExperiment {
    env: String,
    method: String,
    seeds: Vec<u64>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    #[serde(default)]
    record_wall_time: bool,
    #[serde(default)]
    prior: Option<String>,
    #[serde(default)]
    ippg: Option<toml::Value>,
}

/// A validated experiment.
///
/// ```toml
/// env = "pendulum"            # mountaincar | pendulum
/// method = "propel-prog"      # propel-prog | propel-tree | ndps | viper | ddpg-only | prior-only
/// seeds = [0, 1, 2, 3, 4]
/// output_dir = "runs/pendulum"  # optional; PROPEL_OUT wins
/// record_wall_time = false      # fill wall_time_s in results.csv
/// prior = "pid<1, 0, -15, 0, 0>"  # optional starting program
///
/// [ippg]                      # optional overrides of the loop settings
/// iterations = 5
/// mixing = 0.3
/// [ippg.ddpg]
/// actor_lr = 1e-3
/// [ippg.project]
/// rounds = 5
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvId,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub record_wall_time: bool,
    pub prior: Option<String>,
    pub ippg: IppgConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let raw: RawExperiment = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let env: EnvId = raw.env.parse()?;
        let method: Method = raw.method.parse()?;
        if raw.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        let mut ippg: IppgConfig = match raw.ippg {
            Some(v) => v.try_into().map_err(|e: toml::de::Error| Error::Config(format!("ippg: {e}")))?,
            None => IppgConfig::default(),
        };
        ippg.env = env;
        ippg.family = match method {
            Method::PropelTree | Method::Viper => Family::Tree,
            _ => Family::Dsl,
        };
        ippg.validate()?;
        if let Some(text) = &raw.prior {
            let spec = env.spec();
            let p = parse_with_sensors(text, &sensor_refs(&sensor_table(env, &[]))).map_err(|e| Error::Config(format!("prior: {e}")))?;
            p.check(spec.obs_dim, spec.action_dim, usize::MAX).map_err(|e| Error::Config(format!("prior: {e}")))?;
        }
        Ok(Self {
            env,
            method,
            seeds: raw.seeds,
            output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("runs")),
            record_wall_time: raw.record_wall_time,
            prior: raw.prior,
            ippg,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    fn seed_config(&self, seed: u64) -> IppgConfig {
        IppgConfig { seed, ..self.ippg.clone() }
    }

    fn prior(&self) -> Result<crate::project::Programmatic> {
        match &self.prior {
            None => Ok(hand_prior_policy(self.env)),
            Some(text) => {
                let spec = self.env.spec();
                let p = parse_with_sensors(text, &sensor_refs(&sensor_table(self.env, &[])))?;
                Ok(crate::project::Programmatic::Program(ProgramPolicy::new(p, spec.obs_dim, spec.action_dim)?))
            }
        }
    }
}

/// One line of `results.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub env: String,
    pub seed: u64,
    pub iteration: usize,
    pub score: Option<f64>,
    pub epsilon_hat: Option<f64>,
    pub sigma2_hat: Option<f64>,
    pub wall_time_s: Option<f64>,
    pub status: String,
}

fn rows_from_history(h: &RunHistory, record_wall_time: bool) -> Vec<ResultRow> {
    h.iterations
        .iter()
        .map(|d| ResultRow {
            method: h.method.clone(),
            env: h.env.name().into(),
            seed: h.seed,
            iteration: d.iteration,
            score: Some(d.score),
            epsilon_hat: Some(d.epsilon_hat),
            sigma2_hat: Some(d.sigma2_hat),
            wall_time_s: record_wall_time.then_some(d.wall_time_s),
            status: d.status.as_str().into(),
        })
        .collect()
}

struct JobOutput {
    rows: Vec<ResultRow>,
}

fn write_run(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("history.json"), serde_json::to_string_pretty(&out.history)?)?;
    let ext = out.final_policy.checkpoint_extension();
    fs::write(dir.join(format!("policy_final.{ext}")), out.final_policy.to_checkpoint()?)?;
    fs::write(dir.join(format!("policy_best.{ext}")), out.best_policy.to_checkpoint()?)?;
    for d in &out.history.iterations {
        fs::write(dir.join(format!("policy_iter{}.{ext}", d.iteration)), &d.policy)?;
    }
    Ok(())
}

fn run_job(cfg: &ExperimentConfig, seed: u64, root: &Path) -> Result<JobOutput> {
    let ic = cfg.seed_config(seed);
    let dir = root.join(format!("{}_{}_seed{seed}", cfg.method, cfg.env));
    let rows = match cfg.method {
        Method::PropelProg | Method::PropelTree => {
            let out = run_ippg(&ic, Init::Programmatic(cfg.prior()?))?;
            write_run(&dir, &out)?;
            rows_from_history(&out.history, cfg.record_wall_time)
        }
        Method::Ndps | Method::Viper => {
            let neural = train_neural(&ic)?;
            let out = project_baseline(&ic, ic.family, &neural)?;
            write_run(&dir, &out)?;
            fs::write(dir.join("mlp.json"), neural.policy.neural.to_json()?)?;
            rows_from_history(&out.history, cfg.record_wall_time)
        }
        Method::DdpgOnly => {
            let start = std::time::Instant::now();
            let neural = train_neural(&ic)?;
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("mlp.json"), neural.policy.neural.to_json()?)?;
            vec![ResultRow {
                method: cfg.method.name().into(),
                env: cfg.env.name().into(),
                seed,
                iteration: ic.iterations,
                score: Some(neural.score),
                epsilon_hat: Some(0.0),
                sigma2_hat: Some(neural.sigma2),
                wall_time_s: cfg.record_wall_time.then(|| start.elapsed().as_secs_f64()),
                status: if neural.diverged { "diverged" } else { "ok" }.into(),
            }]
        }
        Method::PriorOnly => {
            let prior = cfg.prior()?;
            let (score, _) = episode_score(&prior, cfg.env, ic.eval_episodes, ic.eval_seed_base)?;
            fs::create_dir_all(&dir)?;
            fs::write(dir.join(format!("policy_final.{}", prior.checkpoint_extension())), prior.to_checkpoint()?)?;
            vec![ResultRow {
                method: cfg.method.name().into(),
                env: cfg.env.name().into(),
                seed,
                iteration: 0,
                score: Some(score),
                epsilon_hat: Some(0.0),
                sigma2_hat: Some(0.0),
                wall_time_s: cfg.record_wall_time.then_some(0.0),
                status: "ok".into(),
            }]
        }
    };
    Ok(JobOutput { rows })
}

/// Output directory: `PROPEL_OUT` if set, else the configured one.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.output_dir.clone())
}

pub struct TrainSummary {
    pub dir: PathBuf,
    pub succeeded: usize,
    pub failed: usize,
}

/// Runs every seed of the experiment on up to `jobs` threads and writes
/// checkpoints, histories and `results.csv` under the output directory.
pub fn cmd_train(cfg: &ExperimentConfig, jobs: usize) -> Result<TrainSummary> {
    let dir = output_dir(cfg);
    fs::create_dir_all(&dir)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("jobs: {e}")))?;
    let results: Vec<(u64, Result<JobOutput>)> =
        pool.install(|| cfg.seeds.par_iter().map(|&s| (s, run_job(cfg, s, &dir))).collect());
    let mut rows = Vec::new();
    let (mut ok, mut failed) = (0, 0);
    for (seed, r) in results {
        match r {
            Ok(out) => {
                ok += 1;
                rows.extend(out.rows);
            }
            Err(e) => {
                failed += 1;
                error!("{} {} seed {seed} failed: {e}", cfg.method, cfg.env);
                rows.push(ResultRow {
                    method: cfg.method.name().into(),
                    env: cfg.env.name().into(),
                    seed,
                    iteration: 0,
                    score: None,
                    epsilon_hat: None,
                    sigma2_hat: None,
                    wall_time_s: None,
                    status: "error".into(),
                });
            }
        }
    }
    write_results(&dir.join("results.csv"), &rows)?;
    info!("wrote {} rows to {}", rows.len(), dir.join("results.csv").display());
    Ok(TrainSummary { dir, succeeded: ok, failed })
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {other:?}")),
    }
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let headers = r.headers().map_err(csv_err)?.clone();
    for col in RESULT_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::Config(format!("{}: missing column {col:?}", path.display())));
        }
    }
    let mut rows = Vec::new();
    for (line, rec) in r.deserialize::<ResultRow>().enumerate() {
        rows.push(rec.map_err(|e| Error::Config(format!("{}: row {}: {e}", path.display(), line + 2)))?);
    }
    Ok(rows)
}

/// Aggregate over seeds of the final score of each run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub env: String,
    pub runs: usize,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per method and environment: median, mean and standard deviation of the
/// last-iteration score of every successful run.
pub fn cmd_report(paths: &[PathBuf]) -> Result<Vec<SummaryRow>> {
    if paths.is_empty() {
        return Err(Error::Config("report: at least one results file is required".into()));
    }
    let mut finals: BTreeMap<(String, String, u64), (usize, f64)> = BTreeMap::new();
    for p in paths {
        for r in read_results(p)? {
            let Some(score) = r.score else { continue };
            if r.status == "error" || r.status == "failed" && r.iteration == 0 {
                continue;
            }
            let key = (r.method.clone(), r.env.clone(), r.seed);
            let e = finals.entry(key).or_insert((r.iteration, score));
            if r.iteration >= e.0 {
                *e = (r.iteration, score);
            }
        }
    }
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for ((m, e, _), (_, s)) in finals {
        groups.entry((m, e)).or_default().push(s);
    }
    Ok(groups
        .into_iter()
        .map(|((method, env), xs)| {
            let (mean, std) = crate::env::mean_std(&xs);
            SummaryRow { method, env, runs: xs.len(), median: median(&xs), mean, std }
        })
        .collect())
}

pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = format!("{:<12} {:<12} {:>4} {:>10} {:>10} {:>9}\n", "method", "env", "runs", "median", "mean", "std");
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:<12} {:>4} {:>10.2} {:>10.2} {:>9.2}\n",
            r.method, r.env, r.runs, r.median, r.mean, r.std
        ));
    }
    out
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Sensor names usable in DSL text for `env`, extended by `extra`.
pub fn sensor_table(env: EnvId, extra: &[(String, usize)]) -> Vec<(String, usize)> {
    let mut t: Vec<(String, usize)> =
        env.sensor_names().iter().enumerate().map(|(i, n)| (n.to_string(), i)).collect();
    t.extend(extra.iter().cloned());
    t
}

fn sensor_refs(t: &[(String, usize)]) -> Vec<(&str, usize)> {
    t.iter().map(|(n, i)| (n.as_str(), *i)).collect()
}

/// A checkpoint loaded for evaluation.
pub enum LoadedPolicy {
    Program(ProgramPolicy),
    Tree(RegressionTree),
    Mlp(NeuralPolicy),
}

impl LoadedPolicy {
    pub fn kind(&self) -> &'static str {
        match self {
            LoadedPolicy::Program(_) => "dsl",
            LoadedPolicy::Tree(_) => "tree",
            LoadedPolicy::Mlp(_) => "mlp",
        }
    }

    pub fn as_policy(&self) -> &dyn Policy {
        match self {
            LoadedPolicy::Program(p) => p,
            LoadedPolicy::Tree(t) => t,
            LoadedPolicy::Mlp(m) => m,
        }
    }
}

/// Reads DSL text, tree JSON or MLP JSON, telling the formats apart by content.
pub fn load_policy(text: &str, env: EnvId, sensors: &[(String, usize)]) -> Result<LoadedPolicy> {
    let spec = env.spec();
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let v: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("checkpoint looks like JSON but does not parse: {e}")))?;
        let p = match v.get("format").and_then(|f| f.as_str()) {
            Some("tree") => LoadedPolicy::Tree(RegressionTree::from_json(text)?),
            Some("mlp") => LoadedPolicy::Mlp(NeuralPolicy::from_json(text)?),
            Some(other) => {
                return Err(Error::Checkpoint(format!("unknown checkpoint format {other:?} (expected tree or mlp)")))
            }
            None => return Err(Error::Checkpoint("JSON checkpoint lacks a \"format\" field".into())),
        };
        let (obs, act) = match &p {
            LoadedPolicy::Tree(t) => (t.obs_dim, t.action_dim),
            LoadedPolicy::Mlp(m) => (m.mlp.input_dim(), m.mlp.output_dim()),
            LoadedPolicy::Program(_) => unreachable!(),
        };
        if obs != spec.obs_dim {
            return Err(Error::Dimension { expected: spec.obs_dim, got: obs });
        }
        if act != spec.action_dim {
            return Err(Error::Dimension { expected: spec.action_dim, got: act });
        }
        return Ok(p);
    }
    let program = parse_with_sensors(text, &sensor_refs(sensors))?;
    Ok(LoadedPolicy::Program(ProgramPolicy::new(program, spec.obs_dim, spec.action_dim)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub kind: String,
    pub env: String,
    pub episodes: usize,
    pub seed_base: u64,
    pub mean: f64,
    pub std: f64,
}

pub fn cmd_eval(
    path: &Path,
    env: EnvId,
    episodes: usize,
    seed_base: u64,
    extra_sensors: &[(String, usize)],
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("episodes: must be at least 1".into()));
    }
    let text = fs::read_to_string(path)?;
    let policy = load_policy(&text, env, &sensor_table(env, extra_sensors))?;
    let (mean, std) = episode_score(policy.as_policy(), env, episodes, seed_base)?;
    Ok(EvalReport {
        policy: path.display().to_string(),
        kind: policy.kind().into(),
        env: env.name().into(),
        episodes,
        seed_base,
        mean,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_env_names_the_field() {
        let err = ExperimentConfig::from_toml("env = \"torcs\"\nmethod = \"propel-prog\"\nseeds = [0]").unwrap_err();
        assert!(err.to_string().contains("env"), "{err}");
    }

    #[test]
    fn unknown_method_names_the_field() {
        let err = ExperimentConfig::from_toml("env = \"pendulum\"\nmethod = \"ppo\"\nseeds = [0]").unwrap_err();
        assert!(err.to_string().contains("method"), "{err}");
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let err = ExperimentConfig::from_toml("env = \"pendulum\"\nmethod = \"ndps\"\nseeds = []").unwrap_err();
        assert!(err.to_string().contains("seeds"), "{err}");
    }

    #[test]
    fn overrides_reach_the_loop() {
        let cfg = ExperimentConfig::from_toml(
            "env = \"pendulum\"\nmethod = \"viper\"\nseeds = [3]\n[ippg]\niterations = 2\n[ippg.ddpg]\nbatch_size = 32\n",
        )
        .unwrap();
        assert_eq!(cfg.ippg.iterations, 2);
        assert_eq!(cfg.ippg.ddpg.batch_size, 32);
        assert_eq!(cfg.ippg.family, Family::Tree);
        assert_eq!(cfg.ippg.env, EnvId::Pendulum);
    }

    #[test]
    fn bad_override_names_the_field() {
        let err = ExperimentConfig::from_toml("env = \"pendulum\"\nmethod = \"ndps\"\nseeds = [0]\n[ippg]\nmixing = 2.0\n")
            .unwrap_err();
        assert!(err.to_string().contains("mixing"), "{err}");
    }

    #[test]
    fn median_is_an_order_statistic() {
        assert_eq!(median(&[1.0, 2.0, 100.0]), 2.0);
        assert_eq!(median(&[5.0]), 5.0);
    }

    #[test]
    fn json_without_format_is_diagnosed() {
        let err = load_policy("{\"a\": 1}", EnvId::Pendulum, &[]).err().unwrap();
        assert!(err.to_string().contains("format"));
    }
}
