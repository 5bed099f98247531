//! Experiment plumbing: run traces and their CSV form, JSON experiment
//! configs, the parallel (method x seed) matrix and median summaries.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::benchmarks::Problem;
use crate::error::{NatmoError, Result};
use crate::losses::MetricChoice;
use crate::natgrad::RegPolicy;
use crate::optimizers::{run_observed, MethodSpec, OptConfig};

pub const TRACE_HEADER: &str = "iter,time_ms,train_loss,stop_metric,test_metric,alpha,beta,grad_norm";
pub const TRACE_EXT: &str = "csv";
pub const PARTIAL_EXT: &str = "csv.partial";
const STATUS_PREFIX: &str = "# status=";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RunStatus {
    Converged,
    MaxIters,
    Diverged,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Converged => "converged",
            RunStatus::MaxIters => "max_iters",
            RunStatus::Diverged => "diverged",
        }
    }
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RunStatus {
    type Err = NatmoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "converged" => Ok(RunStatus::Converged),
            "max_iters" => Ok(RunStatus::MaxIters),
            "diverged" => Ok(RunStatus::Diverged),
            other => Err(NatmoError::Parse(format!("unknown run status {other:?}"))),
        }
    }
}

/// One row of a trace. Metrics are taken at `theta_iter`; `alpha`, `beta`
/// and `grad_norm` belong to the step that produced it (zeros in row 0).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub time_ms: f64,
    pub train_loss: f64,
    pub stop_metric: f64,
    pub test_metric: f64,
    pub alpha: f64,
    pub beta: f64,
    pub grad_norm: f64,
}

impl IterRecord {
    fn to_csv_row(&self) -> String {
        format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            self.iter,
            self.time_ms,
            self.train_loss,
            self.stop_metric,
            self.test_metric,
            self.alpha,
            self.beta,
            self.grad_norm
        )
    }

    fn from_csv_row(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(NatmoError::Parse(format!("expected 8 fields, got {}: {line:?}", fields.len())));
        }
        let real = |i: usize| -> Result<f64> {
            fields[i]
                .trim()
                .parse()
                .map_err(|_| NatmoError::Parse(format!("bad number {:?}", fields[i])))
        };
        Ok(Self {
            iter: fields[0]
                .trim()
                .parse()
                .map_err(|_| NatmoError::Parse(format!("bad iteration {:?}", fields[0])))?,
            time_ms: real(1)?,
            train_loss: real(2)?,
            stop_metric: real(3)?,
            test_metric: real(4)?,
            alpha: real(5)?,
            beta: real(6)?,
            grad_norm: real(7)?,
        })
    }

    /// Every column except wall time, as raw bits so NaN compares equal.
    fn numeric_bits(&self) -> [u64; 7] {
        [
            self.iter as u64,
            self.train_loss.to_bits(),
            self.stop_metric.to_bits(),
            self.test_metric.to_bits(),
            self.alpha.to_bits(),
            self.beta.to_bits(),
            self.grad_norm.to_bits(),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub run_id: String,
    pub problem: String,
    pub method: String,
    pub seed: u64,
    /// `None` while the run is in progress or after an interruption.
    pub status: Option<RunStatus>,
    pub records: Vec<IterRecord>,
}

pub fn run_id(problem: &str, method: &str, seed: u64) -> String {
    format!("{problem}__{method}__seed{seed}")
}

impl RunTrace {
    pub fn new(problem: &str, method: &str, seed: u64) -> Self {
        Self {
            run_id: run_id(problem, method, seed),
            problem: problem.to_string(),
            method: method.to_string(),
            seed,
            status: None,
            records: Vec::new(),
        }
    }

    pub fn finish(&mut self, status: RunStatus) -> Result<()> {
        if let Some(old) = self.status {
            return Err(NatmoError::invalid(format!("{} already finished as {old}", self.run_id)));
        }
        self.status = Some(status);
        Ok(())
    }

    /// Iterations strictly increasing and wall time nondecreasing.
    pub fn validate(&self) -> Result<()> {
        for w in self.records.windows(2) {
            if w[1].iter <= w[0].iter {
                return Err(NatmoError::invalid(format!("{}: iterations not increasing at {}", self.run_id, w[1].iter)));
            }
            if w[1].time_ms < w[0].time_ms {
                return Err(NatmoError::invalid(format!("{}: wall time decreases at {}", self.run_id, w[1].iter)));
            }
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&IterRecord> {
        self.records.last()
    }

    /// First iteration whose stop metric is at or below `threshold`.
    pub fn iterations_to_threshold(&self, threshold: f64) -> Option<usize> {
        self.records.iter().find(|r| r.stop_metric <= threshold).map(|r| r.iter)
    }

    /// Columns that must be reproducible (everything except wall time).
    pub fn numeric_columns(&self) -> Vec<[u64; 7]> {
        self.records.iter().map(IterRecord::numeric_bits).collect()
    }

    fn meta_line(&self) -> String {
        format!(
            "# run_id={},problem={},method={},seed={}",
            self.run_id, self.problem, self.method, self.seed
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n{TRACE_HEADER}\n", self.meta_line());
        for r in &self.records {
            out.push_str(&r.to_csv_row());
            out.push('\n');
        }
        if let Some(s) = self.status {
            out.push_str(&format!("{STATUS_PREFIX}{s}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let meta = lines
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .ok_or_else(|| NatmoError::Parse("missing trace metadata line".into()))?;
        let mut fields = BTreeMap::new();
        for kv in meta.split(',') {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| NatmoError::Parse(format!("bad metadata field {kv:?}")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .map(|v| v.to_string())
                .ok_or_else(|| NatmoError::Parse(format!("metadata lacks {k}")))
        };
        let mut trace = RunTrace {
            run_id: get("run_id")?,
            problem: get("problem")?,
            method: get("method")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| NatmoError::Parse("bad seed".into()))?,
            status: None,
            records: Vec::new(),
        };
        if lines.next() != Some(TRACE_HEADER) {
            return Err(NatmoError::Parse("missing or unexpected trace header".into()));
        }
        for line in lines {
            if let Some(s) = line.strip_prefix(STATUS_PREFIX) {
                trace.finish(s.parse()?)?;
            } else if trace.status.is_some() {
                return Err(NatmoError::Parse("rows after the status line".into()));
            } else if !line.is_empty() {
                trace.records.push(IterRecord::from_csv_row(line)?);
            }
        }
        trace.validate()?;
        Ok(trace)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&fs::read_to_string(path)?)
    }
}

/// Writes a trace row by row into `<id>.csv.partial`, renamed to `<id>.csv`
/// once the status is known.
pub struct TraceWriter {
    out: BufWriter<File>,
    partial: PathBuf,
    done: PathBuf,
}

impl TraceWriter {
    pub fn create(dir: &Path, trace: &RunTrace) -> Result<Self> {
        let partial = dir.join(format!("{}.{PARTIAL_EXT}", trace.run_id));
        let done = dir.join(format!("{}.{TRACE_EXT}", trace.run_id));
        let mut out = BufWriter::new(File::create(&partial)?);
        writeln!(out, "{}\n{TRACE_HEADER}", trace.meta_line())?;
        out.flush()?;
        Ok(Self { out, partial, done })
    }

    pub fn record(&mut self, r: &IterRecord) -> Result<()> {
        writeln!(self.out, "{}", r.to_csv_row())?;
        self.out.flush()?;
        Ok(())
    }

    pub fn finish(mut self, status: RunStatus) -> Result<PathBuf> {
        writeln!(self.out, "{STATUS_PREFIX}{status}")?;
        self.out.flush()?;
        self.out.get_ref().sync_all()?;
        drop(self.out);
        fs::rename(&self.partial, &self.done)?;
        Ok(self.done)
    }
}

// --- configuration ----------------------------------------------------------

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// `flooring`, `cutoff` or `shift`.
    pub reg: Option<String>,
    /// Relative threshold for cutoff and flooring; the absolute shift for `shift`.
    pub eps_rel: Option<f64>,
    pub hb_beta: Option<f64>,
    pub nesterov_scale: Option<f64>,
    pub clip_cap: Option<f64>,
    pub max_iters: Option<usize>,
    pub stop_threshold: Option<f64>,
    #[serde(rename = "metric_W")]
    pub metric_w: Option<MetricChoice>,
    #[serde(rename = "metric_X")]
    pub metric_x: Option<MetricChoice>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: String,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub overrides: Overrides,
    /// Seed of the data generator (XOR only).
    #[serde(default)]
    pub data_seed: u64,
}

fn parse_reg(name: &str, eps: Option<f64>) -> Result<RegPolicy> {
    let reg = match name.to_ascii_lowercase().as_str() {
        "flooring" => RegPolicy::Flooring {
            eps_rel: eps.unwrap_or(1e-10),
        },
        "cutoff" => RegPolicy::Cutoff {
            eps_rel: eps.unwrap_or(1e-10),
        },
        "shift" => RegPolicy::Shift {
            eps: eps.unwrap_or(1e-10),
        },
        other => return Err(NatmoError::Config(format!("unknown regularization {other:?}"))),
    };
    reg.validate()?;
    Ok(reg)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| NatmoError::Config(format!("cannot read {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// One optimizer config per method entry, overrides applied. A scale in
    /// the method name wins over `overrides.nesterov_scale`.
    pub fn opt_configs(&self) -> Result<Vec<OptConfig>> {
        if self.methods.is_empty() {
            return Err(NatmoError::Config("config lists no methods".into()));
        }
        if self.seeds.is_empty() {
            return Err(NatmoError::Config("config lists no seeds".into()));
        }
        let o = &self.overrides;
        let reg = match (&o.reg, o.eps_rel) {
            (Some(name), eps) => Some(parse_reg(name, eps)?),
            (None, Some(eps)) => Some(parse_reg("flooring", Some(eps))?),
            (None, None) => None,
        };
        self.methods
            .iter()
            .map(|name| {
                let spec: MethodSpec = name.parse()?;
                let mut cfg = OptConfig::from_spec(&spec);
                if let Some(r) = reg {
                    cfg.reg = r;
                }
                if let Some(b) = o.hb_beta {
                    cfg.hb_beta = b;
                }
                if let (Some(s), None) = (o.nesterov_scale, spec.scale) {
                    cfg.nesterov_scale = s;
                }
                if let Some(c) = o.clip_cap {
                    cfg.clip_cap = c;
                }
                if let Some(m) = o.max_iters {
                    cfg.max_iters = m;
                }
                cfg.stop_threshold = o.stop_threshold;
                if let Some(m) = o.metric_w {
                    cfg.metric_w = m;
                }
                if let Some(m) = o.metric_x {
                    cfg.metric_x = m;
                }
                cfg.validate()?;
                Ok(cfg)
            })
            .collect()
    }
}

/// Pool size: `NATMO_WORKERS` if set, otherwise the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("NATMO_WORKERS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs every (method, seed) pair of `config`. With `out`, each trace is
/// streamed to its own file and a dataset manifest is written first. The
/// result order is methods-major, independent of scheduling.
pub fn run_matrix(config: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<RunTrace>> {
    let problem = Problem::by_name(&config.problem, config.data_seed)?;
    let cfgs = config.opt_configs()?;
    if let Some(dir) = out {
        fs::create_dir_all(dir)
            .map_err(|e| NatmoError::Config(format!("cannot create {}: {e}", dir.display())))?;
        fs::write(dir.join("manifest.txt"), problem.manifest_text())?;
    }
    let jobs: Vec<(&OptConfig, u64)> = cfgs
        .iter()
        .flat_map(|c| config.seeds.iter().map(move |s| (c, *s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| NatmoError::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        jobs.par_iter()
            .map(|(cfg, seed)| run_one(&problem, cfg, *seed, out))
            .collect()
    })
}

fn run_one(problem: &Problem, cfg: &OptConfig, seed: u64, out: Option<&Path>) -> Result<RunTrace> {
    let Some(dir) = out else {
        return run_observed(problem, cfg, seed, &mut |_| Ok(()));
    };
    let mut writer = TraceWriter::create(dir, &RunTrace::new(&problem.name, &cfg.label(), seed))?;
    let trace = run_observed(problem, cfg, seed, &mut |r| writer.record(r))?;
    let status = trace.status.expect("finished runs carry a status");
    writer.finish(status)?;
    log::info!("{}: {status} after {} iterations", trace.run_id, trace.records.len() - 1);
    Ok(trace)
}

/// Every complete trace (`*.csv`) in `dir`, sorted by run id. Summary
/// files are skipped.
pub fn load_traces(dir: &Path) -> Result<Vec<RunTrace>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.ends_with(&format!(".{TRACE_EXT}")) && !name.starts_with("summary_") {
            out.push(RunTrace::load(&path)?);
        }
    }
    out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
    Ok(out)
}

// --- summaries --------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct MethodSummary {
    pub problem: String,
    pub method: String,
    /// Per-iteration medians of the stop metric, shorter traces padded with
    /// their last value.
    pub median_stop_metric: Vec<f64>,
    pub median_train_loss: Vec<f64>,
    /// Per seed: converged iteration, or `None`.
    pub iterations: Vec<(u64, Option<usize>)>,
    pub successes: usize,
    /// Iteration cap used to censor non-converged seeds.
    pub censor: usize,
}

impl MethodSummary {
    /// Quantile of iterations-to-threshold with non-converged seeds counted
    /// at the iteration cap.
    pub fn iteration_quantile(&self, p: f64) -> f64 {
        let vals: Vec<f64> = self
            .iterations
            .iter()
            .map(|(_, it)| it.unwrap_or(self.censor) as f64)
            .collect();
        quantile(&vals, p)
    }

    pub fn median_iterations(&self) -> f64 {
        self.iteration_quantile(0.5)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Summary {
    pub methods: Vec<MethodSummary>,
}

/// Linear-interpolation quantile of unsorted data; NaN for empty input.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

fn padded_median(traces: &[&RunTrace], field: impl Fn(&IterRecord) -> f64) -> Vec<f64> {
    let len = traces.iter().map(|t| t.records.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let vals: Vec<f64> = traces
                .iter()
                .filter_map(|t| t.records.get(i).or(t.records.last()).map(&field))
                .collect();
            median(&vals)
        })
        .collect()
}

/// Groups by (problem, method). A seed counts as converged when its status
/// is `converged`; its iteration count is the last recorded iteration.
pub fn summarize(traces: &[RunTrace], censor: usize) -> Summary {
    let mut groups: BTreeMap<(String, String), Vec<&RunTrace>> = BTreeMap::new();
    for t in traces {
        groups.entry((t.problem.clone(), t.method.clone())).or_default().push(t);
    }
    let methods = groups
        .into_iter()
        .map(|((problem, method), mut ts)| {
            ts.sort_by_key(|t| t.seed);
            let iterations: Vec<(u64, Option<usize>)> = ts
                .iter()
                .map(|t| {
                    let it = (t.status == Some(RunStatus::Converged)).then(|| t.last().map_or(0, |r| r.iter));
                    (t.seed, it)
                })
                .collect();
            MethodSummary {
                problem,
                method,
                median_stop_metric: padded_median(&ts, |r| r.stop_metric),
                median_train_loss: padded_median(&ts, |r| r.train_loss),
                successes: iterations.iter().filter(|(_, i)| i.is_some()).count(),
                iterations,
                censor,
            }
        })
        .collect();
    Summary { methods }
}

impl Summary {
    pub fn get(&self, method: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Writes `summary_curves.csv`, `summary_iterations.csv` and
    /// `summary_stats.csv` to `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut curves = String::from("problem,method,iter,median_stop_metric,median_train_loss\n");
        let mut iters = String::from("problem,method,seed,iterations_to_threshold\n");
        let mut stats = String::from("problem,method,runs,successes,q25_iterations,median_iterations,q75_iterations\n");
        for m in &self.methods {
            for (i, (s, l)) in m.median_stop_metric.iter().zip(&m.median_train_loss).enumerate() {
                curves.push_str(&format!("{},{},{i},{s:.16e},{l:.16e}\n", m.problem, m.method));
            }
            for (seed, it) in &m.iterations {
                let it = it.map_or_else(|| "NA".to_string(), |i| i.to_string());
                iters.push_str(&format!("{},{},{seed},{it}\n", m.problem, m.method));
            }
            stats.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                m.problem,
                m.method,
                m.iterations.len(),
                m.successes,
                m.iteration_quantile(0.25),
                m.median_iterations(),
                m.iteration_quantile(0.75)
            ));
        }
        fs::write(dir.join("summary_curves.csv"), curves)?;
        fs::write(dir.join("summary_iterations.csv"), iters)?;
        fs::write(dir.join("summary_stats.csv"), stats)?;
        Ok(())
    }
}
