//! Parameter sweeps: a manifest expands into jobs (grid points), each job
//! into seeded replicate simulations that run on a bounded worker pool and
//! stream their records to one JSONL file per simulation.
//!
//! Layout of a sink:
//!
//! ```text
//! <sink>/<experiment_id>/manifest.json
//! <sink>/<experiment_id>/jobs.json
//! <sink>/<experiment_id>/job-0000/<sim_id>.jsonl
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use uuid::Uuid;

use crate::collision::{fit_test, CollisionHistogram, FitResult, PoissonModel};
use crate::layout::{load_layout, LayoutError};
use crate::sim::{run_with, write_record, FailureRecord, Record, SimConfig, SimSummary, ID_NAMESPACE};
use crate::stats::{mean, min_samples, sample_std, z_from_alpha, Population, SampleSizeParams};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("unknown grid parameter: {0}")]
    UnknownParam(String),
    #[error("parameter {param}: {msg}")]
    BadValue { param: String, msg: String },
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("sink {path}: {source}")]
    Sink { path: PathBuf, source: std::io::Error },
    #[error("no records under {0}")]
    NoRecords(PathBuf),
}

fn sink_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Sink {
        path: path.to_path_buf(),
        source,
    }
}

/// Settings for the post-run analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Significance level for the sample-size check.
    pub alpha: f64,
    /// Target half-length of the interval on mean collisions. Defaults to
    /// `relative_halfwidth` times the observed mean.
    pub halfwidth: Option<f64>,
    pub relative_halfwidth: f64,
    /// Histogram window in seconds.
    pub window_s: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            halfwidth: None,
            relative_halfwidth: 0.05,
            window_s: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentManifest {
    pub experiment_id: String,
    pub layout: PathBuf,
    /// Parameter name to candidate values. Names are `SimConfig` fields, or
    /// `features.<flag>` for feature flags.
    pub grid: BTreeMap<String, Vec<Value>>,
    pub replicates: u32,
    pub base_seed: u64,
    pub parallelism: usize,
    pub sink: PathBuf,
    #[serde(default)]
    pub base_config: SimConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl ExperimentManifest {
    /// Reads a manifest; relative `layout` and `sink` paths are taken
    /// relative to the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Manifest(format!("{}: {e}", path.display())))?;
        let mut m: Self =
            serde_json::from_str(&text).map_err(|e| ExperimentError::Manifest(e.to_string()))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        if m.layout.is_relative() {
            m.layout = dir.join(&m.layout);
        }
        if m.sink.is_relative() {
            m.sink = dir.join(&m.sink);
        }
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.experiment_id.is_empty()
            || self
                .experiment_id
                .chars()
                .any(|c| !(c.is_ascii_alphanumeric() || "-_.".contains(c)))
        {
            return Err(ExperimentError::Manifest(
                "experiment_id must be non-empty and use only [A-Za-z0-9._-]".into(),
            ));
        }
        if self.grid.is_empty() {
            return Err(ExperimentError::Manifest("grid is empty".into()));
        }
        if self.replicates == 0 {
            return Err(ExperimentError::Manifest("replicates must be at least 1".into()));
        }
        if self.parallelism == 0 {
            return Err(ExperimentError::Manifest("parallelism must be at least 1".into()));
        }
        self.base_config
            .validate()
            .map_err(|e| ExperimentError::Manifest(e.to_string()))
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.sink.join(&self.experiment_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimSpec {
    pub sim_id: Uuid,
    pub replicate: u32,
    pub seed: u64,
}

/// One grid point with its replicate simulations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub experiment_id: String,
    pub job_id: u32,
    pub params: BTreeMap<String, Value>,
    /// Resolved configuration; each replicate overrides only the seed.
    pub config: SimConfig,
    pub sims: Vec<SimSpec>,
}

impl JobRecord {
    pub fn dir_name(&self) -> String {
        job_dir_name(self.job_id)
    }

    pub fn sim_config(&self, spec: &SimSpec) -> SimConfig {
        SimConfig {
            seed: spec.seed,
            ..self.config.clone()
        }
    }
}

pub fn job_dir_name(job_id: u32) -> String {
    format!("job-{job_id:04}")
}

/// Replicate seed: the first eight bytes of SHA-256 over the three ids.
pub fn derive_seed(base_seed: u64, job_id: u32, replicate: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update(job_id.to_le_bytes());
    h.update(replicate.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

pub fn sim_uuid(experiment_id: &str, job_id: u32, replicate: u32) -> Uuid {
    Uuid::new_v5(
        &ID_NAMESPACE,
        format!("{experiment_id}/{job_id}/{replicate}").as_bytes(),
    )
}

fn apply_param(base: &Value, name: &str, value: &Value) -> Result<Value, ExperimentError> {
    let mut cfg = base.clone();
    let unknown = || ExperimentError::UnknownParam(name.to_string());
    let slot = match name.split_once('.') {
        Some(("features", flag)) => cfg
            .get_mut("features")
            .and_then(|f| f.get_mut(flag))
            .ok_or_else(unknown)?,
        Some(_) => return Err(unknown()),
        None if name == "seed" => {
            return Err(ExperimentError::BadValue {
                param: name.into(),
                msg: "seeds are derived from base_seed and cannot be swept".into(),
            })
        }
        None => cfg.get_mut(name).ok_or_else(unknown)?,
    };
    *slot = value.clone();
    Ok(cfg)
}

/// Expands the grid into jobs. The first parameter in name order varies
/// slowest; values keep their listed order.
pub fn expand(m: &ExperimentManifest) -> Result<Vec<JobRecord>, ExperimentError> {
    m.validate()?;
    let base = serde_json::to_value(&m.base_config).expect("config serializes");
    let names: Vec<&String> = m.grid.keys().collect();
    // validate every name up front so an empty value list still errors
    for name in &names {
        let probe = base
            .get(name.as_str())
            .or_else(|| name.strip_prefix("features.").and_then(|f| base["features"].get(f)))
            .cloned()
            .unwrap_or(Value::Null);
        apply_param(&base, name, &probe)?;
    }
    let total: usize = m.grid.values().map(Vec::len).product();
    let mut jobs = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut picks = Vec::with_capacity(names.len());
        for name in names.iter().rev() {
            let vals = &m.grid[*name];
            picks.push((*name, &vals[rem % vals.len()]));
            rem /= vals.len();
        }
        picks.reverse();

        let mut cfg = base.clone();
        let mut params = BTreeMap::new();
        for (name, value) in picks {
            cfg = apply_param(&cfg, name, value)?;
            params.insert(name.clone(), value.clone());
        }
        let config: SimConfig = serde_json::from_value(cfg).map_err(|e| ExperimentError::BadValue {
            param: format!("{params:?}"),
            msg: e.to_string(),
        })?;
        config.validate().map_err(|e| ExperimentError::BadValue {
            param: format!("{params:?}"),
            msg: e.to_string(),
        })?;
        let job_id = idx as u32;
        let sims = (0..m.replicates)
            .map(|r| SimSpec {
                sim_id: sim_uuid(&m.experiment_id, job_id, r),
                replicate: r,
                seed: derive_seed(m.base_seed, job_id, r),
            })
            .collect();
        jobs.push(JobRecord {
            experiment_id: m.experiment_id.clone(),
            job_id,
            params,
            config,
            sims,
        });
    }
    Ok(jobs)
}

/// Counts reported while an experiment runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Progress {
    pub total: usize,
    pub done: usize,
    pub running: usize,
    pub failed: usize,
}

impl std::fmt::Display for Progress {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "sims done {}/{} running {} failed {}",
            self.done, self.total, self.running, self.failed
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ExecutionReport {
    pub sims: usize,
    pub failed: Vec<Uuid>,
    pub truncated: Vec<Uuid>,
}

impl ExecutionReport {
    /// 0 when every simulation succeeded, 2 when some failed.
    pub fn exit_code(&self) -> i32 {
        if self.failed.is_empty() {
            0
        } else {
            2
        }
    }
}

enum Event {
    Started,
    Finished { sim_id: Uuid, truncated: bool },
    Failed(Uuid),
}

fn run_one(
    layout: &crate::layout::StoreLayout,
    job: &JobRecord,
    spec: &SimSpec,
    path: &Path,
) -> Result<Result<SimSummary, String>, std::io::Error> {
    let file = fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        run_with(layout, job.sim_config(spec), spec.sim_id, |rec| {
            write_record(&mut w, rec)?;
            if matches!(rec, Record::Frame(_)) {
                w.flush()?;
            }
            Ok(())
        })
    }));
    let result = match outcome {
        Ok(Ok(res)) => Ok(res.summary),
        Ok(Err(crate::sim::SimError::Io(e))) => return Err(e),
        Ok(Err(e)) => Err(e.to_string()),
        Err(panic) => Err(panic
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| panic.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "simulation panicked".into())),
    };
    if let Err(msg) = &result {
        write_record(
            &mut w,
            &Record::Failure(FailureRecord {
                sim_id: spec.sim_id,
                error: msg.clone(),
            }),
        )?;
    }
    w.flush()?;
    Ok(result)
}

/// Runs every simulation of `jobs` with at most `m.parallelism` in flight.
///
/// `progress` is called from the calling thread every `cadence` and once at
/// the end. Individual simulation failures are recorded in the sink and the
/// report; only sink I/O errors abort the run.
pub fn execute(
    m: &ExperimentManifest,
    jobs: &[JobRecord],
    cadence: Duration,
    mut progress: impl FnMut(&Progress),
) -> Result<ExecutionReport, ExperimentError> {
    let dir = m.experiment_dir();
    fs::create_dir_all(&dir).map_err(sink_err(&dir))?;
    write_json(&dir.join("manifest.json"), m)?;
    write_json(&dir.join("jobs.json"), &jobs)?;

    let tasks: Vec<(&JobRecord, &SimSpec)> = jobs
        .iter()
        .flat_map(|j| j.sims.iter().map(move |s| (j, s)))
        .collect();
    let mut report = ExecutionReport {
        sims: tasks.len(),
        ..Default::default()
    };
    let mut state = Progress {
        total: tasks.len(),
        ..Default::default()
    };
    if tasks.is_empty() {
        progress(&state);
        return Ok(report);
    }
    let layout = load_layout(&m.layout)?;
    for j in jobs {
        let p = dir.join(j.dir_name());
        fs::create_dir_all(&p).map_err(sink_err(&p))?;
    }

    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let fatal: Mutex<Option<ExperimentError>> = Mutex::new(None);
    let workers = m.parallelism.min(tasks.len());
    let (tx, rx) = mpsc::channel::<Event>();

    std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (tasks, next, abort, fatal, layout, dir) = (&tasks, &next, &abort, &fatal, &layout, &dir);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(job, spec)) = tasks.get(i) else {
                    break;
                };
                let _ = tx.send(Event::Started);
                let path = dir.join(job.dir_name()).join(format!("{}.jsonl", spec.sim_id));
                match run_one(layout, job, spec, &path) {
                    Ok(Ok(summary)) => {
                        let _ = tx.send(Event::Finished {
                            sim_id: spec.sim_id,
                            truncated: summary.truncated,
                        });
                    }
                    Ok(Err(_)) => {
                        let _ = tx.send(Event::Failed(spec.sim_id));
                    }
                    Err(e) => {
                        abort.store(true, Ordering::SeqCst);
                        fatal.lock().unwrap().get_or_insert(ExperimentError::Sink { path, source: e });
                        let _ = tx.send(Event::Failed(spec.sim_id));
                        break;
                    }
                }
            });
        }
        drop(tx);
        let mut last = Instant::now();
        loop {
            match rx.recv_timeout(cadence.saturating_sub(last.elapsed())) {
                Ok(ev) => match ev {
                    Event::Started => state.running += 1,
                    Event::Finished { sim_id, truncated } => {
                        state.running -= 1;
                        state.done += 1;
                        if truncated {
                            report.truncated.push(sim_id);
                        }
                    }
                    Event::Failed(id) => {
                        state.running -= 1;
                        state.done += 1;
                        state.failed += 1;
                        report.failed.push(id);
                    }
                },
                Err(mpsc::RecvTimeoutError::Timeout) => {}
                Err(mpsc::RecvTimeoutError::Disconnected) => break,
            }
            if last.elapsed() >= cadence {
                progress(&state);
                last = Instant::now();
            }
        }
    });
    progress(&state);
    if let Some(e) = fatal.into_inner().unwrap() {
        return Err(e);
    }
    report.failed.sort();
    report.truncated.sort();
    Ok(report)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, text).map_err(sink_err(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSizeCheck {
    pub sigma: f64,
    pub halfwidth: f64,
    pub z: f64,
    pub n_required: u64,
    pub replicates: u64,
    pub satisfied: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobAggregate {
    pub job_id: u32,
    pub params: BTreeMap<String, Value>,
    pub sims: usize,
    pub completed: usize,
    pub failed: usize,
    pub truncated: usize,
    pub collisions_mean: Option<f64>,
    pub collisions_sd: Option<f64>,
    pub time_in_store_mean: Option<f64>,
    pub lambda_hat: Option<f64>,
    pub fit: Option<FitResult>,
    /// Why the fit was skipped, if it was.
    pub fit_note: Option<String>,
    pub sample_size: Option<SampleSizeCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub experiment_id: String,
    pub records: usize,
    pub jobs: Vec<JobAggregate>,
    /// Records or files that do not resolve to exactly one grid point.
    pub orphans: Vec<String>,
    /// Unreadable lines and missing outputs.
    pub problems: Vec<String>,
}

#[derive(Default)]
struct SimRecords {
    summary: Option<SimSummary>,
    failed: bool,
    collision_starts: Vec<u64>,
}

fn read_sim_file(
    path: &Path,
    expected: Uuid,
    records: &mut usize,
    orphans: &mut Vec<String>,
    problems: &mut Vec<String>,
    merged: &mut Option<&mut dyn Write>,
    ids: (&str, u32),
) -> std::io::Result<SimRecords> {
    let mut out = SimRecords::default();
    let reader = BufReader::new(fs::File::open(path)?);
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                problems.push(format!("{}:{}: unreadable record: {e}", path.display(), n + 1));
                continue;
            }
        };
        *records += 1;
        if rec.sim_id() != expected {
            orphans.push(format!(
                "{}:{}: record for sim {} in file of sim {expected}",
                path.display(),
                n + 1,
                rec.sim_id()
            ));
            continue;
        }
        if let Some(w) = merged.as_deref_mut() {
            let mut v = serde_json::to_value(&rec).expect("record serializes");
            if let Value::Object(map) = &mut v {
                map.insert("experiment_id".into(), ids.0.into());
                map.insert("job_id".into(), ids.1.into());
            }
            serde_json::to_writer(&mut *w, &v)?;
            w.write_all(b"\n")?;
        }
        match rec {
            Record::Collision(c) => out.collision_starts.push(c.start_tick),
            Record::Summary(s) => out.summary = Some(s),
            Record::Failure(_) => out.failed = true,
            Record::Frame(_) => {}
        }
    }
    Ok(out)
}

/// Reads an experiment directory back and summarizes each job. Missing or
/// corrupt records are listed rather than treated as fatal.
pub fn aggregate(dir: impl AsRef<Path>) -> Result<AggregateReport, ExperimentError> {
    aggregate_with(dir, None)
}

/// Like [`aggregate`], additionally writing every valid record tagged with
/// its experiment and job ids to `merged`.
pub fn aggregate_with(
    dir: impl AsRef<Path>,
    mut merged: Option<&mut dyn Write>,
) -> Result<AggregateReport, ExperimentError> {
    let dir = dir.as_ref();
    let mut problems = Vec::new();
    let mut orphans = Vec::new();
    let mut records = 0usize;

    let read_json = |name: &str| -> Option<String> { fs::read_to_string(dir.join(name)).ok() };
    let manifest: Option<ExperimentManifest> =
        read_json("manifest.json").and_then(|t| serde_json::from_str(&t).ok());
    let jobs: Vec<JobRecord> = match read_json("jobs.json").map(|t| serde_json::from_str(&t)) {
        Some(Ok(j)) => j,
        Some(Err(e)) => {
            problems.push(format!("jobs.json unreadable: {e}"));
            Vec::new()
        }
        None => {
            problems.push("jobs.json missing".into());
            Vec::new()
        }
    };
    if manifest.is_none() {
        problems.push("manifest.json missing or unreadable".into());
    }
    let analysis = manifest.as_ref().map(|m| m.analysis.clone()).unwrap_or_default();
    let experiment_id = manifest
        .as_ref()
        .map(|m| m.experiment_id.clone())
        .or_else(|| jobs.first().map(|j| j.experiment_id.clone()))
        .unwrap_or_else(|| {
            dir.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        });

    let by_dir: BTreeMap<String, &JobRecord> = jobs.iter().map(|j| (j.dir_name(), j)).collect();
    for j in &jobs {
        if j.experiment_id != experiment_id {
            orphans.push(format!("job {} belongs to experiment {}", j.job_id, j.experiment_id));
        }
    }

    // every jsonl file below dir must map to a known job and sim
    let mut files: BTreeMap<(String, Uuid), PathBuf> = BTreeMap::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(_) => return Err(ExperimentError::NoRecords(dir.to_path_buf())),
    };
    let mut subdirs: Vec<PathBuf> = entries
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    for sub in subdirs {
        let name = sub.file_name().unwrap().to_string_lossy().into_owned();
        let mut paths: Vec<PathBuf> = fs::read_dir(&sub)
            .map_err(sink_err(&sub))?
            .filter_map(Result::ok)
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for p in paths {
            let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
            let known = Uuid::parse_str(&stem)
                .ok()
                .filter(|id| by_dir.get(&name).is_some_and(|j| j.sims.iter().any(|s| s.sim_id == *id)));
            match known {
                Some(id) => {
                    files.insert((name.clone(), id), p);
                }
                None => orphans.push(format!("{} does not match any job/sim in jobs.json", p.display())),
            }
        }
    }

    let mut out_jobs = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let dt = job.config.tick_length;
        let mut totals = Vec::new();
        let mut times = Vec::new();
        let mut hist = CollisionHistogram::new(analysis.window_s);
        let (mut completed, mut failed, mut truncated) = (0, 0, 0);
        for spec in &job.sims {
            let Some(path) = files.get(&(job.dir_name(), spec.sim_id)) else {
                problems.push(format!("job {} sim {}: output missing", job.job_id, spec.sim_id));
                continue;
            };
            let recs = read_sim_file(
                path,
                spec.sim_id,
                &mut records,
                &mut orphans,
                &mut problems,
                &mut merged,
                (&experiment_id, job.job_id),
            )
            .map_err(sink_err(path))?;
            if recs.failed {
                failed += 1;
            }
            let Some(s) = recs.summary else {
                if !recs.failed {
                    problems.push(format!("job {} sim {}: no summary record", job.job_id, spec.sim_id));
                }
                continue;
            };
            completed += 1;
            if s.truncated {
                truncated += 1;
            }
            totals.push(s.total_collisions as f64);
            if !s.timers.is_empty() {
                times.push(s.timers.values().map(|t| t.total).sum::<f64>() / s.timers.len() as f64);
            }
            let starts: Vec<f64> = recs.collision_starts.iter().map(|&t| t as f64 * dt).collect();
            hist.merge(&CollisionHistogram::from_times(&starts, s.sim_time_s, analysis.window_s));
        }

        let (lambda_hat, fit, fit_note) = if hist.windows() == 0 {
            (None, None, Some("no complete windows".to_string()))
        } else {
            let lambda = hist.total_events() as f64 / hist.exposure();
            match PoissonModel::new(lambda).and_then(|model| fit_test(&hist, &model)) {
                Ok(f) => (Some(lambda), Some(f), None),
                Err(e) => (Some(lambda), None, Some(e.to_string())),
            }
        };
        let collisions_mean = mean(&totals);
        let collisions_sd = sample_std(&totals);
        let sample_size = match (collisions_mean, collisions_sd) {
            (Some(mu), Some(sd)) => sample_size_check(&analysis, mu, sd, totals.len() as u64),
            _ => None,
        };
        out_jobs.push(JobAggregate {
            job_id: job.job_id,
            params: job.params.clone(),
            sims: job.sims.len(),
            completed,
            failed,
            truncated,
            collisions_mean,
            collisions_sd,
            time_in_store_mean: mean(&times),
            lambda_hat,
            fit,
            fit_note,
            sample_size,
        });
    }

    if records == 0 && orphans.is_empty() {
        return Err(ExperimentError::NoRecords(dir.to_path_buf()));
    }
    let mut seen = BTreeSet::new();
    for j in &jobs {
        for s in &j.sims {
            if !seen.insert(s.sim_id) {
                orphans.push(format!("sim {} listed under more than one job", s.sim_id));
            }
        }
    }
    Ok(AggregateReport {
        experiment_id,
        records,
        jobs: out_jobs,
        orphans,
        problems,
    })
}

/// Replicates needed for the configured precision on mean collisions,
/// using the observed standard deviation.
pub fn sample_size_check(a: &AnalysisConfig, mean: f64, sd: f64, replicates: u64) -> Option<SampleSizeCheck> {
    let halfwidth = a.halfwidth.unwrap_or(a.relative_halfwidth * mean);
    let z = z_from_alpha(a.alpha).ok()?;
    let n_required = if sd == 0.0 {
        1
    } else {
        let p = SampleSizeParams::new(z, sd, halfwidth, Population::Infinite).ok()?;
        min_samples(&p).ok()?.n
    };
    Some(SampleSizeCheck {
        sigma: sd,
        halfwidth,
        z,
        n_required,
        replicates,
        satisfied: replicates >= n_required,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn manifest(grid: BTreeMap<String, Vec<Value>>, replicates: u32) -> ExperimentManifest {
        ExperimentManifest {
            experiment_id: "exp".into(),
            layout: "fixtures/grid_3x3.layout.json".into(),
            grid,
            replicates,
            base_seed: 7,
            parallelism: 2,
            sink: "out".into(),
            base_config: SimConfig::default(),
            analysis: AnalysisConfig::default(),
        }
    }

    #[test]
    fn single_point() {
        let m = manifest(BTreeMap::from([("agents_total".into(), vec![json!(50)])]), 3);
        let jobs = expand(&m).unwrap();
        assert_eq!(jobs.len(), 1);
        assert_eq!(jobs[0].sims.len(), 3);
        assert_eq!(jobs[0].config.agents_total, 50);
    }

    #[test]
    fn product_order() {
        let m = manifest(
            BTreeMap::from([
                ("spawn_interval".into(), vec![json!(2.0), json!(4.0)]),
                ("agents_total".into(), vec![json!(25), json!(50)]),
            ]),
            2,
        );
        let jobs = expand(&m).unwrap();
        assert_eq!(jobs.len(), 4);
        assert_eq!(jobs.iter().map(|j| j.sims.len()).sum::<usize>(), 8);
        let pts: Vec<(u32, f64)> = jobs
            .iter()
            .map(|j| (j.config.agents_total, j.config.spawn_interval))
            .collect();
        assert_eq!(pts, vec![(25, 2.0), (25, 4.0), (50, 2.0), (50, 4.0)]);
        assert_eq!(jobs.iter().map(|j| j.job_id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn expansion_is_deterministic() {
        let m = manifest(
            BTreeMap::from([("features.avoid_aisles".into(), vec![json!(false), json!(true)])]),
            4,
        );
        let a = expand(&m).unwrap();
        assert_eq!(a, expand(&m).unwrap());
        assert!(a[1].config.features.avoid_aisles);
        let seeds: BTreeSet<u64> = a.iter().flat_map(|j| j.sims.iter().map(|s| s.seed)).collect();
        assert_eq!(seeds.len(), 8);
    }

    #[test]
    fn bad_params() {
        let bad = |k: &str, v: Value| expand(&manifest(BTreeMap::from([(k.to_string(), vec![v])]), 1));
        assert!(matches!(bad("agents", json!(3)), Err(ExperimentError::UnknownParam(_))));
        assert!(matches!(bad("features.teleport", json!(true)), Err(ExperimentError::UnknownParam(_))));
        assert!(matches!(bad("agents_total", json!("many")), Err(ExperimentError::BadValue { .. })));
        assert!(matches!(bad("tick_length", json!(-1.0)), Err(ExperimentError::BadValue { .. })));
        assert!(matches!(bad("seed", json!(1)), Err(ExperimentError::BadValue { .. })));
        assert!(matches!(
            expand(&manifest(BTreeMap::from([("agents".into(), vec![])]), 1)),
            Err(ExperimentError::UnknownParam(_))
        ));
    }

    #[test]
    fn empty_value_list_gives_no_jobs() {
        let m = manifest(BTreeMap::from([("agents_total".into(), vec![])]), 1);
        assert!(expand(&m).unwrap().is_empty());
    }

    #[test]
    fn seeds_and_ids_depend_on_all_inputs() {
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 0, 1));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(1, 1, 0));
        assert_ne!(derive_seed(1, 0, 0), derive_seed(2, 0, 0));
        assert_eq!(sim_uuid("e", 1, 2), sim_uuid("e", 1, 2));
        assert_ne!(sim_uuid("e", 1, 2), sim_uuid("e", 12, 0));
        assert_eq!(sim_uuid("e", 1, 2).get_version_num(), 5);
    }

    #[test]
    fn sample_size_arithmetic() {
        let a = AnalysisConfig {
            halfwidth: Some(50.0),
            ..Default::default()
        };
        let c = sample_size_check(&a, 1000.0, 200.0, 62).unwrap();
        assert_eq!(c.n_required, 62);
        assert!(c.satisfied);
        assert!(!sample_size_check(&a, 1000.0, 200.0, 61).unwrap().satisfied);
        assert_eq!(sample_size_check(&a, 5.0, 0.0, 1).unwrap().n_required, 1);
    }
}
