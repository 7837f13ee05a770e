//! Command-line front end. Every subcommand loads its inputs, calls the
//! library and formats the result; human-readable text by default, one JSON
//! line with `--json`.
//!
//! Exit codes: 0 success, 1 fatal error, 2 partial failure (some simulations
//! failed, or `analyze` found orphans or unreadable records).

use std::ffi::OsString;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::basket::{build_matrix, cluster, read_transactions, select_k, ClusterConfig, ClusterReport, FeatureMode};
use crate::experiment::{aggregate, aggregate_with, execute, expand, AggregateReport, ExecutionReport, ExperimentError, ExperimentManifest};
use crate::layout::load_layout;
use crate::sim::{run_to_writer, run_with, standalone_sim_id, SimConfig, SimSummary};
use crate::stats::{min_samples, sigma_from_range, z_from_alpha, Population, SampleSize, SampleSizeParams};
use crate::torus::{
    count_intersections, embed, flow_position, rotation_number, OrbitClass, RotationNumber, TorusFlow, TorusGeometry,
    TorusPoint, DEFAULT_ITERATIONS,
};

#[derive(Debug, Parser)]
#[command(name = "storesim", version, about = "Supermarket crowd simulation and analysis")]
struct Cli {
    /// Print summaries as single-line JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one simulation and write its records as JSONL.
    Simulate(SimulateArgs),
    /// Run a parameter sweep described by a manifest.
    Experiment(ExperimentArgs),
    /// Cluster customer baskets into shopping trajectories.
    Cluster(ClusterArgs),
    /// Minimum number of replicates for a confidence interval.
    Samplesize(SampleSizeArgs),
    /// Circle maps and flows on the torus.
    #[command(subcommand)]
    Torus(TorusCommand),
    /// Summarize an experiment sink.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    layout: PathBuf,
    /// JSON simulation config; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// JSONL output file. Without it only the summary is printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExperimentArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    parallelism: Option<usize>,
    #[arg(long)]
    sink: Option<PathBuf>,
    /// Seconds between progress lines on stderr.
    #[arg(long, default_value_t = 1.0)]
    progress_every: f64,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("kchoice").required(true).args(["k", "k_range"])))]
struct ClusterArgs {
    /// CSV `customer_id,product_id` or JSONL baskets.
    #[arg(long)]
    transactions: PathBuf,
    /// Restricts products to the layout's catalogue and fills bay sequences.
    #[arg(long)]
    layout: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    /// Inclusive range like `1..5`; the lowest-BIC k wins.
    #[arg(long, value_parser = parse_range)]
    k_range: Option<(usize, usize)>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "similarity")]
    features: FeatureArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum FeatureArg {
    Similarity,
    Raw,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("reliability").required(true).multiple(true).args(["alpha", "z"])))]
#[command(group(clap::ArgGroup::new("spread").required(true).args(["sigma", "range"])))]
struct SampleSizeArgs {
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    z: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Expected range of the output; sigma is taken as range/6.
    #[arg(long)]
    range: Option<f64>,
    #[arg(long)]
    halfwidth: f64,
    /// Finite population size.
    #[arg(long)]
    population: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum TorusCommand {
    /// Rotation number of a rigid rotation or a sine circle map.
    Rotation(RotationArgs),
    /// Embed angles (θ around the tube, φ around the ring) into 3-D.
    Embed(EmbedArgs),
    /// Sample a straight-line flow; CSV of t,theta,phi,x,y,z.
    Flow(FlowArgs),
    /// Proximity events between two flows.
    Intersections(IntersectionArgs),
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("shift").required(true).args(["p", "alpha"])))]
struct RotationArgs {
    /// Rotation by p/q.
    #[arg(long, requires = "q")]
    p: Option<i64>,
    #[arg(long, requires = "p")]
    q: Option<u64>,
    /// Rotation by an arbitrary real shift.
    #[arg(long)]
    alpha: Option<f64>,
    /// Coupling K of `x + Ω − K/2π·sin 2πx`; 0 gives a rigid rotation.
    #[arg(long, default_value_t = 0.0)]
    coupling: f64,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    iterations: u64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, default_value_t = 0.0)]
    x0: f64,
}

#[derive(Debug, Args)]
struct Geometry {
    #[arg(long, default_value_t = 2.0)]
    major: f64,
    #[arg(long, default_value_t = 1.0)]
    minor: f64,
}

#[derive(Debug, Args)]
struct EmbedArgs {
    #[arg(long, allow_hyphen_values = true)]
    theta: f64,
    #[arg(long, allow_hyphen_values = true)]
    phi: f64,
    #[command(flatten)]
    geometry: Geometry,
}

#[derive(Debug, Args)]
struct FlowArgs {
    /// `x0,y0,lam,mu`
    #[arg(long, value_parser = parse_flow, allow_hyphen_values = true)]
    flow: TorusFlow,
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    #[arg(long)]
    t1: f64,
    #[arg(long)]
    dt: f64,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    geometry: Geometry,
}

#[derive(Debug, Args)]
struct IntersectionArgs {
    /// `x0,y0,lam,mu`
    #[arg(long, value_parser = parse_flow, allow_hyphen_values = true)]
    a: TorusFlow,
    #[arg(long, value_parser = parse_flow, allow_hyphen_values = true)]
    b: TorusFlow,
    #[arg(long, default_value_t = 0.0)]
    t0: f64,
    #[arg(long)]
    t1: f64,
    #[arg(long, default_value_t = 0.01)]
    dt: f64,
    #[arg(long, default_value_t = 0.1)]
    radius: f64,
    #[command(flatten)]
    geometry: Geometry,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// An experiment directory, or a sink holding several.
    #[arg(long)]
    sink: PathBuf,
    /// Also write every record, tagged with experiment and job ids, here.
    #[arg(long)]
    merged: Option<PathBuf>,
}

fn parse_range(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got {s:?}"))?;
    let a: usize = a.trim().parse().map_err(|e| format!("{a:?}: {e}"))?;
    let b: usize = b.trim_start_matches('=').trim().parse().map_err(|e| format!("{b:?}: {e}"))?;
    if a == 0 || b < a {
        return Err(format!("empty or zero-based range {s:?}"));
    }
    Ok((a, b))
}

fn parse_flow(s: &str) -> Result<TorusFlow, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("{x:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let [x0, y0, lam, mu] = v[..] else {
        return Err(format!("expected x0,y0,lam,mu, got {s:?}"));
    };
    TorusFlow::new(x0, y0, lam, mu).map_err(|e| e.to_string())
}

/// Outcome of a subcommand: exit code, or a fatal message.
type CmdResult = Result<i32, String>;

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
    json: bool,
}

impl Io<'_> {
    fn emit<T: Serialize>(&mut self, value: &T, text: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<(), String> {
        let r = if self.json {
            serde_json::to_writer(&mut *self.out, value)
                .map_err(std::io::Error::other)
                .and_then(|_| writeln!(self.out))
        } else {
            text(self.out)
        };
        r.map_err(|e| format!("writing output: {e}"))
    }
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    let mut io = Io { out, err, json: cli.json };
    let res = match cli.command {
        Command::Simulate(a) => simulate(a, &mut io),
        Command::Experiment(a) => experiment(a, &mut io),
        Command::Cluster(a) => cluster_cmd(a, &mut io),
        Command::Samplesize(a) => samplesize(a, &mut io),
        Command::Torus(t) => torus(t, &mut io),
        Command::Analyze(a) => analyze(a, &mut io),
    };
    match res {
        Ok(code) => code,
        Err(msg) => {
            let _ = writeln!(io.err, "error: {msg}");
            1
        }
    }
}

fn warn_inert(cfg: &SimConfig, err: &mut dyn Write) {
    for name in cfg.features.inert() {
        let _ = writeln!(err, "warning: feature {name} is accepted but has no effect");
    }
}

fn summary_line(s: &SimSummary) -> String {
    let half = s
        .half_empty_s
        .map_or_else(|| "never".to_string(), |h| format!("{h:.1}s"));
    format!(
        "sim {} ticks {} time {:.1}s agents {}/{} collisions {} near_misses {} peak {} half_empty {}{}",
        s.sim_id,
        s.ticks,
        s.sim_time_s,
        s.despawned,
        s.spawned,
        s.total_collisions,
        s.near_misses,
        s.peak_in_store,
        half,
        if s.truncated { " TRUNCATED" } else { "" }
    )
}

fn simulate(a: SimulateArgs, io: &mut Io) -> CmdResult {
    let layout = load_layout(&a.layout).map_err(|e| e.to_string())?;
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| format!("config {}: {e}", p.display()))?;
            SimConfig::from_json(&text).map_err(|e| e.to_string())?
        }
        None => SimConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.validate().map_err(|e| e.to_string())?;
    warn_inert(&cfg, io.err);
    let id = standalone_sim_id(&cfg);
    let result = match &a.out {
        Some(path) => {
            let file = fs::File::create(path).map_err(|e| format!("{}: {e}", path.display()))?;
            let mut w = BufWriter::new(file);
            let r = run_to_writer(&layout, cfg, id, &mut w).map_err(|e| e.to_string())?;
            w.flush().map_err(|e| format!("{}: {e}", path.display()))?;
            r
        }
        None => run_with(&layout, cfg, id, |_| Ok(())).map_err(|e| e.to_string())?,
    };
    let s = &result.summary;
    io.emit(s, |w| writeln!(w, "{}", summary_line(s)))?;
    Ok(0)
}

#[derive(Serialize)]
struct ExperimentOutput<'a> {
    execution: &'a ExecutionReport,
    aggregate: &'a AggregateReport,
}

fn experiment(a: ExperimentArgs, io: &mut Io) -> CmdResult {
    let mut m = ExperimentManifest::load(&a.manifest).map_err(|e| e.to_string())?;
    if let Some(p) = a.parallelism {
        m.parallelism = p;
    }
    if let Some(s) = a.sink {
        m.sink = s;
    }
    m.validate().map_err(|e| e.to_string())?;
    let jobs = expand(&m).map_err(|e| e.to_string())?;
    if let Some(job) = jobs.first() {
        if let Some(spec) = job.sims.first() {
            warn_inert(&job.sim_config(spec), io.err);
        }
    }
    let cadence = Duration::from_secs_f64(a.progress_every.max(0.01));
    let err = &mut *io.err;
    let report = execute(&m, &jobs, cadence, |p| {
        let _ = writeln!(err, "{p}");
    })
    .map_err(|e| e.to_string())?;
    let dir = m.experiment_dir();
    let agg = match aggregate(&dir) {
        Ok(a) => a,
        Err(ExperimentError::NoRecords(_)) => {
            io.emit(&report, |w| writeln!(w, "experiment {}: no jobs", m.experiment_id))?;
            return Ok(report.exit_code());
        }
        Err(e) => return Err(e.to_string()),
    };
    let out = ExperimentOutput {
        execution: &report,
        aggregate: &agg,
    };
    io.emit(&out, |w| {
        writeln!(
            w,
            "experiment {}: jobs {} sims {} failed {} truncated {} sink {}",
            m.experiment_id,
            jobs.len(),
            report.sims,
            report.failed.len(),
            report.truncated.len(),
            dir.display()
        )?;
        write_jobs(w, &agg)
    })?;
    Ok(report.exit_code())
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

fn write_jobs(w: &mut dyn Write, agg: &AggregateReport) -> std::io::Result<()> {
    for j in &agg.jobs {
        let params = serde_json::to_string(&j.params).unwrap_or_default();
        let fit = match (&j.fit, &j.fit_note) {
            (Some(f), _) => format!("p={:.3}", f.p_value),
            (None, Some(note)) => format!("fit skipped: {note}"),
            (None, None) => "-".into(),
        };
        let n = j
            .sample_size
            .as_ref()
            .map_or_else(|| "-".to_string(), |s| format!("{}/{}", s.replicates, s.n_required));
        writeln!(
            w,
            "  job {:04} {params} sims {}/{} collisions {}±{} lambda {} {fit} replicates/needed {n}",
            j.job_id,
            j.completed,
            j.sims,
            fmt_opt(j.collisions_mean, 1),
            fmt_opt(j.collisions_sd, 1),
            fmt_opt(j.lambda_hat, 4),
        )?;
    }
    Ok(())
}

fn cluster_cmd(a: ClusterArgs, io: &mut Io) -> CmdResult {
    let layout = a
        .layout
        .as_ref()
        .map(load_layout)
        .transpose()
        .map_err(|e| e.to_string())?;
    let txs = read_transactions(&a.transactions).map_err(|e| e.to_string())?;
    let catalog = layout.as_ref().map(|l| l.catalog());
    let m = build_matrix(&txs, catalog.as_ref()).map_err(|e| e.to_string())?;
    let mut cfg = ClusterConfig {
        seed: a.seed,
        features: match a.features {
            FeatureArg::Similarity => FeatureMode::Similarity,
            FeatureArg::Raw => FeatureMode::Raw,
        },
        ..ClusterConfig::default()
    };
    let bic_table = match (a.k, a.k_range) {
        (Some(k), _) => {
            cfg.k = k;
            Vec::new()
        }
        (None, Some((lo, hi))) => {
            let (k, table) = select_k(&m, lo..=hi, &cfg).map_err(|e| e.to_string())?;
            cfg.k = k;
            table
        }
        (None, None) => unreachable!("clap requires --k or --k-range"),
    };
    let result = cluster(&m, &cfg).map_err(|e| e.to_string())?;
    let report = ClusterReport::new(&m, &cfg, result, bic_table, layout.as_ref()).map_err(|e| e.to_string())?;
    let text = serde_json::to_string_pretty(&report).map_err(|e| e.to_string())?;
    fs::write(&a.out, text).map_err(|e| format!("{}: {e}", a.out.display()))?;
    io.emit(&report, |w| {
        writeln!(
            w,
            "k={} customers={} products={} log_likelihood={:.3} bic={:.3} -> {}",
            report.k,
            m.cols(),
            m.rows(),
            report.log_likelihood,
            report.bic,
            a.out.display()
        )?;
        for c in &report.clusters {
            writeln!(
                w,
                "  cluster {} weight {:.3} members {} bays [{}]",
                c.id,
                c.weight,
                c.member_customers.len(),
                c.bay_sequence.join(", ")
            )?;
        }
        Ok(())
    })?;
    Ok(0)
}

#[derive(Serialize)]
struct SampleSizeOutput {
    z: f64,
    sigma: f64,
    halfwidth: f64,
    population: Population,
    n_raw: f64,
    n: u64,
}

fn samplesize(a: SampleSizeArgs, io: &mut Io) -> CmdResult {
    let sigma = match (a.sigma, a.range) {
        (Some(s), _) => s,
        (None, Some(r)) => sigma_from_range(r).map_err(|e| e.to_string())?,
        (None, None) => unreachable!("clap requires --sigma or --range"),
    };
    let population = a.population.map_or(Population::Infinite, Population::Finite);
    let z = match (a.z, a.alpha) {
        (Some(z), _) => z,
        (None, Some(alpha)) => z_from_alpha(alpha).map_err(|e| e.to_string())?,
        (None, None) => unreachable!("clap requires --z or --alpha"),
    };
    let mut params = SampleSizeParams::new(z, sigma, a.halfwidth, population).map_err(|e| e.to_string())?;
    params.alpha = a.alpha;
    let SampleSize { n_raw, n } = min_samples(&params).map_err(|e| e.to_string())?;
    let out = SampleSizeOutput {
        z,
        sigma,
        halfwidth: a.halfwidth,
        population,
        n_raw,
        n,
    };
    io.emit(&out, |w| {
        let pop = match population {
            Population::Infinite => "infinite".to_string(),
            Population::Finite(n) => n.to_string(),
        };
        writeln!(w, "z={z} sigma={sigma} halfwidth={} population={pop}", a.halfwidth)?;
        writeln!(w, "{n_raw:.4} → {n}")
    })?;
    Ok(0)
}

fn geometry(g: &Geometry) -> Result<TorusGeometry, String> {
    TorusGeometry::new(g.major, g.minor).map_err(|e| e.to_string())
}

fn rotation_text(rn: &RotationNumber) -> String {
    match (rn.classification, rn.rational_approx) {
        (OrbitClass::Recurrent, Some((p, q))) => format!("alpha={p}/{q} recurrent period={q}"),
        _ => format!("alpha={:.12} dense", rn.alpha),
    }
}

fn torus(cmd: TorusCommand, io: &mut Io) -> CmdResult {
    match cmd {
        TorusCommand::Rotation(a) => {
            let omega = match (a.p, a.q, a.alpha) {
                (Some(p), Some(q), _) => {
                    if q == 0 {
                        return Err("q must be positive".into());
                    }
                    p as f64 / q as f64
                }
                (_, _, Some(alpha)) => alpha,
                _ => unreachable!("clap requires --p/--q or --alpha"),
            };
            let k = a.coupling;
            let lift = move |x: f64| x + omega - k / std::f64::consts::TAU * (std::f64::consts::TAU * x).sin();
            let rn = rotation_number(lift, a.x0, a.iterations, a.tol).map_err(|e| e.to_string())?;
            io.emit(&rn, |w| writeln!(w, "{}", rotation_text(&rn)))?;
        }
        TorusCommand::Embed(a) => {
            let g = geometry(&a.geometry)?;
            let p = embed(&g, &TorusPoint::from_angles(a.theta, a.phi));
            io.emit(&p, |w| writeln!(w, "{} {} {}", p[0], p[1], p[2]))?;
        }
        TorusCommand::Flow(a) => {
            let g = geometry(&a.geometry)?;
            if !(a.dt > 0.0 && a.t1 >= a.t0) {
                return Err("need dt > 0 and t1 >= t0".into());
            }
            let steps = ((a.t1 - a.t0) / a.dt + 1e-9).floor() as u64;
            let mut rows = Vec::with_capacity(steps as usize + 1);
            for i in 0..=steps {
                let t = a.t0 + i as f64 * a.dt;
                let ang = a.flow.point_at(t);
                rows.push((t, ang, flow_position(&g, &a.flow, t)));
            }
            let mut csv = String::from("t,theta,phi,x,y,z\n");
            for (t, ang, p) in &rows {
                csv.push_str(&format!("{t},{},{},{},{},{}\n", ang.theta, ang.phi, p[0], p[1], p[2]));
            }
            match &a.out {
                Some(path) => {
                    fs::write(path, csv).map_err(|e| format!("{}: {e}", path.display()))?;
                    let (t, _, p) = rows.last().expect("at least one sample");
                    let n = rows.len();
                    io.emit(&serde_json::json!({"samples": n, "out": path, "last": p}), |w| {
                        writeln!(w, "{n} samples -> {}; at t={t}: {} {} {}", path.display(), p[0], p[1], p[2])
                    })?;
                }
                None => {
                    io.out.write_all(csv.as_bytes()).map_err(|e| e.to_string())?;
                }
            }
        }
        TorusCommand::Intersections(a) => {
            let g = geometry(&a.geometry)?;
            let ev = count_intersections(&g, &a.a, &a.b, a.t0, a.t1, a.dt, a.radius).map_err(|e| e.to_string())?;
            io.emit(&ev, |w| {
                writeln!(w, "intersections {}", ev.len())?;
                for e in &ev {
                    writeln!(w, "  t {:.4}..{:.4} at theta={:.4} phi={:.4}", e.start, e.end, e.point.theta, e.point.phi)?;
                }
                Ok(())
            })?;
        }
    }
    Ok(0)
}

/// Experiment directories under `path`: itself if it holds `jobs.json`,
/// otherwise its immediate children that do.
fn experiment_dirs(path: &Path) -> Result<Vec<PathBuf>, String> {
    if !path.is_dir() {
        return Err(format!("sink not found: {}", path.display()));
    }
    if path.join("jobs.json").is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| format!("{}: {e}", path.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("jobs.json").is_file())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn analyze(a: AnalyzeArgs, io: &mut Io) -> CmdResult {
    let dirs = experiment_dirs(&a.sink)?;
    let mut merged = match &a.merged {
        Some(p) => Some(BufWriter::new(
            fs::File::create(p).map_err(|e| format!("{}: {e}", p.display()))?,
        )),
        None => None,
    };
    let mut reports = Vec::new();
    for dir in &dirs {
        let r = match merged.as_mut() {
            Some(w) => aggregate_with(dir, Some(w as &mut dyn Write)),
            None => aggregate(dir),
        };
        match r {
            Ok(rep) => reports.push(rep),
            Err(ExperimentError::NoRecords(_)) => {}
            Err(e) => return Err(e.to_string()),
        }
    }
    if let Some(w) = merged.as_mut() {
        w.flush().map_err(|e| e.to_string())?;
    }
    if reports.iter().all(|r| r.records == 0) {
        return Err("no records".into());
    }
    let dirty = reports.iter().any(|r| !r.orphans.is_empty() || !r.problems.is_empty());
    io.emit(&reports, |w| {
        for r in &reports {
            writeln!(
                w,
                "experiment {}: records {} jobs {} orphans {} problems {}",
                r.experiment_id,
                r.records,
                r.jobs.len(),
                r.orphans.len(),
                r.problems.len()
            )?;
            write_jobs(w, r)?;
            for o in r.orphans.iter().chain(&r.problems) {
                writeln!(w, "  ! {o}")?;
            }
        }
        Ok(())
    })?;
    Ok(if dirty { 2 } else { 0 })
}
