//! File-level pipeline stages. Every stage reads its inputs, fans the work out
//! over a bounded pool with per-item seeds, and writes outputs in input order
//! with the manifest embedded, so identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::coverage::{scenario_features, CoverageAccumulator, CoverageConfig, CoverageReport, FeatureSample};
use crate::error::{Error, Result};
use crate::filter::{filter_critical_points, FilterReport, DEFAULT_N_MAX};
use crate::generator::{augment_random_obstacles, generate_scenarios, GeneratorConfig, Scenario};
use crate::geometry::{Action, Plan, Pose2, Vec2, DEFAULT_DT, DEFAULT_HORIZON};
use crate::hallucinator::{extract_critical_points, fit_phase1, fit_phase2, HallucinationConfig};
use crate::render::{build_records, RenderConfig};
use crate::seed::{child_seed, job_rng};
use crate::sim::{
    generate_worlds, run_trial_traced, schedule, success_rate, trial_seed, ConstantPlanner, ExternalPlanner, GapFollower,
    Planner, ReplayPlanner, SuccessSummary, TrialConfig, TrialResult, WorldConfig, WorldSpec,
};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    /// Resampling period (s).
    pub dt: f64,
    /// Poses per window.
    pub horizon: usize,
    /// Resampled steps between window starts.
    pub stride: usize,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self { dt: DEFAULT_DT, horizon: DEFAULT_HORIZON, stride: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub n_max: usize,
    /// Critical points drawn per hypothesis before filtering.
    pub samples_per_hypothesis: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { n_max: DEFAULT_N_MAX, samples_per_hypothesis: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub inputs: Vec<String>,
    pub output: String,
}

/// Everything that determines a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineManifest {
    pub tool_version: String,
    pub seed: u64,
    pub ingest: IngestConfig,
    pub hallucination: HallucinationConfig,
    pub filter: FilterConfig,
    pub generator: GeneratorConfig,
    pub augment: bool,
    pub render: RenderConfig,
    pub coverage: CoverageConfig,
    pub worlds: WorldConfig,
    pub simulation: TrialConfig,
    pub paths: Paths,
}

impl Default for PipelineManifest {
    fn default() -> Self {
        Self {
            tool_version: TOOL_VERSION.to_string(),
            seed: 0,
            ingest: IngestConfig::default(),
            hallucination: HallucinationConfig::reduced(),
            filter: FilterConfig::default(),
            generator: GeneratorConfig::default(),
            augment: true,
            render: RenderConfig::default(),
            coverage: CoverageConfig::default(),
            worlds: WorldConfig::default(),
            simulation: TrialConfig::default(),
            paths: Paths::default(),
        }
    }
}

impl PipelineManifest {
    /// Reads TOML, or JSON when the extension is `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let m = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            Self::from_toml(&text)?
        };
        Ok(m)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ingest.dt > 0.0 && self.ingest.horizon >= 2 && self.ingest.stride >= 1) {
            return Err(Error::Config("ingest: need dt > 0, horizon >= 2, stride >= 1".into()));
        }
        if self.filter.n_max == 0 || self.filter.samples_per_hypothesis == 0 {
            return Err(Error::Config("filter: counts must be at least 1".into()));
        }
        self.hallucination.validate()?;
        self.generator.validate()?;
        self.render.validate()?;
        self.coverage.validate()?;
        self.worlds.validate()?;
        self.simulation.validate()?;
        Ok(())
    }

    fn with_paths(&self, inputs: &[&Path], output: &Path) -> Self {
        let mut m = self.clone();
        m.tool_version = TOOL_VERSION.to_string();
        m.paths = Paths {
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            output: output.display().to_string(),
        };
        m
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    tool_version: String,
    manifest: PipelineManifest,
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    kind: &'static str,
    #[serde(flatten)]
    body: &'a T,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Header line, one record per line, optional trailing summary line.
fn write_jsonl<T: Serialize, S: Serialize>(
    path: &Path,
    manifest: &PipelineManifest,
    records: impl IntoIterator<Item = T>,
    summary: Option<&S>,
) -> Result<()> {
    let mut w = create(path)?;
    let header = Header { kind: "header".into(), tool_version: TOOL_VERSION.into(), manifest: manifest.clone() };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, &r)?;
        w.write_all(b"\n")?;
    }
    if let Some(s) = summary {
        serde_json::to_writer(&mut w, &Tagged { kind: "summary", body: s })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Parsed data lines of a JSONL file; header and summary lines are skipped.
/// Each entry is the 1-based line number and the parse result.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, std::result::Result<T, String>)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: std::result::Result<serde_json::Value, _> = serde_json::from_str(&line);
        let item = match parsed {
            Ok(v) if v.get("kind").is_some() => continue,
            Ok(v) => serde_json::from_value(v).map_err(|e| e.to_string()),
            Err(e) => Err(e.to_string()),
        };
        out.push((i + 1, item));
    }
    Ok(out)
}

fn read_strict<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_jsonl(path)?
        .into_iter()
        .map(|(n, r)| r.map_err(|e| Error::InvalidInput(format!("{}:{n}: {e}", path.display()))))
        .collect()
}

/// Runs `f(i)` for `i in 0..n` on at most `workers` threads (0 = all cores);
/// results come back in index order.
pub fn run_indexed<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync + Send) -> Result<Vec<T>> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(f).collect()))
}

/// One plan window as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub id: String,
    pub dt: f64,
    pub poses: Vec<Pose2>,
    pub actions: Vec<Action>,
}

impl PlanRecord {
    pub fn from_plan(id: impl Into<String>, plan: &Plan) -> Self {
        Self { id: id.into(), dt: plan.dt(), poses: plan.poses().to_vec(), actions: plan.actions().to_vec() }
    }

    pub fn to_plan(&self) -> Result<Plan> {
        Ok(Plan::new(self.poses.clone(), self.actions.clone(), self.dt)?)
    }
}

pub fn write_plans(path: &Path, manifest: &PipelineManifest, plans: &[PlanRecord]) -> Result<()> {
    write_jsonl::<_, ()>(path, manifest, plans, None)
}

pub fn read_plans(path: &Path) -> Result<Vec<PlanRecord>> {
    read_strict(path)
}

/// One odometry sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OdomRow {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Linear resampling at a fixed period; headings are unwrapped first.
pub fn resample(rows: &[OdomRow], dt: f64) -> Result<Vec<Pose2>> {
    if rows.len() < 2 {
        return Err(Error::InvalidInput("odometry log needs at least two samples".into()));
    }
    let finite = rows.iter().all(|r| r.t.is_finite() && r.x.is_finite() && r.y.is_finite() && r.heading.is_finite());
    if !finite || rows.windows(2).any(|w| w[1].t <= w[0].t) {
        return Err(Error::InvalidInput("odometry timestamps must be finite and strictly increasing".into()));
    }
    let mut unwrapped = Vec::with_capacity(rows.len());
    let mut prev = rows[0].heading;
    let mut acc = prev;
    for r in rows {
        acc += crate::geometry::wrap_angle(r.heading - prev);
        prev = r.heading;
        unwrapped.push(acc);
    }
    let (t0, t1) = (rows[0].t, rows[rows.len() - 1].t);
    let n = ((t1 - t0) / dt + 1e-9).floor() as usize + 1;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    for k in 0..n {
        let t = t0 + k as f64 * dt;
        while j + 2 < rows.len() && rows[j + 1].t < t {
            j += 1;
        }
        let (a, b) = (&rows[j], &rows[j + 1]);
        let u = ((t - a.t) / (b.t - a.t)).clamp(0.0, 1.0);
        let lerp = |p: f64, q: f64| p + (q - p) * u;
        out.push(Pose2::new(lerp(a.x, b.x), lerp(a.y, b.y), lerp(unwrapped[j], unwrapped[j + 1])));
    }
    Ok(out)
}

/// Windows of `horizon` poses every `stride` steps, each re-expressed in the
/// frame of its first pose.
pub fn window_plans(poses: &[Pose2], cfg: &IngestConfig, prefix: &str) -> Result<Vec<PlanRecord>> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + cfg.horizon <= poses.len() {
        let base = poses[start];
        let q: Vec<Vec2> = poses[start..start + cfg.horizon].iter().map(|p| base.to_local(p.position())).collect();
        let plan = Plan::from_positions(&q, cfg.dt)?;
        out.push(PlanRecord::from_plan(format!("{prefix}{start:06}"), &plan));
        start += cfg.stride;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub samples: usize,
    pub resampled: usize,
    pub windows: usize,
}

/// Odometry CSV (`t,x,y,heading`) to plan windows.
pub fn cmd_ingest(manifest: &PipelineManifest, input: &Path, out: &Path) -> Result<IngestSummary> {
    manifest.validate()?;
    let mut reader = csv::Reader::from_path(input).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<OdomRow>, _>>()
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", input.display())))?;
    let poses = resample(&rows, manifest.ingest.dt)?;
    let plans = window_plans(&poses, &manifest.ingest, "w")?;
    write_plans(out, &manifest.with_paths(&[input], out), &plans)?;
    let summary = IngestSummary { samples: rows.len(), resampled: poses.len(), windows: plans.len() };
    info!("ingest: {} samples -> {} windows", summary.samples, summary.windows);
    Ok(summary)
}

/// Fit diagnostics stored alongside each accepted plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub phase1_mse: f64,
    pub soft_end_mse: f64,
    pub hard_end_mse: f64,
    /// `t_crit` of every hypothesis after the hard phase.
    pub hypothesis_t_crit: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalSetRecord {
    pub plan: PlanRecord,
    pub report: FilterReport,
    pub fit: FitStats,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HallucinateSummary {
    pub plans: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub open_space: usize,
    pub malformed: usize,
    pub failed: usize,
}

enum PlanOutcome {
    Accepted(Box<CriticalSetRecord>),
    Rejected,
    OpenSpace,
    Failed(String),
}

fn hallucinate_one(rec: &PlanRecord, manifest: &PipelineManifest, index: usize) -> PlanOutcome {
    let run = || -> Result<PlanOutcome> {
        let plan = rec.to_plan()?;
        let cfg = &manifest.hallucination;
        let baseline = filter_critical_points(&[], &plan, cfg.radius, &cfg.decoder, manifest.filter.n_max)?;
        if baseline.open_space {
            return Ok(PlanOutcome::OpenSpace);
        }
        let mut rng = job_rng(manifest.seed, "hallucinate", index as u64);
        let (hyps, p1) = fit_phase1(&plan, cfg, &mut rng)?;
        let (hyps, p2) = fit_phase2(&plan, &hyps, cfg, &mut rng)?;
        let candidates = extract_critical_points(&hyps, &mut rng, manifest.filter.samples_per_hypothesis);
        let report = filter_critical_points(&candidates, &plan, cfg.radius, &cfg.decoder, manifest.filter.n_max)?;
        if !report.accepted {
            return Ok(PlanOutcome::Rejected);
        }
        let fit = FitStats {
            phase1_mse: p1.final_mse,
            soft_end_mse: p2.soft_end_mse,
            hard_end_mse: p2.hard_end_mse,
            hypothesis_t_crit: hyps.iter().map(|h| h.critical_index() + 1).collect(),
        };
        Ok(PlanOutcome::Accepted(Box::new(CriticalSetRecord { plan: rec.clone(), report, fit })))
    };
    run().unwrap_or_else(|e| PlanOutcome::Failed(e.to_string()))
}

pub fn cmd_hallucinate(manifest: &PipelineManifest, plans: &Path, out: &Path, workers: usize) -> Result<HallucinateSummary> {
    manifest.validate()?;
    let lines = read_jsonl::<PlanRecord>(plans)?;
    let mut summary = HallucinateSummary::default();
    let mut valid = Vec::new();
    for (n, r) in lines {
        match r {
            Ok(p) if p.poses.len() == manifest.ingest.horizon => valid.push(p),
            Ok(p) => {
                warn!("{}:{n}: plan {} has {} poses, expected {}; skipped", plans.display(), p.id, p.poses.len(), manifest.ingest.horizon);
                summary.malformed += 1;
            }
            Err(e) => {
                warn!("{}:{n}: {e}; skipped", plans.display());
                summary.malformed += 1;
            }
        }
    }
    if valid.is_empty() {
        return Err(Error::InvalidInput("no plans".into()));
    }
    summary.plans = valid.len();
    let outcomes = run_indexed(valid.len(), workers, |i| {
        let o = hallucinate_one(&valid[i], manifest, i);
        info!("hallucinate: plan {} done", valid[i].id);
        o
    })?;
    let mut records = Vec::new();
    for (p, o) in valid.iter().zip(outcomes) {
        match o {
            PlanOutcome::Accepted(r) => {
                summary.accepted += 1;
                records.push(*r);
            }
            PlanOutcome::Rejected => summary.rejected += 1,
            PlanOutcome::OpenSpace => summary.open_space += 1,
            PlanOutcome::Failed(e) => {
                warn!("plan {}: {e}", p.id);
                summary.failed += 1;
            }
        }
    }
    write_jsonl(out, &manifest.with_paths(&[plans], out), &records, Some(&summary))?;
    Ok(summary)
}

pub fn read_critical_sets(path: &Path) -> Result<Vec<CriticalSetRecord>> {
    read_strict(path)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub records: usize,
    pub empty_records: usize,
    pub scenarios: usize,
    /// Scenarios abandoned because a critical point could not be cleared.
    pub sample_failures: usize,
    pub augmented_obstacles: usize,
}

pub fn cmd_generate(
    manifest: &PipelineManifest,
    critical_sets: &Path,
    out: &Path,
    workers: usize,
    plot_data: Option<&Path>,
) -> Result<GenerateSummary> {
    manifest.validate()?;
    let sets = read_critical_sets(critical_sets)?;
    let per = run_indexed(sets.len(), workers, |i| -> Result<(Vec<Scenario>, usize)> {
        let rec = &sets[i];
        let plan = rec.plan.to_plan()?;
        let mut rng = job_rng(manifest.seed, "generate", i as u64);
        let g = generate_scenarios(&rec.plan.id, &plan, &rec.report.kept, &manifest.generator, &mut rng)?;
        let scenarios = if manifest.augment {
            g.scenarios.iter().map(|s| augment_random_obstacles(s, &plan, &manifest.generator, &mut rng)).collect()
        } else {
            g.scenarios
        };
        Ok((scenarios, g.dropped))
    })?;
    let mut summary = GenerateSummary { records: sets.len(), ..Default::default() };
    let mut all = Vec::new();
    for (rec, r) in sets.iter().zip(per) {
        let (scenarios, dropped) = r?;
        if rec.report.kept.is_empty() {
            warn!("plan {}: no kept critical points, no scenarios", rec.plan.id);
            summary.empty_records += 1;
        }
        summary.sample_failures += dropped;
        summary.augmented_obstacles += scenarios.iter().map(|s| s.augmented.len()).sum::<usize>();
        all.extend(scenarios);
    }
    summary.scenarios = all.len();
    let m = manifest.with_paths(&[critical_sets], out);
    write_jsonl(out, &m, &all, Some(&summary))?;
    if let Some(p) = plot_data {
        let horizons: BTreeMap<&str, usize> = sets.iter().map(|r| (r.plan.id.as_str(), r.plan.poses.len())).collect();
        let mut body = String::from("scenario,plan_id,obstacle,augmented,t,x,y\n");
        for (k, s) in all.iter().enumerate() {
            let h = horizons[s.plan_id.as_str()];
            let n = s.trajectories.len();
            for (i, tr) in s.all().enumerate() {
                for t in 1..=h {
                    let c = tr.position(t);
                    body.push_str(&format!("{k},{},{i},{},{t},{},{}\n", s.plan_id, i >= n, c.x, c.y));
                }
            }
        }
        write_commented(p, &m, &[], &body)?;
    }
    Ok(summary)
}

pub fn read_scenarios(path: &Path) -> Result<Vec<Scenario>> {
    read_strict(path)
}

fn plan_index(plans: &[PlanRecord]) -> Result<BTreeMap<&str, Plan>> {
    plans.iter().map(|p| Ok((p.id.as_str(), p.to_plan()?))).collect()
}

fn lookup<'a>(index: &'a BTreeMap<&str, Plan>, id: &str) -> Result<&'a Plan> {
    index.get(id).ok_or_else(|| Error::InvalidInput(format!("scenario references unknown plan {id}")))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderSummary {
    pub scenarios: usize,
    pub records: usize,
}

pub fn cmd_render(manifest: &PipelineManifest, scenarios: &Path, plans: &Path, out: &Path, workers: usize) -> Result<RenderSummary> {
    manifest.validate()?;
    let list = read_scenarios(scenarios)?;
    let plan_recs = read_plans(plans)?;
    let index = plan_index(&plan_recs)?;
    let per = run_indexed(list.len(), workers, |i| {
        let s = &list[i];
        let plan = lookup(&index, &s.plan_id)?;
        build_records(&s.plan_id, i, plan, s, &manifest.render, &mut job_rng(manifest.seed, "render", i as u64))
    })?;
    let records = per.into_iter().collect::<Result<Vec<_>>>()?.concat();
    let summary = RenderSummary { scenarios: list.len(), records: records.len() };
    write_jsonl(out, &manifest.with_paths(&[scenarios, plans], out), &records, Some(&summary))?;
    Ok(summary)
}

pub fn read_records(path: &Path) -> Result<Vec<crate::render::TrainingRecord>> {
    read_strict(path)
}

/// DCS per subset after each prefix fraction of the sample stream.
pub fn coverage_curve(samples: &[FeatureSample], config: &CoverageConfig, steps: usize) -> Result<Vec<(usize, CoverageReport)>> {
    let mut acc = CoverageAccumulator::new(*config)?;
    let mut out = Vec::with_capacity(steps);
    let mut done = 0;
    for k in 1..=steps {
        let upto = samples.len() * k / steps;
        acc.extend(&samples[done..upto]);
        done = upto;
        out.push((upto, acc.report()));
    }
    Ok(out)
}

fn write_commented(path: &Path, manifest: &PipelineManifest, extra: &[String], body: &str) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# tool_version: {TOOL_VERSION}")?;
    writeln!(w, "# manifest: {}", serde_json::to_string(manifest)?)?;
    for line in extra {
        writeln!(w, "# {line}")?;
    }
    w.write_all(body.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn cmd_coverage(
    manifest: &PipelineManifest,
    scenarios: &Path,
    plans: &Path,
    out: &Path,
    plot_data: Option<&Path>,
) -> Result<CoverageReport> {
    manifest.validate()?;
    let list = read_scenarios(scenarios)?;
    let plan_recs = read_plans(plans)?;
    let index = plan_index(&plan_recs)?;
    let mut samples = Vec::new();
    for s in &list {
        samples.extend(scenario_features(lookup(&index, &s.plan_id)?, s));
    }
    let mut acc = CoverageAccumulator::new(manifest.coverage)?;
    acc.extend(&samples);
    let report = acc.report();
    let m = manifest.with_paths(&[scenarios, plans], out);
    write_commented(out, &m, &[], &report.to_csv())?;
    if let Some(p) = plot_data {
        let mut body = String::from("prefix_percent,samples,subset,dcs_percent\n");
        for (k, (n, rep)) in coverage_curve(&samples, &manifest.coverage, 10)?.iter().enumerate() {
            for row in &rep.rows {
                body.push_str(&format!("{},{n},{},{:.6}\n", 10 * (k + 1), row.subset, row.dcs_percent));
            }
        }
        write_commented(p, &m, &[], &body)?;
    }
    Ok(report)
}

/// How trials choose actions.
#[derive(Debug, Clone, PartialEq)]
pub enum PlannerChoice {
    Gap,
    Constant(Action),
    /// Replays the `v,omega` columns of a trace CSV.
    Replay(PathBuf),
    External { command: String, args: Vec<String> },
}

impl PlannerChoice {
    /// `gap`, `constant:<v>[,<omega>]`, `replay:<trace.csv>` or `external:<command> [args..]`.
    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unknown planner {s:?}"));
        let (kind, arg) = s.split_once(':').unwrap_or((s, ""));
        match kind {
            "gap" => Ok(Self::Gap),
            "constant" => {
                let parts: Vec<f64> = arg.split(',').map(|v| v.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
                match parts.as_slice() {
                    [v] => Ok(Self::Constant(Action::new(*v, 0.0))),
                    [v, w] => Ok(Self::Constant(Action::new(*v, *w))),
                    _ => Err(bad()),
                }
            }
            "replay" if !arg.is_empty() => Ok(Self::Replay(PathBuf::from(arg))),
            "external" => {
                let mut it = arg.split_whitespace().map(String::from);
                let command = it.next().ok_or_else(bad)?;
                Ok(Self::External { command, args: it.collect() })
            }
            _ => Err(bad()),
        }
    }

    fn instantiate(&self, cfg: &TrialConfig, replay: &Option<Vec<Action>>) -> Result<Box<dyn Planner>> {
        Ok(match self {
            Self::Gap => Box::new(GapFollower::default()),
            Self::Constant(a) => Box::new(ConstantPlanner(*a)),
            Self::Replay(_) => Box::new(ReplayPlanner::new(replay.clone().unwrap_or_default())),
            Self::External { command, args } => Box::new(ExternalPlanner::spawn(
                command,
                args,
                std::time::Duration::from_millis(cfg.planner_deadline_ms),
            )?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct TraceRow {
    step: usize,
    x: f64,
    y: f64,
    heading: f64,
    v: f64,
    omega: f64,
}

/// Actions recorded in a trace CSV written by `--emit-plot-data`.
pub fn read_trace_actions(path: &Path) -> Result<Vec<Action>> {
    let text = fs::read_to_string(path)?;
    let body: String = text.lines().filter(|l| !l.starts_with('#')).map(|l| format!("{l}\n")).collect();
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    let rows = reader
        .deserialize()
        .collect::<std::result::Result<Vec<TraceRow>, _>>()
        .map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))?;
    // The last row is the final pose and carries no action.
    Ok(rows.iter().take(rows.len().saturating_sub(1)).map(|r| Action::new(r.v, r.omega)).collect())
}

pub fn load_worlds(dir: &Path) -> Result<Vec<WorldSpec>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|e| e == "json"));
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidInput(format!("no world files in {}", dir.display())));
    }
    files
        .iter()
        .map(|p| {
            let w: WorldSpec = serde_json::from_str(&fs::read_to_string(p)?)
                .map_err(|e| Error::InvalidInput(format!("{}: {e}", p.display())))?;
            w.validate()?;
            Ok(w)
        })
        .collect()
}

pub enum WorldSource<'a> {
    Dir(&'a Path),
    Generate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub worlds: usize,
    pub trials: usize,
    pub collisions: usize,
    pub timeouts: usize,
    pub success: SuccessSummary,
}

/// Runs every scheduled trial and writes `results.csv`, `summary.json` and,
/// for generated worlds, one JSON file per world under `worlds/`.
pub fn cmd_simulate(
    manifest: &PipelineManifest,
    source: WorldSource<'_>,
    planner: &PlannerChoice,
    out_dir: &Path,
    workers: usize,
    emit_plot_data: bool,
) -> Result<(SimulateSummary, Vec<TrialResult>)> {
    manifest.validate()?;
    let cfg = &manifest.simulation;
    let (worlds, inputs): (Vec<WorldSpec>, Vec<PathBuf>) = match source {
        WorldSource::Dir(d) => (load_worlds(d)?, vec![d.to_path_buf()]),
        WorldSource::Generate => {
            let worlds = generate_worlds(&manifest.worlds, child_seed(manifest.seed, "worlds", 0))?;
            let dir = out_dir.join("worlds");
            fs::create_dir_all(&dir)?;
            for w in &worlds {
                let mut f = create(&dir.join(format!("{}.json", w.id)))?;
                serde_json::to_writer_pretty(&mut f, w)?;
                f.write_all(b"\n")?;
                f.flush()?;
            }
            (worlds, vec![])
        }
    };
    let replay = match planner {
        PlannerChoice::Replay(p) => Some(read_trace_actions(p)?),
        _ => None,
    };
    let jobs = schedule(worlds.len(), cfg.trials_per_world);
    info!("simulate: {} trials over {} worlds", jobs.len(), worlds.len());
    let runs = run_indexed(jobs.len(), workers, |k| {
        let job = jobs[k];
        let w = &worlds[job.world];
        let mut p = planner.instantiate(cfg, &replay)?;
        run_trial_traced(w, p.as_mut(), cfg, trial_seed(w, job.trial))
    })?;
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    for (job, (r, _)) in jobs.iter().zip(&runs) {
        if let Some(d) = &r.diagnostic {
            warn!("{} trial {}: {d}", worlds[job.world].id, job.trial);
        }
    }

    let input_refs: Vec<&Path> = inputs.iter().map(PathBuf::as_path).collect();
    let m = manifest.with_paths(&input_refs, out_dir);
    let mut csv = String::from("world_id,trial,outcome,elapsed_s,path_length_m,min_clearance_m\n");
    for (job, (r, _)) in jobs.iter().zip(&runs) {
        let w = &worlds[job.world];
        csv.push_str(&format!(
            "{},{},{},{:.3},{:.6},{:.6}\n",
            w.id, job.trial, r.outcome, r.elapsed, r.path_length, r.min_clearance_seen
        ));
    }
    let declared = vec![format!("goal_tolerance_m: {}", cfg.goal_tolerance), format!("timeout_s: {}", cfg.timeout)];
    write_commented(&out_dir.join("results.csv"), &m, &declared, &csv)?;

    if emit_plot_data {
        for (job, (_, trace)) in jobs.iter().zip(&runs) {
            let mut body = String::from("step,x,y,heading,v,omega\n");
            for (k, p) in trace.poses.iter().enumerate() {
                let a = trace.actions.get(k).copied().unwrap_or(Action::ZERO);
                body.push_str(&format!("{k},{},{},{},{},{}\n", p.x, p.y, p.heading(), a.v, a.omega));
            }
            let name = format!("{}_t{}.csv", worlds[job.world].id, job.trial);
            write_commented(&out_dir.join("traces").join(name), &m, &[], &body)?;
        }
    }

    let results: Vec<TrialResult> = runs.into_iter().map(|(r, _)| r).collect();
    let success = success_rate(jobs.iter().zip(&results).map(|(j, r)| (worlds[j.world].difficulty, r)));
    let count = |o| results.iter().filter(|r| r.outcome == o).count();
    let summary = SimulateSummary {
        worlds: worlds.len(),
        trials: results.len(),
        collisions: count(crate::sim::Outcome::Collision),
        timeouts: count(crate::sim::Outcome::Timeout),
        success,
    };
    #[derive(Serialize)]
    struct SummaryFile<'a> {
        tool_version: &'a str,
        manifest: &'a PipelineManifest,
        summary: &'a SimulateSummary,
    }
    let mut f = create(&out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut f, &SummaryFile { tool_version: TOOL_VERSION, manifest: &m, summary: &summary })?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok((summary, results))
}
