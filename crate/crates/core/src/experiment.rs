//! Config-driven runs, sweeps and comparison reports.
//!
//! Artifacts land in `<out>/<spec-hash>/<seed>/metrics.csv`, next to a
//! `manifest.json` (content hashes of every artifact) and a summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{rounds_to_threshold, MetricOptions, MetricTrace, ThresholdMetric};
use crate::config::{DataSource, ExperimentSpec, StepSize, SweepSpec, TopologySpec};
use crate::engine::{train, CorrectionMode, Federation, TrainConfig};
use crate::error::{Error, Result};
use crate::multilevel::{events_to_csv, run_multilevel, MultilevelConfig};
use crate::param::ParamVector;
use crate::partition::{partition_dataset, toy_clusters, LabeledDataset};
use crate::rng::aux_rng;
use crate::synth::{synth_heterogeneous_quadratics, synth_tree_quadratics, SynthQuadratic};
use crate::task::{max_lipschitz, NoiseSource, Task, TaskKind};
use crate::topology::{MultiLevelTopology, Topology};

/// A spec turned into concrete clients, objectives and engine settings.
#[derive(Debug, Clone)]
pub enum Instance {
    TwoLevel {
        federation: Federation,
        config: TrainConfig,
    },
    MultiLevel {
        topology: MultiLevelTopology,
        tasks: Vec<Task>,
        noise: NoiseSource,
        config: MultilevelConfig,
    },
}

#[derive(Debug, Clone)]
pub struct Prepared {
    pub instance: Instance,
    pub x0: ParamVector,
    /// Step size actually used.
    pub gamma: f64,
}

fn labeled_data(source: &DataSource) -> Result<Option<LabeledDataset>> {
    Ok(match source {
        DataSource::Synthetic(_) => None,
        DataSource::Clusters {
            per_label,
            labels,
            dim,
            seed,
        } => Some(toy_clusters(*per_label, *labels, *dim, *seed)),
        DataSource::Dataset { path } => Some(LabeledDataset::load_csv(path).map_err(|e| match e {
            Error::Io(io) => Error::Dataset(format!("{}: {io}", path.display())),
            other => other,
        })?),
    })
}

fn build_tasks(spec: &ExperimentSpec, flat: &Topology, tree: Option<&MultiLevelTopology>) -> Result<Vec<Task>> {
    let task = &spec.task;
    if let DataSource::Synthetic(s) = &task.source {
        let synth = SynthQuadratic {
            dim: s.dim,
            group_shift: s.group_shift,
            client_shift: s.client_shift,
            curvature_spread: s.curvature_spread,
            base_norm: s.base_norm,
            minibatch_size: if task.minibatch_size == 0 {
                s.dim
            } else {
                task.minibatch_size
            },
            seed: s.seed,
        };
        let inst = match tree {
            None => synth_heterogeneous_quadratics(flat, &synth)?,
            Some(tree) => {
                let shifts = s.level_shifts.clone().unwrap_or_else(|| {
                    let mut v = vec![s.group_shift; tree.levels() - 1];
                    v.push(s.client_shift);
                    v
                });
                synth_tree_quadratics(tree, &shifts, &synth)?
            }
        };
        return Ok(inst.tasks);
    }
    let data = labeled_data(&task.source)?.expect("labeled source");
    if task.kind == TaskKind::Logistic && data.n_labels() > 2 {
        return Err(Error::Config(format!(
            "logistic tasks need binary labels, dataset has {}",
            data.n_labels()
        )));
    }
    let shards = partition_dataset(&data, flat, &spec.partition)?;
    shards
        .into_iter()
        .map(|shard| {
            let b = if task.minibatch_size == 0 {
                shard.len()
            } else {
                task.minibatch_size
            };
            Task::new(task.kind, shard, b)
        })
        .collect()
}

fn initial_model(spec: &ExperimentSpec, dim: usize) -> ParamVector {
    match spec.task.kind {
        // symmetric hidden units would never separate from a zero start
        TaskKind::Mlp { .. } => {
            let seed = match &spec.task.source {
                DataSource::Synthetic(s) => s.seed,
                DataSource::Clusters { seed, .. } => *seed,
                DataSource::Dataset { .. } => spec.partition.seed,
            };
            let mut rng = aux_rng(seed, 0x1417);
            ParamVector::from_vec((0..dim).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect())
        }
        _ => ParamVector::zeros(dim),
    }
}

/// Builds clients, objectives and engine settings for a spec.
pub fn prepare(spec: &ExperimentSpec) -> Result<Prepared> {
    let t = &spec.train;
    match &spec.topology {
        TopologySpec::TwoLevel { clients_per_group } => {
            let topology = Topology::build(clients_per_group.len(), clients_per_group)?;
            let tasks = build_tasks(spec, &topology, None)?;
            let gamma = match t.gamma {
                StepSize::Fixed(g) => g,
                StepSize::Auto => 1.0 / (40.0 * (t.group_rounds * t.local_steps) as f64 * max_lipschitz(&tasks)?),
            };
            let federation = Federation::new(topology, tasks, spec.task.noise)?;
            let x0 = initial_model(spec, federation.dim());
            let mut config = TrainConfig::new(gamma, t.rounds, t.group_rounds, t.local_steps)
                .with_mode(t.mode)
                .with_threads(spec.threads);
            config.z_init = t.z_init;
            config.y_init = t.y_init;
            config.z_refresh = t.z_refresh;
            config.validate()?;
            Ok(Prepared {
                instance: Instance::TwoLevel { federation, config },
                x0,
                gamma,
            })
        }
        TopologySpec::MultiLevel { fanouts, periods } => {
            let tree = MultiLevelTopology::new(fanouts.clone(), periods.clone())?;
            let flat = tree.top_level_groups();
            let tasks = build_tasks(spec, &flat, Some(&tree))?;
            let p1 = periods[0];
            let gamma = match t.gamma {
                StepSize::Fixed(g) => g,
                StepSize::Auto => 1.0 / (40.0 * p1 as f64 * max_lipschitz(&tasks)?),
            };
            let corrections = match t.mode {
                CorrectionMode::Full => true,
                CorrectionMode::None => false,
                other => {
                    return Err(Error::Config(format!(
                        "multi-level runs support modes full and none, not {}",
                        other.name()
                    )))
                }
            };
            let x0 = initial_model(spec, tasks[0].dim());
            let mut config = MultilevelConfig::new(gamma, t.rounds * p1);
            config.corrections = corrections;
            config.z_init = t.z_init;
            config.y_init = t.y_init;
            config.refresh = t.z_refresh;
            config.threads = spec.threads;
            config.validate()?;
            Ok(Prepared {
                instance: Instance::MultiLevel {
                    topology: tree,
                    tasks,
                    noise: spec.task.noise,
                    config,
                },
                x0,
                gamma,
            })
        }
    }
}

/// Outcome of one seed: the trace (possibly partial) and the error that stopped it.
pub struct SeedRun {
    pub seed: u64,
    pub trace: MetricTrace,
    /// Multi-level schedule log as CSV.
    pub events_csv: Option<String>,
    pub error: Option<Error>,
}

pub fn run_seed(prepared: &Prepared, metrics: &MetricOptions, seed: u64) -> SeedRun {
    match &prepared.instance {
        Instance::TwoLevel { federation, config } => match train(federation, config, seed, &prepared.x0, metrics) {
            Ok(out) => SeedRun {
                seed,
                trace: out.trace,
                events_csv: None,
                error: None,
            },
            Err(a) => SeedRun {
                seed,
                trace: a.trace,
                events_csv: None,
                error: Some(a.error),
            },
        },
        Instance::MultiLevel {
            topology,
            tasks,
            noise,
            config,
        } => match run_multilevel(topology, tasks.clone(), *noise, config, seed, &prepared.x0, metrics) {
            Ok(out) => SeedRun {
                seed,
                trace: out.trace,
                events_csv: Some(events_to_csv(&out.events)),
                error: None,
            },
            Err(a) => SeedRun {
                seed,
                trace: a.trace,
                events_csv: None,
                error: Some(a.error),
            },
        },
    }
}

/// Overrides applied on top of a spec by command-line flags.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seeds: Option<Vec<u64>>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub threshold: Option<f64>,
    pub metric: Option<ThresholdMetric>,
}

impl RunOptions {
    pub fn apply(&self, spec: &mut ExperimentSpec) -> Result<()> {
        if let Some(s) = &self.seeds {
            if s.is_empty() {
                return Err(Error::Config("at least one seed is required".into()));
            }
            spec.seeds = s.clone();
        }
        if let Some(d) = &self.output_dir {
            spec.output_dir = d.clone();
        }
        if let Some(t) = self.threads {
            if t == 0 {
                return Err(Error::Config("threads must be at least 1".into()));
            }
            spec.threads = t;
        }
        if let Some(t) = self.threshold {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("threshold must be positive, got {t}")));
            }
            spec.metrics.threshold = t;
        }
        if let Some(m) = self.metric {
            spec.metrics.metric = m;
        }
        Ok(())
    }
}

/// Mean and sample standard deviation of rounds-to-threshold over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundsSummary {
    pub per_seed: Vec<Option<usize>>,
    /// Rounds each run lasted; non-crossing seeds are reported as `> rounds`.
    pub rounds: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

impl RoundsSummary {
    pub fn new(per_seed: Vec<Option<usize>>, rounds: usize) -> Self {
        let hit: Option<Vec<f64>> = per_seed.iter().map(|r| r.map(|v| v as f64)).collect();
        let (mean, std) = match hit {
            Some(v) if !v.is_empty() => {
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let var = if v.len() > 1 {
                    v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                (Some(mean), Some(var.sqrt()))
            }
            _ => (None, None),
        };
        Self {
            per_seed,
            rounds,
            mean,
            std,
        }
    }

    /// `12.3 ± 1.5`, or `>R` when some seed never reached the threshold.
    pub fn display(&self) -> String {
        match (self.mean, self.std) {
            (Some(m), Some(s)) => format!("{m:.1} ± {s:.1}"),
            _ => format!(">{}", self.rounds),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec_hash: String,
    pub code_version: String,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub gamma: f64,
    pub threshold: f64,
    pub metric: ThresholdMetric,
    pub wall_time_secs: f64,
    pub status: String,
    pub artifacts: Vec<ArtifactEntry>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub dir: PathBuf,
    pub spec_hash: String,
    pub label: String,
    pub summary: RoundsSummary,
    pub manifest: Manifest,
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn total_rounds(spec: &ExperimentSpec) -> usize {
    spec.train.rounds
}

/// Runs every seed of `spec` and writes metrics, manifest and summary.
///
/// On divergence the partial artifacts and a manifest with status `diverged` are
/// written before the error is returned.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_labeled(spec, spec.train.mode.name())
}

fn run_labeled(spec: &ExperimentSpec, label: &str) -> Result<ExperimentReport> {
    let started = Instant::now();
    let prepared = prepare(spec)?;
    let hash = spec.spec_hash();
    let dir = spec.output_dir.join(&hash);
    std::fs::create_dir_all(&dir)?;
    let metrics = MetricOptions {
        drift: spec.metrics.drift,
        dissimilarity: spec.metrics.dissimilarity,
        suboptimality: true,
    };

    let mut artifacts: Vec<PathBuf> = Vec::new();
    let config_path = dir.join("config.toml");
    let mut canonical = spec.clone();
    canonical.seeds.clear();
    canonical.seeds.push(0);
    canonical.threads = 1;
    canonical.output_dir = PathBuf::new();
    std::fs::write(&config_path, canonical.to_toml())?;
    artifacts.push(config_path);

    let mut per_seed = Vec::with_capacity(spec.seeds.len());
    let mut failure = None;
    for &seed in &spec.seeds {
        let run = run_seed(&prepared, &metrics, seed);
        let seed_dir = dir.join(seed.to_string());
        std::fs::create_dir_all(&seed_dir)?;
        let csv = seed_dir.join("metrics.csv");
        run.trace.write_csv(&csv)?;
        artifacts.push(csv);
        if let Some(events) = &run.events_csv {
            let p = seed_dir.join("events.csv");
            std::fs::write(&p, events)?;
            artifacts.push(p);
        }
        per_seed.push(rounds_to_threshold(
            &run.trace,
            spec.metrics.threshold,
            spec.metrics.metric,
        ));
        if let Some(e) = run.error {
            failure = Some(e);
            break;
        }
    }
    let summary = RoundsSummary::new(per_seed, total_rounds(spec));

    let summary_path = dir.join("summary.csv");
    let mut s = String::from("label,seed,rounds_to_threshold\n");
    for (seed, r) in spec.seeds.iter().zip(&summary.per_seed) {
        let _ = writeln!(
            s,
            "{label},{seed},{}",
            r.map_or(format!(">{}", summary.rounds), |v| v.to_string())
        );
    }
    let _ = writeln!(s, "{label},mean,{}", summary.display());
    std::fs::write(&summary_path, s)?;
    artifacts.push(summary_path);

    let status = match &failure {
        None => "ok".to_string(),
        Some(Error::Diverged { .. }) => "diverged".to_string(),
        Some(e) => format!("failed: {e}"),
    };
    let manifest = Manifest {
        spec_hash: hash.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: spec.seeds.clone(),
        threads: spec.threads,
        gamma: prepared.gamma,
        threshold: spec.metrics.threshold,
        metric: spec.metrics.metric,
        wall_time_secs: started.elapsed().as_secs_f64(),
        status,
        artifacts: artifacts
            .iter()
            .map(|p| {
                Ok(ArtifactEntry {
                    path: p.strip_prefix(&dir).unwrap_or(p).to_string_lossy().into_owned(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<_>>()?,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(ExperimentReport {
        dir,
        spec_hash: hash,
        label: label.to_string(),
        summary,
        manifest,
    })
}

/// One point of a sweep grid.
#[derive(Debug, Clone)]
pub struct SweepCell {
    pub label: String,
    pub spec: ExperimentSpec,
}

/// Expands the Cartesian product of the sweep axes over the base spec.
pub fn expand_sweep(sweep: &SweepSpec) -> Result<Vec<SweepCell>> {
    let a = &sweep.axes;
    let base = &sweep.base;
    if a.fixed_effective_step && !matches!(base.train.gamma, StepSize::Fixed(_)) {
        return Err(Error::Config("fixed_effective_step needs a numeric gamma".into()));
    }
    if (!a.group_shift.is_empty() || !a.client_shift.is_empty())
        && !matches!(base.task.source, DataSource::Synthetic(_))
    {
        return Err(Error::Config("shift axes need a synthetic task".into()));
    }
    if !a.groups.is_empty() {
        match &base.topology {
            TopologySpec::TwoLevel { clients_per_group } if clients_per_group.windows(2).all(|w| w[0] == w[1]) => {}
            _ => return Err(Error::Config("the groups axis needs equal group sizes".into())),
        }
    }
    fn axis<T: Clone>(v: &[T]) -> Vec<Option<T>> {
        if v.is_empty() {
            vec![None]
        } else {
            v.iter().cloned().map(Some).collect()
        }
    }
    let mut cells = Vec::with_capacity(a.cell_count());
    for e in axis(&a.group_rounds) {
        for h in axis(&a.local_steps) {
            for n in axis(&a.groups) {
                for mode in axis(&a.mode) {
                    for regime in axis(&a.regime) {
                        for gs in axis(&a.group_shift) {
                            for cs in axis(&a.client_shift) {
                                let mut spec = base.clone();
                                let mut parts = Vec::new();
                                if let Some(e) = e {
                                    spec.train.group_rounds = e;
                                    parts.push(format!("E={e}"));
                                }
                                if let Some(h) = h {
                                    spec.train.local_steps = h;
                                    parts.push(format!("H={h}"));
                                }
                                if a.fixed_effective_step {
                                    if let StepSize::Fixed(g) = base.train.gamma {
                                        let base_eh = (base.train.group_rounds * base.train.local_steps) as f64;
                                        let eh = (spec.train.group_rounds * spec.train.local_steps) as f64;
                                        spec.train.gamma = StepSize::Fixed(g * base_eh / eh);
                                    }
                                }
                                if let Some(n) = n {
                                    if let TopologySpec::TwoLevel { clients_per_group } = &mut spec.topology {
                                        *clients_per_group = vec![clients_per_group[0]; n];
                                    }
                                    parts.push(format!("N={n}"));
                                }
                                if let Some(m) = mode {
                                    spec.train.mode = m;
                                    parts.push(format!("mode={}", m.name()));
                                }
                                if let Some(r) = regime {
                                    spec.partition.regime = r;
                                    parts.push(format!("regime={}", r.name()));
                                }
                                if let DataSource::Synthetic(s) = &mut spec.task.source {
                                    if let Some(gs) = gs {
                                        s.group_shift = gs;
                                        parts.push(format!("group_shift={gs}"));
                                    }
                                    if let Some(cs) = cs {
                                        s.client_shift = cs;
                                        parts.push(format!("client_shift={cs}"));
                                    }
                                }
                                let label = if parts.is_empty() {
                                    "base".to_string()
                                } else {
                                    parts.join(",")
                                };
                                cells.push(SweepCell { label, spec });
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cells: Vec<ExperimentReport>,
    pub summary_path: PathBuf,
}

/// Runs every sweep cell (in parallel when `threads > 1`; results do not depend
/// on it) and writes a ranked summary.
pub fn run_sweep(sweep: &SweepSpec) -> Result<SweepReport> {
    let cells = expand_sweep(sweep)?;
    log::info!("sweep: {} cells", cells.len());
    let threads = sweep.base.threads;
    let run_cell = |cell: &SweepCell| {
        let mut spec = cell.spec.clone();
        if threads > 1 {
            spec.threads = 1;
        }
        run_labeled(&spec, &cell.label)
    };
    let results: Vec<Result<ExperimentReport>> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| cells.par_iter().map(run_cell).collect())
    } else {
        cells.iter().map(run_cell).collect()
    };
    let reports = results.into_iter().collect::<Result<Vec<_>>>()?;

    let mut ranked: Vec<&ExperimentReport> = reports.iter().collect();
    ranked.sort_by(|a, b| {
        let key = |r: &ExperimentReport| r.summary.mean.unwrap_or(f64::INFINITY);
        key(a).total_cmp(&key(b))
    });
    let mut s = String::from("rank,label,spec_hash,rounds_to_threshold\n");
    for (i, r) in ranked.iter().enumerate() {
        let _ = writeln!(s, "{},\"{}\",{},{}", i + 1, r.label, r.spec_hash, r.summary.display());
    }
    let dir = sweep.base.output_dir.join(format!("sweep-{}", sweep.base.spec_hash()));
    std::fs::create_dir_all(&dir)?;
    let summary_path = dir.join("summary.csv");
    std::fs::write(&summary_path, s)?;
    Ok(SweepReport {
        cells: reports,
        summary_path,
    })
}

/// Speedup of a row relative to the first label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Speedup {
    Exact(f64),
    /// The baseline never crossed: the true ratio exceeds this value.
    AtLeast(f64),
    /// The row never crossed: the true ratio is below this value.
    Below(f64),
    Unknown,
}

impl Speedup {
    pub fn display(&self) -> String {
        match self {
            Speedup::Exact(x) => format!("{}×", fmt_ratio(*x)),
            Speedup::AtLeast(x) => format!(">{}×", fmt_ratio(*x)),
            Speedup::Below(x) => format!("<{}×", fmt_ratio(*x)),
            Speedup::Unknown => "n/a".into(),
        }
    }
}

fn fmt_ratio(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else if (x - x.round()).abs() < 1e-9 {
        format!("{}", x.round())
    } else {
        format!("{x:.2}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub rounds: Option<usize>,
    /// Last global round present in the trace.
    pub horizon: usize,
    pub speedup: Speedup,
}

impl ComparisonRow {
    pub fn rounds_display(&self) -> String {
        self.rounds.map_or(format!(">{}", self.horizon), |r| r.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub threshold: f64,
    pub metric: ThresholdMetric,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "rounds to {} <= {:e}\n{:<width$}  {:>8}  {:>8}\n",
            self.metric.name(),
            self.threshold,
            "label",
            "rounds",
            "speedup"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>8}  {:>8}",
                r.label,
                r.rounds_display(),
                r.speedup.display()
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("label,rounds_to_threshold,speedup\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", r.label, r.rounds_display(), r.speedup.display());
        }
        s
    }
}

/// Rounds-to-threshold per trace and speedup relative to the first.
pub fn compare_report(
    traces: &[MetricTrace],
    labels: &[String],
    threshold: f64,
    metric: ThresholdMetric,
) -> Result<ComparisonReport> {
    if traces.is_empty() {
        return Err(Error::Comparison("nothing to compare".into()));
    }
    if traces.len() != labels.len() {
        return Err(Error::Comparison(format!(
            "{} traces but {} labels",
            traces.len(),
            labels.len()
        )));
    }
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(Error::Comparison(format!("duplicate label {l:?}")));
        }
    }
    let mut measured = Vec::with_capacity(traces.len());
    for (trace, label) in traces.iter().zip(labels) {
        let series = trace.round_series(metric);
        let Some(&(horizon, _)) = series.last() else {
            return Err(Error::Comparison(format!("trace {label:?} has no round-boundary rows")));
        };
        if series.iter().any(|(_, v)| v.is_nan()) {
            return Err(Error::Comparison(format!(
                "trace {label:?} has missing {} values",
                metric.name()
            )));
        }
        measured.push((rounds_to_threshold(trace, threshold, metric), horizon));
    }
    let (base, base_h) = measured[0];
    let rows = measured
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&(rounds, horizon), label))| {
            let ratio = |a: usize, b: usize| if b == 0 { f64::INFINITY } else { a as f64 / b as f64 };
            let speedup = if i == 0 {
                Speedup::Exact(1.0)
            } else {
                match (base, rounds) {
                    (Some(b), Some(r)) => Speedup::Exact(ratio(b, r)),
                    (None, Some(r)) => Speedup::AtLeast(ratio(base_h, r)),
                    (Some(b), None) => Speedup::Below(ratio(b, horizon)),
                    (None, None) => Speedup::Unknown,
                }
            };
            ComparisonRow {
                label: label.clone(),
                rounds,
                horizon,
                speedup,
            }
        })
        .collect();
    Ok(ComparisonReport {
        threshold,
        metric,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::MetricRecord;
    use crate::config::parse_config;

    fn trace(values: &[f64]) -> MetricTrace {
        MetricTrace {
            records: values
                .iter()
                .enumerate()
                .map(|(t, &g)| MetricRecord {
                    t,
                    e: 0,
                    grad_norm_sq: g,
                    loss: g,
                    subopt: None,
                    client_drift: None,
                    group_drift: None,
                    delta1_sq: None,
                    delta2_sq_max: None,
                    z_sum_violation: 0.0,
                    y_sum_violation: 0.0,
                })
                .collect(),
        }
    }

    fn geometric(rounds_to_hit: usize, total: usize) -> MetricTrace {
        trace(
            &(0..=total)
                .map(|t| if t >= rounds_to_hit { 1e-9 } else { 1.0 })
                .collect::<Vec<_>>(),
        )
    }

    fn labels(n: &[&str]) -> Vec<String> {
        n.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn single_trace_is_unit_speedup() {
        let r = compare_report(&[geometric(10, 20)], &labels(&["a"]), 1e-8, ThresholdMetric::Grad).unwrap();
        assert_eq!(r.rows[0].speedup, Speedup::Exact(1.0));
        assert_eq!(r.rows[0].speedup.display(), "1×");
    }

    #[test]
    fn speedup_is_a_ratio() {
        let r = compare_report(
            &[geometric(100, 200), geometric(25, 200)],
            &labels(&["base", "fast"]),
            1e-8,
            ThresholdMetric::Grad,
        )
        .unwrap();
        assert_eq!(r.rows[1].speedup, Speedup::Exact(4.0));
        assert_eq!(r.rows[1].speedup.display(), "4×");
    }

    #[test]
    fn never_crossing_uses_bound_notation() {
        let r = compare_report(
            &[geometric(1000, 500), geometric(50, 500)],
            &labels(&["hfedavg", "mtgc"]),
            1e-8,
            ThresholdMetric::Grad,
        )
        .unwrap();
        assert_eq!(r.rows[0].rounds_display(), ">500");
        assert_eq!(r.rows[1].speedup, Speedup::AtLeast(10.0));
        assert!(r.to_text().contains(">10×"));
        assert!(r.to_csv().contains("hfedavg,>500,1×"));
    }

    #[test]
    fn incompatible_traces_are_rejected() {
        let empty = MetricTrace::default();
        assert!(compare_report(&[empty], &labels(&["x"]), 1.0, ThresholdMetric::Grad).is_err());
        assert!(compare_report(&[geometric(1, 2)], &labels(&[]), 1.0, ThresholdMetric::Grad).is_err());
        assert!(compare_report(
            &[geometric(1, 2), geometric(1, 2)],
            &labels(&["a", "a"]),
            1.0,
            ThresholdMetric::Grad
        )
        .is_err());
    }

    #[test]
    fn summary_reports_mean_and_std() {
        let s = RoundsSummary::new(vec![Some(10), Some(12), Some(14)], 50);
        assert_eq!(s.mean, Some(12.0));
        assert_eq!(s.std, Some(2.0));
        assert_eq!(s.display(), "12.0 ± 2.0");
        assert_eq!(RoundsSummary::new(vec![Some(3), None], 50).display(), ">50");
    }

    #[test]
    fn sweep_expansion_is_cartesian() {
        let text = "[train]\ngamma = 0.1\ngroup_rounds = 2\nlocal_steps = 5\n[sweep]\ngroup_rounds = [1, 2]\nlocal_steps = [5, 10, 20]\nfixed_effective_step = true\n";
        let sweep = crate::config::parse_sweep(text).unwrap();
        let cells = expand_sweep(&sweep).unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0].label, "E=1,H=5");
        let StepSize::Fixed(g) = cells[0].spec.train.gamma else {
            panic!()
        };
        assert!((g - 0.2).abs() < 1e-15);
    }

    #[test]
    fn prepare_builds_every_source() {
        let quad = parse_config("[topology]\ngroups = 2\nclients_per_group = 2\n[train]\ngamma = \"auto\"\ngroup_rounds = 2\nlocal_steps = 5\n").unwrap();
        let p = prepare(&quad).unwrap();
        assert!(p.gamma > 0.0 && p.gamma <= 1.0 / 400.0 + 1e-15);
        let mlp = parse_config("[task]\nkind = \"mlp\"\nhidden = 3\nsource = \"clusters\"\nper_label = 10\nlabels = 3\n[topology]\ngroups = 2\nclients_per_group = 2\n[train]\ngamma = 0.05\n").unwrap();
        let p = prepare(&mlp).unwrap();
        assert!(p.x0.norm() > 0.0);
        let logistic =
            parse_config("[task]\nkind = \"logistic\"\nsource = \"clusters\"\nlabels = 3\n[train]\ngamma = 0.05\n")
                .unwrap();
        assert!(matches!(prepare(&logistic), Err(Error::Config(_))));
        let tree =
            parse_config("[topology]\nfanouts = [2, 2]\nperiods = [4, 2]\n[train]\ngamma = 0.1\nmode = \"none\"\n")
                .unwrap();
        match prepare(&tree).unwrap().instance {
            Instance::MultiLevel { config, .. } => {
                assert!(!config.corrections);
                assert_eq!(config.iterations, 4);
            }
            _ => panic!("expected multi-level instance"),
        }
    }
}
