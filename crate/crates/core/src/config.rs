//! Experiment configuration files (TOML).
//!
//! ```toml
//! seeds = [0, 1, 2]
//! output_dir = "runs"
//!
//! [task]
//! kind = "quadratic"          # quadratic | logistic | mlp (with `hidden`)
//! source = "synthetic"        # synthetic | clusters | dataset
//! dim = 10
//! group_shift = 1.0
//! client_shift = 1.0
//! noise = "minibatch"         # minibatch | gaussian (with `sigma`)
//!
//! [topology]
//! groups = 10
//! clients_per_group = 10      # or one entry per group; or `fanouts` + `periods`
//!
//! [train]
//! gamma = 0.01                # required; "auto" picks 1/(40·E·H·L)
//! rounds = 100
//! group_rounds = 2
//! local_steps = 5
//! mode = "full"
//!
//! [sweep]                     # only for `mtgc sweep`
//! local_steps = [5, 10, 20]
//! ```
//!
//! Parsing reports every problem found, each with its line and column.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::de::{DeTable, DeValue};
use toml::Spanned;

use crate::analysis::ThresholdMetric;
use crate::engine::{CorrectionInit, CorrectionMode, ZRefresh};
use crate::error::{ConfigIssue, Error, Result};
use crate::partition::{PartitionPlan, Regime, DEFAULT_MAX_RETRIES};
use crate::task::{NoiseSource, TaskKind};
use crate::topology::MultiLevelTopology;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub group_shift: f64,
    pub client_shift: f64,
    pub curvature_spread: f64,
    pub base_norm: f64,
    /// Per-level optimum shifts for multi-level trees (level 1 first).
    pub level_shifts: Option<Vec<f64>>,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            dim: 2,
            group_shift: 1.0,
            client_shift: 1.0,
            curvature_spread: 0.0,
            base_norm: 1.0,
            level_shifts: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "source")]
pub enum DataSource {
    /// Heterogeneous quadratics with planted optima.
    Synthetic(SyntheticSpec),
    /// Gaussian label clusters, partitioned with the `[partition]` plan.
    Clusters {
        per_label: usize,
        labels: usize,
        dim: usize,
        seed: u64,
    },
    /// `label,features…` CSV, partitioned with the `[partition]` plan.
    Dataset { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub source: DataSource,
    pub noise: NoiseSource,
    /// Examples per stochastic gradient; 0 means full batch.
    pub minibatch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologySpec {
    TwoLevel { clients_per_group: Vec<usize> },
    MultiLevel { fanouts: Vec<usize>, periods: Vec<usize> },
}

impl TopologySpec {
    pub fn n_groups(&self) -> usize {
        match self {
            TopologySpec::TwoLevel { clients_per_group } => clients_per_group.len(),
            TopologySpec::MultiLevel { fanouts, .. } => fanouts[0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepSize {
    Fixed(f64),
    /// `1/(40·E·H·L)` with `L` the largest client smoothness constant.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub gamma: StepSize,
    pub rounds: usize,
    pub group_rounds: usize,
    pub local_steps: usize,
    pub mode: CorrectionMode,
    pub z_init: CorrectionInit,
    pub y_init: CorrectionInit,
    pub z_refresh: ZRefresh,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSpec {
    pub drift: bool,
    pub dissimilarity: bool,
    pub threshold: f64,
    pub metric: ThresholdMetric,
}

impl Default for MetricsSpec {
    fn default() -> Self {
        Self {
            drift: false,
            dissimilarity: false,
            threshold: 1e-8,
            metric: ThresholdMetric::Grad,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub task: TaskSpec,
    pub topology: TopologySpec,
    pub partition: PartitionPlan,
    pub train: TrainSpec,
    pub metrics: MetricsSpec,
}

/// Named value lists; the sweep runs their Cartesian product over a base spec.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepAxes {
    pub group_rounds: Vec<usize>,
    pub local_steps: Vec<usize>,
    pub groups: Vec<usize>,
    pub mode: Vec<CorrectionMode>,
    pub regime: Vec<Regime>,
    pub group_shift: Vec<f64>,
    pub client_shift: Vec<f64>,
    /// Rescale `gamma` so that `gamma·E·H` stays at the base value.
    pub fixed_effective_step: bool,
}

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        self.group_rounds.is_empty()
            && self.local_steps.is_empty()
            && self.groups.is_empty()
            && self.mode.is_empty()
            && self.regime.is_empty()
            && self.group_shift.is_empty()
            && self.client_shift.is_empty()
    }

    /// Number of cells in the Cartesian product (empty axes count as one value).
    pub fn cell_count(&self) -> usize {
        [
            self.group_rounds.len(),
            self.local_steps.len(),
            self.groups.len(),
            self.mode.len(),
            self.regime.len(),
            self.group_shift.len(),
            self.client_shift.len(),
        ]
        .iter()
        .map(|&n| n.max(1))
        .product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: ExperimentSpec,
    pub axes: SweepAxes,
}

/// Parses a single-experiment config; a `[sweep]` table is rejected.
pub fn parse_config(text: &str) -> Result<ExperimentSpec> {
    let (spec, axes, sweep_span) = parse_document(text)?;
    if let Some(span) = sweep_span {
        let (line, column) = line_col(text, span.start);
        let _ = axes;
        return Err(Error::InvalidConfig(vec![ConfigIssue {
            line,
            column,
            message: "[sweep] axes need the `sweep` subcommand".into(),
        }]));
    }
    Ok(spec)
}

/// Parses a config with an optional `[sweep]` table.
pub fn parse_sweep(text: &str) -> Result<SweepSpec> {
    let (base, axes, _) = parse_document(text)?;
    Ok(SweepSpec { base, axes })
}

fn read_text(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

/// Relative dataset paths are taken relative to the config file.
fn resolve_paths(spec: &mut ExperimentSpec, config_path: &Path) {
    if let DataSource::Dataset { path } = &mut spec.task.source {
        if path.is_relative() {
            if let Some(dir) = config_path.parent() {
                *path = dir.join(&*path);
            }
        }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentSpec> {
    let path = path.as_ref();
    let mut spec = parse_config(&read_text(path)?)?;
    resolve_paths(&mut spec, path);
    Ok(spec)
}

pub fn load_sweep(path: impl AsRef<Path>) -> Result<SweepSpec> {
    let path = path.as_ref();
    let mut sweep = parse_sweep(&read_text(path)?)?;
    resolve_paths(&mut sweep.base, path);
    Ok(sweep)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let offset = offset.min(text.len());
    let before = &text[..offset];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

type Span = std::ops::Range<usize>;

struct Reader<'s> {
    text: &'s str,
    issues: Vec<ConfigIssue>,
}

/// A table plus the keys consumed from it, for unknown-key reporting.
struct Section<'a, 'i> {
    name: &'static str,
    table: Option<&'a DeTable<'i>>,
    span: Span,
    used: Vec<&'static str>,
}

impl<'a, 'i> Section<'a, 'i> {
    fn get(&mut self, key: &'static str) -> Option<&'a Spanned<DeValue<'i>>> {
        self.used.push(key);
        self.table?
            .iter()
            .find(|(k, _)| k.get_ref().as_ref() == key)
            .map(|(_, v)| v)
    }

    fn has(&self, key: &str) -> bool {
        self.table
            .is_some_and(|t| t.iter().any(|(k, _)| k.get_ref().as_ref() == key))
    }

    fn key_span(&self, key: &str) -> Option<Span> {
        self.table?
            .iter()
            .find(|(k, _)| k.get_ref().as_ref() == key)
            .map(|(k, _)| k.span())
    }

    fn qualified(&self, key: &str) -> String {
        if self.name.is_empty() {
            key.to_string()
        } else {
            format!("{}.{key}", self.name)
        }
    }
}

impl<'s> Reader<'s> {
    fn issue(&mut self, span: &Span, message: impl Into<String>) {
        let (line, column) = line_col(self.text, span.start);
        self.issues.push(ConfigIssue {
            line,
            column,
            message: message.into(),
        });
    }

    fn section<'a, 'i>(&mut self, root: &'a DeTable<'i>, name: &'static str) -> Section<'a, 'i> {
        match root.iter().find(|(k, _)| k.get_ref().as_ref() == name) {
            Some((_, v)) => match v.get_ref() {
                DeValue::Table(t) => Section {
                    name,
                    table: Some(t),
                    span: v.span(),
                    used: Vec::new(),
                },
                other => {
                    self.issue(
                        &v.span(),
                        format!("`{name}` must be a table, found {}", other.type_str()),
                    );
                    Section {
                        name,
                        table: None,
                        span: v.span(),
                        used: Vec::new(),
                    }
                }
            },
            None => Section {
                name,
                table: None,
                span: 0..0,
                used: Vec::new(),
            },
        }
    }

    fn finish(&mut self, sec: &Section<'_, '_>) {
        let Some(table) = sec.table else { return };
        for (k, _) in table.iter() {
            let key = k.get_ref().as_ref();
            if !sec.used.contains(&key) {
                self.issue(&k.span(), format!("unknown key `{}`", sec.qualified(key)));
            }
        }
    }

    fn int_value(&mut self, v: &Spanned<DeValue<'_>>, what: &str) -> Option<u64> {
        match v.get_ref() {
            DeValue::Integer(i) => match u64::from_str_radix(i.as_str(), i.radix()) {
                Ok(n) => Some(n),
                Err(_) => {
                    self.issue(
                        &v.span(),
                        format!("`{what}` must be a non-negative integer, found {}", i.as_str()),
                    );
                    None
                }
            },
            other => {
                self.issue(
                    &v.span(),
                    format!("`{what}` must be an integer, found {}", other.type_str()),
                );
                None
            }
        }
    }

    fn float_value(&mut self, v: &Spanned<DeValue<'_>>, what: &str) -> Option<f64> {
        let parsed = match v.get_ref() {
            DeValue::Float(f) => f.as_str().parse::<f64>().ok(),
            DeValue::Integer(i) => i64::from_str_radix(i.as_str(), i.radix()).ok().map(|n| n as f64),
            other => {
                self.issue(
                    &v.span(),
                    format!("`{what}` must be a number, found {}", other.type_str()),
                );
                return None;
            }
        };
        match parsed {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.issue(&v.span(), format!("`{what}` must be a finite number"));
                None
            }
        }
    }

    fn usize_key(&mut self, sec: &mut Section<'_, '_>, key: &'static str, default: usize) -> usize {
        let q = sec.qualified(key);
        sec.get(key)
            .and_then(|v| self.int_value(v, &q))
            .map_or(default, |n| n as usize)
    }

    fn positive_key(&mut self, sec: &mut Section<'_, '_>, key: &'static str, default: usize) -> usize {
        let n = self.usize_key(sec, key, default);
        if n == 0 {
            let span = sec.key_span(key).unwrap_or(sec.span.clone());
            self.issue(&span, format!("`{}` must be at least 1", sec.qualified(key)));
            return default.max(1);
        }
        n
    }

    fn u64_key(&mut self, sec: &mut Section<'_, '_>, key: &'static str, default: u64) -> u64 {
        let q = sec.qualified(key);
        sec.get(key).and_then(|v| self.int_value(v, &q)).unwrap_or(default)
    }

    fn f64_key(&mut self, sec: &mut Section<'_, '_>, key: &'static str, default: f64) -> f64 {
        let q = sec.qualified(key);
        sec.get(key).and_then(|v| self.float_value(v, &q)).unwrap_or(default)
    }

    fn bool_key(&mut self, sec: &mut Section<'_, '_>, key: &'static str, default: bool) -> bool {
        let q = sec.qualified(key);
        match sec.get(key) {
            None => default,
            Some(v) => match v.get_ref() {
                DeValue::Boolean(b) => *b,
                other => {
                    self.issue(
                        &v.span(),
                        format!("`{q}` must be a boolean, found {}", other.type_str()),
                    );
                    default
                }
            },
        }
    }

    fn str_key<'a>(&mut self, sec: &mut Section<'a, '_>, key: &'static str) -> Option<(String, Span)> {
        let q = sec.qualified(key);
        let v = sec.get(key)?;
        match v.get_ref() {
            DeValue::String(s) => Some((s.to_string(), v.span())),
            other => {
                self.issue(&v.span(), format!("`{q}` must be a string, found {}", other.type_str()));
                None
            }
        }
    }

    fn enum_key<T>(
        &mut self,
        sec: &mut Section<'_, '_>,
        key: &'static str,
        default: T,
        parse: fn(&str) -> Option<T>,
        choices: &str,
    ) -> T {
        match self.str_key(sec, key) {
            None => default,
            Some((s, span)) => parse(&s).unwrap_or_else(|| {
                self.issue(
                    &span,
                    format!("`{}`: unknown value {s:?} (expected {choices})", sec.qualified(key)),
                );
                default
            }),
        }
    }

    fn array<'a, 'i>(&mut self, v: &'a Spanned<DeValue<'i>>, what: &str) -> Option<&'a [Spanned<DeValue<'i>>]> {
        match v.get_ref() {
            DeValue::Array(a) => Some(a.as_ref()),
            other => {
                self.issue(
                    &v.span(),
                    format!("`{what}` must be an array, found {}", other.type_str()),
                );
                None
            }
        }
    }

    fn list<T>(
        &mut self,
        sec: &mut Section<'_, '_>,
        key: &'static str,
        mut item: impl FnMut(&mut Self, &Spanned<DeValue<'_>>, &str) -> Option<T>,
    ) -> Option<Vec<T>> {
        let q = sec.qualified(key);
        let v = sec.get(key)?;
        let items = self.array(v, &q)?;
        let mut out = Vec::with_capacity(items.len());
        let mut ok = true;
        for it in items {
            match item(self, it, &q) {
                Some(x) => out.push(x),
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    fn str_item<T>(
        &mut self,
        v: &Spanned<DeValue<'_>>,
        what: &str,
        parse: fn(&str) -> Option<T>,
        choices: &str,
    ) -> Option<T> {
        match v.get_ref() {
            DeValue::String(s) => {
                let r = parse(s);
                if r.is_none() {
                    self.issue(&v.span(), format!("`{what}`: unknown value {s:?} (expected {choices})"));
                }
                r
            }
            other => {
                self.issue(
                    &v.span(),
                    format!("`{what}` entries must be strings, found {}", other.type_str()),
                );
                None
            }
        }
    }
}

const MODE_CHOICES: &str = "full, client-only, group-only, none";
const INIT_CHOICES: &str = "zero, batch-gradient";
const REFRESH_CHOICES: &str = "carry, per-round";
const REGIME_CHOICES: &str = "group-iid-client-noniid, group-noniid-client-iid, both-noniid";

fn parse_document(text: &str) -> Result<(ExperimentSpec, SweepAxes, Option<Span>)> {
    let (root, syntax) = DeTable::parse_recoverable(text);
    let mut rd = Reader {
        text,
        issues: Vec::new(),
    };
    for e in syntax {
        let span = e.span().unwrap_or(0..0);
        rd.issue(&span, e.message().to_string());
    }
    let root = root.get_ref();
    let mut top = Section {
        name: "",
        table: Some(root),
        span: 0..0,
        used: vec![],
    };

    // top level
    let seeds = rd
        .list(&mut top, "seeds", |rd, v, q| rd.int_value(v, q))
        .unwrap_or_else(|| vec![0]);
    if seeds.is_empty() {
        let span = top.key_span("seeds").unwrap_or(0..0);
        rd.issue(&span, "`seeds` must not be empty");
    }
    let output_dir = rd
        .str_key(&mut top, "output_dir")
        .map_or_else(|| PathBuf::from("runs"), |(s, _)| PathBuf::from(s));
    let threads = rd.positive_key(&mut top, "threads", 1);

    let mut task_sec = rd.section(root, "task");
    let mut topo_sec = rd.section(root, "topology");
    let mut part_sec = rd.section(root, "partition");
    let mut train_sec = rd.section(root, "train");
    let mut metric_sec = rd.section(root, "metrics");
    let mut sweep_sec = rd.section(root, "sweep");
    top.used
        .extend(["task", "topology", "partition", "train", "metrics", "sweep"]);

    // topology
    let multi = topo_sec.has("fanouts") || topo_sec.has("periods");
    let topology = if multi {
        for key in ["groups", "clients_per_group"] {
            if let Some(span) = topo_sec.key_span(key) {
                rd.issue(
                    &span,
                    format!("`topology.{key}` cannot be combined with fanouts/periods"),
                );
            }
        }
        topo_sec.used.extend(["groups", "clients_per_group"]);
        let fanouts = rd.list(&mut topo_sec, "fanouts", |rd, v, q| {
            rd.int_value(v, q).map(|n| n as usize)
        });
        let periods = rd.list(&mut topo_sec, "periods", |rd, v, q| {
            rd.int_value(v, q).map(|n| n as usize)
        });
        match (fanouts, periods) {
            (Some(fanouts), Some(periods)) => {
                if let Err(e) = MultiLevelTopology::new(fanouts.clone(), periods.clone()) {
                    let span = topo_sec.key_span("periods").unwrap_or(topo_sec.span.clone());
                    rd.issue(&span, strip_prefix(&e));
                }
                TopologySpec::MultiLevel { fanouts, periods }
            }
            (f, p) => {
                if f.is_none() && !topo_sec.has("fanouts") || p.is_none() && !topo_sec.has("periods") {
                    rd.issue(
                        &topo_sec.span,
                        "multi-level topologies need both `fanouts` and `periods`",
                    );
                }
                TopologySpec::MultiLevel {
                    fanouts: vec![1],
                    periods: vec![1],
                }
            }
        }
    } else {
        let groups = rd.positive_key(&mut topo_sec, "groups", 1);
        let sizes = match topo_sec.get("clients_per_group") {
            None => vec![1; groups],
            Some(v) => match v.get_ref() {
                DeValue::Array(_) => {
                    let items = rd.array(v, "topology.clients_per_group").unwrap_or(&[]);
                    let sizes: Vec<usize> = items
                        .iter()
                        .map(|it| rd.int_value(it, "topology.clients_per_group").unwrap_or(1) as usize)
                        .collect();
                    if sizes.len() != groups {
                        rd.issue(
                            &v.span(),
                            format!(
                                "`topology.clients_per_group` has {} entries for {groups} groups",
                                sizes.len()
                            ),
                        );
                    }
                    sizes
                }
                _ => vec![rd.int_value(v, "topology.clients_per_group").unwrap_or(1) as usize; groups],
            },
        };
        if sizes.contains(&0) {
            let span = topo_sec.key_span("clients_per_group").unwrap_or(0..0);
            rd.issue(&span, "every group needs at least one client");
        }
        topo_sec.used.extend(["fanouts", "periods"]);
        TopologySpec::TwoLevel {
            clients_per_group: sizes,
        }
    };

    // task
    let kind_name = rd.str_key(&mut task_sec, "kind");
    let hidden_key = task_sec.key_span("hidden");
    let kind = match &kind_name {
        None => TaskKind::Quadratic,
        Some((s, span)) => match s.as_str() {
            "quadratic" => TaskKind::Quadratic,
            "logistic" => TaskKind::Logistic,
            "mlp" => TaskKind::Mlp {
                hidden: rd.positive_key(&mut task_sec, "hidden", 8),
            },
            other => {
                rd.issue(
                    span,
                    format!("`task.kind`: unknown value {other:?} (expected quadratic, logistic, mlp)"),
                );
                TaskKind::Quadratic
            }
        },
    };
    if !matches!(kind, TaskKind::Mlp { .. }) {
        if let Some(span) = hidden_key {
            rd.issue(&span, "`task.hidden` only applies to kind = \"mlp\"");
        }
        task_sec.used.push("hidden");
    }
    let source_name = rd
        .str_key(&mut task_sec, "source")
        .unwrap_or_else(|| ("synthetic".to_string(), task_sec.span.clone()));
    let source_keys: &[&str] = match source_name.0.as_str() {
        "synthetic" => &[
            "dim",
            "group_shift",
            "client_shift",
            "curvature_spread",
            "base_norm",
            "level_shifts",
            "instance_seed",
        ],
        "clusters" => &["per_label", "labels", "dim", "instance_seed"],
        "dataset" => &["path"],
        _ => &[],
    };
    for key in [
        "dim",
        "group_shift",
        "client_shift",
        "curvature_spread",
        "base_norm",
        "level_shifts",
        "instance_seed",
        "per_label",
        "labels",
        "path",
    ] {
        if !source_keys.contains(&key) {
            if let Some(span) = task_sec.key_span(key) {
                rd.issue(
                    &span,
                    format!("`task.{key}` does not apply to source = {:?}", source_name.0),
                );
            }
            task_sec.used.push(key);
        }
    }
    let source = match source_name.0.as_str() {
        "synthetic" => {
            let d = SyntheticSpec::default();
            let s = SyntheticSpec {
                dim: rd.positive_key(&mut task_sec, "dim", d.dim),
                group_shift: rd.f64_key(&mut task_sec, "group_shift", d.group_shift),
                client_shift: rd.f64_key(&mut task_sec, "client_shift", d.client_shift),
                curvature_spread: rd.f64_key(&mut task_sec, "curvature_spread", d.curvature_spread),
                base_norm: rd.f64_key(&mut task_sec, "base_norm", d.base_norm),
                level_shifts: rd.list(&mut task_sec, "level_shifts", |rd, v, q| rd.float_value(v, q)),
                seed: rd.u64_key(&mut task_sec, "instance_seed", d.seed),
            };
            if !(0.0..1.0).contains(&s.curvature_spread) {
                let span = task_sec.key_span("curvature_spread").unwrap_or(0..0);
                rd.issue(&span, "`task.curvature_spread` must lie in [0, 1)");
            }
            if kind != TaskKind::Quadratic {
                let span = kind_name.as_ref().map_or(0..0, |k| k.1.clone());
                rd.issue(
                    &span,
                    "synthetic instances are quadratic; use source = \"clusters\" or \"dataset\"",
                );
            }
            if let Some(shifts) = &s.level_shifts {
                let span = task_sec.key_span("level_shifts").unwrap_or(0..0);
                match &topology {
                    TopologySpec::MultiLevel { fanouts, .. } if fanouts.len() != shifts.len() => rd.issue(
                        &span,
                        format!(
                            "`task.level_shifts` has {} entries for {} levels",
                            shifts.len(),
                            fanouts.len()
                        ),
                    ),
                    TopologySpec::TwoLevel { .. } => {
                        rd.issue(&span, "`task.level_shifts` needs a multi-level topology")
                    }
                    _ => {}
                }
            }
            DataSource::Synthetic(s)
        }
        "clusters" => DataSource::Clusters {
            per_label: rd.positive_key(&mut task_sec, "per_label", 20),
            labels: rd.positive_key(&mut task_sec, "labels", 2),
            dim: rd.positive_key(&mut task_sec, "dim", 2),
            seed: rd.u64_key(&mut task_sec, "instance_seed", 0),
        },
        "dataset" => match rd.str_key(&mut task_sec, "path") {
            Some((p, _)) => DataSource::Dataset { path: PathBuf::from(p) },
            None => {
                rd.issue(
                    &task_sec.span,
                    "missing required key `task.path` for source = \"dataset\"",
                );
                DataSource::Dataset { path: PathBuf::new() }
            }
        },
        other => {
            rd.issue(
                &source_name.1,
                format!("`task.source`: unknown value {other:?} (expected synthetic, clusters, dataset)"),
            );
            DataSource::Synthetic(SyntheticSpec::default())
        }
    };
    let noise_name = rd.str_key(&mut task_sec, "noise");
    let sigma_span = task_sec.key_span("sigma");
    let noise = match noise_name.as_ref().map(|(s, sp)| (s.as_str(), sp)) {
        None | Some(("minibatch", _)) => {
            if let Some(span) = sigma_span {
                rd.issue(&span, "`task.sigma` only applies to noise = \"gaussian\"");
            }
            task_sec.used.push("sigma");
            NoiseSource::Minibatch
        }
        Some(("gaussian", _)) => {
            let sigma = rd.f64_key(&mut task_sec, "sigma", 0.0);
            if sigma < 0.0 {
                rd.issue(&sigma_span.unwrap_or(0..0), "`task.sigma` must be non-negative");
            }
            NoiseSource::Gaussian { sigma }
        }
        Some((other, span)) => {
            rd.issue(
                span,
                format!("`task.noise`: unknown value {other:?} (expected minibatch, gaussian)"),
            );
            task_sec.used.push("sigma");
            NoiseSource::Minibatch
        }
    };
    let minibatch_size = rd.usize_key(&mut task_sec, "minibatch_size", 0);
    let task = TaskSpec {
        kind,
        source,
        noise,
        minibatch_size,
    };

    // partition
    let partition = PartitionPlan {
        regime: rd.enum_key(
            &mut part_sec,
            "regime",
            Regime::BothNoniid,
            Regime::parse,
            REGIME_CHOICES,
        ),
        alpha: rd.f64_key(&mut part_sec, "alpha", 0.1),
        seed: rd.u64_key(&mut part_sec, "seed", 0),
        max_retries: rd.usize_key(&mut part_sec, "max_retries", DEFAULT_MAX_RETRIES),
    };
    if partition.alpha <= 0.0 {
        let span = part_sec.key_span("alpha").unwrap_or(0..0);
        rd.issue(&span, "`partition.alpha` must be positive");
    }

    // train
    let gamma = match train_sec.get("gamma") {
        None => {
            let span = if train_sec.table.is_some() {
                train_sec.span.clone()
            } else {
                0..0
            };
            rd.issue(&span, "missing required key `train.gamma`");
            StepSize::Auto
        }
        Some(v) => match v.get_ref() {
            DeValue::String(s) if s.as_ref() == "auto" => StepSize::Auto,
            DeValue::String(s) => {
                rd.issue(
                    &v.span(),
                    format!("`train.gamma` must be a positive number or \"auto\", found {s:?}"),
                );
                StepSize::Auto
            }
            _ => match rd.float_value(v, "train.gamma") {
                Some(g) if g > 0.0 => StepSize::Fixed(g),
                Some(_) => {
                    rd.issue(&v.span(), "`train.gamma` must be positive");
                    StepSize::Auto
                }
                None => StepSize::Auto,
            },
        },
    };
    let rounds = rd.positive_key(&mut train_sec, "rounds", 1);
    let group_rounds = rd.positive_key(&mut train_sec, "group_rounds", 1);
    let local_steps = rd.positive_key(&mut train_sec, "local_steps", 1);
    let mode = rd.enum_key(
        &mut train_sec,
        "mode",
        CorrectionMode::Full,
        CorrectionMode::parse,
        MODE_CHOICES,
    );
    if multi && matches!(mode, CorrectionMode::ClientOnly | CorrectionMode::GroupOnly) {
        let span = train_sec.key_span("mode").unwrap_or(0..0);
        rd.issue(&span, "multi-level runs support mode = \"full\" or \"none\"");
    }
    if multi {
        for key in ["group_rounds", "local_steps"] {
            if let Some(span) = train_sec.key_span(key) {
                rd.issue(
                    &span,
                    format!("`train.{key}` is set by `topology.periods` in multi-level runs"),
                );
            }
        }
    }
    let train = TrainSpec {
        gamma,
        rounds,
        group_rounds,
        local_steps,
        mode,
        z_init: rd.enum_key(
            &mut train_sec,
            "z_init",
            CorrectionInit::Zero,
            CorrectionInit::parse,
            INIT_CHOICES,
        ),
        y_init: rd.enum_key(
            &mut train_sec,
            "y_init",
            CorrectionInit::Zero,
            CorrectionInit::parse,
            INIT_CHOICES,
        ),
        z_refresh: rd.enum_key(
            &mut train_sec,
            "z_refresh",
            ZRefresh::Carry,
            ZRefresh::parse,
            REFRESH_CHOICES,
        ),
    };

    // metrics
    let metrics = MetricsSpec {
        drift: rd.bool_key(&mut metric_sec, "drift", false),
        dissimilarity: rd.bool_key(&mut metric_sec, "dissimilarity", false),
        threshold: rd.f64_key(&mut metric_sec, "threshold", 1e-8),
        metric: rd.enum_key(
            &mut metric_sec,
            "metric",
            ThresholdMetric::Grad,
            ThresholdMetric::parse,
            "grad, loss",
        ),
    };
    if metrics.threshold <= 0.0 {
        let span = metric_sec.key_span("threshold").unwrap_or(0..0);
        rd.issue(&span, "`metrics.threshold` must be positive");
    }
    if multi && metrics.drift {
        let span = metric_sec.key_span("drift").unwrap_or(0..0);
        rd.issue(&span, "drift recording is only available for two-level runs");
    }

    // sweep
    let positive_item = |rd: &mut Reader<'_>, v: &Spanned<DeValue<'_>>, q: &str| {
        let n = rd.int_value(v, q)?;
        if n == 0 {
            rd.issue(&v.span(), format!("`{q}` entries must be at least 1"));
            return None;
        }
        Some(n as usize)
    };
    let axes = SweepAxes {
        group_rounds: rd
            .list(&mut sweep_sec, "group_rounds", positive_item)
            .unwrap_or_default(),
        local_steps: rd
            .list(&mut sweep_sec, "local_steps", positive_item)
            .unwrap_or_default(),
        groups: rd.list(&mut sweep_sec, "groups", positive_item).unwrap_or_default(),
        mode: rd
            .list(&mut sweep_sec, "mode", |rd, v, q| {
                rd.str_item(v, q, CorrectionMode::parse, MODE_CHOICES)
            })
            .unwrap_or_default(),
        regime: rd
            .list(&mut sweep_sec, "regime", |rd, v, q| {
                rd.str_item(v, q, Regime::parse, REGIME_CHOICES)
            })
            .unwrap_or_default(),
        group_shift: rd
            .list(&mut sweep_sec, "group_shift", |rd, v, q| rd.float_value(v, q))
            .unwrap_or_default(),
        client_shift: rd
            .list(&mut sweep_sec, "client_shift", |rd, v, q| rd.float_value(v, q))
            .unwrap_or_default(),
        fixed_effective_step: rd.bool_key(&mut sweep_sec, "fixed_effective_step", false),
    };
    if multi {
        for key in ["group_rounds", "local_steps", "groups"] {
            if let Some(span) = sweep_sec.key_span(key) {
                rd.issue(&span, format!("`sweep.{key}` is not available for multi-level runs"));
            }
        }
    }
    let sweep_span = sweep_sec.table.map(|_| sweep_sec.span.clone());

    for sec in [
        &top,
        &task_sec,
        &topo_sec,
        &part_sec,
        &train_sec,
        &metric_sec,
        &sweep_sec,
    ] {
        rd.finish(sec);
    }
    if !rd.issues.is_empty() {
        rd.issues.sort_by_key(|i| (i.line, i.column));
        rd.issues.dedup();
        return Err(Error::InvalidConfig(rd.issues));
    }
    Ok((
        ExperimentSpec {
            seeds,
            output_dir,
            threads,
            task,
            topology,
            partition,
            train,
            metrics,
        },
        axes,
        sweep_span,
    ))
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

fn toml_str(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c if c.is_control() => {
                let _ = write!(out, "\\u{:04X}", c as u32);
            }
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn join<T>(items: &[T], f: impl Fn(&T) -> String) -> String {
    format!("[{}]", items.iter().map(f).collect::<Vec<_>>().join(", "))
}

fn float(x: &f64) -> String {
    // Debug output is the shortest round-tripping form and always valid TOML
    format!("{x:?}")
}

impl ExperimentSpec {
    /// Canonical TOML form; `parse_config(&spec.to_toml()) == Ok(spec)`.
    pub fn to_toml(&self) -> String {
        self.write_toml(None)
    }

    fn write_toml(&self, axes: Option<&SweepAxes>) -> String {
        let mut o = String::new();
        let _ = writeln!(o, "seeds = {}", join(&self.seeds, |s| s.to_string()));
        let _ = writeln!(o, "output_dir = {}", toml_str(&self.output_dir.to_string_lossy()));
        let _ = writeln!(o, "threads = {}", self.threads);

        o.push_str("\n[task]\n");
        match self.task.kind {
            TaskKind::Quadratic => o.push_str("kind = \"quadratic\"\n"),
            TaskKind::Logistic => o.push_str("kind = \"logistic\"\n"),
            TaskKind::Mlp { hidden } => {
                let _ = writeln!(o, "kind = \"mlp\"\nhidden = {hidden}");
            }
        }
        match &self.task.source {
            DataSource::Synthetic(s) => {
                o.push_str("source = \"synthetic\"\n");
                let _ = writeln!(o, "dim = {}", s.dim);
                let _ = writeln!(o, "group_shift = {}", float(&s.group_shift));
                let _ = writeln!(o, "client_shift = {}", float(&s.client_shift));
                let _ = writeln!(o, "curvature_spread = {}", float(&s.curvature_spread));
                let _ = writeln!(o, "base_norm = {}", float(&s.base_norm));
                if let Some(ls) = &s.level_shifts {
                    let _ = writeln!(o, "level_shifts = {}", join(ls, float));
                }
                let _ = writeln!(o, "instance_seed = {}", s.seed);
            }
            DataSource::Clusters {
                per_label,
                labels,
                dim,
                seed,
            } => {
                let _ = writeln!(
                    o,
                    "source = \"clusters\"\nper_label = {per_label}\nlabels = {labels}\ndim = {dim}\ninstance_seed = {seed}"
                );
            }
            DataSource::Dataset { path } => {
                let _ = writeln!(o, "source = \"dataset\"\npath = {}", toml_str(&path.to_string_lossy()));
            }
        }
        match self.task.noise {
            NoiseSource::Minibatch => o.push_str("noise = \"minibatch\"\n"),
            NoiseSource::Gaussian { sigma } => {
                let _ = writeln!(o, "noise = \"gaussian\"\nsigma = {}", float(&sigma));
            }
        }
        let _ = writeln!(o, "minibatch_size = {}", self.task.minibatch_size);

        o.push_str("\n[topology]\n");
        match &self.topology {
            TopologySpec::TwoLevel { clients_per_group } => {
                let _ = writeln!(o, "groups = {}", clients_per_group.len());
                if clients_per_group.windows(2).all(|w| w[0] == w[1]) {
                    let _ = writeln!(o, "clients_per_group = {}", clients_per_group[0]);
                } else {
                    let _ = writeln!(o, "clients_per_group = {}", join(clients_per_group, |n| n.to_string()));
                }
            }
            TopologySpec::MultiLevel { fanouts, periods } => {
                let _ = writeln!(o, "fanouts = {}", join(fanouts, |n| n.to_string()));
                let _ = writeln!(o, "periods = {}", join(periods, |n| n.to_string()));
            }
        }

        o.push_str("\n[partition]\n");
        let _ = writeln!(o, "regime = {}", toml_str(self.partition.regime.name()));
        let _ = writeln!(o, "alpha = {}", float(&self.partition.alpha));
        let _ = writeln!(o, "seed = {}", self.partition.seed);
        let _ = writeln!(o, "max_retries = {}", self.partition.max_retries);

        o.push_str("\n[train]\n");
        match self.train.gamma {
            StepSize::Fixed(g) => {
                let _ = writeln!(o, "gamma = {}", float(&g));
            }
            StepSize::Auto => o.push_str("gamma = \"auto\"\n"),
        }
        let _ = writeln!(o, "rounds = {}", self.train.rounds);
        if matches!(self.topology, TopologySpec::TwoLevel { .. }) {
            let _ = writeln!(o, "group_rounds = {}", self.train.group_rounds);
            let _ = writeln!(o, "local_steps = {}", self.train.local_steps);
        }
        let _ = writeln!(o, "mode = {}", toml_str(self.train.mode.name()));
        let _ = writeln!(o, "z_init = {}", toml_str(self.train.z_init.name()));
        let _ = writeln!(o, "y_init = {}", toml_str(self.train.y_init.name()));
        let _ = writeln!(o, "z_refresh = {}", toml_str(self.train.z_refresh.name()));

        o.push_str("\n[metrics]\n");
        let _ = writeln!(o, "drift = {}", self.metrics.drift);
        let _ = writeln!(o, "dissimilarity = {}", self.metrics.dissimilarity);
        let _ = writeln!(o, "threshold = {}", float(&self.metrics.threshold));
        let _ = writeln!(o, "metric = {}", toml_str(self.metrics.metric.name()));

        if let Some(a) = axes {
            o.push_str("\n[sweep]\n");
            let ints = |n: &usize| n.to_string();
            if !a.group_rounds.is_empty() {
                let _ = writeln!(o, "group_rounds = {}", join(&a.group_rounds, ints));
            }
            if !a.local_steps.is_empty() {
                let _ = writeln!(o, "local_steps = {}", join(&a.local_steps, ints));
            }
            if !a.groups.is_empty() {
                let _ = writeln!(o, "groups = {}", join(&a.groups, ints));
            }
            if !a.mode.is_empty() {
                let _ = writeln!(o, "mode = {}", join(&a.mode, |m| toml_str(m.name())));
            }
            if !a.regime.is_empty() {
                let _ = writeln!(o, "regime = {}", join(&a.regime, |r| toml_str(r.name())));
            }
            if !a.group_shift.is_empty() {
                let _ = writeln!(o, "group_shift = {}", join(&a.group_shift, float));
            }
            if !a.client_shift.is_empty() {
                let _ = writeln!(o, "client_shift = {}", join(&a.client_shift, float));
            }
            let _ = writeln!(o, "fixed_effective_step = {}", a.fixed_effective_step);
        }
        o
    }

    /// Content hash of everything that determines results, excluding seeds,
    /// thread count and output location.
    pub fn spec_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut canonical = self.clone();
        canonical.seeds.clear();
        canonical.threads = 1;
        canonical.output_dir = PathBuf::new();
        let json = serde_json::to_string(&canonical).expect("spec serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex::encode(&digest[..8])
    }
}

impl SweepSpec {
    pub fn to_toml(&self) -> String {
        self.base.write_toml(Some(&self.axes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn issues(text: &str) -> Vec<ConfigIssue> {
        match parse_config(text) {
            Err(Error::InvalidConfig(v)) => v,
            other => panic!("expected invalid config, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let spec = parse_config("[train]\ngamma = 0.1\n").unwrap();
        assert_eq!(spec.train.gamma, StepSize::Fixed(0.1));
        assert_eq!(
            (spec.train.rounds, spec.train.group_rounds, spec.train.local_steps),
            (1, 1, 1)
        );
        assert_eq!(
            spec.topology,
            TopologySpec::TwoLevel {
                clients_per_group: vec![1]
            }
        );
        assert_eq!(spec.topology.n_groups(), 1);
        assert_eq!(spec.seeds, vec![0]);
        assert_eq!(spec.train.mode, CorrectionMode::Full);
        assert_eq!(spec.train.z_init, CorrectionInit::Zero);
    }

    #[test]
    fn missing_gamma_is_named() {
        let v = issues("[train]\nrounds = 3\n");
        assert_eq!(v.len(), 1);
        assert!(v[0].message.contains("train.gamma"), "{v:?}");
        assert_eq!(v[0].line, 1);
        let v = issues("seeds = [1]\n");
        assert!(v[0].message.contains("train.gamma"));
    }

    #[test]
    fn every_error_is_reported_with_position() {
        let text = "threads = 0\n[train]\ngamma = -1\nrounds = \"ten\"\nmode = \"fast\"\nbogus = 1\n[topology]\nfanouts = [2, 2]\nperiods = [4, 3]\n";
        let v = issues(text);
        let lines: Vec<usize> = v.iter().map(|i| i.line).collect();
        assert_eq!(lines, vec![1, 3, 4, 5, 6, 9], "{v:?}");
        assert!(v[1].message.contains("positive"));
        assert!(v[2].message.contains("integer"));
        assert!(v[3].message.contains("fast"));
        assert!(v[4].message.contains("unknown key `train.bogus`"));
        assert!(v[5].message.contains("divide"));
        assert_eq!(v[2].column, 10);
    }

    #[test]
    fn syntax_errors_are_positioned() {
        let v = issues("[train]\ngamma = = 1\n");
        assert!(v.iter().any(|i| i.line == 2), "{v:?}");
    }

    #[test]
    fn sweep_table_needs_sweep_parser() {
        let text = "[train]\ngamma = 0.1\n[sweep]\nlocal_steps = [5, 10]\nmode = [\"full\", \"none\"]\n";
        let v = issues(text);
        assert_eq!(v[0].line, 3);
        let sweep = parse_sweep(text).unwrap();
        assert_eq!(sweep.axes.local_steps, vec![5, 10]);
        assert_eq!(sweep.axes.mode, vec![CorrectionMode::Full, CorrectionMode::None]);
        assert_eq!(sweep.axes.cell_count(), 4);
    }

    #[test]
    fn uneven_groups_and_multilevel() {
        let spec = parse_config("[topology]\ngroups = 2\nclients_per_group = [3, 5]\n[train]\ngamma = 0.1\n").unwrap();
        assert_eq!(
            spec.topology,
            TopologySpec::TwoLevel {
                clients_per_group: vec![3, 5]
            }
        );
        let spec = parse_config(
            "[topology]\nfanouts = [2, 2, 2]\nperiods = [40, 8, 2]\n[task]\nlevel_shifts = [1.0, 1.0, 1.0]\n[train]\ngamma = \"auto\"\n",
        )
        .unwrap();
        assert_eq!(spec.train.gamma, StepSize::Auto);
        assert!(matches!(spec.topology, TopologySpec::MultiLevel { .. }));
    }

    #[test]
    fn round_trip_is_lossless() {
        let text = "seeds = [3, 4]\n[task]\nkind = \"mlp\"\nhidden = 4\nsource = \"clusters\"\nper_label = 7\nnoise = \"gaussian\"\nsigma = 0.25\n[topology]\ngroups = 2\nclients_per_group = [1, 2]\n[partition]\nregime = \"group-iid-client-noniid\"\nalpha = 0.3\n[train]\ngamma = 1e-3\nrounds = 5\nmode = \"client-only\"\nz_refresh = \"per-round\"\n[metrics]\ndrift = true\nthreshold = 1.5e-10\nmetric = \"loss\"\n";
        let spec = parse_config(text).unwrap();
        assert_eq!(parse_config(&spec.to_toml()).unwrap(), spec);
        let sweep = parse_sweep(&format!(
            "{text}[sweep]\ngroup_shift = [0.1, 10]\nregime = [\"both-noniid\"]\n"
        ))
        .unwrap();
        assert_eq!(parse_sweep(&sweep.to_toml()).unwrap(), sweep);
    }

    #[test]
    fn hash_ignores_seeds_and_threads() {
        let a = parse_config("seeds = [1]\n[train]\ngamma = 0.1\n").unwrap();
        let mut b = a.clone();
        b.seeds = vec![7, 8];
        b.threads = 8;
        assert_eq!(a.spec_hash(), b.spec_hash());
        b.train.rounds = 2;
        assert_ne!(a.spec_hash(), b.spec_hash());
        assert_eq!(a.spec_hash().len(), 16);
    }
}
