use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{global_gradient, global_loss, gradient_dissimilarity, measure_drift};
use crate::engine::{Federation, RoundView, RunObserver};
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::task::{closed_form_optimum, TaskKind};

/// Column order of metric CSV files.
pub const METRIC_CSV_HEADER: &str =
    "t,e,grad_norm_sq,loss,subopt,Q_t,D_t,delta1_sq,delta2_sq_max,z_sum_violation,y_sum_violation";

/// Metrics at the virtual iterate `x̂^{t,e}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub t: usize,
    pub e: usize,
    pub grad_norm_sq: f64,
    pub loss: f64,
    /// `f(x̂) − f*` when the optimum is known in closed form.
    pub subopt: Option<f64>,
    /// Drift of round `t`, filled on the round's `e = 0` row once the round completes.
    pub client_drift: Option<f64>,
    pub group_drift: Option<f64>,
    pub delta1_sq: Option<f64>,
    pub delta2_sq_max: Option<f64>,
    pub z_sum_violation: f64,
    pub y_sum_violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMetric {
    Grad,
    Loss,
}

impl ThresholdMetric {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "grad" => Some(ThresholdMetric::Grad),
            "loss" => Some(ThresholdMetric::Loss),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ThresholdMetric::Grad => "grad",
            ThresholdMetric::Loss => "loss",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricTrace {
    pub records: Vec<MetricRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:e}")).unwrap_or_default()
}

fn parse_opt(field: &str) -> std::result::Result<Option<f64>, std::num::ParseFloatError> {
    if field.is_empty() {
        Ok(None)
    } else {
        field.parse().map(Some)
    }
}

impl MetricTrace {
    /// `(t, value)` at every global-round boundary `e = 0`.
    pub fn round_series(&self, metric: ThresholdMetric) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.e == 0)
            .map(|r| {
                let v = match metric {
                    ThresholdMetric::Grad => r.grad_norm_sq,
                    ThresholdMetric::Loss => r.loss,
                };
                (r.t, v)
            })
            .collect()
    }

    pub fn last(&self) -> Option<&MetricRecord> {
        self.records.last()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::with_capacity(64 * (self.records.len() + 1));
        out.push_str(METRIC_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{},{},{},{},{},{:e},{:e}",
                r.t,
                r.e,
                r.grad_norm_sq,
                r.loss,
                opt(r.subopt),
                opt(r.client_drift),
                opt(r.group_drift),
                opt(r.delta1_sq),
                opt(r.delta2_sq_max),
                r.z_sum_violation,
                r.y_sum_violation
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim() == METRIC_CSV_HEADER => {}
            other => {
                return Err(Error::Comparison(format!(
                    "unexpected metric header {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = || Error::Comparison(format!("metric row {}: malformed {line:?}", n + 2));
            if f.len() != 11 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let maybe = |s: &str| parse_opt(s).map_err(|_| bad());
            records.push(MetricRecord {
                t: f[0].parse().map_err(|_| bad())?,
                e: f[1].parse().map_err(|_| bad())?,
                grad_norm_sq: num(f[2])?,
                loss: num(f[3])?,
                subopt: maybe(f[4])?,
                client_drift: maybe(f[5])?,
                group_drift: maybe(f[6])?,
                delta1_sq: maybe(f[7])?,
                delta2_sq_max: maybe(f[8])?,
                z_sum_violation: num(f[9])?,
                y_sum_violation: num(f[10])?,
            });
        }
        Ok(Self { records })
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse_csv(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricOptions {
    /// Record `Q_t`, `D_t` (retains one round of per-step models).
    pub drift: bool,
    /// Record `δ₁²`, `max_j δ₂²` at every `x̂^{t,e}`.
    pub dissimilarity: bool,
    /// Record `f(x̂) − f*` when all tasks are quadratic.
    pub suboptimality: bool,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            drift: false,
            dissimilarity: false,
            suboptimality: true,
        }
    }
}

/// Observer that turns engine boundaries into [`MetricRecord`]s.
pub struct MetricRecorder {
    options: MetricOptions,
    optimum_loss: Option<f64>,
    trace: MetricTrace,
}

impl MetricRecorder {
    pub fn new(federation: &Federation, options: &MetricOptions) -> Result<Self> {
        let mut optimum_loss = None;
        if options.suboptimality && federation.tasks.iter().all(|t| t.kind == TaskKind::Quadratic) {
            let weights = federation.topology.client_weights();
            if let Ok(x_star) = closed_form_optimum(&federation.tasks, &weights) {
                optimum_loss = Some(global_loss(&federation.tasks, &federation.topology, &x_star)?);
            }
        }
        Ok(Self {
            options: options.clone(),
            optimum_loss,
            trace: MetricTrace::default(),
        })
    }

    pub fn optimum_loss(&self) -> Option<f64> {
        self.optimum_loss
    }

    pub fn trace(&self) -> &MetricTrace {
        &self.trace
    }

    pub fn into_trace(self) -> MetricTrace {
        self.trace
    }

    fn record(&mut self, view: &RoundView<'_>) -> Result<()> {
        let x_hat = view.state.virtual_global();
        self.record_point(
            view.federation,
            view.t,
            view.e,
            &x_hat,
            view.state.z_violation,
            view.state.y_violation,
        )
    }

    /// Appends one row for the virtual iterate `x_hat` labeled `(t, e)`.
    pub fn record_point(
        &mut self,
        fed: &Federation,
        t: usize,
        e: usize,
        x_hat: &ParamVector,
        z_violation: f64,
        y_violation: f64,
    ) -> Result<()> {
        let grad = global_gradient(&fed.tasks, &fed.topology, x_hat)?;
        let loss = global_loss(&fed.tasks, &fed.topology, x_hat)?;
        let (delta1_sq, delta2_sq_max) = if self.options.dissimilarity {
            let r = gradient_dissimilarity(&fed.tasks, &fed.topology, x_hat)?;
            (Some(r.delta1_sq), Some(r.delta2_sq_max))
        } else {
            (None, None)
        };
        self.trace.records.push(MetricRecord {
            t,
            e,
            grad_norm_sq: grad.norm_sq(),
            loss,
            subopt: self.optimum_loss.map(|f_star| loss - f_star),
            client_drift: None,
            group_drift: None,
            delta1_sq,
            delta2_sq_max,
            z_sum_violation: z_violation,
            y_sum_violation: y_violation,
        });
        Ok(())
    }
}

impl RunObserver for MetricRecorder {
    fn on_start(&mut self, view: &RoundView<'_>) -> Result<()> {
        self.record(view)
    }

    fn on_group_round(&mut self, view: &RoundView<'_>) -> Result<()> {
        self.record(view)
    }

    fn on_global_round(&mut self, view: &RoundView<'_>) -> Result<()> {
        if self.options.drift {
            let drift = measure_drift(view.snapshots, &view.federation.topology)?;
            if let Some(row) = self.trace.records.iter_mut().rev().find(|r| r.t == drift.t && r.e == 0) {
                row.client_drift = Some(drift.client_drift);
                row.group_drift = Some(drift.group_drift);
            }
        }
        self.record(view)
    }
}
