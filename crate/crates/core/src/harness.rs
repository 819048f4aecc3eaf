//! Scenario bundles with embedded expectations, and the run, sweep and
//! compare commands built on them.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::sim::config::{ConfigError, Mode, ScenarioConfig};
use crate::sim::engine::{run_with, TraceMode};
use crate::sim::metrics::RunMetrics;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_EXPECTATION: i32 = 3;

const BUNDLED: [(&str, &str); 7] = [
    ("square4", include_str!("../scenarios/square4.json")),
    ("convergence25k", include_str!("../scenarios/convergence25k.json")),
    ("factory_tasks", include_str!("../scenarios/factory_tasks.json")),
    ("disaster_zones", include_str!("../scenarios/disaster_zones.json")),
    ("adversary_k2", include_str!("../scenarios/adversary_k2.json")),
    ("churn_recovery", include_str!("../scenarios/churn_recovery.json")),
    ("averaging", include_str!("../scenarios/averaging.json")),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Comparator {
    Eq,
    Le,
    Ge,
    Lt,
    Gt,
}

impl Comparator {
    pub fn holds(self, actual: f64, value: f64, tolerance: f64) -> bool {
        match self {
            Comparator::Eq => (actual - value).abs() <= tolerance,
            Comparator::Le => actual <= value + tolerance,
            Comparator::Ge => actual >= value - tolerance,
            Comparator::Lt => actual < value + tolerance,
            Comparator::Gt => actual > value - tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectation {
    pub metric: String,
    pub comparator: Comparator,
    pub value: f64,
    #[serde(default)]
    pub tolerance: f64,
}

/// An expectation that did not hold. `actual` is `None` when the metric
/// was undefined for the run (for example, a rumor never reached everyone).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExpectationFailure {
    pub expectation: Expectation,
    pub actual: Option<f64>,
}

impl ExpectationFailure {
    pub fn delta(&self) -> Option<f64> {
        self.actual.map(|a| a - self.expectation.value)
    }
}

impl std::fmt::Display for ExpectationFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let e = &self.expectation;
        write!(f, "{} {:?} {}: ", e.metric, e.comparator, e.value)?;
        match (self.actual, self.delta()) {
            (Some(a), Some(d)) => write!(f, "got {a} (delta {d:+})"),
            _ => write!(f, "metric undefined"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBundle {
    pub name: String,
    pub config: ScenarioConfig,
    #[serde(default)]
    pub expected: Vec<Expectation>,
}

impl ScenarioBundle {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let b: ScenarioBundle = serde_json::from_str(text).map_err(|e| ConfigError::from_json(&e))?;
        b.config.validate()?;
        for (i, e) in b.expected.iter().enumerate() {
            if !RunMetrics::is_known_scalar(&e.metric) {
                return Err(ConfigError::Invalid {
                    field: format!("expected[{i}].metric"),
                    message: format!("unknown metric {:?}", e.metric),
                });
            }
            if !e.value.is_finite() || !(e.tolerance >= 0.0) {
                return Err(ConfigError::Invalid {
                    field: format!("expected[{i}]"),
                    message: "value must be finite and tolerance non-negative".into(),
                });
            }
        }
        Ok(b)
    }

    /// A bundled scenario by name.
    pub fn bundled(name: &str) -> Option<Self> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, text)| Self::from_json(text).expect("bundled scenarios are valid"))
    }

    pub fn bundled_names() -> impl Iterator<Item = &'static str> {
        BUNDLED.iter().map(|(n, _)| *n)
    }

    /// Load from a file, falling back to a bundled name when no such file
    /// exists.
    pub fn load(path_or_name: &str) -> Result<Self, HarnessError> {
        let path = Path::new(path_or_name);
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
            return Ok(Self::from_json(&text)?);
        }
        Self::bundled(path_or_name).ok_or_else(|| HarnessError::Io {
            path: path.to_path_buf(),
            message: "no such file or bundled scenario".into(),
        })
    }

    pub fn check(&self, m: &RunMetrics) -> Vec<ExpectationFailure> {
        self.expected
            .iter()
            .filter_map(|e| {
                let actual = m.scalar(&e.metric);
                let ok = actual.is_some_and(|a| e.comparator.holds(a, e.value, e.tolerance));
                (!ok).then(|| ExpectationFailure {
                    expectation: e.clone(),
                    actual,
                })
            })
            .collect()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error("{}: {message}", path.display())]
    Io { path: PathBuf, message: String },
    #[error("usage: {0}")]
    Usage(String),
    #[error("{} expectation(s) failed:\n{}", .0.len(), .0.iter().map(|f| format!("  {f}")).collect::<Vec<_>>().join("\n"))]
    Expectation(Vec<ExpectationFailure>),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Expectation(_) => EXIT_EXPECTATION,
            _ => EXIT_CONFIG,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Json,
    Csv,
}

impl std::str::FromStr for Format {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(Format::Json),
            "csv" => Ok(Format::Csv),
            other => Err(format!("unknown format {other:?} (expected json or csv)")),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunArgs {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub format: Format,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

pub struct RunReport {
    pub metrics: RunMetrics,
    /// Metrics in the requested format.
    pub rendered: String,
    pub failures: Vec<ExpectationFailure>,
}

fn write_file(path: &Path, data: &[u8]) -> Result<(), HarnessError> {
    std::fs::write(path, data).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn render_metrics(m: &RunMetrics, format: Format) -> String {
    match format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(m).expect("metrics serialize");
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut s = String::new();
            s.push_str(&RunMetrics::SCALARS.join(","));
            s.push_str(",trace_hash\n");
            for name in RunMetrics::SCALARS {
                s.push_str(&m.scalar(name).map_or(String::new(), |v| v.to_string()));
                s.push(',');
            }
            s.push_str(&m.trace_hash);
            s.push('\n');
            s
        }
    }
}

/// Run one scenario. Outputs are written before expectations are judged, so
/// a failing run still leaves its metrics and trace behind.
pub fn cmd_run(bundle: &ScenarioBundle, args: &RunArgs) -> Result<RunReport, HarnessError> {
    let mut cfg = bundle.config.clone();
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    let mode = if args.trace.is_some() { TraceMode::Keep } else { TraceMode::HashOnly };
    let out = run_with(&cfg, mode)?;
    if let (Some(path), Some(trace)) = (&args.trace, &out.trace) {
        let mut buf = Vec::new();
        trace.write_jsonl(&mut buf).expect("writing to memory");
        write_file(path, &buf)?;
    }
    let rendered = render_metrics(&out.metrics, args.format);
    if let Some(path) = &args.out {
        write_file(path, rendered.as_bytes())?;
    }
    // Expectations describe the scenario as bundled; a mode override
    // changes what is being measured.
    let failures = if args.mode.is_some_and(|m| m != bundle.config.mode) {
        Vec::new()
    } else {
        bundle.check(&out.metrics)
    };
    Ok(RunReport {
        metrics: out.metrics,
        rendered,
        failures,
    })
}

/// Interpolated percentile of an ascending slice, `q` in `[0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Least-squares line `y = slope * x + intercept` and its R².
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn fit_line(points: &[(f64, f64)]) -> Option<LineFit> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub runs: usize,
    /// Runs in which every tracked rumor reached every live agent.
    pub full_fraction: f64,
    pub rounds_p10: Option<f64>,
    pub rounds_p50: Option<f64>,
    pub rounds_p90: Option<f64>,
    pub coverage_mean: f64,
    pub messages_p50: f64,
    pub max_load_p50: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepTable {
    pub key: String,
    pub rows: Vec<SweepRow>,
    /// Median rounds-to-full against log2 of the swept value, when the
    /// swept knob is the population size.
    pub log2_fit: Option<LineFit>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        let mut s = format!(
            "{},runs,full_fraction,rounds_p10,rounds_p50,rounds_p90,coverage_mean,messages_p50,max_load_p50\n",
            self.key
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.value,
                r.runs,
                r.full_fraction,
                opt(r.rounds_p10),
                opt(r.rounds_p50),
                opt(r.rounds_p90),
                r.coverage_mean,
                r.messages_p50,
                r.max_load_p50
            );
        }
        if let Some(f) = &self.log2_fit {
            let _ = writeln!(s, "# rounds_p50 = {} * log2({}) + {} (r2 = {})", f.slope, self.key, f.intercept, f.r2);
        }
        s
    }
}

/// Parse `KEY=V1,V2,...`.
pub fn parse_sweep(spec: &str) -> Result<(String, Vec<String>), HarnessError> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| HarnessError::Usage(format!("sweep {spec:?} is not KEY=V1,V2,...")))?;
    let values: Vec<String> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).map(String::from).collect();
    if key.trim().is_empty() || values.is_empty() {
        return Err(HarnessError::Usage(format!("sweep {spec:?} needs a key and at least one value")));
    }
    Ok((key.trim().to_string(), values))
}

/// Every value crossed with `seeds` consecutive seeds starting at the
/// scenario's own. Cells run in parallel.
pub fn cmd_sweep(
    bundle: &ScenarioBundle,
    key: &str,
    values: &[String],
    seeds: u64,
    base_seed: Option<u64>,
) -> Result<SweepTable, HarnessError> {
    if values.is_empty() {
        return Err(HarnessError::Usage("sweep needs at least one value".into()));
    }
    if seeds == 0 {
        return Err(HarnessError::Usage("seeds must be at least 1".into()));
    }
    let base = base_seed.unwrap_or(bundle.config.seed);
    let mut configs = Vec::new();
    for v in values {
        let mut cfg = bundle.config.clone();
        cfg.set_knob(key, v)?;
        cfg.validate()?;
        configs.push(cfg);
    }
    let cells: Vec<(usize, u64)> = (0..configs.len()).flat_map(|i| (0..seeds).map(move |s| (i, s))).collect();
    let results: Vec<(usize, RunMetrics)> = cells
        .par_iter()
        .map(|&(i, s)| {
            let mut cfg = configs[i].clone();
            cfg.seed = base.wrapping_add(s);
            run_with(&cfg, TraceMode::HashOnly).map(|o| (i, o.metrics))
        })
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let ms: Vec<&RunMetrics> = results.iter().filter(|(j, _)| *j == i).map(|(_, m)| m).collect();
        let n = ms.len() as f64;
        let mut rounds: Vec<f64> = ms.iter().filter_map(|m| m.rounds_to_full.map(|r| r as f64)).collect();
        rounds.sort_by(f64::total_cmp);
        let mut msgs: Vec<f64> = ms.iter().map(|m| m.messages_total as f64).collect();
        msgs.sort_by(f64::total_cmp);
        let mut loads: Vec<f64> = ms.iter().map(|m| m.max_node_load as f64).collect();
        loads.sort_by(f64::total_cmp);
        let full = rounds.len() == ms.len();
        rows.push(SweepRow {
            value: v.clone(),
            runs: ms.len(),
            full_fraction: rounds.len() as f64 / n,
            // Percentiles over incomplete runs would be biased low.
            rounds_p10: if full { percentile(&rounds, 0.1) } else { None },
            rounds_p50: if full { percentile(&rounds, 0.5) } else { None },
            rounds_p90: if full { percentile(&rounds, 0.9) } else { None },
            coverage_mean: ms.iter().map(|m| m.coverage).sum::<f64>() / n,
            messages_p50: percentile(&msgs, 0.5).unwrap_or(0.0),
            max_load_p50: percentile(&loads, 0.5).unwrap_or(0.0),
        });
    }
    let log2_fit = if key == "n_agents" {
        let pts: Option<Vec<(f64, f64)>> = rows
            .iter()
            .map(|r| Some((r.value.parse::<f64>().ok()?.log2(), r.rounds_p50?)))
            .collect();
        pts.and_then(|p| fit_line(&p))
    } else {
        None
    };
    Ok(SweepTable {
        key: key.to_string(),
        rows,
        log2_fit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModeSummary {
    pub mode: Mode,
    pub coverage: f64,
    pub rounds_to_full: Option<u64>,
    pub messages_total: u64,
    pub max_node_load: u64,
}

impl ModeSummary {
    fn of(m: &RunMetrics) -> Self {
        ModeSummary {
            mode: m.mode,
            coverage: m.coverage,
            rounds_to_full: m.rounds_to_full,
            messages_total: m.messages_total,
            max_node_load: m.max_node_load,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub gossip: ModeSummary,
    pub broadcast: ModeSummary,
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("mode,coverage,rounds_to_full,messages_total,max_node_load\n");
        for m in [&self.gossip, &self.broadcast] {
            let mode = if m.mode == Mode::Gossip { "gossip" } else { "broadcast" };
            let _ = writeln!(
                s,
                "{mode},{},{},{},{}",
                m.coverage,
                m.rounds_to_full.map_or(String::new(), |r| r.to_string()),
                m.messages_total,
                m.max_node_load
            );
        }
        s
    }
}

/// The same scenario and seed under gossip and under direct broadcast.
pub fn cmd_compare(bundle: &ScenarioBundle, seed: Option<u64>) -> Result<Comparison, HarnessError> {
    let mut cfg = bundle.config.clone();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let summaries: Vec<ModeSummary> = [Mode::Gossip, Mode::Broadcast]
        .par_iter()
        .map(|&mode| {
            let mut c = cfg.clone();
            c.mode = mode;
            run_with(&c, TraceMode::HashOnly).map(|o| ModeSummary::of(&o.metrics))
        })
        .collect::<Result<_, _>>()?;
    let [gossip, broadcast]: [ModeSummary; 2] = summaries.try_into().expect("two modes");
    Ok(Comparison { gossip, broadcast })
}
