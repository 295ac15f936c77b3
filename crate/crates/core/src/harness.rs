//! Experiment harness: case matrices, seeded fan-out, aggregation and
//! CSV/JSON output.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::metrics::{compute_gain, delay_gain};
use crate::network::{run_scenario, RunOptions};
use crate::ofdma::Direction;
use crate::scenario::{
    link_5ghz_160, link_5ghz_160_upper, link_6ghz_160, link_6ghz_320, link_6ghz_320_upper, AccessMode,
    CampaignKind, ScenarioConfig, ScenarioError,
};

pub const TARGET_GBPS: f64 = 30.0;
/// Load range over which latency gains are averaged.
pub const LATENCY_GAIN_LOADS: (f64, f64) = (80.0, 160.0);

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("seed list is empty")]
    EmptySeeds,
    #[error("unknown case `{0}`")]
    UnknownCase(String),
    #[error("campaign has no cases")]
    NoCases,
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub id: String,
    /// Partial scenario config applied over the campaign scenario.
    #[serde(default)]
    pub overrides: Value,
}

/// A campaign file: base scenario, named case deltas and the sweep axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseMatrix {
    pub name: String,
    pub campaign: CampaignKind,
    #[serde(default)]
    pub scenario: Value,
    pub baseline: String,
    pub cases: Vec<CaseSpec>,
    pub directions: Vec<Direction>,
    pub modes: Vec<AccessMode>,
    #[serde(default)]
    pub loads_mbps: Vec<f64>,
}

fn links(v: &[crate::phy::ChannelSpec]) -> Value {
    serde_json::to_value(v).expect("links serialize")
}

fn case(id: &str, overrides: Value) -> CaseSpec {
    CaseSpec { id: id.into(), overrides }
}

fn tput_case(id: &str, agg: usize, l: &[crate::phy::ChannelSpec], mcs: u8) -> CaseSpec {
    case(id, json!({"standard": "be", "mac": {"max_aggregation": agg}, "links": links(l), "phy": {"mcs": mcs}}))
}

fn ax_baseline() -> CaseSpec {
    case(
        "ax",
        json!({"standard": "ax", "mac": {"max_aggregation": 256}, "links": links(&[link_5ghz_160()]), "phy": {"mcs": 11}}),
    )
}

const BOTH_DIRS: [Direction; 2] = [Direction::Dl, Direction::Ul];
const BOTH_MODES: [AccessMode; 2] = [AccessMode::Su, AccessMode::Ofdma];

impl CaseMatrix {
    /// Feature combinations at three or four features, plus the 11ax baseline.
    pub fn throughput_default() -> Self {
        let l320 = link_6ghz_320();
        let l320b = link_6ghz_320_upper();
        let l160 = link_5ghz_160();
        let l160b = link_5ghz_160_upper();
        Self {
            name: "throughput".into(),
            campaign: CampaignKind::Throughput,
            scenario: json!({"campaign": "throughput"}),
            baseline: "ax".into(),
            cases: vec![
                tput_case("1-1", 1024, &[l320.clone()], 13),
                tput_case("1-2", 256, &[l320.clone(), l160.clone()], 13),
                tput_case("1-3", 256, &[l320.clone(), l320b.clone()], 13),
                tput_case("1-4", 1024, &[l160.clone(), l160b.clone()], 13),
                tput_case("1-5", 1024, &[l320.clone(), l160.clone()], 11),
                tput_case("1-6", 1024, &[l320.clone(), l320b.clone()], 11),
                tput_case("2-1", 1024, &[l320.clone(), l160.clone()], 13),
                tput_case("2-2", 1024, &[l320.clone(), l320b.clone()], 13),
                tput_case("3", 1024, &[l320.clone(), l160.clone(), l160b.clone()], 13),
                ax_baseline(),
            ],
            directions: BOTH_DIRS.to_vec(),
            modes: BOTH_MODES.to_vec(),
            loads_mbps: Vec::new(),
        }
    }

    /// Each 11be feature enabled alone on top of the 11ax baseline.
    pub fn features_default() -> Self {
        let l160 = link_5ghz_160();
        Self {
            name: "features".into(),
            campaign: CampaignKind::Throughput,
            scenario: json!({"campaign": "throughput"}),
            baseline: "ax".into(),
            cases: vec![
                ax_baseline(),
                tput_case("+4k-qam", 256, &[l160.clone()], 13),
                tput_case("+1024-agg", 1024, &[l160.clone()], 11),
                tput_case("+320mhz", 256, &[link_6ghz_320()], 11),
                tput_case("+multi-link", 256, &[l160, link_6ghz_160()], 11),
            ],
            directions: vec![Direction::Dl],
            modes: vec![AccessMode::Su],
            loads_mbps: Vec::new(),
        }
    }

    /// 11be MLO against two independent 11ax links over the load grid.
    pub fn latency_default() -> Self {
        Self {
            name: "latency".into(),
            campaign: CampaignKind::Latency,
            scenario: json!({"campaign": "latency"}),
            baseline: "11ax-2-links".into(),
            cases: vec![
                case("11ax-2-links", json!({"standard": "ax"})),
                case("11be-mlo", json!({"standard": "be"})),
            ],
            directions: BOTH_DIRS.to_vec(),
            modes: BOTH_MODES.to_vec(),
            loads_mbps: (1..=10).map(|k| 20.0 * k as f64).collect(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "throughput" => Some(Self::throughput_default()),
            "features" => Some(Self::features_default()),
            "latency" => Some(Self::latency_default()),
            _ => None,
        }
    }

    pub fn from_json_str(text: &str) -> Result<Self, HarnessError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }

    fn base_config(&self) -> Result<ScenarioConfig, HarnessError> {
        Ok(ScenarioConfig::defaults_for(self.campaign).with_overrides(&self.scenario)?)
    }
}

/// One simulation to run.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub case: String,
    pub seed: u64,
    pub direction: Direction,
    pub mode: AccessMode,
    pub load_mbps: Option<f64>,
    pub config: ScenarioConfig,
}

/// Cross product of cases, directions, modes, loads and seeds. With a case
/// filter the baseline is always kept.
pub fn expand_matrix(m: &CaseMatrix, seeds: &[u64], only: Option<&str>) -> Result<Vec<RunSpec>, HarnessError> {
    if seeds.is_empty() {
        return Err(HarnessError::EmptySeeds);
    }
    if m.cases.is_empty() {
        return Err(HarnessError::NoCases);
    }
    if !m.cases.iter().any(|c| c.id == m.baseline) {
        return Err(HarnessError::UnknownCase(m.baseline.clone()));
    }
    if let Some(id) = only {
        if !m.cases.iter().any(|c| c.id == id) {
            return Err(HarnessError::UnknownCase(id.into()));
        }
    }
    let base = m.base_config()?;
    let loads: Vec<Option<f64>> =
        if m.loads_mbps.is_empty() { vec![None] } else { m.loads_mbps.iter().map(|&l| Some(l)).collect() };
    let mut out = Vec::new();
    for c in &m.cases {
        if only.is_some_and(|id| id != c.id && c.id != m.baseline) {
            continue;
        }
        let case_cfg = base.with_overrides(&c.overrides)?;
        for &direction in &m.directions {
            for &mode in &m.modes {
                for &load in &loads {
                    for &seed in seeds {
                        let mut over = json!({
                            "seed": seed,
                            "access": mode,
                            "traffic": {"direction": direction},
                        });
                        if let Some(l) = load {
                            over["traffic"]["rate_mbps"] = json!(l);
                        }
                        let config = case_cfg.with_overrides(&over)?;
                        out.push(RunSpec { case: c.id.clone(), seed, direction, mode, load_mbps: load, config });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// One row of `runs.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub case: String,
    pub seed: u64,
    pub direction: Direction,
    pub mode: AccessMode,
    pub load_mbps: Option<f64>,
    pub ok: bool,
    pub throughput_dl_gbps: Option<f64>,
    pub throughput_ul_gbps: Option<f64>,
    pub throughput_gbps: Option<f64>,
    pub mean_delay_ms: Option<f64>,
    pub p95_delay_ms: Option<f64>,
    pub delay_samples: Option<u64>,
    pub drop_rate: Option<f64>,
    pub drop_retry: Option<u64>,
    pub drop_lifetime: Option<u64>,
    pub drop_overflow: Option<u64>,
    pub collisions: Option<u64>,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub case: String,
    pub seed: u64,
    pub direction: Direction,
    pub mode: AccessMode,
    pub load_mbps: Option<f64>,
    pub runtime_s: f64,
    pub events: u64,
}

fn run_one(spec: &RunSpec) -> (RunRecord, TimingRecord) {
    let t0 = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(|| run_scenario(&spec.config, RunOptions::default())));
    let runtime_s = t0.elapsed().as_secs_f64();
    let mut rec = RunRecord {
        case: spec.case.clone(),
        seed: spec.seed,
        direction: spec.direction,
        mode: spec.mode,
        load_mbps: spec.load_mbps,
        ok: false,
        throughput_dl_gbps: None,
        throughput_ul_gbps: None,
        throughput_gbps: None,
        mean_delay_ms: None,
        p95_delay_ms: None,
        delay_samples: None,
        drop_rate: None,
        drop_retry: None,
        drop_lifetime: None,
        drop_overflow: None,
        collisions: None,
        error: String::new(),
    };
    let mut events = 0;
    match result {
        Ok(Ok(out)) => {
            let m = out.metrics;
            events = m.events;
            rec.ok = true;
            rec.throughput_dl_gbps = Some(m.throughput_dl_bps / 1e9);
            rec.throughput_ul_gbps = Some(m.throughput_ul_bps / 1e9);
            rec.throughput_gbps = Some(m.throughput_bps() / 1e9);
            rec.mean_delay_ms = m.mean_delay_ms;
            rec.p95_delay_ms = m.p95_delay_ms;
            rec.delay_samples = Some(m.delay_samples);
            rec.drop_rate = Some(m.drop_rate());
            rec.drop_retry = Some(m.drops.retry);
            rec.drop_lifetime = Some(m.drops.lifetime);
            rec.drop_overflow = Some(m.drops.overflow);
            rec.collisions = Some(m.collisions);
        }
        Ok(Err(e)) => rec.error = e.to_string(),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            rec.error = format!("panic: {msg}");
        }
    }
    let timing = TimingRecord {
        case: spec.case.clone(),
        seed: spec.seed,
        direction: spec.direction,
        mode: spec.mode,
        load_mbps: spec.load_mbps,
        runtime_s,
        events,
    };
    (rec, timing)
}

/// Runs every spec on `parallelism` worker threads. Records come back in
/// spec order regardless of scheduling.
pub fn run_campaign(specs: &[RunSpec], parallelism: usize) -> (Vec<RunRecord>, Vec<TimingRecord>) {
    let workers = parallelism.max(1).min(specs.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<(RunRecord, TimingRecord)>>> = Mutex::new(vec![None; specs.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= specs.len() {
                    break;
                }
                let r = run_one(&specs[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("result slots").into_iter().map(|r| r.expect("every run executed")).unzip()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub case: String,
    pub direction: Direction,
    pub mode: AccessMode,
    pub load_mbps: Option<f64>,
    pub metric: String,
    pub n: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    pub ci95: Option<f64>,
    pub baseline_mean: Option<f64>,
    /// Throughput gain, or delay reduction for latency campaigns, in percent.
    pub gain_percent: Option<f64>,
    pub meets_30gbps: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureDelta {
    pub case: String,
    pub delta_gbps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyGain {
    pub direction: Direction,
    pub mode: AccessMode,
    pub case: String,
    /// Mean of per-load delay reductions over the middle of the load grid.
    pub mean_reduction_percent: f64,
    pub loads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub campaign: CampaignKind,
    pub baseline: String,
    pub groups: Vec<GroupSummary>,
    /// Single-feature DL SU deltas, lowest first (cases named `+...`).
    pub feature_ranking: Vec<FeatureDelta>,
    pub latency_gains: Vec<LatencyGain>,
}

impl Summary {
    pub fn group(&self, case: &str, dir: Direction, mode: AccessMode, load: Option<f64>) -> Option<&GroupSummary> {
        self.groups
            .iter()
            .find(|g| g.case == case && g.direction == dir && g.mode == mode && g.load_mbps == load)
    }
}

/// Mean and 95% confidence half-width (Student t).
pub fn mean_ci95(xs: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n == 0 {
        return None;
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return Some((mean, 0.0));
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("dof > 0").inverse_cdf(0.975);
    Some((mean, t * (var / n as f64).sqrt()))
}

type GroupKey = (String, u8, u8, Option<u64>);

fn dir_ord(d: Direction) -> u8 {
    d as u8
}

fn mode_ord(m: AccessMode) -> u8 {
    m as u8
}

pub fn summarize(m: &CaseMatrix, records: &[RunRecord]) -> Summary {
    let latency = m.campaign == CampaignKind::Latency;
    let metric = if latency { "mean_delay_ms" } else { "throughput_gbps" };
    let case_pos = |c: &str| m.cases.iter().position(|x| x.id == c).unwrap_or(usize::MAX);
    let mut grouped: BTreeMap<(usize, u8, u8, Option<u64>), (GroupKey, Vec<f64>, usize, usize, Direction, AccessMode)> = BTreeMap::new();
    for r in records {
        let load = r.load_mbps.map(f64::to_bits);
        let k = (case_pos(&r.case), dir_ord(r.direction), mode_ord(r.mode), load);
        let e = grouped
            .entry(k)
            .or_insert_with(|| ((r.case.clone(), dir_ord(r.direction), mode_ord(r.mode), load), Vec::new(), 0, 0, r.direction, r.mode));
        e.2 += 1;
        let v = if latency { r.mean_delay_ms } else { r.throughput_gbps };
        match (r.ok, v) {
            (true, Some(v)) => e.1.push(v),
            _ => e.3 += 1,
        }
    }
    let means: BTreeMap<GroupKey, f64> = grouped
        .values()
        .filter_map(|(k, xs, ..)| mean_ci95(xs).map(|(mu, _)| (k.clone(), mu)))
        .collect();
    let mut groups = Vec::new();
    for ((case, dk, mk, load), xs, n, failed, dir, mode) in grouped.into_values() {
        let stats = mean_ci95(&xs);
        let mean = stats.map(|s| s.0);
        let base = means.get(&(m.baseline.clone(), dk, mk, load)).copied();
        let gain = match (mean, base) {
            (Some(v), Some(b)) if case != m.baseline => {
                if latency {
                    delay_gain(v, b).ok()
                } else {
                    compute_gain(v, b).ok()
                }
            }
            _ => None,
        };
        groups.push(GroupSummary {
            case,
            direction: dir,
            mode,
            load_mbps: load.map(f64::from_bits),
            metric: metric.into(),
            n,
            failed,
            mean,
            ci95: stats.map(|s| s.1),
            baseline_mean: base,
            gain_percent: gain,
            meets_30gbps: if latency { None } else { mean.map(|v| v >= TARGET_GBPS) },
        });
    }

    let mut feature_ranking: Vec<FeatureDelta> = groups
        .iter()
        .filter(|g| g.case.starts_with('+') && g.direction == Direction::Dl && g.mode == AccessMode::Su)
        .filter_map(|g| Some(FeatureDelta { case: g.case.clone(), delta_gbps: g.mean? - g.baseline_mean? }))
        .collect();
    feature_ranking.sort_by(|a, b| a.delta_gbps.total_cmp(&b.delta_gbps));

    let mut latency_gains = Vec::new();
    if latency {
        for c in m.cases.iter().filter(|c| c.id != m.baseline) {
            for &dir in &m.directions {
                for &mode in &m.modes {
                    let gains: Vec<f64> = groups
                        .iter()
                        .filter(|g| g.case == c.id && g.direction == dir && g.mode == mode)
                        .filter(|g| {
                            g.load_mbps.is_some_and(|l| l >= LATENCY_GAIN_LOADS.0 && l <= LATENCY_GAIN_LOADS.1)
                        })
                        .filter_map(|g| g.gain_percent)
                        .collect();
                    if !gains.is_empty() {
                        latency_gains.push(LatencyGain {
                            direction: dir,
                            mode,
                            case: c.id.clone(),
                            mean_reduction_percent: gains.iter().sum::<f64>() / gains.len() as f64,
                            loads: gains.len(),
                        });
                    }
                }
            }
        }
    }

    Summary {
        name: m.name.clone(),
        campaign: m.campaign,
        baseline: m.baseline.clone(),
        groups,
        feature_ranking,
        latency_gains,
    }
}

pub fn series_label(dir: Direction, mode: AccessMode) -> String {
    let d = match dir {
        Direction::Dl => "DL",
        Direction::Ul => "UL",
    };
    let m = match mode {
        AccessMode::Su => "SU",
        AccessMode::Ofdma => "MU",
    };
    format!("{d} {m}")
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_runs(path: &Path) -> Result<Vec<RunRecord>, HarnessError> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct PlotRow<'a> {
    case: &'a str,
    series: String,
    load_mbps: Option<f64>,
    mean: Option<f64>,
    ci95: Option<f64>,
}

/// Writes summary.csv, summary.json and the long-format plot file.
pub fn write_summary(dir: &Path, s: &Summary) -> Result<(), HarnessError> {
    write_csv(&dir.join("summary.csv"), &s.groups)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(s)?)?;
    let rows: Vec<PlotRow> = s
        .groups
        .iter()
        .map(|g| PlotRow {
            case: &g.case,
            series: series_label(g.direction, g.mode),
            load_mbps: g.load_mbps,
            mean: g.mean,
            ci95: g.ci95,
        })
        .collect();
    let name = if s.campaign == CampaignKind::Latency { "plot_delay.csv" } else { "plot_throughput.csv" };
    write_csv(&dir.join(name), &rows)
}

/// Runs a campaign and writes every output file into `out`.
pub fn run_to_dir(
    m: &CaseMatrix,
    seeds: &[u64],
    only: Option<&str>,
    parallelism: usize,
    out: &Path,
) -> Result<(Summary, Vec<RunRecord>), HarnessError> {
    let specs = expand_matrix(m, seeds, only)?;
    let (records, timings) = run_campaign(&specs, parallelism);
    fs::create_dir_all(out)?;
    fs::write(out.join("campaign.json"), m.to_json_pretty())?;
    write_csv(&out.join("runs.csv"), &records)?;
    write_csv(&out.join("timings.csv"), &timings)?;
    let s = summarize(m, &records);
    write_summary(out, &s)?;
    Ok((s, records))
}

/// Re-aggregates a finished output directory.
pub fn summarize_dir(dir: &Path) -> Result<Summary, HarnessError> {
    let m = CaseMatrix::load(&dir.join("campaign.json"))?;
    let records = read_runs(&dir.join("runs.csv"))?;
    let s = summarize(&m, &records);
    write_summary(dir, &s)?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn throughput_matrix_shape() {
        let m = CaseMatrix::throughput_default();
        let specs = expand_matrix(&m, &[1, 2], None).unwrap();
        assert_eq!(specs.len(), 10 * 2 * 2 * 2);
        let ids: Vec<&str> = m.cases.iter().map(|c| c.id.as_str()).collect();
        for id in ["1-1", "1-2", "1-3", "1-4", "1-5", "1-6", "2-1", "2-2", "3", "ax"] {
            assert!(ids.contains(&id));
        }
    }

    #[test]
    fn table_cases_match_checkmarks() {
        let m = CaseMatrix::throughput_default();
        let specs = expand_matrix(&m, &[0], None).unwrap();
        let cfg = |id: &str| &specs.iter().find(|s| s.case == id).unwrap().config;
        let widths = |id: &str| cfg(id).links.iter().map(|l| l.width_mhz).collect::<Vec<_>>();
        assert_eq!((cfg("1-3").mac.max_aggregation, widths("1-3"), cfg("1-3").phy.mcs), (256, vec![320, 320], 13));
        assert_eq!((cfg("2-2").mac.max_aggregation, widths("2-2"), cfg("2-2").phy.mcs), (1024, vec![320, 320], 13));
        assert_eq!((cfg("3").mac.max_aggregation, widths("3"), cfg("3").phy.mcs), (1024, vec![320, 160, 160], 13));
        assert_eq!((cfg("ax").mac.max_aggregation, widths("ax"), cfg("ax").phy.mcs), (256, vec![160], 11));
        assert_eq!(cfg("1-5").phy.mcs, 11);
    }

    #[test]
    fn latency_matrix_shape() {
        let m = CaseMatrix::latency_default();
        let specs = expand_matrix(&m, &[7], None).unwrap();
        assert_eq!(specs.len(), 2 * 2 * 2 * 10);
        assert!(specs.iter().all(|s| s.config.traffic.rate_mbps == s.load_mbps.unwrap()));
    }

    #[test]
    fn expand_errors() {
        let m = CaseMatrix::throughput_default();
        assert!(matches!(expand_matrix(&m, &[], None), Err(HarnessError::EmptySeeds)));
        assert!(matches!(expand_matrix(&m, &[1], Some("9-9")), Err(HarnessError::UnknownCase(_))));
        let only = expand_matrix(&m, &[1], Some("2-2")).unwrap();
        assert!(only.iter().all(|s| s.case == "2-2" || s.case == "ax"));
    }

    #[test]
    fn campaign_file_round_trip() {
        for m in [CaseMatrix::throughput_default(), CaseMatrix::latency_default(), CaseMatrix::features_default()] {
            assert_eq!(CaseMatrix::from_json_str(&m.to_json_pretty()).unwrap(), m);
        }
    }

    #[test]
    fn ci_matches_t_table() {
        // t(0.975, 4) = 2.776
        let (mu, h) = mean_ci95(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(mu, 3.0);
        assert!((h - 2.776 * (2.5f64 / 5.0).sqrt()).abs() < 1e-3);
        assert_eq!(mean_ci95(&[]), None);
    }

    fn rec(case: &str, dir: Direction, mode: AccessMode, v: f64, ok: bool) -> RunRecord {
        RunRecord {
            case: case.into(),
            seed: 0,
            direction: dir,
            mode,
            load_mbps: None,
            ok,
            throughput_dl_gbps: None,
            throughput_ul_gbps: None,
            throughput_gbps: ok.then_some(v),
            mean_delay_ms: None,
            p95_delay_ms: None,
            delay_samples: None,
            drop_rate: None,
            drop_retry: None,
            drop_lifetime: None,
            drop_overflow: None,
            collisions: None,
            error: String::new(),
        }
    }

    #[test]
    fn summary_gains_and_flags() {
        let m = CaseMatrix::throughput_default();
        let recs = vec![
            rec("ax", Direction::Dl, AccessMode::Su, 8.0, true),
            rec("2-2", Direction::Dl, AccessMode::Su, 32.0, true),
            rec("2-2", Direction::Dl, AccessMode::Su, 0.0, false),
        ];
        let s = summarize(&m, &recs);
        let g = s.group("2-2", Direction::Dl, AccessMode::Su, None).unwrap();
        assert_eq!((g.n, g.failed), (2, 1));
        assert_eq!(g.gain_percent, Some(300.0));
        assert_eq!(g.meets_30gbps, Some(true));
        assert_eq!(s.group("ax", Direction::Dl, AccessMode::Su, None).unwrap().meets_30gbps, Some(false));
    }

    #[test]
    fn feature_ranking_sorted() {
        let m = CaseMatrix::features_default();
        let recs = vec![
            rec("ax", Direction::Dl, AccessMode::Su, 7.0, true),
            rec("+multi-link", Direction::Dl, AccessMode::Su, 14.0, true),
            rec("+4k-qam", Direction::Dl, AccessMode::Su, 8.0, true),
            rec("+320mhz", Direction::Dl, AccessMode::Su, 12.0, true),
            rec("+1024-agg", Direction::Dl, AccessMode::Su, 9.0, true),
        ];
        let s = summarize(&m, &recs);
        let order: Vec<&str> = s.feature_ranking.iter().map(|f| f.case.as_str()).collect();
        assert_eq!(order, ["+4k-qam", "+1024-agg", "+320mhz", "+multi-link"]);
    }
}
