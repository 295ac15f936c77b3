//! Throughput at the receiver MAC SAP, sender-side MPDU delay, drop
//! accounting and baseline-relative gains.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::ofdma::Direction;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no samples")]
    NoData,
    #[error("baseline must be positive, got {0}")]
    ZeroBaseline(f64),
}

/// Payload bits released to the receiver SAP inside the measurement window.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThroughputCounter {
    pub warmup: SimTime,
    pub dl_bits: u64,
    pub ul_bits: u64,
}

impl ThroughputCounter {
    pub fn new(warmup: SimTime) -> Self {
        Self { warmup, dl_bits: 0, ul_bits: 0 }
    }

    pub fn record_delivery(&mut self, bits: u64, direction: Direction, now: SimTime) {
        if now < self.warmup {
            return;
        }
        match direction {
            Direction::Dl => self.dl_bits += bits,
            Direction::Ul => self.ul_bits += bits,
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.dl_bits + self.ul_bits
    }

    /// Bits per second over `[warmup, end)`.
    pub fn rate_bps(&self, bits: u64, end: SimTime) -> f64 {
        let window = end.saturating_sub(self.warmup).as_secs_f64();
        if window <= 0.0 {
            0.0
        } else {
            bits as f64 / window
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DelaySample {
    pub mpdu_id: u64,
    pub enqueue_time: SimTime,
    pub completion_time: SimTime,
}

impl DelaySample {
    pub fn delay(&self) -> SimTime {
        self.completion_time - self.enqueue_time
    }
}

const BIN_NS: u64 = 10_000;
const BINS: usize = 100_000;

/// Streaming delay statistics: exact mean, 10 µs histogram (1 s span, larger
/// values go to an overflow list) for percentiles.
#[derive(Clone, Debug)]
pub struct DelayRecorder {
    warmup: SimTime,
    count: u64,
    sum_ns: u128,
    max_ns: u64,
    bins: Vec<u64>,
    overflow: Vec<u64>,
}

impl DelayRecorder {
    pub fn new(warmup: SimTime) -> Self {
        Self { warmup, count: 0, sum_ns: 0, max_ns: 0, bins: vec![0; BINS], overflow: Vec::new() }
    }

    /// Samples completing before the warmup boundary are ignored.
    pub fn record(&mut self, s: DelaySample) {
        if s.completion_time < self.warmup {
            return;
        }
        let d = s.delay().as_ns();
        self.count += 1;
        self.sum_ns += d as u128;
        self.max_ns = self.max_ns.max(d);
        let b = (d / BIN_NS) as usize;
        if b < BINS {
            self.bins[b] += 1;
        } else {
            self.overflow.push(d);
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean_ms(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_ns as f64 / self.count as f64 / 1e6)
    }

    pub fn max_ms(&self) -> Option<f64> {
        (self.count > 0).then(|| self.max_ns as f64 / 1e6)
    }

    /// Nearest-rank percentile; histogram values report the bin midpoint.
    pub fn percentile_ms(&mut self, p: f64) -> Option<f64> {
        if self.count == 0 {
            return None;
        }
        let rank = ((p / 100.0) * self.count as f64).ceil().max(1.0) as u64;
        let mut acc = 0u64;
        for (i, &n) in self.bins.iter().enumerate() {
            acc += n;
            if acc >= rank {
                return Some((i as u64 * BIN_NS + BIN_NS / 2) as f64 / 1e6);
            }
        }
        self.overflow.sort_unstable();
        let k = (rank - acc - 1) as usize;
        self.overflow.get(k).map(|&d| d as f64 / 1e6)
    }
}

pub fn mean_delay(samples_ms: &[f64]) -> Result<f64, MetricsError> {
    if samples_ms.is_empty() {
        return Err(MetricsError::NoData);
    }
    Ok(samples_ms.iter().sum::<f64>() / samples_ms.len() as f64)
}

/// Nearest-rank percentiles of a sample set.
pub fn percentiles(samples_ms: &[f64], ps: &[f64]) -> Result<Vec<f64>, MetricsError> {
    if samples_ms.is_empty() {
        return Err(MetricsError::NoData);
    }
    let mut v = samples_ms.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(ps
        .iter()
        .map(|p| {
            let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
            v[rank.min(v.len()) - 1]
        })
        .collect())
}

/// Percent increase of `value` over `baseline`.
pub fn compute_gain(value: f64, baseline: f64) -> Result<f64, MetricsError> {
    if baseline <= 0.0 {
        return Err(MetricsError::ZeroBaseline(baseline));
    }
    Ok(100.0 * (value - baseline) / baseline)
}

/// Percent delay reduction of `be` relative to `ax`.
pub fn delay_gain(be_delay: f64, ax_delay: f64) -> Result<f64, MetricsError> {
    if ax_delay <= 0.0 {
        return Err(MetricsError::ZeroBaseline(ax_delay));
    }
    Ok(100.0 * (ax_delay - be_delay) / ax_delay)
}

/// Sender-side MPDU accounting. Every generated MPDU sits in exactly one
/// bucket at any instant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub generated: u64,
    pub acked: u64,
    pub drop_retry: u64,
    pub drop_lifetime: u64,
    pub drop_overflow: u64,
    pub in_flight: u64,
    pub queued: u64,
}

impl Ledger {
    pub fn accounted(&self) -> u64 {
        self.acked + self.drop_retry + self.drop_lifetime + self.drop_overflow + self.in_flight + self.queued
    }

    pub fn balances(&self) -> bool {
        self.generated == self.accounted()
    }
}

/// Receiver-side accounting: each distinct MPDU first decoded is either
/// released to the SAP or still held in a reorder buffer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceiveLedger {
    pub first_decoded: u64,
    pub released: u64,
    pub held: u64,
    pub duplicates: u64,
    pub skipped: u64,
}

impl ReceiveLedger {
    pub fn balances(&self) -> bool {
        self.first_decoded == self.released + self.held
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropCounts {
    pub retry: u64,
    pub lifetime: u64,
    pub overflow: u64,
}

/// Measurements of one simulated run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub throughput_dl_bps: f64,
    pub throughput_ul_bps: f64,
    pub mean_delay_ms: Option<f64>,
    pub p50_delay_ms: Option<f64>,
    pub p95_delay_ms: Option<f64>,
    pub p99_delay_ms: Option<f64>,
    pub delay_samples: u64,
    pub drops: DropCounts,
    pub ledger: Ledger,
    pub receive: ReceiveLedger,
    pub collisions: u64,
    pub events: u64,
}

impl RunMetrics {
    pub fn throughput_bps(&self) -> f64 {
        self.throughput_dl_bps + self.throughput_ul_bps
    }

    /// Generated MPDUs that were dropped, by cause.
    pub fn drop_rate(&self) -> f64 {
        let d = self.drops.retry + self.drops.lifetime + self.drops.overflow;
        if self.ledger.generated == 0 {
            0.0
        } else {
            d as f64 / self.ledger.generated as f64
        }
    }
}

/// Aggregated value of one case against a named baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    pub value: f64,
    pub baseline_id: String,
    pub baseline: f64,
    pub gain_percent: Option<f64>,
}

impl CaseResult {
    pub fn new(case_id: &str, value: f64, baseline_id: &str, baseline: f64) -> Self {
        Self {
            case_id: case_id.into(),
            value,
            baseline_id: baseline_id.into(),
            baseline,
            gain_percent: compute_gain(value, baseline).ok(),
        }
    }
}
