//! Per-request latency records and derived serving metrics.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::simkernel::Micros;

/// Where a request ended up when the run stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RequestStatus {
    #[default]
    Queued,
    InFlight,
    Completed,
    Rejected,
}

/// The kind of TE unit that served a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServedBy {
    Colocated,
    Disaggregated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub request_id: String,
    pub arrival_us: Micros,
    pub first_token_us: Option<Micros>,
    pub last_token_us: Option<Micros>,
    pub output_tokens: u32,
    pub completion_us: Option<Micros>,
    pub te_id: Option<u32>,
    pub te_kind: Option<ServedBy>,
    pub cached_prefix_tokens: u32,
    pub status: RequestStatus,
}

impl RequestRecord {
    pub fn new(request_id: impl Into<String>, arrival_us: Micros) -> Self {
        RequestRecord {
            request_id: request_id.into(),
            arrival_us,
            first_token_us: None,
            last_token_us: None,
            output_tokens: 0,
            completion_us: None,
            te_id: None,
            te_kind: None,
            cached_prefix_tokens: 0,
            status: RequestStatus::Queued,
        }
    }

    pub fn ttft_us(&self) -> Option<Micros> {
        self.first_token_us.map(|t| t - self.arrival_us)
    }

    /// Mean inter-token interval after the first token; needs two or more tokens.
    pub fn tpot_us(&self) -> Option<f64> {
        match (self.first_token_us, self.last_token_us) {
            (Some(first), Some(last)) if self.output_tokens >= 2 => {
                Some((last - first) as f64 / (self.output_tokens - 1) as f64)
            }
            _ => None,
        }
    }

    pub fn jct_us(&self) -> Option<Micros> {
        self.completion_us.map(|t| t - self.arrival_us)
    }
}

/// Latency targets used for SLO-violation accounting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloTargets {
    pub ttft_us: Micros,
    pub tpot_us: Micros,
}

impl Default for SloTargets {
    fn default() -> Self {
        SloTargets {
            ttft_us: 2_000_000,
            tpot_us: 100_000,
        }
    }
}

impl SloTargets {
    pub fn violated(&self, ttft_us: Option<Micros>, tpot_us: Option<f64>) -> bool {
        ttft_us.is_some_and(|t| t > self.ttft_us)
            || tpot_us.is_some_and(|t| t > self.tpot_us as f64)
    }
}

/// Nearest-rank percentile over an ascending slice. `p` is in `(0, 100]`.
pub fn nearest_rank<T: Copy>(sorted: &[T], p: f64) -> Option<T> {
    if sorted.is_empty() {
        return None;
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, n) - 1])
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
}

impl Distribution {
    pub fn from_values(mut values: Vec<f64>) -> Self {
        if values.is_empty() {
            return Distribution::default();
        }
        values.sort_by(f64::total_cmp);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let pick = |p| nearest_rank(&values, p).unwrap_or(0.0);
        Distribution {
            count: values.len(),
            mean,
            p50: pick(50.0),
            p90: pick(90.0),
            p99: pick(99.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub requests: usize,
    pub completed: usize,
    pub in_flight: usize,
    pub queued: usize,
    pub rejected: usize,
    pub ttft_us: Distribution,
    pub tpot_us: Distribution,
    pub jct_us: Distribution,
    pub makespan_us: Micros,
    pub throughput_rps: f64,
    pub slo_violation_rate: f64,
    pub cache_hit_tokens: u64,
}

/// One CSV row per request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub request_id: String,
    pub arrival_us: Micros,
    pub ttft_us: Option<Micros>,
    pub tpot_us: Option<f64>,
    pub jct_us: Option<Micros>,
    pub te_id: Option<u32>,
    pub te_kind: Option<ServedBy>,
    pub cached_prefix_tokens: u32,
}

/// Per-request records for one simulation run, indexed by trace position.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsStore {
    pub records: Vec<RequestRecord>,
    pub output_tokens: u64,
}

impl MetricsStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn arrive(&mut self, request_id: &str, arrival_us: Micros) -> usize {
        self.records
            .push(RequestRecord::new(request_id, arrival_us));
        self.records.len() - 1
    }

    pub fn record(&self, idx: usize) -> &RequestRecord {
        &self.records[idx]
    }

    pub fn record_mut(&mut self, idx: usize) -> &mut RequestRecord {
        &mut self.records[idx]
    }

    pub fn token(&mut self, idx: usize, at: Micros) {
        let r = &mut self.records[idx];
        if let Some(last) = r.last_token_us {
            debug_assert!(at > last, "token emitted out of order for {}", r.request_id);
        }
        if r.first_token_us.is_none() {
            r.first_token_us = Some(at);
        }
        r.last_token_us = Some(at);
        r.output_tokens += 1;
        self.output_tokens += 1;
    }

    pub fn complete(&mut self, idx: usize, at: Micros) {
        let r = &mut self.records[idx];
        r.completion_us = Some(at);
        r.status = RequestStatus::Completed;
    }

    pub fn count(&self, status: RequestStatus) -> usize {
        self.records.iter().filter(|r| r.status == status).count()
    }

    pub fn completed(&self) -> impl Iterator<Item = &RequestRecord> {
        self.records
            .iter()
            .filter(|r| r.status == RequestStatus::Completed)
    }

    pub fn mean_jct_us(&self) -> Option<f64> {
        let jcts: Vec<f64> = self
            .completed()
            .filter_map(|r| r.jct_us())
            .map(|j| j as f64)
            .collect();
        (!jcts.is_empty()).then(|| jcts.iter().sum::<f64>() / jcts.len() as f64)
    }

    pub fn rows(&self) -> Vec<CsvRow> {
        self.records
            .iter()
            .map(|r| CsvRow {
                request_id: r.request_id.clone(),
                arrival_us: r.arrival_us,
                ttft_us: r.ttft_us(),
                tpot_us: r.tpot_us(),
                jct_us: r.jct_us(),
                te_id: r.te_id,
                te_kind: r.te_kind,
                cached_prefix_tokens: r.cached_prefix_tokens,
            })
            .collect()
    }

    pub fn summary(&self, slo: &SloTargets) -> Summary {
        let done: Vec<&RequestRecord> = self.completed().collect();
        let ttft = done
            .iter()
            .filter_map(|r| r.ttft_us())
            .map(|v| v as f64)
            .collect();
        let tpot = done.iter().filter_map(|r| r.tpot_us()).collect();
        let jct = done
            .iter()
            .filter_map(|r| r.jct_us())
            .map(|v| v as f64)
            .collect();
        let start = done.iter().map(|r| r.arrival_us).min();
        let end = done.iter().filter_map(|r| r.completion_us).max();
        let makespan_us = match (start, end) {
            (Some(s), Some(e)) => e - s,
            _ => 0,
        };
        let violations = done
            .iter()
            .filter(|r| slo.violated(r.ttft_us(), r.tpot_us()))
            .count();
        Summary {
            requests: self.records.len(),
            completed: done.len(),
            in_flight: self.count(RequestStatus::InFlight),
            queued: self.count(RequestStatus::Queued),
            rejected: self.count(RequestStatus::Rejected),
            ttft_us: Distribution::from_values(ttft),
            tpot_us: Distribution::from_values(tpot),
            jct_us: Distribution::from_values(jct),
            makespan_us,
            throughput_rps: if makespan_us > 0 {
                done.len() as f64 / (makespan_us as f64 / 1e6)
            } else {
                0.0
            },
            slo_violation_rate: if done.is_empty() {
                0.0
            } else {
                violations as f64 / done.len() as f64
            },
            cache_hit_tokens: self
                .records
                .iter()
                .map(|r| r.cached_prefix_tokens as u64)
                .sum(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for row in self.rows() {
            w.serialize(row)?;
        }
        // An empty run still gets a header line.
        if self.records.is_empty() {
            w.write_record([
                "request_id",
                "arrival_us",
                "ttft_us",
                "tpot_us",
                "jct_us",
                "te_id",
                "te_kind",
                "cached_prefix_tokens",
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> serde_json::Result<()> {
        serde_json::to_writer_pretty(out, &self.rows())
    }
}

pub fn read_csv<R: Read>(input: R) -> csv::Result<Vec<CsvRow>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_matches_definition() {
        let v: Vec<u32> = (1..=10).collect();
        assert_eq!(nearest_rank(&v, 50.0), Some(5));
        assert_eq!(nearest_rank(&v, 90.0), Some(9));
        assert_eq!(nearest_rank(&v, 99.0), Some(10));
        assert_eq!(nearest_rank(&v, 1.0), Some(1));
        assert_eq!(nearest_rank::<u32>(&[], 50.0), None);
    }

    #[test]
    fn jct_is_completion_minus_arrival() {
        let mut m = MetricsStore::new();
        let i = m.arrive("r0", 100);
        m.token(i, 300);
        m.complete(i, 500);
        assert_eq!(m.record(i).jct_us(), Some(400));
        assert_eq!(m.record(i).ttft_us(), Some(200));
        assert!(m.record(i).ttft_us() <= m.record(i).jct_us());
    }

    #[test]
    fn tpot_needs_two_tokens() {
        let mut m = MetricsStore::new();
        let i = m.arrive("r0", 0);
        m.token(i, 10);
        assert_eq!(m.record(i).tpot_us(), None);
        m.token(i, 30);
        m.token(i, 60);
        assert_eq!(m.record(i).tpot_us(), Some(25.0));
    }

    #[test]
    fn empty_csv_has_header_only() {
        let m = MetricsStore::new();
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.starts_with("request_id,arrival_us,ttft_us"));
        assert!(read_csv(text.as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn slo_violation_rate() {
        let mut m = MetricsStore::new();
        let slo = SloTargets {
            ttft_us: 100,
            tpot_us: 10,
        };
        for (i, ttft) in [50u64, 150, 80, 90].iter().enumerate() {
            let idx = m.arrive(&format!("r{i}"), 0);
            m.token(idx, *ttft);
            m.complete(idx, *ttft);
        }
        let s = m.summary(&slo);
        assert_eq!(s.completed, 4);
        assert!((s.slo_violation_rate - 0.25).abs() < 1e-12);
    }
}
