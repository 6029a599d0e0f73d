//! Request/job/task model, synthetic trace generation and JSONL trace files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, LogNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simkernel::{secs_to_us, Micros, US_PER_SEC};

/// Token ids used for generated prompts are drawn from `0..DEFAULT_VOCAB`.
pub const DEFAULT_VOCAB: u32 = 32_000;
const PREFIX_SALT: u64 = 0x7072_6566_6978_0000;

/// Reference into a shared-prefix group: the prompt starts with
/// `group_prefix(group, prefix_len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixRef {
    pub group: u32,
    pub prefix_len: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub id: String,
    pub arrival_us: Micros,
    pub prompt_tokens: Vec<u32>,
    /// Ground-truth output length; only the decode-length predictor may look at it.
    pub true_decode_len: u32,
    pub context_id: Option<String>,
    pub priority: u8,
    pub prefix: Option<PrefixRef>,
}

impl Request {
    pub fn new(
        id: impl Into<String>,
        arrival_us: Micros,
        prompt_tokens: Vec<u32>,
        decode_len: u32,
    ) -> Self {
        Request {
            id: id.into(),
            arrival_us,
            prompt_tokens,
            true_decode_len: decode_len,
            context_id: None,
            priority: 0,
            prefix: None,
        }
    }

    pub fn prompt_len(&self) -> u32 {
        self.prompt_tokens.len() as u32
    }
}

/// Deterministic prefix tokens for a shared-prefix group. Independent of the
/// workload seed so that compact trace lines can be expanded on load.
pub fn group_prefix(group: u32, len: u32) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(PREFIX_SALT ^ group as u64);
    (0..len)
        .map(|_| rng.random_range(0..DEFAULT_VOCAB))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JobKind {
    ChatServing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Prefill,
    Decode,
    Colocated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskState {
    Queued,
    Ready,
    Running,
    Done,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub assigned_te: u32,
    pub state: TaskState,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JobError {
    #[error("job has no {0:?} task")]
    NoSuchTask(TaskKind),
    #[error("task {kind:?} cannot move from {from:?} to {to:?}")]
    BadTransition {
        kind: TaskKind,
        from: TaskState,
        to: TaskState,
    },
    #[error("decode task cannot start before the prefill KV transfer completes")]
    KvNotTransferred,
}

/// A chat-serving job: one colocated task, or a prefill and a decode task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Job {
    pub request_id: String,
    pub kind: JobKind,
    pub tasks: Vec<Task>,
    kv_transferred: bool,
}

impl Job {
    pub fn colocated(request_id: impl Into<String>, te: u32) -> Self {
        Job {
            request_id: request_id.into(),
            kind: JobKind::ChatServing,
            tasks: vec![Task {
                kind: TaskKind::Colocated,
                assigned_te: te,
                state: TaskState::Queued,
            }],
            kv_transferred: false,
        }
    }

    pub fn disaggregated(request_id: impl Into<String>, prefill_te: u32, decode_te: u32) -> Self {
        let task = |kind, te| Task {
            kind,
            assigned_te: te,
            state: TaskState::Queued,
        };
        Job {
            request_id: request_id.into(),
            kind: JobKind::ChatServing,
            tasks: vec![
                task(TaskKind::Prefill, prefill_te),
                task(TaskKind::Decode, decode_te),
            ],
            kv_transferred: false,
        }
    }

    pub fn task(&self, kind: TaskKind) -> Option<&Task> {
        self.tasks.iter().find(|t| t.kind == kind)
    }

    pub fn kv_transferred(&self) -> bool {
        self.kv_transferred
    }

    pub fn mark_kv_transferred(&mut self) {
        self.kv_transferred = true;
    }

    /// Moves a task forward. States only advance (`Queued < Ready < Running < Done`);
    /// a preempted task may drop from `Running` back to `Ready`.
    pub fn advance(&mut self, kind: TaskKind, to: TaskState) -> Result<(), JobError> {
        let kv = self.kv_transferred;
        let task = self
            .tasks
            .iter_mut()
            .find(|t| t.kind == kind)
            .ok_or(JobError::NoSuchTask(kind))?;
        let from = task.state;
        let ok = to >= from || (from == TaskState::Running && to == TaskState::Ready);
        if !ok || from == TaskState::Done {
            return Err(JobError::BadTransition { kind, from, to });
        }
        if kind == TaskKind::Decode && to >= TaskState::Ready && !kv {
            return Err(JobError::KvNotTransferred);
        }
        task.state = to;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.tasks.iter().all(|t| t.state == TaskState::Done)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalProcess {
    Poisson { rate_rps: f64 },
    Fixed { rps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthDist {
    Constant {
        tokens: u32,
    },
    Uniform {
        min: u32,
        max: u32,
    },
    LogNormal {
        median: f64,
        sigma: f64,
        min: u32,
        max: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeDist {
    Constant {
        tokens: u32,
    },
    /// Decode length is `prompt_len * r` with `r` uniform in the band.
    RatioBand {
        min_ratio: f64,
        max_ratio: f64,
    },
    LogNormal {
        median: f64,
        sigma: f64,
        min: u32,
        max: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixGroup {
    pub prefix_len: u32,
    pub share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub arrival: ArrivalProcess,
    #[serde(default)]
    pub horizon_s: Option<f64>,
    #[serde(default)]
    pub num_requests: Option<u32>,
    pub prompt_len: LengthDist,
    pub decode_len: DecodeDist,
    #[serde(default)]
    pub prefix_groups: Vec<PrefixGroup>,
    /// Tag requests of prefix group `g` with context id `ctx-g`.
    #[serde(default)]
    pub tag_context_ids: bool,
    #[serde(default)]
    pub seed: u64,
}

impl WorkloadSpec {
    /// Fixed-length requests at a Poisson rate.
    pub fn fixed_lengths(
        rate_rps: f64,
        num_requests: u32,
        prompt: u32,
        decode: u32,
        seed: u64,
    ) -> Self {
        WorkloadSpec {
            arrival: ArrivalProcess::Poisson { rate_rps },
            horizon_s: None,
            num_requests: Some(num_requests),
            prompt_len: LengthDist::Constant { tokens: prompt },
            decode_len: DecodeDist::Constant { tokens: decode },
            prefix_groups: Vec::new(),
            tag_context_ids: false,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::InvalidSpec(m.to_string()));
        match self.arrival {
            ArrivalProcess::Poisson { rate_rps: r } | ArrivalProcess::Fixed { rps: r } => {
                if !(r > 0.0 && r.is_finite()) {
                    return bad("arrival rate must be positive");
                }
            }
        }
        if self.horizon_s.is_none() && self.num_requests.is_none() {
            return bad("one of horizon_s or num_requests is required");
        }
        if self.horizon_s.is_some_and(|h| !(h > 0.0)) {
            return bad("horizon_s must be positive");
        }
        match self.prompt_len {
            LengthDist::Constant { tokens: 0 } => return bad("prompt length must be positive"),
            LengthDist::Uniform { min, max } if min == 0 || min > max => {
                return bad("bad prompt range")
            }
            LengthDist::LogNormal {
                median,
                sigma,
                min,
                max,
            } if !(median > 0.0) || sigma < 0.0 || min == 0 || min > max => {
                return bad("bad prompt log-normal")
            }
            _ => {}
        }
        match self.decode_len {
            DecodeDist::Constant { tokens: 0 } => return bad("decode length must be positive"),
            DecodeDist::RatioBand {
                min_ratio,
                max_ratio,
            } if !(min_ratio > 0.0) || min_ratio > max_ratio => {
                return bad("bad decode ratio band")
            }
            DecodeDist::LogNormal {
                median,
                sigma,
                min,
                max,
            } if !(median > 0.0) || sigma < 0.0 || min == 0 || min > max => {
                return bad("bad decode log-normal")
            }
            _ => {}
        }
        if !self.prefix_groups.is_empty() {
            if self.prefix_groups.iter().any(|g| !(g.share > 0.0)) {
                return bad("prefix group shares must be positive");
            }
            let total: f64 = self.prefix_groups.iter().map(|g| g.share).sum();
            if (total - 1.0).abs() > 1e-6 {
                return bad("prefix group shares must sum to 1");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("trace parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace I/O error: {0}")]
    Io(#[from] std::io::Error),
}

fn sample_len(dist: &LengthDist, rng: &mut ChaCha8Rng) -> u32 {
    match *dist {
        LengthDist::Constant { tokens } => tokens,
        LengthDist::Uniform { min, max } => rng.random_range(min..=max),
        LengthDist::LogNormal {
            median,
            sigma,
            min,
            max,
        } => {
            let d = LogNormal::new(median.ln(), sigma).expect("validated");
            (d.sample(rng).round() as u32).clamp(min, max)
        }
    }
}

fn sample_decode(dist: &DecodeDist, prompt_len: u32, rng: &mut ChaCha8Rng) -> u32 {
    match *dist {
        DecodeDist::Constant { tokens } => tokens,
        DecodeDist::RatioBand {
            min_ratio,
            max_ratio,
        } => {
            let r = if max_ratio > min_ratio {
                rng.random_range(min_ratio..max_ratio)
            } else {
                min_ratio
            };
            ((prompt_len as f64 * r).round() as u32).max(1)
        }
        DecodeDist::LogNormal {
            median,
            sigma,
            min,
            max,
        } => {
            let d = LogNormal::new(median.ln(), sigma).expect("validated");
            (d.sample(rng).round() as u32).clamp(min, max)
        }
    }
}

/// Generates a trace. Pure function of `spec`, seed included.
pub fn generate_trace(spec: &WorkloadSpec) -> Result<Vec<Request>, WorkloadError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let horizon_us = spec.horizon_s.map(secs_to_us);
    let limit = spec.num_requests.map(|n| n as usize).unwrap_or(usize::MAX);
    let prefixes: Vec<Vec<u32>> = spec
        .prefix_groups
        .iter()
        .enumerate()
        .map(|(g, pg)| group_prefix(g as u32, pg.prefix_len))
        .collect();

    let mut out = Vec::new();
    let mut t = 0.0_f64;
    while out.len() < limit {
        let gap_s = match spec.arrival {
            ArrivalProcess::Poisson { rate_rps } => {
                Exp::new(rate_rps).expect("validated").sample(&mut rng)
            }
            ArrivalProcess::Fixed { rps } => {
                if out.is_empty() {
                    0.0
                } else {
                    1.0 / rps
                }
            }
        };
        t += gap_s;
        let arrival_us = (t * US_PER_SEC as f64).round() as Micros;
        if horizon_us.is_some_and(|h| arrival_us > h) {
            break;
        }

        let group = if prefixes.is_empty() {
            None
        } else {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut pick = prefixes.len() - 1;
            for (g, pg) in spec.prefix_groups.iter().enumerate() {
                acc += pg.share;
                if u < acc {
                    pick = g;
                    break;
                }
            }
            Some(pick)
        };

        let mut prompt_len = sample_len(&spec.prompt_len, &mut rng);
        let mut prompt = Vec::new();
        let mut prefix = None;
        if let Some(g) = group {
            let p = &prefixes[g];
            if !p.is_empty() {
                prompt_len = prompt_len.max(p.len() as u32 + 1);
                prompt.extend_from_slice(p);
                prefix = Some(PrefixRef {
                    group: g as u32,
                    prefix_len: p.len() as u32,
                });
            }
        }
        while prompt.len() < prompt_len as usize {
            prompt.push(rng.random_range(0..DEFAULT_VOCAB));
        }
        let decode = sample_decode(&spec.decode_len, prompt_len, &mut rng);
        let idx = out.len();
        out.push(Request {
            id: format!("req-{idx}"),
            arrival_us,
            prompt_tokens: prompt,
            true_decode_len: decode,
            context_id: match (spec.tag_context_ids, group) {
                (true, Some(g)) => Some(format!("ctx-{g}")),
                _ => None,
            },
            priority: 0,
            prefix,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum PromptField {
    Inline(Vec<u32>),
    Grouped {
        group: u32,
        prefix_len: u32,
        suffix: Vec<u32>,
    },
}

#[derive(Serialize, Deserialize)]
struct TraceLine {
    id: String,
    arrival_us: Micros,
    prompt: PromptField,
    decode_len: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context_id: Option<String>,
    #[serde(default, skip_serializing_if = "is_zero")]
    priority: u8,
}

fn is_zero(v: &u8) -> bool {
    *v == 0
}

fn to_line(r: &Request) -> TraceLine {
    let prompt = match r.prefix {
        Some(p)
            if r.prompt_tokens.len() >= p.prefix_len as usize
                && r.prompt_tokens[..p.prefix_len as usize]
                    == group_prefix(p.group, p.prefix_len)[..] =>
        {
            PromptField::Grouped {
                group: p.group,
                prefix_len: p.prefix_len,
                suffix: r.prompt_tokens[p.prefix_len as usize..].to_vec(),
            }
        }
        _ => PromptField::Inline(r.prompt_tokens.clone()),
    };
    TraceLine {
        id: r.id.clone(),
        arrival_us: r.arrival_us,
        prompt,
        decode_len: r.true_decode_len,
        context_id: r.context_id.clone(),
        priority: r.priority,
    }
}

fn from_line(line: TraceLine) -> Result<Request, String> {
    let (prompt_tokens, prefix) = match line.prompt {
        PromptField::Inline(tokens) => (tokens, None),
        PromptField::Grouped {
            group,
            prefix_len,
            suffix,
        } => {
            let mut tokens = group_prefix(group, prefix_len);
            tokens.extend(suffix);
            (tokens, Some(PrefixRef { group, prefix_len }))
        }
    };
    if prompt_tokens.is_empty() {
        return Err("prompt must be non-empty".into());
    }
    if line.decode_len == 0 {
        return Err("decode_len must be at least 1".into());
    }
    Ok(Request {
        id: line.id,
        arrival_us: line.arrival_us,
        prompt_tokens,
        true_decode_len: line.decode_len,
        context_id: line.context_id,
        priority: line.priority,
        prefix,
    })
}

pub fn write_trace<W: Write>(reqs: &[Request], mut out: W) -> Result<(), WorkloadError> {
    for r in reqs {
        let text = serde_json::to_string(&to_line(r)).map_err(|e| WorkloadError::Io(e.into()))?;
        writeln!(out, "{text}")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<Vec<Request>, WorkloadError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: TraceLine = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(from_line(parsed).map_err(|message| WorkloadError::Parse {
            line: i + 1,
            message,
        })?);
    }
    Ok(out)
}

pub fn save_trace(reqs: &[Request], path: impl AsRef<Path>) -> Result<(), WorkloadError> {
    write_trace(reqs, BufWriter::new(File::create(path)?))
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Request>, WorkloadError> {
    read_trace(BufReader::new(File::open(path)?))
}
