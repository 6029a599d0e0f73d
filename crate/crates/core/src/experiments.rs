//! Experiment drivers behind the CLI subcommands and the acceptance suite.
//! Independent simulations are sharded across threads; results are
//! assembled in input order so output does not depend on scheduling.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autoscaler::{
    AutoscalerError, LoadPath, ModelSpec, ScaleCluster, ScalingConstants, ScalingTimeline,
};
use crate::cluster::{simulate, ClusterSpec, SimError};
use crate::distflow::LinkDefaults;
use crate::dsched::{build_heatmap, CellProfile, Heatmap, HeatmapAxes, HeatmapError, Policy};
use crate::engine::{Engine, EngineConfig, EngineEvent, EngineMode, EngineRequest};
use crate::simkernel::{secs_to_us, Micros};
use crate::workload::{
    generate_trace, ArrivalProcess, DecodeDist, LengthDist, Request, WorkloadError, WorkloadSpec,
};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Heatmap(#[from] HeatmapError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Scaling(#[from] AutoscalerError),
    #[error("{0}")]
    Invalid(String),
}

// ---------------------------------------------------------------------------
// Heatmap profiling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileSpec {
    pub axes: HeatmapAxes,
    pub rps_grid: Vec<f64>,
    pub requests_per_cell: u32,
    /// Share of the request rate given to the single colocated engine. 0.5
    /// compares equal hardware: the pair has two engines, so the colocated
    /// side stands for two engines splitting the load.
    pub colocated_share: f64,
    /// Poisson instead of evenly spaced arrivals.
    pub poisson: bool,
    pub colocated_engine: EngineConfig,
    pub prefill_engine: EngineConfig,
    pub decode_engine: EngineConfig,
    pub links: LinkDefaults,
    pub seed: u64,
}

impl Default for ProfileSpec {
    fn default() -> Self {
        ProfileSpec {
            axes: HeatmapAxes::default(),
            rps_grid: vec![1.0, 1.5, 2.0],
            requests_per_cell: 24,
            colocated_share: 0.5,
            poisson: false,
            colocated_engine: EngineConfig::with_mode(EngineMode::Colocated),
            prefill_engine: EngineConfig::with_mode(EngineMode::PrefillOnly),
            decode_engine: EngineConfig::with_mode(EngineMode::DecodeOnly),
            links: LinkDefaults::default(),
            seed: 0,
        }
    }
}

/// Request shape profiled for a cell: the cell's lower-edge corner.
pub fn cell_point(axes: &HeatmapAxes, row: usize, col: usize) -> (u32, u32) {
    let prefill = axes.prefill_edges[row];
    let decode = ((prefill as f64 * axes.ratio_edges[col]).round() as u32).max(1);
    (prefill, decode)
}

fn fixed_batch(
    rps: f64,
    poisson: bool,
    n: u32,
    prompt: u32,
    decode: u32,
    seed: u64,
) -> Result<Vec<Request>, WorkloadError> {
    generate_trace(&WorkloadSpec {
        arrival: if poisson {
            ArrivalProcess::Poisson { rate_rps: rps }
        } else {
            ArrivalProcess::Fixed { rps }
        },
        horizon_s: None,
        num_requests: Some(n),
        prompt_len: LengthDist::Constant { tokens: prompt },
        decode_len: DecodeDist::Constant { tokens: decode },
        prefix_groups: Vec::new(),
        tag_context_ids: false,
        seed,
    })
}

fn mean_jct(spec: ClusterSpec, trace: Vec<Request>) -> Result<f64, ExperimentError> {
    let n = trace.len();
    let out = simulate(spec, trace)?;
    if out.report.summary.completed != n {
        return Err(ExperimentError::Invalid(format!(
            "{} of {n} requests completed",
            out.report.summary.completed
        )));
    }
    out.metrics
        .mean_jct_us()
        .ok_or_else(|| ExperimentError::Invalid("no completed requests".into()))
}

/// Runs one cell at one rate on both setups.
pub fn profile_cell(
    spec: &ProfileSpec,
    row: usize,
    col: usize,
    rps: f64,
) -> Result<CellProfile, ExperimentError> {
    let (prompt, decode) = cell_point(&spec.axes, row, col);
    let seed = spec.seed ^ ((row as u64) << 32 | (col as u64) << 16);
    let base = ClusterSpec {
        colocated_engine: spec.colocated_engine.clone(),
        prefill_engine: spec.prefill_engine.clone(),
        decode_engine: spec.decode_engine.clone(),
        links: spec.links,
        policy: Policy::RoundRobin,
        ..ClusterSpec::layout(1, 0)
    };
    let coloc = ClusterSpec {
        colocated: 1,
        pairs: 0,
        ..base.clone()
    };
    let disagg = ClusterSpec {
        colocated: 0,
        pairs: 1,
        ..base
    };
    let n = spec.requests_per_cell;
    let jc = mean_jct(
        coloc,
        fixed_batch(
            rps * spec.colocated_share,
            spec.poisson,
            n,
            prompt,
            decode,
            seed,
        )?,
    )?;
    let jd = mean_jct(
        disagg,
        fixed_batch(rps, spec.poisson, n, prompt, decode, seed)?,
    )?;
    Ok(CellProfile {
        rps,
        row,
        col,
        jct_colocated_us: jc,
        jct_disaggregated_us: jd,
    })
}

/// Profiles every cell at every rate and builds the heatmap.
pub fn profile_heatmap(spec: &ProfileSpec) -> Result<(Heatmap, Vec<CellProfile>), ExperimentError> {
    spec.axes.validate()?;
    if spec.rps_grid.is_empty() || spec.rps_grid.iter().any(|r| !(*r > 0.0)) {
        return Err(ExperimentError::Invalid(
            "rps grid must be non-empty and positive".into(),
        ));
    }
    if !(spec.colocated_share > 0.0) || spec.requests_per_cell == 0 {
        return Err(ExperimentError::Invalid(
            "colocated share and batch size must be positive".into(),
        ));
    }
    let mut jobs = Vec::new();
    for &rps in &spec.rps_grid {
        for row in 0..spec.axes.rows() {
            for col in 0..spec.axes.cols() {
                jobs.push((row, col, rps));
            }
        }
    }
    let profiles = jobs
        .par_iter()
        .map(|&(row, col, rps)| profile_cell(spec, row, col, rps))
        .collect::<Result<Vec<_>, _>>()?;
    let hm = build_heatmap(spec.axes.clone(), &profiles)?;
    Ok((hm, profiles))
}

// ---------------------------------------------------------------------------
// Policy comparison

/// The mixed-length workload used to compare routing policies: prompts
/// log-normal around `prompt_median`, decode log-normal around `decode_median`.
pub fn mixed_workload(
    rps: f64,
    n: u32,
    prompt_median: f64,
    decode_median: f64,
    seed: u64,
) -> WorkloadSpec {
    WorkloadSpec {
        arrival: ArrivalProcess::Poisson { rate_rps: rps },
        horizon_s: None,
        num_requests: Some(n),
        prompt_len: LengthDist::LogNormal {
            median: prompt_median,
            sigma: 0.8,
            min: 64,
            max: 16384,
        },
        decode_len: DecodeDist::LogNormal {
            median: decode_median,
            sigma: 0.8,
            min: 4,
            max: 4096,
        },
        prefix_groups: Vec::new(),
        tag_context_ids: false,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyPoint {
    pub policy: Policy,
    pub rps: f64,
    pub mean_jct_us: f64,
    pub mean_ttft_us: f64,
    pub mean_tpot_us: f64,
    pub completed: usize,
    pub routed_colocated: u64,
    pub routed_disaggregated: u64,
}

/// Runs `workload` (with its rate replaced) under every policy at every rate.
pub fn compare_policies(
    cluster: &ClusterSpec,
    workload: &WorkloadSpec,
    policies: &[Policy],
    rps_grid: &[f64],
) -> Result<Vec<PolicyPoint>, ExperimentError> {
    let mut jobs = Vec::new();
    for &rps in rps_grid {
        for &p in policies {
            jobs.push((rps, p));
        }
    }
    jobs.par_iter()
        .map(|&(rps, policy)| {
            let mut w = workload.clone();
            w.arrival = match w.arrival {
                ArrivalProcess::Poisson { .. } => ArrivalProcess::Poisson { rate_rps: rps },
                ArrivalProcess::Fixed { .. } => ArrivalProcess::Fixed { rps },
            };
            let trace = generate_trace(&w)?;
            let spec = ClusterSpec {
                policy,
                ..cluster.clone()
            };
            let out = simulate(spec, trace)?;
            let s = &out.report.summary;
            Ok(PolicyPoint {
                policy,
                rps,
                mean_jct_us: s.jct_us.mean,
                mean_ttft_us: s.ttft_us.mean,
                mean_tpot_us: s.tpot_us.mean,
                completed: s.completed,
                routed_colocated: out.report.routed_colocated,
                routed_disaggregated: out.report.routed_disaggregated,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Asynchronous scheduling

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeThroughput {
    pub tokens: u64,
    pub elapsed_us: Micros,
    pub tokens_per_s: f64,
}

/// Decode throughput of one engine running `batch` sequences for `steps`
/// steady-state decode steps (prefill excluded).
pub fn decode_throughput(cfg: &EngineConfig, batch: u32, steps: u32) -> DecodeThroughput {
    let mut cfg = cfg.clone();
    cfg.mode = EngineMode::Colocated;
    cfg.max_running_seqs = cfg.max_running_seqs.max(batch);
    let mut e = Engine::new(0, cfg);
    let mut fabric =
        crate::distflow::DistFlow::new(crate::distflow::Topology::new(LinkDefaults::default()));
    for i in 0..batch as usize {
        let prompt: Vec<u32> = (0..16).map(|t| (i * 16 + t) as u32).collect();
        let r = EngineRequest {
            req: i,
            prompt: prompt.into(),
            decode_len: steps + 2,
            priority: 0,
            arrival_us: 0,
            context_id: None,
        };
        e.enqueue(r, 0, &mut fabric).expect("ready engine");
    }
    let mut now = 0;
    // Run until every sequence has its first token, then measure.
    let mut first = 0;
    while first < batch {
        let w = e.start_iteration(now).expect("work remains");
        now += w;
        first += e
            .complete_iteration(now)
            .iter()
            .filter(|ev| matches!(ev, EngineEvent::Token { .. }))
            .count() as u32;
    }
    let start = now;
    let mut tokens = 0u64;
    for _ in 0..steps {
        let w = e.start_iteration(now).expect("decodes remain");
        now += w;
        tokens += e
            .complete_iteration(now)
            .iter()
            .filter(|ev| matches!(ev, EngineEvent::Token { .. }))
            .count() as u64;
    }
    let elapsed = now - start;
    DecodeThroughput {
        tokens,
        elapsed_us: elapsed,
        tokens_per_s: tokens as f64 / (elapsed as f64 / 1e6),
    }
}

/// Async over sync decode throughput at the given scheduling overhead.
pub fn async_speedup(cfg: &EngineConfig, overhead_us: Micros, batch: u32, steps: u32) -> f64 {
    let run = |async_sched| {
        let c = EngineConfig {
            sched_overhead_us: overhead_us,
            async_sched,
            ..cfg.clone()
        };
        decode_throughput(&c, batch, steps).tokens_per_s
    };
    run(true) / run(false)
}

// ---------------------------------------------------------------------------
// Scaling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScaleBenchSpec {
    pub model: ModelSpec,
    pub consts: ScalingConstants,
    pub links: LinkDefaults,
    pub engine: EngineConfig,
    pub npus_per_host: usize,
}

impl Default for ScaleBenchSpec {
    fn default() -> Self {
        ScaleBenchSpec {
            model: ModelSpec::llama_70b(),
            consts: ScalingConstants::default(),
            links: LinkDefaults::default(),
            engine: EngineConfig::default(),
            npus_per_host: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub path: LoadPath,
    pub n: u32,
    pub te_load_us: Micros,
    pub max_total_us: Micros,
    pub timelines: Vec<ScalingTimeline>,
}

/// Scales `n` engines with a pool of `n` pre-warmed engines, so pod creation
/// and engine start-up drop out. `path = None` lets the scaler choose; the
/// bench then starts from zero running engines with the model pre-loaded.
pub fn scale_bench(
    spec: &ScaleBenchSpec,
    path: Option<LoadPath>,
    n: u32,
) -> Result<ScaleRow, ExperimentError> {
    if n == 0 {
        return Err(ExperimentError::Invalid("n must be at least 1".into()));
    }
    let tp = spec.model.tp_degree as usize;
    if tp > spec.npus_per_host {
        return Err(ExperimentError::Invalid(
            "model does not fit on one host".into(),
        ));
    }
    let per_host = spec.npus_per_host / tp;
    let target_hosts = (n as usize).div_ceil(per_host);
    let needs_source = path.is_some_and(LoadPath::is_fork);
    // Host 0 holds the fork source when one is needed.
    let hosts = target_hosts + needs_source as usize;
    let domains: Vec<u32> = match path {
        Some(LoadPath::NpuForkRoce) => (0..hosts as u32).collect(),
        _ => vec![0; hosts],
    };
    let mut c = ScaleCluster::new(
        &domains,
        spec.npus_per_host,
        spec.links,
        spec.consts.clone(),
        spec.engine.clone(),
    );
    c.pool.add_pods(n);
    for _ in 0..n {
        c.pool.prewarm_te()?;
    }
    if needs_source {
        c.add_running(&spec.model, 0, 0)?;
        // Fill the source host so targets land on other hosts.
        while c.free_npus(0) >= tp {
            c.add_running(
                &ModelSpec {
                    name: "filler".into(),
                    ..spec.model.clone()
                },
                0,
                0,
            )?;
        }
    }
    let first_target = needs_source as u32;
    if matches!(path, None | Some(LoadPath::DramHit)) {
        for h in first_target..hosts as u32 {
            c.pool.preload(&spec.model, h)?;
        }
    }
    let timelines = c.scale_up(n, &spec.model, path, 0)?;
    c.pool
        .check_conservation()
        .map_err(ExperimentError::Invalid)?;
    let chosen = timelines[0].load_path;
    Ok(ScaleRow {
        path: chosen,
        n,
        te_load_us: timelines
            .iter()
            .map(|t| t.te_load_us)
            .max()
            .expect("n >= 1"),
        max_total_us: timelines
            .iter()
            .map(|t| t.total_us())
            .max()
            .expect("n >= 1"),
        timelines,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterferenceProbe {
    pub baseline_tpot_us: f64,
    pub fork_tpot_us: f64,
    pub factor: f64,
}

/// Decode TPOT of a fork source with `batch` running sequences over a
/// `fork_us` window, without and with the configured interference factor.
/// Both runs are identical outside the window, so KV growth cancels out.
pub fn fork_interference(
    engine: &EngineConfig,
    consts: &ScalingConstants,
    batch: u32,
    fork_us: Micros,
) -> InterferenceProbe {
    let window_tpot = |factor: f64| {
        let mut cfg = engine.clone();
        cfg.mode = EngineMode::Colocated;
        let mut e = Engine::new(0, cfg);
        let mut fabric =
            crate::distflow::DistFlow::new(crate::distflow::Topology::new(LinkDefaults::default()));
        for i in 0..batch as usize {
            let prompt: Vec<u32> = (0..64).map(|t| (i * 64 + t) as u32).collect();
            let r = EngineRequest {
                req: i,
                prompt: prompt.into(),
                decode_len: u32::MAX,
                priority: 0,
                arrival_us: 0,
                context_id: None,
            };
            e.enqueue(r, 0, &mut fabric).expect("ready engine");
        }
        let fork_start = secs_to_us(1.0);
        let fork_end = fork_start + fork_us;
        let mut now = 0;
        let mut gaps = Vec::new();
        while now < fork_end {
            let forking = now >= fork_start;
            e.set_slowdown(if forking { factor } else { 1.0 });
            let w = e.start_iteration(now).expect("endless decode");
            now += w;
            let events = e.complete_iteration(now);
            let all_decode = events.len() == batch as usize;
            if forking && all_decode {
                gaps.push(w as f64);
            }
        }
        gaps.iter().sum::<f64>() / gaps.len().max(1) as f64
    };
    InterferenceProbe {
        baseline_tpot_us: window_tpot(1.0),
        fork_tpot_us: window_tpot(consts.fork_interference),
        factor: consts.fork_interference,
    }
}

/// Default scale-bench plan: every load path at n = 1, then NPU-fork over
/// HCCS at n = 1, 2, 4, ..., 32 and 64.
pub fn default_scale_plan() -> Vec<(Option<LoadPath>, u32)> {
    let mut plan: Vec<_> = LoadPath::ALL.iter().map(|p| (Some(*p), 1)).collect();
    plan.extend([2, 4, 8, 16, 32, 64].map(|n| (Some(LoadPath::NpuForkHccs), n)));
    plan
}

pub fn run_scale_plan(
    spec: &ScaleBenchSpec,
    plan: &[(Option<LoadPath>, u32)],
) -> Result<Vec<ScaleRow>, ExperimentError> {
    plan.par_iter()
        .map(|&(p, n)| scale_bench(spec, p, n))
        .collect()
}

#[derive(Serialize)]
struct ScaleCsvRow<'a> {
    path: &'a str,
    n: u32,
    te_load_us: Micros,
    max_total_us: Micros,
}

/// One line per bench row: the path, n, the slowest engine's load time and
/// the slowest engine's end-to-end scaling time.
pub fn write_scale_csv<W: Write>(rows: &[ScaleRow], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(ScaleCsvRow {
            path: r.path.as_str(),
            n: r.n,
            te_load_us: r.te_load_us,
            max_total_us: r.max_total_us,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TimelineCsvRow<'a> {
    te: u32,
    host: u32,
    path: &'a str,
    start_us: Micros,
    scaler_pre_us: Micros,
    te_pre_load_us: Micros,
    te_load_us: Micros,
    te_post_load_us: Micros,
    scaler_post_us: Micros,
    total_us: Micros,
    prewarmed_pod: bool,
    prewarmed_te: bool,
}

pub fn write_timelines_csv<W: Write>(timelines: &[ScalingTimeline], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in timelines {
        w.serialize(TimelineCsvRow {
            te: t.te,
            host: t.host,
            path: t.load_path.as_str(),
            start_us: t.start_us,
            scaler_pre_us: t.scaler_pre_us,
            te_pre_load_us: t.te_pre_load_us,
            te_load_us: t.te_load_us,
            te_post_load_us: t.te_post_load_us,
            scaler_post_us: t.scaler_post_us,
            total_us: t.total_us(),
            prewarmed_pod: t.used_prewarmed_pod,
            prewarmed_te: t.used_prewarmed_te,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_profiles_csv<W: Write>(profiles: &[CellProfile], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in profiles {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}
