//! Event-driven simulation of one TE group: request arrivals, routing,
//! engine iterations, KV handoffs between prefill and decode engines, cache
//! fetches, and optional autoscaling.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoscaler::{
    AutoscalerError, MetricsWindow, ModelSpec, ScaleCluster, ScaleDecision, ScalePolicy,
    ScalerThresholds, ScalingConstants, ScalingTimeline,
};
use crate::distflow::{DistFlow, DistFlowError, EndpointId, GroupId, LinkDefaults, TicketId};
use crate::dsched::{
    Heatmap, NoisyOracle, Policy, RouteQuery, Scheduler, Unit, UnitKind, UnitView,
    DEFAULT_BALANCE_EPSILON,
};
use crate::engine::{
    Admission, Engine, EngineConfig, EngineError, EngineEvent, EngineMode, EngineRequest,
    EngineStats, Lifecycle,
};
use crate::metrics::{MetricsStore, RequestStatus, ServedBy, SloTargets, Summary};
use crate::rtc::{FabricRoute, PopulateId, SeqId};
use crate::simkernel::{secs_to_us, Kernel, Micros};
use crate::workload::{Job, Request, TaskKind, TaskState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AutoscaleSpec {
    pub thresholds: ScalerThresholds,
    pub window_us: Micros,
    pub scaling: ScalingConstants,
    pub model: ModelSpec,
    pub prewarmed_pods: u32,
    pub prewarmed_tes: u32,
    /// Pre-load the model into every host's DRAM at start.
    pub preload: bool,
}

impl Default for AutoscaleSpec {
    fn default() -> Self {
        AutoscaleSpec {
            thresholds: ScalerThresholds::default(),
            window_us: secs_to_us(10.0),
            scaling: ScalingConstants::default(),
            model: ModelSpec::llama_70b(),
            prewarmed_pods: 0,
            prewarmed_tes: 0,
            preload: true,
        }
    }
}

/// Everything needed to simulate one TE group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    /// Scale-up domain of each host.
    pub host_domains: Vec<u32>,
    pub npus_per_host: usize,
    pub links: LinkDefaults,
    pub colocated: u32,
    pub pairs: u32,
    pub colocated_engine: EngineConfig,
    pub prefill_engine: EngineConfig,
    pub decode_engine: EngineConfig,
    pub policy: Policy,
    pub heatmap: Option<Heatmap>,
    pub predictor: NoisyOracle,
    pub balance_epsilon: f64,
    pub slo: SloTargets,
    pub autoscale: Option<AutoscaleSpec>,
    /// (time, engine id) pairs at which an engine's unit fails.
    pub failures: Vec<(Micros, u32)>,
    pub horizon_us: Option<Micros>,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            host_domains: vec![0, 0],
            npus_per_host: 8,
            links: LinkDefaults::default(),
            colocated: 2,
            pairs: 1,
            colocated_engine: EngineConfig::with_mode(EngineMode::Colocated),
            prefill_engine: EngineConfig::with_mode(EngineMode::PrefillOnly),
            decode_engine: EngineConfig::with_mode(EngineMode::DecodeOnly),
            policy: Policy::Combined,
            heatmap: None,
            predictor: NoisyOracle::default(),
            balance_epsilon: DEFAULT_BALANCE_EPSILON,
            slo: SloTargets::default(),
            autoscale: None,
            failures: Vec::new(),
            horizon_us: None,
        }
    }
}

impl ClusterSpec {
    /// Layout with `colocated` engines and `pairs` prefill/decode pairs on
    /// just enough hosts of one scale-up domain.
    pub fn layout(colocated: u32, pairs: u32) -> Self {
        let mut spec = ClusterSpec {
            colocated,
            pairs,
            ..Default::default()
        };
        let tp = spec.colocated_engine.tp_degree as usize;
        let engines = (colocated + 2 * pairs) as usize;
        spec.host_domains = vec![0; (engines * tp).div_ceil(spec.npus_per_host).max(1)];
        spec
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if self.host_domains.is_empty() {
            return bad("at least one host is required".into());
        }
        if self.colocated + self.pairs == 0 && self.autoscale.is_none() {
            return bad("no engines and autoscaling disabled".into());
        }
        for (name, cfg, mode) in [
            ("colocated", &self.colocated_engine, EngineMode::Colocated),
            ("prefill", &self.prefill_engine, EngineMode::PrefillOnly),
            ("decode", &self.decode_engine, EngineMode::DecodeOnly),
        ] {
            cfg.validate()
                .map_err(|e| SimError::Config(format!("{name} engine: {e}")))?;
            if cfg.mode != mode {
                return bad(format!("{name} engine must be in {mode:?} mode"));
            }
            if cfg.tp_degree as usize > self.npus_per_host {
                return bad(format!(
                    "{name} engine needs {} NPUs per host",
                    cfg.tp_degree
                ));
            }
        }
        if self.prefill_engine.block_size != self.colocated_engine.block_size {
            return bad("colocated and prefill engines must share a block size".into());
        }
        if self.policy.needs_heatmap() && self.heatmap.is_none() {
            return bad(format!("policy {:?} needs a heatmap", self.policy));
        }
        if !(0.0..=1.0).contains(&self.predictor.accuracy) || self.predictor.bucket_size == 0 {
            return bad("predictor accuracy must be in [0, 1] and bucket size positive".into());
        }
        if let Some(a) = &self.autoscale {
            if a.window_us == 0 {
                return bad("autoscale window must be positive".into());
            }
            a.model
                .validate()
                .map_err(|e| SimError::Config(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error("engine {0}: {1}")]
    Engine(u32, EngineError),
    #[error(transparent)]
    Transfer(#[from] DistFlowError),
    #[error(transparent)]
    Scaling(#[from] AutoscalerError),
    #[error("conservation violated: {0}")]
    Conservation(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Colocated,
    Prefill { decode: u32 },
    Decode,
}

#[derive(Debug, Clone, Copy)]
struct Handoff {
    req: usize,
    prefill: u32,
    pseq: SeqId,
    decode: u32,
    dseq: SeqId,
}

struct TeSlot {
    engine: Engine,
    role: Role,
    npu: EndpointId,
    stepping: bool,
    draining: bool,
    autoscaled: bool,
    /// Prefilled requests waiting for KV room on this decode engine.
    deferred: VecDeque<(usize, SeqId)>,
    pair_group: Option<GroupId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Ev {
    RequestArrival(usize),
    EngineStep(u32),
    TransferComplete,
    PopulateComplete { te: u32, populate: PopulateId },
    ScaleTick,
    ScaleStepComplete { te: u32, step: u8 },
    TeReady(u32),
    TeFailure(u32),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub summary: Summary,
    pub engines: BTreeMap<u32, EngineStats>,
    pub routed_colocated: u64,
    pub routed_disaggregated: u64,
    pub handoffs: u64,
    pub deferred_handoffs: u64,
    pub scaling: Vec<ScalingTimeline>,
    pub scale_decisions: Vec<(Micros, String)>,
    pub events_processed: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: MetricsStore,
    pub report: RunReport,
}

struct Scaler {
    cluster: ScaleCluster,
    policy: ScalePolicy,
    spec: AutoscaleSpec,
    completed: u64,
    violations: u64,
    loading: BTreeSet<u32>,
}

pub struct ClusterSim {
    spec: ClusterSpec,
    kernel: Kernel<Ev>,
    fabric: DistFlow,
    tes: BTreeMap<u32, TeSlot>,
    sched: Scheduler,
    metrics: MetricsStore,
    reqs: Vec<Request>,
    prompts: Vec<Arc<[u32]>>,
    jobs: Vec<Option<Job>>,
    pending: VecDeque<usize>,
    in_transit: BTreeMap<TicketId, Handoff>,
    populates: BTreeMap<TicketId, (u32, PopulateId)>,
    fabric_tick: Option<Micros>,
    live: usize,
    /// Arrival events already handled; the rest still sit in the kernel.
    arrived: Vec<bool>,
    scaler: Option<Scaler>,
    report: RunReport,
}

impl ClusterSim {
    pub fn new(spec: ClusterSpec, trace: Vec<Request>) -> Result<Self, SimError> {
        spec.validate()?;
        let scaling = spec
            .autoscale
            .as_ref()
            .map(|a| a.scaling.clone())
            .unwrap_or_default();
        let mut placement = ScaleCluster::new(
            &spec.host_domains,
            spec.npus_per_host,
            spec.links,
            scaling,
            spec.colocated_engine.clone(),
        );
        let placement_model = |cfg: &EngineConfig| ModelSpec {
            name: spec
                .autoscale
                .as_ref()
                .map_or_else(|| "model".to_string(), |a| a.model.name.clone()),
            weight_bytes: 1,
            tp_degree: cfg.tp_degree,
        };
        let mut layout: Vec<(u32, Role, EngineConfig)> = Vec::new();
        for i in 0..spec.colocated {
            layout.push((i, Role::Colocated, spec.colocated_engine.clone()));
        }
        for p in 0..spec.pairs {
            let pid = spec.colocated + 2 * p;
            layout.push((
                pid,
                Role::Prefill { decode: pid + 1 },
                spec.prefill_engine.clone(),
            ));
            layout.push((pid + 1, Role::Decode, spec.decode_engine.clone()));
        }
        let mut placed = Vec::new();
        for (id, role, cfg) in layout {
            let model = placement_model(&cfg);
            let host = (0..spec.host_domains.len() as u32)
                .find(|&h| placement.free_npus(h) >= cfg.tp_degree as usize)
                .ok_or_else(|| SimError::Config(format!("not enough NPUs to place engine {id}")))?;
            let sid = placement.add_running(&model, host, 0)?;
            let te = placement.running_te(sid).expect("just added");
            placed.push((id, role, cfg, te.npus[0], host));
        }
        let mut fabric = DistFlow::new(placement.topology().clone());
        let mut tes = BTreeMap::new();
        for (id, role, cfg, npu, host) in placed {
            let dram = placement.host_dram(host).expect("host exists");
            let mut engine = Engine::new(id, cfg);
            let group = fabric.link_cluster(&[dram, npu])?;
            engine.set_populate_route(FabricRoute {
                group,
                src: dram,
                dst: npu,
                bytes_per_block: engine.config().block_bytes(),
            });
            tes.insert(
                id,
                TeSlot {
                    engine,
                    role,
                    npu,
                    stepping: false,
                    draining: false,
                    autoscaled: false,
                    deferred: VecDeque::new(),
                    pair_group: None,
                },
            );
        }
        let pair_ids: Vec<(u32, u32)> = tes
            .iter()
            .filter_map(|(id, s)| match s.role {
                Role::Prefill { decode } => Some((*id, decode)),
                _ => None,
            })
            .collect();
        for (p, d) in pair_ids {
            let g = fabric.link_cluster(&[tes[&p].npu, tes[&d].npu])?;
            tes.get_mut(&p).expect("prefill").pair_group = Some(g);
        }

        let scaler = match &spec.autoscale {
            Some(a) => {
                let mut cluster = placement;
                cluster.pool.add_pods(a.prewarmed_pods + a.prewarmed_tes);
                for _ in 0..a.prewarmed_tes {
                    cluster.pool.prewarm_te()?;
                }
                if a.preload {
                    for h in 0..spec.host_domains.len() as u32 {
                        cluster.pool.preload(&a.model, h)?;
                    }
                }
                Some(Scaler {
                    cluster,
                    policy: ScalePolicy::new(a.thresholds.clone()),
                    spec: a.clone(),
                    completed: 0,
                    violations: 0,
                    loading: BTreeSet::new(),
                })
            }
            None => None,
        };

        let mut sched = Scheduler::new(
            spec.policy,
            spec.heatmap.clone(),
            spec.predictor,
            spec.colocated_engine.block_size,
        );
        sched.epsilon = spec.balance_epsilon;

        let mut kernel = Kernel::new();
        let mut metrics = MetricsStore::new();
        let mut prompts = Vec::with_capacity(trace.len());
        for (i, r) in trace.iter().enumerate() {
            metrics.arrive(&r.id, r.arrival_us);
            prompts.push(Arc::from(r.prompt_tokens.as_slice()));
            kernel
                .schedule(r.arrival_us, Ev::RequestArrival(i))
                .expect("time starts at 0");
        }
        for &(t, te) in &spec.failures {
            kernel
                .schedule(t, Ev::TeFailure(te))
                .expect("time starts at 0");
        }
        if let Some(a) = &spec.autoscale {
            if !trace.is_empty() {
                kernel.schedule(a.window_us, Ev::ScaleTick).expect("future");
            }
        }
        Ok(ClusterSim {
            live: trace.len(),
            arrived: vec![false; trace.len()],
            jobs: vec![None; trace.len()],
            spec,
            kernel,
            fabric,
            tes,
            sched,
            metrics,
            reqs: trace,
            prompts,
            pending: VecDeque::new(),
            in_transit: BTreeMap::new(),
            populates: BTreeMap::new(),
            fabric_tick: None,
            scaler,
            report: RunReport::default(),
        })
    }

    /// Runs to quiescence (or the horizon) and audits the end state.
    pub fn run(mut self) -> Result<RunOutput, SimError> {
        let end = self.spec.horizon_us.unwrap_or(Micros::MAX);
        while let Some(ev) = self.kernel.pop_until(end) {
            self.handle(ev.kind)?;
        }
        self.audit()?;
        for (id, s) in &self.tes {
            s.engine
                .rtc()
                .check_invariants()
                .map_err(|e| SimError::Invariant(format!("engine {id}: {e}")))?;
        }
        self.report.summary = self.metrics.summary(&self.spec.slo);
        self.report.engines = self
            .tes
            .iter()
            .map(|(id, s)| (*id, s.engine.stats()))
            .collect();
        self.report.events_processed = self.kernel.processed();
        if let Some(sc) = &self.scaler {
            sc.cluster
                .pool
                .check_conservation()
                .map_err(SimError::Conservation)?;
        }
        Ok(RunOutput {
            metrics: self.metrics,
            report: self.report,
        })
    }

    fn now(&self) -> Micros {
        self.kernel.now()
    }

    fn handle(&mut self, ev: Ev) -> Result<(), SimError> {
        match ev {
            Ev::RequestArrival(i) => self.on_arrival(i),
            Ev::EngineStep(te) => self.on_step(te),
            Ev::TransferComplete => self.on_fabric_tick(),
            Ev::PopulateComplete { te, populate } => self.on_populate(te, populate),
            Ev::ScaleTick => self.on_scale_tick(),
            Ev::ScaleStepComplete { .. } => Ok(()),
            Ev::TeReady(te) => self.on_te_ready(te),
            Ev::TeFailure(te) => self.on_failure(te),
        }
    }

    fn units(&self) -> Vec<UnitView> {
        let usable = |s: &TeSlot| s.engine.lifecycle() == Lifecycle::Ready && !s.draining;
        let mut out = Vec::new();
        for (id, s) in &self.tes {
            if !usable(s) {
                continue;
            }
            let (unit, load, queued) = match s.role {
                Role::Colocated => {
                    let l = s.engine.load();
                    (Unit::Colocated { te: *id }, l.total(), l.queued_tokens)
                }
                Role::Prefill { decode } => {
                    let d = &self.tes[&decode];
                    if !usable(d) {
                        continue;
                    }
                    let (lp, ld) = (s.engine.load(), d.engine.load());
                    (
                        Unit::DisaggPair {
                            prefill: *id,
                            decode,
                        },
                        lp.total() + ld.total(),
                        lp.queued_tokens + ld.queued_tokens,
                    )
                }
                Role::Decode => continue,
            };
            out.push(UnitView { unit, load, queued });
        }
        out
    }

    fn loading_any(&self) -> bool {
        self.scaler.as_ref().is_some_and(|s| !s.loading.is_empty())
    }

    fn on_arrival(&mut self, i: usize) -> Result<(), SimError> {
        self.arrived[i] = true;
        let units = self.units();
        if units.is_empty() {
            if self.scaler.is_some() {
                self.pending.push_back(i);
            } else {
                self.metrics.record_mut(i).status = RequestStatus::Rejected;
                self.live -= 1;
            }
            return Ok(());
        }
        self.dispatch(i, &units)
    }

    fn dispatch(&mut self, i: usize, units: &[UnitView]) -> Result<(), SimError> {
        let now = self.now();
        let r = &self.reqs[i];
        let q = RouteQuery {
            request_id: &r.id,
            tokens: &r.prompt_tokens,
            true_decode_len: r.true_decode_len,
        };
        let unit = self.sched.route(&q, units);
        let (te, job, kind) = match unit {
            Unit::Colocated { te } => (te, Job::colocated(&r.id, te), ServedBy::Colocated),
            Unit::DisaggPair { prefill, decode } => (
                prefill,
                Job::disaggregated(&r.id, prefill, decode),
                ServedBy::Disaggregated,
            ),
        };
        match kind {
            ServedBy::Colocated => self.report.routed_colocated += 1,
            ServedBy::Disaggregated => self.report.routed_disaggregated += 1,
        }
        let er = EngineRequest {
            req: i,
            prompt: self.prompts[i].clone(),
            decode_len: r.true_decode_len.max(1),
            priority: r.priority,
            arrival_us: r.arrival_us,
            context_id: r.context_id.clone(),
        };
        let rec = self.metrics.record_mut(i);
        rec.status = RequestStatus::InFlight;
        rec.te_id = Some(te);
        rec.te_kind = Some(kind);
        let mut job = job;
        let first = job.tasks[0].kind;
        job.advance(first, TaskState::Ready)
            .map_err(|e| SimError::Invariant(e.to_string()))?;
        self.jobs[i] = Some(job);

        let slot = self.tes.get_mut(&te).expect("routed to a known engine");
        let (_, adm) = slot
            .engine
            .enqueue(er, now, &mut self.fabric)
            .map_err(|e| SimError::Engine(te, e))?;
        match adm {
            Admission::Ready { cached_tokens } => {
                self.metrics.record_mut(i).cached_prefix_tokens = cached_tokens;
            }
            Admission::Parked { populate, .. } => {
                let tid = slot
                    .engine
                    .rtc()
                    .populate_ticket(populate)
                    .and_then(|t| t.transfer)
                    .expect("pending populate has a transfer");
                self.populates.insert(tid, (te, populate));
                self.ensure_fabric_tick();
            }
        }
        self.sync_cache(te);
        self.kick(te);
        Ok(())
    }

    fn sync_cache(&mut self, te: u32) {
        let slot = self.tes.get_mut(&te).expect("engine");
        let events = slot.engine.rtc_mut().drain_events();
        let kind = match slot.role {
            Role::Colocated => UnitKind::Colocated,
            Role::Prefill { .. } => UnitKind::Disaggregated,
            Role::Decode => return,
        };
        if !events.is_empty() {
            self.sched.on_te_cache_update(te, kind, &events);
        }
    }

    fn kick(&mut self, te: u32) {
        let now = self.now();
        let Some(slot) = self.tes.get_mut(&te) else {
            return;
        };
        if slot.stepping || slot.engine.lifecycle() != Lifecycle::Ready {
            return;
        }
        if let Some(wall) = slot.engine.start_iteration(now) {
            slot.stepping = true;
            self.kernel.schedule_in(wall, Ev::EngineStep(te));
        }
    }

    fn advance_job(&mut self, i: usize, kind: TaskKind, to: TaskState) -> Result<(), SimError> {
        if let Some(job) = self.jobs[i].as_mut() {
            if job.task(kind).is_some_and(|t| t.state != to) {
                job.advance(kind, to)
                    .map_err(|e| SimError::Invariant(e.to_string()))?;
            }
        }
        Ok(())
    }

    fn on_step(&mut self, te: u32) -> Result<(), SimError> {
        let now = self.now();
        let Some(slot) = self.tes.get_mut(&te) else {
            return Ok(());
        };
        slot.stepping = false;
        let role = slot.role;
        let events = slot.engine.complete_iteration(now);
        for ev in events {
            match ev {
                EngineEvent::Token { req, at, .. } => {
                    self.metrics.token(req, at);
                    let kind = match role {
                        Role::Colocated => TaskKind::Colocated,
                        Role::Prefill { .. } => TaskKind::Prefill,
                        Role::Decode => TaskKind::Decode,
                    };
                    self.advance_job(req, kind, TaskState::Running)?;
                }
                EngineEvent::Finished { req, at, .. } => {
                    let kind = if role == Role::Decode {
                        TaskKind::Decode
                    } else {
                        TaskKind::Colocated
                    };
                    self.advance_job(req, kind, TaskState::Done)?;
                    self.finish(req, at);
                }
                EngineEvent::PrefillDone { req, seq, at } => {
                    self.advance_job(req, TaskKind::Prefill, TaskState::Done)?;
                    if self.reqs[req].true_decode_len <= 1 {
                        let slot = self.tes.get_mut(&te).expect("engine");
                        slot.engine
                            .finish_handoff(seq, now)
                            .map_err(|e| SimError::Engine(te, e))?;
                        if let Some(job) = self.jobs[req].as_mut() {
                            // Nothing left to decode, so nothing to ship.
                            job.mark_kv_transferred();
                        }
                        self.advance_job(req, TaskKind::Decode, TaskState::Done)?;
                        self.finish(req, at);
                    } else if let Role::Prefill { decode } = role {
                        self.start_handoff(req, te, seq, decode)?;
                    }
                }
            }
        }
        self.sync_cache(te);
        if role == Role::Decode {
            self.retry_deferred(te)?;
        }
        self.kick(te);
        self.maybe_retire(te);
        Ok(())
    }

    fn finish(&mut self, req: usize, at: Micros) {
        self.metrics.complete(req, at);
        self.live -= 1;
        if let Some(sc) = self.scaler.as_mut() {
            let r = self.metrics.record(req);
            sc.completed += 1;
            if self.spec.slo.violated(r.ttft_us(), r.tpot_us()) {
                sc.violations += 1;
            }
        }
    }

    fn start_handoff(
        &mut self,
        req: usize,
        prefill: u32,
        pseq: SeqId,
        decode: u32,
    ) -> Result<(), SimError> {
        let now = self.now();
        let r = &self.reqs[req];
        let er = EngineRequest {
            req,
            prompt: self.prompts[req].clone(),
            decode_len: r.true_decode_len,
            priority: r.priority,
            arrival_us: r.arrival_us,
            context_id: r.context_id.clone(),
        };
        let d = self.tes.get_mut(&decode).expect("pair decode engine");
        if !d.deferred.is_empty() {
            d.deferred.push_back((req, pseq));
            self.report.deferred_handoffs += 1;
            return Ok(());
        }
        match d.engine.admit_decode(er, now) {
            Ok(dseq) => self.ship(Handoff {
                req,
                prefill,
                pseq,
                decode,
                dseq,
            }),
            Err(EngineError::CapacityExhausted) => {
                d.deferred.push_back((req, pseq));
                self.report.deferred_handoffs += 1;
                Ok(())
            }
            Err(e) => Err(SimError::Engine(decode, e)),
        }
    }

    fn ship(&mut self, h: Handoff) -> Result<(), SimError> {
        let now = self.now();
        let p = &self.tes[&h.prefill];
        let bytes = p
            .engine
            .handoff_bytes(h.pseq)
            .expect("awaiting handoff")
            .max(1);
        let group = p.pair_group.expect("prefill engine has a pair group");
        let src = p.npu;
        let dst = self.tes[&h.decode].npu;
        let t = self.fabric.transfer(group, src, dst, bytes, now)?;
        self.in_transit.insert(t.id, h);
        self.report.handoffs += 1;
        self.ensure_fabric_tick();
        Ok(())
    }

    fn retry_deferred(&mut self, decode: u32) -> Result<(), SimError> {
        let now = self.now();
        loop {
            let d = self.tes.get_mut(&decode).expect("decode engine");
            let Some(&(req, pseq)) = d.deferred.front() else {
                return Ok(());
            };
            let r = &self.reqs[req];
            let er = EngineRequest {
                req,
                prompt: self.prompts[req].clone(),
                decode_len: r.true_decode_len,
                priority: r.priority,
                arrival_us: r.arrival_us,
                context_id: r.context_id.clone(),
            };
            match d.engine.admit_decode(er, now) {
                Ok(dseq) => {
                    d.deferred.pop_front();
                    let prefill = self
                        .tes
                        .iter()
                        .find(|(_, s)| s.role == Role::Prefill { decode })
                        .map(|(id, _)| *id)
                        .expect("decode engine has a prefill partner");
                    self.ship(Handoff {
                        req,
                        prefill,
                        pseq,
                        decode,
                        dseq,
                    })?;
                }
                Err(EngineError::CapacityExhausted) => return Ok(()),
                Err(e) => return Err(SimError::Engine(decode, e)),
            }
        }
    }

    fn ensure_fabric_tick(&mut self) {
        let now = self.now();
        if let Some(t) = self.fabric.next_event_time() {
            let t = t.max(now);
            if self.fabric_tick.is_none_or(|s| t < s || s < now) {
                self.fabric_tick = Some(t);
                self.kernel
                    .schedule(t, Ev::TransferComplete)
                    .expect("not in the past");
            }
        }
    }

    fn on_fabric_tick(&mut self) -> Result<(), SimError> {
        let now = self.now();
        if self.fabric_tick == Some(now) {
            self.fabric_tick = None;
        }
        for tid in self.fabric.advance_to(now) {
            if let Some(h) = self.in_transit.remove(&tid) {
                self.complete_handoff(h)?;
            }
            if let Some((te, populate)) = self.populates.remove(&tid) {
                self.kernel
                    .schedule(now, Ev::PopulateComplete { te, populate })
                    .expect("now");
            }
        }
        self.ensure_fabric_tick();
        Ok(())
    }

    fn complete_handoff(&mut self, h: Handoff) -> Result<(), SimError> {
        let now = self.now();
        if self.tes[&h.prefill].engine.lifecycle() == Lifecycle::Failed
            || self.tes[&h.decode].engine.lifecycle() == Lifecycle::Failed
        {
            return Ok(());
        }
        let p = self.tes.get_mut(&h.prefill).expect("prefill engine");
        p.engine
            .finish_handoff(h.pseq, now)
            .map_err(|e| SimError::Engine(h.prefill, e))?;
        let d = self.tes.get_mut(&h.decode).expect("decode engine");
        d.engine
            .activate_decode(h.dseq)
            .map_err(|e| SimError::Engine(h.decode, e))?;
        if let Some(job) = self.jobs[h.req].as_mut() {
            job.mark_kv_transferred();
        }
        self.advance_job(h.req, TaskKind::Decode, TaskState::Ready)?;
        self.sync_cache(h.prefill);
        self.kick(h.prefill);
        self.kick(h.decode);
        Ok(())
    }

    fn on_populate(&mut self, te: u32, populate: PopulateId) -> Result<(), SimError> {
        let now = self.now();
        let slot = self.tes.get_mut(&te).expect("engine");
        if slot.engine.lifecycle() != Lifecycle::Ready {
            return Ok(());
        }
        if let Some((_, req, cached)) = slot
            .engine
            .on_populate(populate, &self.fabric, now)
            .map_err(|e| SimError::Engine(te, e))?
        {
            self.metrics.record_mut(req).cached_prefix_tokens = cached;
        }
        self.sync_cache(te);
        self.kick(te);
        Ok(())
    }

    fn on_failure(&mut self, te: u32) -> Result<(), SimError> {
        let Some(slot) = self.tes.get(&te) else {
            return Ok(());
        };
        let members: Vec<u32> = match slot.role {
            Role::Colocated => vec![te],
            Role::Prefill { decode } => vec![te, decode],
            Role::Decode => {
                let p = self
                    .tes
                    .iter()
                    .find(|(_, s)| s.role == Role::Prefill { decode: te })
                    .map(|(id, _)| *id);
                p.into_iter().chain([te]).collect()
            }
        };
        let mut lost = BTreeSet::new();
        for m in &members {
            let s = self.tes.get_mut(m).expect("member");
            lost.extend(s.engine.fail());
            lost.extend(s.deferred.drain(..).map(|(r, _)| r));
            s.stepping = false;
        }
        self.in_transit.retain(|_, h| !members.contains(&h.prefill));
        self.populates.retain(|_, (t, _)| !members.contains(t));
        for r in lost {
            let rec = self.metrics.record_mut(r);
            if matches!(rec.status, RequestStatus::InFlight | RequestStatus::Queued) {
                rec.status = RequestStatus::Rejected;
                self.live -= 1;
            }
        }
        Ok(())
    }

    // -- autoscaling ------------------------------------------------------

    fn on_scale_tick(&mut self) -> Result<(), SimError> {
        let now = self.now();
        let units = self.units();
        let tes = units.len() as u32;
        let engine_queued: u64 = units.iter().map(|u| u.queued).sum();
        let pending_tokens: u64 = self
            .pending
            .iter()
            .map(|&i| self.reqs[i].prompt_len() as u64)
            .sum();
        let loading = self.loading_any();
        let Some(sc) = self.scaler.as_mut() else {
            return Ok(());
        };
        let window = MetricsWindow {
            end_us: now,
            completed: sc.completed,
            slo_violations: sc.violations,
            mean_queued_tokens_per_te: (engine_queued + pending_tokens) as f64 / tes.max(1) as f64,
            tes: tes + sc.loading.len() as u32,
        };
        sc.completed = 0;
        sc.violations = 0;
        let mut decision = sc.policy.evaluate(&window);
        if tes == 0 && !self.pending.is_empty() && !loading {
            decision = ScaleDecision::Up(sc.spec.thresholds.step.max(1));
        }
        match decision {
            ScaleDecision::Hold => {}
            ScaleDecision::Up(n) => {
                self.report.scale_decisions.push((now, format!("up {n}")));
                self.scale_up(n)?;
            }
            ScaleDecision::Down(n) => {
                self.report.scale_decisions.push((now, format!("down {n}")));
                let victims: Vec<u32> = self
                    .tes
                    .iter()
                    .rev()
                    .filter(|(_, s)| {
                        s.autoscaled && !s.draining && s.engine.lifecycle() == Lifecycle::Ready
                    })
                    .map(|(id, _)| *id)
                    .take(n as usize)
                    .collect();
                for v in victims {
                    self.tes.get_mut(&v).expect("victim").draining = true;
                    self.maybe_retire(v);
                }
            }
        }
        if self.live > 0 {
            let w = self.scaler.as_ref().expect("scaler").spec.window_us;
            self.kernel.schedule_in(w, Ev::ScaleTick);
        }
        Ok(())
    }

    fn scale_up(&mut self, n: u32) -> Result<(), SimError> {
        let now = self.now();
        let sc = self.scaler.as_mut().expect("scaler");
        let model = sc.spec.model.clone();
        let timelines = match sc.cluster.scale_up(n, &model, None, now) {
            Ok(t) => t,
            Err(AutoscalerError::InsufficientResources { .. }) => {
                self.report
                    .scale_decisions
                    .push((now, "up blocked: no capacity".into()));
                return Ok(());
            }
            Err(e) => return Err(e.into()),
        };
        for tl in timelines {
            let te = sc
                .cluster
                .running_te(tl.te)
                .expect("scaled engine is registered");
            let (npu, host) = (te.npus[0], te.host);
            let dram = sc.cluster.host_dram(host).expect("host");
            let mut engine = Engine::new(tl.te, self.spec.colocated_engine.clone());
            engine.set_lifecycle(Lifecycle::Loading);
            let group = self.fabric.link_cluster(&[dram, npu])?;
            engine.set_populate_route(FabricRoute {
                group,
                src: dram,
                dst: npu,
                bytes_per_block: engine.config().block_bytes(),
            });
            self.tes.insert(
                tl.te,
                TeSlot {
                    engine,
                    role: Role::Colocated,
                    npu,
                    stepping: false,
                    draining: false,
                    autoscaled: true,
                    deferred: VecDeque::new(),
                    pair_group: None,
                },
            );
            sc.loading.insert(tl.te);
            let steps = [
                tl.scaler_pre_us,
                tl.te_pre_load_us,
                tl.te_load_us,
                tl.te_post_load_us,
                tl.scaler_post_us,
            ];
            let mut t = now;
            for (k, d) in steps.iter().enumerate().take(4) {
                t += d;
                self.kernel
                    .schedule(
                        t,
                        Ev::ScaleStepComplete {
                            te: tl.te,
                            step: k as u8 + 1,
                        },
                    )
                    .expect("future");
            }
            self.kernel
                .schedule(tl.ready_at(), Ev::TeReady(tl.te))
                .expect("future");
            self.report.scaling.push(tl);
        }
        Ok(())
    }

    fn on_te_ready(&mut self, te: u32) -> Result<(), SimError> {
        if let Some(sc) = self.scaler.as_mut() {
            sc.loading.remove(&te);
        }
        let slot = self.tes.get_mut(&te).expect("scaled engine");
        slot.engine.set_lifecycle(Lifecycle::Ready);
        while let Some(i) = self.pending.pop_front() {
            let units = self.units();
            self.dispatch(i, &units)?;
        }
        Ok(())
    }

    fn maybe_retire(&mut self, te: u32) {
        let Some(slot) = self.tes.get(&te) else {
            return;
        };
        if !slot.draining || slot.stepping || !slot.engine.requests().is_empty() {
            return;
        }
        self.tes.remove(&te);
        if let Some(sc) = self.scaler.as_mut() {
            sc.cluster.remove_running(te);
        }
    }

    // -- audit ------------------------------------------------------------

    /// Every request is completed, rejected, not yet arrived, or held by
    /// exactly one place: the dispatch queue, an engine, or a handoff in flight.
    fn audit(&self) -> Result<(), SimError> {
        let mut held: BTreeMap<usize, u32> = BTreeMap::new();
        for &i in &self.pending {
            *held.entry(i).or_default() += 1;
        }
        for s in self.tes.values() {
            if s.engine.lifecycle() == Lifecycle::Failed {
                continue;
            }
            let mut on_engine: BTreeSet<usize> = s.engine.requests().into_iter().collect();
            if let Role::Decode = s.role {
                // An in-flight handoff sits on both ends until the transfer lands.
                for h in self.in_transit.values().filter(|h| h.decode == s.engine.id) {
                    on_engine.remove(&h.req);
                }
            }
            for i in on_engine {
                *held.entry(i).or_default() += 1;
            }
        }
        let mut live = 0;
        for (i, rec) in self.metrics.records.iter().enumerate() {
            let n = held.get(&i).copied().unwrap_or(0);
            match rec.status {
                RequestStatus::Completed | RequestStatus::Rejected => {
                    if n != 0 {
                        return Err(SimError::Conservation(format!(
                            "{} is {:?} but still held",
                            rec.request_id, rec.status
                        )));
                    }
                }
                RequestStatus::Queued if !self.arrived[i] => {
                    live += 1;
                    if n != 0 {
                        return Err(SimError::Conservation(format!(
                            "{} is held before arriving",
                            rec.request_id
                        )));
                    }
                }
                RequestStatus::Queued | RequestStatus::InFlight => {
                    live += 1;
                    if n != 1 {
                        return Err(SimError::Conservation(format!(
                            "{} is {:?} and held {n} times",
                            rec.request_id, rec.status
                        )));
                    }
                }
            }
        }
        if live != self.live {
            return Err(SimError::Conservation(format!(
                "live count {} != {live}",
                self.live
            )));
        }
        Ok(())
    }
}

/// Convenience wrapper: build and run.
pub fn simulate(spec: ClusterSpec, trace: Vec<Request>) -> Result<RunOutput, SimError> {
    ClusterSim::new(spec, trace)?.run()
}
