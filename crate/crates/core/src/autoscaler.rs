//! Engine scale-up: scaling decisions, pre-warmed pools, DRAM pre-loading and
//! the choice between local weight loading and forking weights from a
//! running engine.
//!
//! A new engine goes through five steps: scaler pre-processing (pod
//! creation), engine pre-load (runtime start-up), weight load, post-load
//! (memory profile lookup, block allocation, a dummy request) and scaler
//! post-processing (announcing the engine to the scheduler).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distflow::{
    DistFlow, DistFlowError, EndpointId, EndpointKind, HostId, LinkDefaults, LinkKind, Topology,
};
use crate::engine::EngineConfig;
use crate::simkernel::{secs_to_us, Micros};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub weight_bytes: u64,
    pub tp_degree: u32,
}

impl ModelSpec {
    /// 70B parameters in 16-bit weights, four-way tensor parallel.
    pub fn llama_70b() -> Self {
        ModelSpec {
            name: "70b".into(),
            weight_bytes: 140_000_000_000,
            tp_degree: 4,
        }
    }

    pub fn shard_bytes(&self) -> u64 {
        self.weight_bytes.div_ceil(self.tp_degree as u64)
    }

    pub fn validate(&self) -> Result<(), AutoscalerError> {
        if self.weight_bytes == 0 || self.tp_degree == 0 {
            return Err(AutoscalerError::InvalidModel(self.name.clone()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadPath {
    /// Weights already in host DRAM, copied over PCIe.
    DramHit,
    /// Weights read from SSD into DRAM first.
    DramMiss,
    NpuForkHccs,
    NpuForkRoce,
}

impl LoadPath {
    pub const ALL: [LoadPath; 4] = [
        LoadPath::NpuForkHccs,
        LoadPath::NpuForkRoce,
        LoadPath::DramHit,
        LoadPath::DramMiss,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LoadPath::DramHit => "dram-hit",
            LoadPath::DramMiss => "dram-miss",
            LoadPath::NpuForkHccs => "fork-hccs",
            LoadPath::NpuForkRoce => "fork-roce",
        }
    }

    pub fn parse(s: &str) -> Option<LoadPath> {
        LoadPath::ALL.into_iter().find(|p| p.as_str() == s)
    }

    pub fn is_fork(self) -> bool {
        matches!(self, LoadPath::NpuForkHccs | LoadPath::NpuForkRoce)
    }
}

/// Timing constants of the scaling pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingConstants {
    pub pod_create_us: Micros,
    pub te_startup_us: Micros,
    /// Applies `optimized_startup_factor` to engine start-up.
    pub optimized_startup: bool,
    pub optimized_startup_factor: f64,
    pub ssd_bandwidth: f64,
    pub tensor_init_us: Micros,
    pub push_latency_us: Micros,
    pub profile_lookup_us: Micros,
    pub async_alloc_us: Micros,
    pub dummy_prefill_tokens: u64,
    /// Compute slowdown of a fork source while it streams weights.
    pub fork_interference: f64,
    pub host_dram_bytes: u64,
}

impl Default for ScalingConstants {
    fn default() -> Self {
        ScalingConstants {
            pod_create_us: secs_to_us(30.0),
            te_startup_us: secs_to_us(40.0),
            optimized_startup: false,
            optimized_startup_factor: 0.65,
            ssd_bandwidth: 3e9,
            tensor_init_us: secs_to_us(0.3),
            push_latency_us: secs_to_us(0.05),
            profile_lookup_us: secs_to_us(0.01),
            async_alloc_us: secs_to_us(0.02),
            dummy_prefill_tokens: 128,
            fork_interference: 1.0,
            host_dram_bytes: 1_500_000_000_000,
        }
    }
}

impl ScalingConstants {
    pub fn startup_us(&self) -> Micros {
        if self.optimized_startup {
            (self.te_startup_us as f64 * self.optimized_startup_factor).round() as Micros
        } else {
            self.te_startup_us
        }
    }

    pub fn ssd_us(&self, bytes: u64) -> Micros {
        (bytes as f64 / self.ssd_bandwidth * 1e6).ceil() as Micros
    }

    /// Profile lookup, block allocation and one dummy prefill.
    pub fn post_load_us(&self, engine: &EngineConfig) -> Micros {
        let dummy = engine
            .iteration_cost(self.dummy_prefill_tokens, 0, 0)
            .ceil() as Micros;
        self.profile_lookup_us + self.async_alloc_us + engine.wall_time(dummy)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScalingTimeline {
    /// Id of the engine brought up.
    pub te: u32,
    pub host: HostId,
    pub start_us: Micros,
    pub scaler_pre_us: Micros,
    pub te_pre_load_us: Micros,
    pub te_load_us: Micros,
    pub te_post_load_us: Micros,
    pub scaler_post_us: Micros,
    pub load_path: LoadPath,
    pub used_prewarmed_pod: bool,
    pub used_prewarmed_te: bool,
}

impl ScalingTimeline {
    pub fn total_us(&self) -> Micros {
        self.scaler_pre_us
            + self.te_pre_load_us
            + self.te_load_us
            + self.te_post_load_us
            + self.scaler_post_us
    }

    pub fn ready_at(&self) -> Micros {
        self.start_us + self.total_us()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutoscalerError {
    #[error("host {host} DRAM full: need {needed} bytes, {free} free")]
    DramFull {
        host: HostId,
        needed: u64,
        free: u64,
    },
    #[error("no pre-warmed pod available")]
    NoPod,
    #[error("no running engine of model {0} to fork from")]
    NoSource(String),
    #[error("model {0} is not pre-loaded on host {1}")]
    NotPreloaded(String, HostId),
    #[error("room for {available} of {needed} engines")]
    InsufficientResources { needed: u32, available: u32 },
    #[error("unknown host {0}")]
    UnknownHost(HostId),
    #[error("invalid model spec {0}")]
    InvalidModel(String),
    #[error("scale-up count must be at least 1")]
    ZeroScale,
    #[error(transparent)]
    Transfer(#[from] DistFlowError),
}

/// A pre-started engine runtime, not yet bound to a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrewarmedTe {
    pub id: u32,
    pub bound_model: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HostDram {
    pub capacity: u64,
    pub preloaded: BTreeMap<String, u64>,
}

impl HostDram {
    pub fn used(&self) -> u64 {
        self.preloaded.values().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolCounters {
    pub pods_provisioned: u64,
    pub pods_consumed: u64,
    pub tes_provisioned: u64,
    pub tes_consumed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    pub prewarmed_pods: u32,
    pub prewarmed_tes: Vec<PrewarmedTe>,
    pub hosts: Vec<HostDram>,
    pub counters: PoolCounters,
    next_te: u32,
}

impl PoolState {
    pub fn new(hosts: usize, dram_bytes: u64) -> Self {
        PoolState {
            hosts: vec![
                HostDram {
                    capacity: dram_bytes,
                    preloaded: BTreeMap::new(),
                };
                hosts
            ],
            ..Default::default()
        }
    }

    pub fn add_pods(&mut self, n: u32) {
        self.prewarmed_pods += n;
        self.counters.pods_provisioned += n as u64;
    }

    /// Starts an engine runtime inside a pre-warmed pod.
    pub fn prewarm_te(&mut self) -> Result<u32, AutoscalerError> {
        if self.prewarmed_pods == 0 {
            return Err(AutoscalerError::NoPod);
        }
        self.prewarmed_pods -= 1;
        self.counters.pods_consumed += 1;
        let id = self.next_te;
        self.next_te += 1;
        self.prewarmed_tes.push(PrewarmedTe {
            id,
            bound_model: None,
        });
        self.counters.tes_provisioned += 1;
        Ok(id)
    }

    pub fn take_te(&mut self, model: &str) -> Option<PrewarmedTe> {
        if self.prewarmed_tes.is_empty() {
            return None;
        }
        let mut te = self.prewarmed_tes.remove(0);
        te.bound_model = Some(model.to_string());
        self.counters.tes_consumed += 1;
        Some(te)
    }

    pub fn take_pod(&mut self) -> bool {
        if self.prewarmed_pods == 0 {
            return false;
        }
        self.prewarmed_pods -= 1;
        self.counters.pods_consumed += 1;
        true
    }

    /// Returns an engine runtime to the pool, unbound.
    pub fn release_te(&mut self, mut te: PrewarmedTe) {
        te.bound_model = None;
        self.prewarmed_tes.push(te);
        self.counters.tes_provisioned += 1;
    }

    pub fn preload(&mut self, model: &ModelSpec, host: HostId) -> Result<(), AutoscalerError> {
        let h = self
            .hosts
            .get_mut(host as usize)
            .ok_or(AutoscalerError::UnknownHost(host))?;
        if h.preloaded.contains_key(&model.name) {
            return Ok(());
        }
        let free = h.capacity - h.used();
        if model.weight_bytes > free {
            return Err(AutoscalerError::DramFull {
                host,
                needed: model.weight_bytes,
                free,
            });
        }
        h.preloaded.insert(model.name.clone(), model.weight_bytes);
        Ok(())
    }

    pub fn evict_preload(&mut self, model: &str, host: HostId) -> bool {
        self.hosts
            .get_mut(host as usize)
            .is_some_and(|h| h.preloaded.remove(model).is_some())
    }

    pub fn is_preloaded(&self, model: &str, host: HostId) -> bool {
        self.hosts
            .get(host as usize)
            .is_some_and(|h| h.preloaded.contains_key(model))
    }

    pub fn check_conservation(&self) -> Result<(), String> {
        let c = &self.counters;
        if c.pods_provisioned != c.pods_consumed + self.prewarmed_pods as u64 {
            return Err(format!("pods: {c:?} remaining {}", self.prewarmed_pods));
        }
        if c.tes_provisioned != c.tes_consumed + self.prewarmed_tes.len() as u64 {
            return Err(format!("tes: {c:?} remaining {}", self.prewarmed_tes.len()));
        }
        for (i, h) in self.hosts.iter().enumerate() {
            if h.used() > h.capacity {
                return Err(format!("host {i} DRAM over capacity"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct HostSlot {
    dram: EndpointId,
    npus: Vec<EndpointId>,
    free: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunningTe {
    pub id: u32,
    pub model: String,
    pub host: HostId,
    pub npus: Vec<EndpointId>,
    pub ready_at: Micros,
}

/// Hosts, their NPUs and the engines running on them, as seen by the scaler.
#[derive(Debug, Clone)]
pub struct ScaleCluster {
    pub consts: ScalingConstants,
    pub engine: EngineConfig,
    pub pool: PoolState,
    topo: Topology,
    hosts: Vec<HostSlot>,
    running: Vec<RunningTe>,
    next_id: u32,
}

impl ScaleCluster {
    /// `domains[i]` is the scale-up domain of host `i`; each host gets
    /// `npus_per_host` NPUs and one DRAM endpoint.
    pub fn new(
        domains: &[u32],
        npus_per_host: usize,
        links: LinkDefaults,
        consts: ScalingConstants,
        engine: EngineConfig,
    ) -> Self {
        let mut topo = Topology::new(links);
        let mut hosts = Vec::new();
        for &d in domains {
            let h = topo.add_host(d);
            let dram = topo.add_endpoint(h, EndpointKind::Dram);
            let npus: Vec<EndpointId> = (0..npus_per_host)
                .map(|_| topo.add_endpoint(h, EndpointKind::Npu))
                .collect();
            hosts.push(HostSlot {
                dram,
                free: (0..npus.len()).collect(),
                npus,
            });
        }
        let pool = PoolState::new(domains.len(), consts.host_dram_bytes);
        ScaleCluster {
            consts,
            engine,
            pool,
            topo,
            hosts,
            running: Vec::new(),
            next_id: 1_000_000,
        }
    }

    pub fn running(&self) -> &[RunningTe] {
        &self.running
    }

    pub fn running_te(&self, id: u32) -> Option<&RunningTe> {
        self.running.iter().find(|t| t.id == id)
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn host_dram(&self, host: HostId) -> Option<EndpointId> {
        self.hosts.get(host as usize).map(|h| h.dram)
    }

    pub fn free_npus(&self, host: HostId) -> usize {
        self.hosts.get(host as usize).map_or(0, |h| h.free.len())
    }

    fn take_npus(&mut self, host: HostId, n: usize) -> Option<Vec<EndpointId>> {
        let h = self.hosts.get_mut(host as usize)?;
        if h.free.len() < n {
            return None;
        }
        let idx: Vec<usize> = h.free.iter().take(n).copied().collect();
        for i in &idx {
            h.free.remove(i);
        }
        Some(idx.into_iter().map(|i| h.npus[i]).collect())
    }

    fn place(&mut self, tp: usize) -> Option<(HostId, Vec<EndpointId>)> {
        let host = (0..self.hosts.len()).find(|&h| self.hosts[h].free.len() >= tp)? as HostId;
        Some((host, self.take_npus(host, tp)?))
    }

    /// Registers an engine that is already serving `model` on `host`.
    pub fn add_running(
        &mut self,
        model: &ModelSpec,
        host: HostId,
        ready_at: Micros,
    ) -> Result<u32, AutoscalerError> {
        model.validate()?;
        let npus = self.take_npus(host, model.tp_degree as usize).ok_or(
            AutoscalerError::InsufficientResources {
                needed: 1,
                available: 0,
            },
        )?;
        let id = self.next_id;
        self.next_id += 1;
        self.running.push(RunningTe {
            id,
            model: model.name.clone(),
            host,
            npus,
            ready_at,
        });
        Ok(id)
    }

    /// Stops an engine and frees its NPUs.
    pub fn remove_running(&mut self, id: u32) -> Option<RunningTe> {
        let pos = self.running.iter().position(|t| t.id == id)?;
        let te = self.running.remove(pos);
        let h = &mut self.hosts[te.host as usize];
        for ep in &te.npus {
            let i = h
                .npus
                .iter()
                .position(|n| n == ep)
                .expect("npu belongs to host");
            h.free.insert(i);
        }
        Some(te)
    }

    fn source_for(
        &self,
        model: &str,
        target_host: HostId,
        kind: LinkKind,
        now: Micros,
    ) -> Option<&RunningTe> {
        let topo = &self.topo;
        self.running
            .iter()
            .filter(|t| t.model == model && t.ready_at <= now)
            .find(|t| topo.host_link_kind(t.host, target_host) == kind)
    }

    /// Fastest available path for loading `model` onto `target_host`.
    /// Forking needs a ready engine of the model, so it is unavailable when
    /// scaling from zero.
    pub fn choose_load_path(&self, model: &str, target_host: HostId, now: Micros) -> LoadPath {
        if self
            .source_for(model, target_host, LinkKind::Hccs, now)
            .is_some()
        {
            LoadPath::NpuForkHccs
        } else if self
            .source_for(model, target_host, LinkKind::Roce, now)
            .is_some()
        {
            LoadPath::NpuForkRoce
        } else if self.pool.is_preloaded(model, target_host) {
            LoadPath::DramHit
        } else {
            LoadPath::DramMiss
        }
    }

    /// Streams a model's weights from `source` to every target, one broadcast
    /// per tensor-parallel rank. Returns the time until the last rank lands.
    pub fn fork_broadcast(
        &mut self,
        model: &ModelSpec,
        source: u32,
        targets: &[Vec<EndpointId>],
        now: Micros,
    ) -> Result<Micros, AutoscalerError> {
        let src = self
            .running
            .iter()
            .find(|t| t.id == source && t.ready_at <= now)
            .ok_or_else(|| AutoscalerError::NoSource(model.name.clone()))?
            .npus
            .clone();
        let mut fabric = DistFlow::new(self.topo.clone());
        let mut tickets = Vec::new();
        for (rank, &s) in src.iter().enumerate() {
            let dsts: Vec<EndpointId> = targets.iter().map(|t| t[rank]).collect();
            let mut members = vec![s];
            members.extend(&dsts);
            let g = fabric.link_cluster(&members)?;
            tickets.push(fabric.broadcast(g, s, &dsts, model.shard_bytes(), now)?.id);
        }
        Ok(drain(&mut fabric, &tickets) - now)
    }

    /// Brings up `n` engines of `model`. `path` forces a load path; `None`
    /// picks the best available one per engine. Engines whose loads start
    /// together and fork from the same source share one broadcast.
    pub fn scale_up(
        &mut self,
        n: u32,
        model: &ModelSpec,
        path: Option<LoadPath>,
        now: Micros,
    ) -> Result<Vec<ScalingTimeline>, AutoscalerError> {
        model.validate()?;
        if n == 0 {
            return Err(AutoscalerError::ZeroScale);
        }
        let tp = model.tp_degree as usize;
        let mut placed = Vec::new();
        for i in 0..n {
            match self.place(tp) {
                Some(p) => placed.push(p),
                None => {
                    for (host, npus) in placed {
                        let h = &mut self.hosts[host as usize];
                        for ep in npus {
                            let i = h
                                .npus
                                .iter()
                                .position(|x| *x == ep)
                                .expect("npu belongs to host");
                            h.free.insert(i);
                        }
                    }
                    return Err(AutoscalerError::InsufficientResources {
                        needed: n,
                        available: i,
                    });
                }
            }
        }

        let mut plans = Vec::new();
        for (host, npus) in &placed {
            let chosen = path.unwrap_or_else(|| self.choose_load_path(&model.name, *host, now));
            let source = match chosen {
                LoadPath::NpuForkHccs | LoadPath::NpuForkRoce => {
                    let kind = if chosen == LoadPath::NpuForkHccs {
                        LinkKind::Hccs
                    } else {
                        LinkKind::Roce
                    };
                    Some(
                        self.source_for(&model.name, *host, kind, now)
                            .ok_or_else(|| AutoscalerError::NoSource(model.name.clone()))?
                            .id,
                    )
                }
                LoadPath::DramHit if !self.pool.is_preloaded(&model.name, *host) => {
                    return Err(AutoscalerError::NotPreloaded(model.name.clone(), *host));
                }
                _ => None,
            };
            plans.push((*host, npus.clone(), chosen, source));
        }

        let mut timelines = Vec::new();
        let mut starts = Vec::new();
        for (host, _, chosen, _) in &plans {
            let (pod, te) = if self.pool.take_te(&model.name).is_some() {
                (true, true)
            } else {
                (self.pool.take_pod(), false)
            };
            let scaler_pre = if pod { 0 } else { self.consts.pod_create_us };
            let pre_load = if te { 0 } else { self.consts.startup_us() };
            starts.push(now + scaler_pre + pre_load);
            let id = self.next_id;
            self.next_id += 1;
            timelines.push(ScalingTimeline {
                te: id,
                host: *host,
                start_us: now,
                scaler_pre_us: scaler_pre,
                te_pre_load_us: pre_load,
                te_load_us: 0,
                te_post_load_us: self.consts.post_load_us(&self.engine),
                scaler_post_us: self.consts.push_latency_us,
                load_path: *chosen,
                used_prewarmed_pod: pod,
                used_prewarmed_te: te,
            });
        }

        // Issue loads in start-time order; the fabric only moves forward.
        let mut order: Vec<usize> = (0..plans.len()).collect();
        order.sort_by_key(|&i| (starts[i], i));
        let mut landed: Vec<Micros> = vec![0; plans.len()];
        let mut batches: BTreeMap<(Micros, u32), Vec<usize>> = BTreeMap::new();
        let mut local: Vec<(Micros, usize)> = Vec::new();
        for &i in &order {
            let (_, _, chosen, source) = &plans[i];
            match (chosen, source) {
                (LoadPath::NpuForkHccs | LoadPath::NpuForkRoce, Some(src)) => {
                    batches.entry((starts[i], *src)).or_default().push(i)
                }
                (LoadPath::DramMiss, _) => {
                    local.push((starts[i] + self.consts.ssd_us(model.shard_bytes()), i))
                }
                _ => local.push((starts[i], i)),
            }
        }
        let mut issues: Vec<(Micros, Issue)> = local
            .into_iter()
            .map(|(t, i)| (t, Issue::Local(i)))
            .collect();
        for ((t, src), members) in batches {
            issues.push((t, Issue::Fork(src, members)));
        }
        issues.sort_by_key(|a| a.0);

        let mut fabric = DistFlow::new(self.topo.clone());
        let mut pending: Vec<(Vec<u64>, Vec<usize>)> = Vec::new();
        for (t, issue) in issues {
            fabric.advance_to(t);
            match issue {
                Issue::Local(i) => {
                    let (host, npus, _, _) = &plans[i];
                    let dram = self.hosts[*host as usize].dram;
                    let mut ids = Vec::new();
                    for &npu in npus {
                        let g = fabric.link_cluster(&[dram, npu])?;
                        ids.push(fabric.transfer(g, dram, npu, model.shard_bytes(), t)?.id);
                    }
                    pending.push((ids, vec![i]));
                }
                Issue::Fork(src, members) => {
                    let src_npus = self
                        .running
                        .iter()
                        .find(|r| r.id == src)
                        .expect("source chosen above")
                        .npus
                        .clone();
                    let mut ids = Vec::new();
                    for (rank, &s) in src_npus.iter().enumerate() {
                        let dsts: Vec<EndpointId> =
                            members.iter().map(|&m| plans[m].1[rank]).collect();
                        let mut all = vec![s];
                        all.extend(&dsts);
                        let g = fabric.link_cluster(&all)?;
                        ids.push(fabric.broadcast(g, s, &dsts, model.shard_bytes(), t)?.id);
                    }
                    pending.push((ids, members));
                }
            }
        }
        for (ids, members) in pending {
            let done = drain(&mut fabric, &ids);
            for m in members {
                landed[m] = done;
            }
        }

        for (i, tl) in timelines.iter_mut().enumerate() {
            tl.te_load_us = landed[i] - starts[i] + self.consts.tensor_init_us;
            let (host, npus, _, _) = &plans[i];
            self.running.push(RunningTe {
                id: tl.te,
                model: model.name.clone(),
                host: *host,
                npus: npus.clone(),
                ready_at: tl.ready_at(),
            });
        }
        Ok(timelines)
    }
}

/// Runs the fabric dry and returns when the last of `tickets` completed.
fn drain(fabric: &mut DistFlow, tickets: &[u64]) -> Micros {
    while let Some(t) = fabric.next_event_time() {
        fabric.advance_to(t);
    }
    tickets
        .iter()
        .map(|id| fabric.ticket(*id).expect("known ticket").completes_at)
        .max()
        .unwrap_or(0)
}

enum Issue {
    Local(usize),
    Fork(u32, Vec<usize>),
}

/// Closed-form weight-load time of one engine loading alone.
pub fn expected_te_load_us(
    model: &ModelSpec,
    path: LoadPath,
    links: &LinkDefaults,
    consts: &ScalingConstants,
) -> Micros {
    let shard = model.shard_bytes() as f64;
    let tp = model.tp_degree as f64;
    let secs = match path {
        LoadPath::DramHit => shard * tp / links.pcie_bandwidth,
        LoadPath::DramMiss => shard / consts.ssd_bandwidth + shard * tp / links.pcie_bandwidth,
        LoadPath::NpuForkHccs => shard / links.hccs_bandwidth,
        LoadPath::NpuForkRoce => shard / links.roce_bandwidth,
    };
    secs_to_us(secs) + links.base_latency_us + consts.tensor_init_us
}

// ---------------------------------------------------------------------------
// Scaling decisions

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalerThresholds {
    pub violation_up: f64,
    pub violation_down: f64,
    pub queue_up_tokens: f64,
    pub queue_down_tokens: f64,
    pub cooldown_us: Micros,
    pub step: u32,
    pub min_tes: u32,
    pub max_tes: u32,
}

impl Default for ScalerThresholds {
    fn default() -> Self {
        ScalerThresholds {
            violation_up: 0.1,
            violation_down: 0.02,
            queue_up_tokens: 16384.0,
            queue_down_tokens: 2048.0,
            cooldown_us: secs_to_us(60.0),
            step: 1,
            min_tes: 1,
            max_tes: 64,
        }
    }
}

/// Aggregates over the most recent evaluation window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsWindow {
    pub end_us: Micros,
    pub completed: u64,
    pub slo_violations: u64,
    pub mean_queued_tokens_per_te: f64,
    pub tes: u32,
}

impl MetricsWindow {
    pub fn violation_rate(&self) -> f64 {
        if self.completed == 0 {
            0.0
        } else {
            self.slo_violations as f64 / self.completed as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleDecision {
    Hold,
    Up(u32),
    Down(u32),
}

/// Threshold rule with a cooldown: a scale-down never follows a scale-up
/// (or another scale-down) within `cooldown_us`, nor a scale-up a scale-down.
#[derive(Debug, Clone, Default)]
pub struct ScalePolicy {
    pub thresholds: ScalerThresholds,
    last_up: Option<Micros>,
    last_down: Option<Micros>,
}

impl ScalePolicy {
    pub fn new(thresholds: ScalerThresholds) -> Self {
        ScalePolicy {
            thresholds,
            last_up: None,
            last_down: None,
        }
    }

    fn cooling(&self, last: Option<Micros>, now: Micros) -> bool {
        last.is_some_and(|t| now < t + self.thresholds.cooldown_us)
    }

    pub fn evaluate(&mut self, w: &MetricsWindow) -> ScaleDecision {
        let th = &self.thresholds;
        let rate = w.violation_rate();
        let q = w.mean_queued_tokens_per_te;
        if rate > th.violation_up || q > th.queue_up_tokens {
            if w.tes >= th.max_tes || self.cooling(self.last_down, w.end_us) {
                return ScaleDecision::Hold;
            }
            self.last_up = Some(w.end_us);
            return ScaleDecision::Up(th.step.min(th.max_tes - w.tes));
        }
        if rate < th.violation_down && q < th.queue_down_tokens {
            if w.tes <= th.min_tes
                || self.cooling(self.last_up, w.end_us)
                || self.cooling(self.last_down, w.end_us)
            {
                return ScaleDecision::Hold;
            }
            self.last_down = Some(w.end_us);
            return ScaleDecision::Down(th.step.min(w.tes - th.min_tes));
        }
        ScaleDecision::Hold
    }
}

/// Exponentially decayed count of scale requests per model; the models with
/// the highest scores are the pre-load candidates.
#[derive(Debug, Clone)]
pub struct RecencyWeightedDemand {
    pub half_life_us: Micros,
    scores: BTreeMap<String, (f64, Micros)>,
}

impl RecencyWeightedDemand {
    pub fn new(half_life_us: Micros) -> Self {
        RecencyWeightedDemand {
            half_life_us,
            scores: BTreeMap::new(),
        }
    }

    fn decayed(&self, score: f64, since: Micros, now: Micros) -> f64 {
        let dt = now.saturating_sub(since) as f64;
        score * 0.5f64.powf(dt / self.half_life_us as f64)
    }

    pub fn observe(&mut self, model: &str, now: Micros) {
        let cur = self.score(model, now);
        self.scores.insert(model.to_string(), (cur + 1.0, now));
    }

    pub fn score(&self, model: &str, now: Micros) -> f64 {
        self.scores
            .get(model)
            .map_or(0.0, |&(s, t)| self.decayed(s, t, now))
    }

    /// Highest-scoring models, ties by name.
    pub fn top(&self, k: usize, now: Micros) -> Vec<String> {
        let mut v: Vec<(f64, &String)> = self
            .scores
            .keys()
            .map(|m| (self.score(m, now), m))
            .collect();
        v.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
        v.into_iter().take(k).map(|(_, m)| m.clone()).collect()
    }
}
