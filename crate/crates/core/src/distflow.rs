//! Tensor-transfer cost model over typed links.
//!
//! Transfers are fluid flows. Each flow occupies one or more physical links;
//! a physical link's bandwidth is split equally among the flows currently
//! draining through it and a flow progresses at the minimum share over its
//! links. Rates are piecewise constant and recomputed whenever a flow starts
//! draining or finishes. Every flow first spends its setup latency off the
//! link, then drains its bytes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::simkernel::Micros;

pub type EndpointId = u32;
pub type HostId = u32;
pub type GroupId = u32;
pub type TicketId = u64;

pub const GIB: f64 = 1024.0 * 1024.0 * 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkKind {
    Hccs,
    Roce,
    Pcie,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub kind: LinkKind,
    /// Unidirectional bandwidth in bytes per second.
    pub bandwidth: f64,
    pub base_latency_us: Micros,
}

impl LinkSpec {
    fn bytes_per_us(&self) -> f64 {
        self.bandwidth / 1e6
    }

    /// Uncontended duration of a `bytes` transfer, rounded up to whole microseconds.
    pub fn solo_duration_us(&self, bytes: u64) -> Micros {
        self.base_latency_us + (bytes as f64 / self.bytes_per_us()).ceil() as Micros
    }
}

/// Link specs for the three transfer media.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinkDefaults {
    pub hccs_bandwidth: f64,
    pub roce_bandwidth: f64,
    pub pcie_bandwidth: f64,
    pub base_latency_us: Micros,
}

impl Default for LinkDefaults {
    fn default() -> Self {
        LinkDefaults {
            hccs_bandwidth: 200e9,
            roce_bandwidth: 25e9,
            pcie_bandwidth: 32.0 * GIB,
            base_latency_us: 10,
        }
    }
}

impl LinkDefaults {
    pub fn spec(&self, kind: LinkKind) -> LinkSpec {
        let bandwidth = match kind {
            LinkKind::Hccs => self.hccs_bandwidth,
            LinkKind::Roce => self.roce_bandwidth,
            LinkKind::Pcie => self.pcie_bandwidth,
        };
        LinkSpec {
            kind,
            bandwidth,
            base_latency_us: self.base_latency_us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EndpointKind {
    Npu,
    Dram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: HostId,
    pub kind: EndpointKind,
}

/// A contended physical resource.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PhysLink {
    /// Host I/O bus shared by everything on the host.
    Pcie(HostId),
    /// Point-to-point link between two endpoints, one direction.
    Directed(LinkKind, EndpointId, EndpointId),
}

/// Hosts, their endpoints, and the rules that assign a link kind to each pair.
///
/// NPUs on the same host or in the same scale-up domain talk over HCCS,
/// everything else across hosts goes over RoCE, and DRAM to NPU on one host
/// crosses the host's PCIe bus. Host pairs can be overridden explicitly.
#[derive(Debug, Clone, Default)]
pub struct Topology {
    pub links: LinkDefaults,
    host_domains: Vec<u32>,
    endpoints: Vec<Endpoint>,
    overrides: BTreeMap<(HostId, HostId), LinkKind>,
}

impl Topology {
    pub fn new(links: LinkDefaults) -> Self {
        Topology {
            links,
            ..Default::default()
        }
    }

    pub fn add_host(&mut self, scaleup_domain: u32) -> HostId {
        self.host_domains.push(scaleup_domain);
        (self.host_domains.len() - 1) as HostId
    }

    pub fn add_endpoint(&mut self, host: HostId, kind: EndpointKind) -> EndpointId {
        assert!(
            (host as usize) < self.host_domains.len(),
            "unknown host {host}"
        );
        self.endpoints.push(Endpoint { host, kind });
        (self.endpoints.len() - 1) as EndpointId
    }

    pub fn set_host_pair_link(&mut self, a: HostId, b: HostId, kind: LinkKind) {
        self.overrides.insert((a.min(b), a.max(b)), kind);
    }

    pub fn endpoint(&self, id: EndpointId) -> Option<Endpoint> {
        self.endpoints.get(id as usize).copied()
    }

    pub fn hosts(&self) -> usize {
        self.host_domains.len()
    }

    pub fn host_domain(&self, host: HostId) -> Option<u32> {
        self.host_domains.get(host as usize).copied()
    }

    pub fn host_link_kind(&self, a: HostId, b: HostId) -> LinkKind {
        if a == b {
            return LinkKind::Hccs;
        }
        if let Some(k) = self.overrides.get(&(a.min(b), a.max(b))) {
            return *k;
        }
        if self.host_domains[a as usize] == self.host_domains[b as usize] {
            LinkKind::Hccs
        } else {
            LinkKind::Roce
        }
    }

    /// The link used between two endpoints and the physical resource it contends on.
    pub fn resolve(&self, src: EndpointId, dst: EndpointId) -> Option<(LinkSpec, PhysLink)> {
        let a = self.endpoint(src)?;
        let b = self.endpoint(dst)?;
        if src == dst {
            return None;
        }
        let same_host = a.host == b.host;
        let kind = match (a.kind, b.kind) {
            (EndpointKind::Dram, _) | (_, EndpointKind::Dram) if same_host => {
                return Some((self.links.spec(LinkKind::Pcie), PhysLink::Pcie(a.host)));
            }
            (EndpointKind::Npu, EndpointKind::Npu) => self.host_link_kind(a.host, b.host),
            _ => LinkKind::Roce,
        };
        Some((self.links.spec(kind), PhysLink::Directed(kind, src, dst)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DistFlowError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(EndpointId),
    #[error("a channel group needs at least two endpoints")]
    TooFewEndpoints,
    #[error("unknown channel group {0}")]
    UnknownGroup(GroupId),
    #[error("endpoint {0} is not a member of the channel group")]
    NotInGroup(EndpointId),
    #[error("no route between endpoints {0} and {1}")]
    NoRoute(EndpointId, EndpointId),
    #[error("transfer size must be positive")]
    ZeroBytes,
    #[error("broadcast needs at least one destination")]
    NoDestinations,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelGroup {
    pub id: GroupId,
    pub members: BTreeSet<EndpointId>,
    /// Link kind for every unordered member pair.
    pub pair_links: BTreeMap<(EndpointId, EndpointId), LinkKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferStatus {
    Pending,
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTicket {
    pub id: TicketId,
    pub bytes: u64,
    pub src: EndpointId,
    pub dsts: Vec<EndpointId>,
    pub started_at: Micros,
    /// Predicted completion under the current contention; exact once `Done`.
    pub completes_at: Micros,
    pub status: TransferStatus,
}

impl TransferTicket {
    pub fn duration_us(&self) -> Micros {
        self.completes_at - self.started_at
    }
}

#[derive(Debug, Clone)]
struct Flow {
    links: Vec<(PhysLink, f64)>,
    bytes: f64,
    remaining: f64,
    delivered: f64,
    setup_until: f64,
    active: bool,
    rate: f64,
}

/// Point-to-point and broadcast transfers with per-link fair sharing.
#[derive(Debug, Clone)]
pub struct DistFlow {
    topo: Topology,
    groups: Vec<ChannelGroup>,
    group_index: BTreeMap<Vec<EndpointId>, GroupId>,
    tickets: BTreeMap<TicketId, TransferTicket>,
    flows: BTreeMap<TicketId, Flow>,
    link_load: BTreeMap<PhysLink, u32>,
    now: f64,
    next_ticket: TicketId,
    finished: Vec<TicketId>,
}

impl DistFlow {
    pub fn new(topo: Topology) -> Self {
        DistFlow {
            topo,
            groups: Vec::new(),
            group_index: BTreeMap::new(),
            tickets: BTreeMap::new(),
            flows: BTreeMap::new(),
            link_load: BTreeMap::new(),
            now: 0.0,
            next_ticket: 0,
            finished: Vec::new(),
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    /// Establishes (or returns the existing) peer group over `endpoints`.
    pub fn link_cluster(&mut self, endpoints: &[EndpointId]) -> Result<GroupId, DistFlowError> {
        let members: BTreeSet<EndpointId> = endpoints.iter().copied().collect();
        if let Some(bad) = members.iter().find(|e| self.topo.endpoint(**e).is_none()) {
            return Err(DistFlowError::UnknownEndpoint(*bad));
        }
        if members.len() < 2 {
            return Err(DistFlowError::TooFewEndpoints);
        }
        let key: Vec<EndpointId> = members.iter().copied().collect();
        if let Some(id) = self.group_index.get(&key) {
            return Ok(*id);
        }
        let mut pair_links = BTreeMap::new();
        for (i, a) in key.iter().enumerate() {
            for b in &key[i + 1..] {
                let (spec, _) = self
                    .topo
                    .resolve(*a, *b)
                    .ok_or(DistFlowError::NoRoute(*a, *b))?;
                pair_links.insert((*a, *b), spec.kind);
            }
        }
        let id = self.groups.len() as GroupId;
        self.groups.push(ChannelGroup {
            id,
            members,
            pair_links,
        });
        self.group_index.insert(key, id);
        Ok(id)
    }

    pub fn group(&self, id: GroupId) -> Option<&ChannelGroup> {
        self.groups.get(id as usize)
    }

    fn check_members(&self, group: GroupId, eps: &[EndpointId]) -> Result<(), DistFlowError> {
        let g = self
            .group(group)
            .ok_or(DistFlowError::UnknownGroup(group))?;
        match eps.iter().find(|e| !g.members.contains(e)) {
            Some(e) => Err(DistFlowError::NotInGroup(*e)),
            None => Ok(()),
        }
    }

    /// Uncontended duration estimate for moving `bytes` from `src` to `dst`.
    pub fn estimate_us(&self, src: EndpointId, dst: EndpointId, bytes: u64) -> Option<Micros> {
        let (spec, _) = self.topo.resolve(src, dst)?;
        Some(spec.solo_duration_us(bytes))
    }

    pub fn transfer(
        &mut self,
        group: GroupId,
        src: EndpointId,
        dst: EndpointId,
        bytes: u64,
        now: Micros,
    ) -> Result<TransferTicket, DistFlowError> {
        self.check_members(group, &[src, dst])?;
        if bytes == 0 {
            return Err(DistFlowError::ZeroBytes);
        }
        let (spec, link) = self
            .topo
            .resolve(src, dst)
            .ok_or(DistFlowError::NoRoute(src, dst))?;
        Ok(self.start(
            vec![(link, spec)],
            spec.base_latency_us,
            src,
            vec![dst],
            bytes,
            now,
        ))
    }

    /// Tree broadcast: setup grows with `ceil(log2(k + 1))`, payload time is
    /// bound by the slowest involved link.
    pub fn broadcast(
        &mut self,
        group: GroupId,
        src: EndpointId,
        dsts: &[EndpointId],
        bytes: u64,
        now: Micros,
    ) -> Result<TransferTicket, DistFlowError> {
        if dsts.is_empty() {
            return Err(DistFlowError::NoDestinations);
        }
        let mut all = vec![src];
        all.extend_from_slice(dsts);
        self.check_members(group, &all)?;
        if bytes == 0 {
            return Err(DistFlowError::ZeroBytes);
        }
        let mut links = Vec::with_capacity(dsts.len());
        let mut latency = 0;
        for &d in dsts {
            let (spec, link) = self
                .topo
                .resolve(src, d)
                .ok_or(DistFlowError::NoRoute(src, d))?;
            latency = latency.max(spec.base_latency_us);
            links.push((link, spec));
        }
        let depth = (dsts.len() as f64 + 1.0).log2().ceil() as Micros;
        Ok(self.start(links, latency * depth, src, dsts.to_vec(), bytes, now))
    }

    fn start(
        &mut self,
        links: Vec<(PhysLink, LinkSpec)>,
        setup_us: Micros,
        src: EndpointId,
        dsts: Vec<EndpointId>,
        bytes: u64,
        now: Micros,
    ) -> TransferTicket {
        self.advance_internal(now as f64);
        let id = self.next_ticket;
        self.next_ticket += 1;
        let mut links: Vec<(PhysLink, f64)> = links
            .into_iter()
            .map(|(l, s)| (l, s.bytes_per_us()))
            .collect();
        links.sort_by_key(|a| a.0);
        links.dedup_by(|a, b| a.0 == b.0);
        let flow = Flow {
            links,
            bytes: bytes as f64,
            remaining: bytes as f64,
            delivered: 0.0,
            setup_until: now as f64 + setup_us as f64,
            active: false,
            rate: 0.0,
        };
        self.flows.insert(id, flow);
        self.tickets.insert(
            id,
            TransferTicket {
                id,
                bytes,
                src,
                dsts,
                started_at: now,
                completes_at: now,
                status: TransferStatus::Pending,
            },
        );
        // A zero-latency flow joins its links immediately.
        self.activate_due();
        self.recompute_rates();
        self.tickets[&id].clone()
    }

    pub fn ticket(&self, id: TicketId) -> Option<&TransferTicket> {
        self.tickets.get(&id)
    }

    pub fn status(&self, id: TicketId) -> Option<TransferStatus> {
        self.tickets.get(&id).map(|t| t.status)
    }

    pub fn in_flight(&self) -> usize {
        self.flows.len()
    }

    /// Bytes delivered so far by a pending flow (integral of its rate).
    pub fn delivered_bytes(&self, id: TicketId) -> Option<f64> {
        self.flows.get(&id).map(|f| f.delivered)
    }

    /// Earliest microsecond at which some flow changes phase or finishes.
    pub fn next_event_time(&self) -> Option<Micros> {
        self.next_change().map(|t| t.ceil() as Micros)
    }

    /// Advances fabric time to `t` and returns the transfers completed since
    /// the previous call, in completion order.
    pub fn advance_to(&mut self, t: Micros) -> Vec<TicketId> {
        self.advance_internal(t as f64);
        std::mem::take(&mut self.finished)
    }

    fn next_change(&self) -> Option<f64> {
        self.flows
            .values()
            .map(|f| {
                if f.active {
                    self.now + f.remaining / f.rate
                } else {
                    f.setup_until
                }
            })
            .min_by(f64::total_cmp)
    }

    fn advance_internal(&mut self, t: f64) {
        if t <= self.now {
            return;
        }
        loop {
            let Some(tc) = self.next_change() else {
                self.now = t;
                return;
            };
            let target = tc.min(t);
            let dt = target - self.now;
            for f in self.flows.values_mut().filter(|f| f.active) {
                let moved = (f.rate * dt).min(f.remaining);
                f.remaining -= moved;
                f.delivered += moved;
            }
            self.now = target;
            if tc > t {
                return;
            }
            self.complete_due(tc);
            self.activate_due();
            self.recompute_rates();
        }
    }

    fn complete_due(&mut self, tc: f64) {
        let now = self.now;
        let done: Vec<TicketId> = self
            .flows
            .iter()
            .filter(|(_, f)| {
                f.active
                    && (f.remaining <= 1e-6 * f.bytes.max(1.0)
                        || now + f.remaining / f.rate <= tc + 1e-9)
            })
            .map(|(id, _)| *id)
            .collect();
        for id in done {
            let f = self.flows.remove(&id).expect("flow");
            for (l, _) in &f.links {
                let n = self.link_load.get_mut(l).expect("loaded link");
                *n -= 1;
                if *n == 0 {
                    self.link_load.remove(l);
                }
            }
            let ticket = self.tickets.get_mut(&id).expect("ticket");
            ticket.status = TransferStatus::Done;
            ticket.completes_at = now.ceil() as Micros;
            debug_assert!((f.delivered + f.remaining - f.bytes).abs() <= 1e-6 * f.bytes.max(1.0));
            self.finished.push(id);
        }
    }

    fn activate_due(&mut self) {
        let now = self.now;
        for f in self.flows.values_mut() {
            if !f.active && f.setup_until <= now + 1e-9 {
                f.active = true;
                for (l, _) in &f.links {
                    *self.link_load.entry(*l).or_insert(0) += 1;
                }
            }
        }
    }

    fn recompute_rates(&mut self) {
        let now = self.now;
        for (id, f) in self.flows.iter_mut() {
            if f.active {
                f.rate = f
                    .links
                    .iter()
                    .map(|(l, bw)| bw / self.link_load[l] as f64)
                    .fold(f64::INFINITY, f64::min);
            }
            let eta = if f.active {
                now + f.remaining / f.rate
            } else {
                let solo = f
                    .links
                    .iter()
                    .map(|(_, bw)| *bw)
                    .fold(f64::INFINITY, f64::min);
                f.setup_until + f.remaining / solo
            };
            if let Some(t) = self.tickets.get_mut(id) {
                t.completes_at = eta.ceil() as Micros;
            }
        }
    }
}
