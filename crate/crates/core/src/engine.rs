//! Simulated serving engine: continuous batching over an analytical cost
//! model, chunked prefill, prefix reuse through the block cache, and the
//! prefill side of disaggregated KV handoff.
//!
//! The engine is a state machine. The caller starts an iteration, schedules
//! a wake-up after the returned wall time, and then completes it; tokens are
//! emitted at iteration end.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distflow::DistFlow;
use crate::rtc::{
    BlockId, FabricRoute, MatchResult, PopulateId, PopulateStatus, Rtc, RtcConfig, RtcError, SeqId,
    Tier,
};
use crate::simkernel::Micros;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineMode {
    PrefillOnly,
    DecodeOnly,
    Colocated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandoffMode {
    ByRequest,
    /// KV streams layer by layer while prefill runs; only a fraction of the
    /// transfer remains exposed.
    ByLayer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    PreWarmed,
    Loading,
    Ready,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub mode: EngineMode,
    pub tp_degree: u32,
    pub block_size: usize,
    pub npu_blocks_capacity: u32,
    pub dram_blocks_capacity: u32,
    /// Prefill cost per token, in microseconds.
    pub a_p: f64,
    /// Fixed cost of an iteration that carries prefill work.
    pub b_p: f64,
    /// Decode cost per sequence.
    pub a_d: f64,
    /// Decode cost per KV block read.
    pub c_d: f64,
    /// Fixed cost of an iteration that carries decode work.
    pub b_d: f64,
    pub chunk_size: u32,
    pub max_batch_tokens: u32,
    pub max_running_seqs: u32,
    pub sched_overhead_us: Micros,
    pub async_sched: bool,
    pub kv_bytes_per_token: u64,
    /// Preempt by swapping KV to DRAM instead of dropping and recomputing.
    pub preempt_swap: bool,
    /// Host link bandwidth used to cost swap traffic, bytes per second.
    pub swap_bandwidth: f64,
    pub handoff: HandoffMode,
    /// Exposed share of the handoff transfer under `ByLayer`, in (0, 1].
    pub layer_overlap: f64,
    pub prefix_caching: bool,
    pub demote_on_evict: bool,
    pub log_iterations: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            mode: EngineMode::Colocated,
            tp_degree: 4,
            block_size: 16,
            npu_blocks_capacity: 16384,
            dram_blocks_capacity: 65536,
            a_p: 120.0,
            b_p: 4000.0,
            a_d: 50.0,
            c_d: 1.2,
            b_d: 17000.0,
            chunk_size: 512,
            max_batch_tokens: 8192,
            max_running_seqs: 256,
            sched_overhead_us: 0,
            async_sched: true,
            kv_bytes_per_token: 160 * 1024,
            preempt_swap: false,
            swap_bandwidth: 32.0 * crate::distflow::GIB,
            handoff: HandoffMode::ByRequest,
            layer_overlap: 0.25,
            prefix_caching: true,
            demote_on_evict: false,
            log_iterations: false,
        }
    }
}

impl EngineConfig {
    pub fn with_mode(mode: EngineMode) -> Self {
        let mut cfg = EngineConfig {
            mode,
            ..Default::default()
        };
        if mode == EngineMode::PrefillOnly {
            // A dedicated prefill engine has no decodes to protect.
            cfg.chunk_size = cfg.max_batch_tokens;
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), String> {
        let coeffs = [self.a_p, self.b_p, self.a_d, self.c_d, self.b_d];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err("cost coefficients must be finite and non-negative".into());
        }
        if self.block_size == 0 || self.chunk_size == 0 || self.max_running_seqs == 0 {
            return Err("block_size, chunk_size and max_running_seqs must be positive".into());
        }
        if self.chunk_size > self.max_batch_tokens {
            return Err(format!(
                "chunk_size {} exceeds max_batch_tokens {}",
                self.chunk_size, self.max_batch_tokens
            ));
        }
        if !(self.layer_overlap > 0.0 && self.layer_overlap <= 1.0) {
            return Err("layer_overlap must be in (0, 1]".into());
        }
        if self.swap_bandwidth <= 0.0 || self.npu_blocks_capacity == 0 {
            return Err("swap_bandwidth and npu_blocks_capacity must be positive".into());
        }
        Ok(())
    }

    /// Compute time of one iteration, in microseconds.
    pub fn iteration_cost(&self, prefill_tokens: u64, decode_seqs: u64, kv_blocks: u64) -> f64 {
        let mut d = 0.0;
        if prefill_tokens > 0 {
            d += self.b_p + self.a_p * prefill_tokens as f64;
        }
        if decode_seqs > 0 {
            d += self.b_d + self.a_d * decode_seqs as f64 + self.c_d * kv_blocks as f64;
        }
        d
    }

    /// Wall time of an iteration with compute time `d`: scheduling overlaps
    /// execution when asynchronous and adds to it otherwise.
    pub fn wall_time(&self, d: Micros) -> Micros {
        let s = self.sched_overhead_us;
        let w = if self.async_sched { d.max(s) } else { d + s };
        w.max(1)
    }

    pub fn block_bytes(&self) -> u64 {
        self.kv_bytes_per_token * self.block_size as u64
    }

    /// Bytes put on the wire to hand a prefilled prompt to a decode engine.
    pub fn handoff_bytes(&self, prompt_tokens: u32) -> u64 {
        let full = prompt_tokens as u64 * self.kv_bytes_per_token;
        match self.handoff {
            HandoffMode::ByRequest => full,
            HandoffMode::ByLayer => ((full as f64 * self.layer_overlap).ceil() as u64).max(1),
        }
    }

    pub fn rtc_config(&self) -> RtcConfig {
        RtcConfig {
            block_size: self.block_size,
            npu_blocks: self.npu_blocks_capacity,
            dram_blocks: self.dram_blocks_capacity,
            demote_on_evict: self.demote_on_evict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("engine {0} is not ready")]
    NotReady(u32),
    #[error("engine mode {0:?} does not accept this work")]
    WrongMode(EngineMode),
    #[error("no KV capacity for the incoming sequence")]
    CapacityExhausted,
    #[error("unknown sequence {0}")]
    UnknownSeq(SeqId),
    #[error(transparent)]
    Rtc(#[from] RtcError),
}

/// Work handed to an engine.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineRequest {
    /// Caller-side index used in emitted events.
    pub req: usize,
    pub prompt: Arc<[u32]>,
    /// Tokens this engine emits before the sequence is finished.
    pub decode_len: u32,
    pub priority: u8,
    pub arrival_us: Micros,
    pub context_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Ready {
        cached_tokens: u32,
    },
    /// Waiting on a cache fetch into NPU memory.
    Parked {
        populate: PopulateId,
        completes_at: Micros,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EngineEvent {
    Token {
        req: usize,
        seq: SeqId,
        at: Micros,
    },
    Finished {
        req: usize,
        seq: SeqId,
        at: Micros,
    },
    /// Prefill-only engine: first token out, KV ready to hand off.
    PrefillDone {
        req: usize,
        seq: SeqId,
        at: Micros,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IterationPlan {
    pub decode: Vec<SeqId>,
    /// (sequence, first token position, token count)
    pub chunks: Vec<(SeqId, u32, u32)>,
    pub kv_blocks: u64,
    pub preempted: Vec<SeqId>,
    pub duration_us: Micros,
}

impl IterationPlan {
    pub fn is_empty(&self) -> bool {
        self.decode.is_empty() && self.chunks.is_empty()
    }

    pub fn prefill_tokens(&self) -> u64 {
        self.chunks.iter().map(|c| c.2 as u64).sum()
    }

    pub fn batch_tokens(&self) -> u64 {
        self.prefill_tokens() + self.decode.len() as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IterationLog {
    pub start_us: Micros,
    pub wall_us: Micros,
    pub decode_seqs: u32,
    pub prefill_tokens: u32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EngineStats {
    pub iterations: u64,
    pub busy_us: Micros,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub cached_tokens: u64,
    pub preemptions: u64,
    pub populates: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EngineLoad {
    pub queued_tokens: u64,
    pub running_tokens: u64,
}

impl EngineLoad {
    pub fn total(&self) -> u64 {
        self.queued_tokens + self.running_tokens
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Waiting,
    Parked,
    /// Decode side of a handoff: KV reserved, transfer in flight.
    Incoming,
    Running,
    AwaitingHandoff,
}

#[derive(Debug, Clone)]
struct Seq {
    req: usize,
    prompt: Arc<[u32]>,
    decode_len: u32,
    priority: u8,
    arrival_us: Micros,
    context_id: Option<String>,
    blocks: Vec<BlockId>,
    swapped: Vec<BlockId>,
    computed: u32,
    prefill_target: u32,
    emitted: u32,
    phase: Phase,
}

impl Seq {
    fn key(&self, id: SeqId) -> (u8, Micros, SeqId) {
        (self.priority, self.arrival_us, id)
    }

    fn prompt_len(&self) -> u32 {
        self.prompt.len() as u32
    }

    fn in_prefill(&self) -> bool {
        self.computed < self.prefill_target
    }
}

#[derive(Debug, Clone)]
struct InFlight {
    started: Micros,
    plan: IterationPlan,
}

#[derive(Debug, Clone)]
pub struct Engine {
    pub id: u32,
    cfg: EngineConfig,
    rtc: Rtc,
    lifecycle: Lifecycle,
    seqs: BTreeMap<SeqId, Seq>,
    waiting: BTreeSet<(u8, Micros, SeqId)>,
    running: BTreeSet<(u8, Micros, SeqId)>,
    parked: BTreeMap<PopulateId, SeqId>,
    in_flight: Option<InFlight>,
    next_seq: SeqId,
    slowdown: f64,
    swap_penalty_us: f64,
    populate_route: Option<FabricRoute>,
    stats: EngineStats,
    log: Vec<IterationLog>,
}

impl Engine {
    pub fn new(id: u32, cfg: EngineConfig) -> Self {
        let rtc = Rtc::new(cfg.rtc_config());
        Engine {
            id,
            cfg,
            rtc,
            lifecycle: Lifecycle::Ready,
            seqs: BTreeMap::new(),
            waiting: BTreeSet::new(),
            running: BTreeSet::new(),
            parked: BTreeMap::new(),
            in_flight: None,
            next_seq: 0,
            slowdown: 1.0,
            swap_penalty_us: 0.0,
            populate_route: None,
            stats: EngineStats::default(),
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn mode(&self) -> EngineMode {
        self.cfg.mode
    }

    pub fn rtc(&self) -> &Rtc {
        &self.rtc
    }

    pub fn rtc_mut(&mut self) -> &mut Rtc {
        &mut self.rtc
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.lifecycle
    }

    pub fn set_lifecycle(&mut self, l: Lifecycle) {
        self.lifecycle = l;
    }

    pub fn stats(&self) -> EngineStats {
        self.stats
    }

    pub fn iteration_log(&self) -> &[IterationLog] {
        &self.log
    }

    /// Multiplier on iteration compute time, e.g. while serving as a fork source.
    pub fn set_slowdown(&mut self, factor: f64) {
        self.slowdown = factor.max(0.0);
    }

    pub fn set_populate_route(&mut self, route: FabricRoute) {
        self.populate_route = Some(route);
    }

    pub fn is_busy(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn has_schedulable_work(&self) -> bool {
        !self.running.is_empty() || !self.waiting.is_empty()
    }

    pub fn active_sequences(&self) -> usize {
        self.seqs.len()
    }

    pub fn load(&self) -> EngineLoad {
        let mut l = EngineLoad::default();
        for s in self.seqs.values() {
            match s.phase {
                Phase::Waiting | Phase::Parked => {
                    l.queued_tokens += (s.prefill_target - s.computed) as u64;
                }
                Phase::Running | Phase::Incoming => l.running_tokens += s.computed as u64,
                Phase::AwaitingHandoff => {}
            }
        }
        l
    }

    fn check_ready(&self) -> Result<(), EngineError> {
        if self.lifecycle == Lifecycle::Ready {
            Ok(())
        } else {
            Err(EngineError::NotReady(self.id))
        }
    }

    fn new_seq(&mut self, r: EngineRequest, phase: Phase) -> SeqId {
        let id = self.next_seq;
        self.next_seq += 1;
        let prompt_len = r.prompt.len() as u32;
        self.seqs.insert(
            id,
            Seq {
                req: r.req,
                prompt: r.prompt,
                decode_len: r.decode_len.max(1),
                priority: r.priority,
                arrival_us: r.arrival_us,
                context_id: r.context_id,
                blocks: Vec::new(),
                swapped: Vec::new(),
                computed: 0,
                prefill_target: prompt_len,
                emitted: 0,
                phase,
            },
        );
        id
    }

    fn make_waiting(&mut self, id: SeqId) {
        let s = self.seqs.get_mut(&id).expect("seq");
        s.phase = Phase::Waiting;
        self.waiting.insert(s.key(id));
    }

    /// Best reusable prefix for `prompt`, capped so at least one token is
    /// left to compute. A context id only pins its last sequence in the
    /// cache: the pinned path lives in the same index, so any part of it that
    /// is a prefix of `prompt` is found by the prefix walk, and the rest
    /// holds other tokens.
    fn lookup(&mut self, prompt: &[u32], now: Micros) -> MatchResult {
        if !self.cfg.prefix_caching {
            return MatchResult::empty();
        }
        let m = self.rtc.match_by_prefix_tokens(prompt, now);
        let cap = (prompt.len() - 1) / self.cfg.block_size;
        m.truncated(cap, self.cfg.block_size)
    }

    fn attach_prefix(
        &mut self,
        id: SeqId,
        m: &MatchResult,
        now: Micros,
    ) -> Result<u32, EngineError> {
        let blocks: Vec<BlockId> = m.blocks.iter().map(|(b, _)| *b).collect();
        self.rtc.acquire(&blocks, now)?;
        let s = self.seqs.get_mut(&id).expect("seq");
        s.blocks = blocks;
        s.computed = m.matched_token_count;
        self.stats.cached_tokens += m.matched_token_count as u64;
        Ok(m.matched_token_count)
    }

    /// Admits a request for prefill. Reuses cached KV when it pays off: an
    /// off-NPU prefix is fetched only if moving it is estimated to be faster
    /// than recomputing it.
    pub fn enqueue(
        &mut self,
        r: EngineRequest,
        now: Micros,
        fabric: &mut DistFlow,
    ) -> Result<(SeqId, Admission), EngineError> {
        self.check_ready()?;
        if self.cfg.mode == EngineMode::DecodeOnly {
            return Err(EngineError::WrongMode(self.cfg.mode));
        }
        assert!(!r.prompt.is_empty(), "empty prompt");
        let prompt = r.prompt.clone();
        let id = self.new_seq(r, Phase::Waiting);
        let m = self.lookup(&prompt, now);
        if m.off_npu_blocks() > 0 {
            if let Some(route) = self.populate_route {
                let bytes = m.off_npu_blocks() as u64 * route.bytes_per_block;
                let fetch = fabric
                    .estimate_us(route.src, route.dst, bytes)
                    .unwrap_or(Micros::MAX);
                let recompute = self.cfg.a_p * m.matched_token_count as f64;
                if (fetch as f64) < recompute {
                    if let Ok(t) = self.rtc.populate(&m, fabric, route, now) {
                        self.stats.populates += 1;
                        if t.status == PopulateStatus::Pending {
                            self.seqs.get_mut(&id).expect("seq").phase = Phase::Parked;
                            self.parked.insert(t.id, id);
                            return Ok((
                                id,
                                Admission::Parked {
                                    populate: t.id,
                                    completes_at: t.completes_at,
                                },
                            ));
                        }
                    }
                }
            }
        }
        let use_now = self.lookup(&prompt, now).npu_prefix(self.cfg.block_size);
        let cached_tokens = self.attach_prefix(id, &use_now, now)?;
        self.make_waiting(id);
        Ok((id, Admission::Ready { cached_tokens }))
    }

    /// Finishes a parked admission once its fetch is over. Returns the
    /// sequence, its request index and the prefix tokens it reuses.
    pub fn on_populate(
        &mut self,
        populate: PopulateId,
        fabric: &DistFlow,
        now: Micros,
    ) -> Result<Option<(SeqId, usize, u32)>, EngineError> {
        let status = self.rtc.query_populate(populate, fabric, now)?;
        if status == PopulateStatus::Pending {
            return Ok(None);
        }
        let Some(id) = self.parked.remove(&populate) else {
            return Ok(None);
        };
        let (prompt, req) = {
            let s = &self.seqs[&id];
            (s.prompt.clone(), s.req)
        };
        let m = self.lookup(&prompt, now).npu_prefix(self.cfg.block_size);
        let cached = self.attach_prefix(id, &m, now)?;
        self.make_waiting(id);
        Ok(Some((id, req, cached)))
    }

    /// Decode side of a handoff: reserves KV blocks for the prompt. The
    /// sequence becomes schedulable after `activate_decode`.
    pub fn admit_decode(&mut self, r: EngineRequest, now: Micros) -> Result<SeqId, EngineError> {
        self.check_ready()?;
        if self.cfg.mode != EngineMode::DecodeOnly {
            return Err(EngineError::WrongMode(self.cfg.mode));
        }
        let need = r.prompt.len().div_ceil(self.cfg.block_size);
        let blocks = match self.rtc.alloc_blocks(need, now) {
            Ok(b) => b,
            Err(RtcError::OutOfMemory { .. }) => return Err(EngineError::CapacityExhausted),
            Err(e) => return Err(e.into()),
        };
        let id = self.new_seq(r, Phase::Incoming);
        let s = self.seqs.get_mut(&id).expect("seq");
        s.blocks = blocks;
        s.computed = s.prompt_len();
        s.emitted = 1;
        Ok(id)
    }

    /// KV for an incoming sequence has landed; it joins the decode batch.
    pub fn activate_decode(&mut self, id: SeqId) -> Result<(), EngineError> {
        let s = self.seqs.get_mut(&id).ok_or(EngineError::UnknownSeq(id))?;
        s.phase = Phase::Running;
        let key = s.key(id);
        self.running.insert(key);
        Ok(())
    }

    /// Bytes of KV the prefill engine ships for `id`.
    pub fn handoff_bytes(&self, id: SeqId) -> Option<u64> {
        self.seqs
            .get(&id)
            .map(|s| self.cfg.handoff_bytes(s.prompt_len()))
    }

    /// Prefill side of a handoff is over: index the prompt and let go of its blocks.
    pub fn finish_handoff(&mut self, id: SeqId, now: Micros) -> Result<(), EngineError> {
        let s = self.seqs.remove(&id).ok_or(EngineError::UnknownSeq(id))?;
        self.retire(s, now)
    }

    fn retire(&mut self, s: Seq, now: Micros) -> Result<(), EngineError> {
        if self.cfg.prefix_caching && self.cfg.mode != EngineMode::DecodeOnly {
            let n = s.prompt.len().div_ceil(self.cfg.block_size);
            if s.blocks.len() >= n {
                self.rtc
                    .commit_prefix(&s.prompt, &s.blocks[..n], s.context_id.as_deref(), now)?;
            }
        }
        self.rtc.release(&s.blocks, now)?;
        self.rtc.release(&s.swapped, now)?;
        Ok(())
    }

    /// Moves a sequence's KV to `tier`, holding references on the copies.
    fn move_blocks(
        &mut self,
        blocks: &[BlockId],
        tier: Tier,
        now: Micros,
    ) -> Result<Vec<BlockId>, RtcError> {
        let copies = self.rtc.copy(blocks, tier, now)?;
        let indexed: Vec<BlockId> = copies
            .iter()
            .copied()
            .filter(|b| self.rtc.block(*b).is_some_and(|x| x.node.is_some()))
            .collect();
        self.rtc.acquire(&indexed, now)?;
        self.rtc.release(blocks, now)?;
        let bytes = (blocks.len() as u64 * self.cfg.block_bytes()) as f64;
        self.swap_penalty_us += bytes / self.cfg.swap_bandwidth * 1e6;
        Ok(copies)
    }

    fn preempt(&mut self, id: SeqId, now: Micros) {
        let key = self.seqs[&id].key(id);
        self.running.remove(&key);
        let blocks = std::mem::take(&mut self.seqs.get_mut(&id).expect("seq").blocks);
        let swapped = if self.cfg.preempt_swap {
            self.move_blocks(&blocks, Tier::Dram, now).ok()
        } else {
            None
        };
        let s = self.seqs.get_mut(&id).expect("seq");
        match swapped {
            Some(dram) => s.swapped = dram,
            None => {
                self.rtc.release(&blocks, now).expect("held blocks");
                let s = self.seqs.get_mut(&id).expect("seq");
                s.computed = 0;
                s.prefill_target = s.prompt_len() + s.emitted;
            }
        }
        self.stats.preemptions += 1;
        self.make_waiting(id);
    }

    /// Grows `id`'s block table to cover `tokens`, preempting lower-ranked
    /// unplanned sequences if memory runs out. `allow_self` lets the
    /// sequence itself be the victim. Returns false if `id` cannot proceed
    /// (and was preempted when `allow_self`).
    fn ensure_blocks(
        &mut self,
        id: SeqId,
        tokens: u32,
        planned: &BTreeSet<SeqId>,
        plan: &mut IterationPlan,
        allow_self: bool,
        now: Micros,
    ) -> bool {
        let bs = self.cfg.block_size;
        loop {
            let s = &self.seqs[&id];
            if s.blocks.len() * bs >= tokens as usize {
                return true;
            }
            match self.rtc.append_block(id, now) {
                Ok(b) => {
                    self.seqs.get_mut(&id).expect("seq").blocks.push(b);
                    continue;
                }
                Err(_) => {
                    let me = s.key(id);
                    let victim = self
                        .running
                        .iter()
                        .rev()
                        .find(|k| k.2 != id && !planned.contains(&k.2))
                        .copied();
                    match victim {
                        Some(v) if v > me => {
                            self.preempt(v.2, now);
                            plan.preempted.push(v.2);
                        }
                        _ => {
                            if allow_self && self.running.contains(&me) {
                                self.preempt(id, now);
                                plan.preempted.push(id);
                            }
                            return false;
                        }
                    }
                }
            }
        }
    }

    /// Builds the next batch: decodes first in priority order, then prefill
    /// chunks for running sequences, then for waiting ones.
    pub fn plan_iteration(&mut self, now: Micros) -> IterationPlan {
        let mut plan = IterationPlan::default();
        if self.lifecycle != Lifecycle::Ready {
            return plan;
        }
        let bs = self.cfg.block_size as u32;
        let mut budget = self.cfg.max_batch_tokens as u64;
        let mut planned = BTreeSet::new();

        let order: Vec<(u8, Micros, SeqId)> = self.running.iter().copied().collect();
        for key in &order {
            let id = key.2;
            if budget == 0 {
                break;
            }
            if !self.running.contains(key) || self.seqs[&id].in_prefill() {
                continue;
            }
            let need = self.seqs[&id].computed + 1;
            if !self.ensure_blocks(id, need, &planned, &mut plan, true, now) {
                continue;
            }
            planned.insert(id);
            plan.decode.push(id);
            plan.kv_blocks += need.div_ceil(bs) as u64;
            budget -= 1;
        }

        for key in &order {
            let id = key.2;
            if budget == 0 {
                break;
            }
            if !self.running.contains(key) || !self.seqs[&id].in_prefill() {
                continue;
            }
            let s = &self.seqs[&id];
            let c = (self.cfg.chunk_size as u64)
                .min((s.prefill_target - s.computed) as u64)
                .min(budget) as u32;
            let start = s.computed;
            if !self.ensure_blocks(id, start + c, &planned, &mut plan, false, now) {
                continue;
            }
            planned.insert(id);
            plan.chunks.push((id, start, c));
            budget -= c as u64;
        }

        let waiting: Vec<(u8, Micros, SeqId)> = self.waiting.iter().copied().collect();
        for key in waiting {
            if budget == 0 || self.running.len() >= self.cfg.max_running_seqs as usize {
                break;
            }
            let id = key.2;
            if !self.seqs[&id].swapped.is_empty() {
                let dram = self.seqs[&id].swapped.clone();
                match self.move_blocks(&dram, Tier::Npu, now) {
                    Ok(npu) => {
                        let s = self.seqs.get_mut(&id).expect("seq");
                        s.blocks = npu;
                        s.swapped.clear();
                    }
                    Err(_) => break,
                }
                self.waiting.remove(&key);
                self.seqs.get_mut(&id).expect("seq").phase = Phase::Running;
                self.running.insert(key);
                if !self.seqs[&id].in_prefill() {
                    let need = self.seqs[&id].computed + 1;
                    if self.ensure_blocks(id, need, &planned, &mut plan, false, now) {
                        planned.insert(id);
                        plan.decode.push(id);
                        plan.kv_blocks += need.div_ceil(bs) as u64;
                        budget -= 1;
                    }
                    continue;
                }
            }
            let s = &self.seqs[&id];
            let c = (self.cfg.chunk_size as u64)
                .min((s.prefill_target - s.computed) as u64)
                .min(budget) as u32;
            let start = s.computed;
            let mut fresh = Vec::new();
            let need = ((start + c) as usize)
                .div_ceil(bs as usize)
                .saturating_sub(s.blocks.len());
            if need > 0 {
                match self.rtc.alloc_blocks(need, now) {
                    Ok(b) => fresh = b,
                    Err(_) => break,
                }
            }
            self.waiting.remove(&key);
            let s = self.seqs.get_mut(&id).expect("seq");
            s.blocks.extend(fresh);
            s.phase = Phase::Running;
            self.running.insert(key);
            planned.insert(id);
            plan.chunks.push((id, start, c));
            budget -= c as u64;
        }

        let d = self.cfg.iteration_cost(
            plan.prefill_tokens(),
            plan.decode.len() as u64,
            plan.kv_blocks,
        );
        let d = d * self.slowdown + std::mem::take(&mut self.swap_penalty_us);
        plan.duration_us = d.round() as Micros;
        plan
    }

    /// Plans and starts an iteration. Returns its wall time, or `None` when
    /// there is nothing to run.
    pub fn start_iteration(&mut self, now: Micros) -> Option<Micros> {
        assert!(
            self.in_flight.is_none(),
            "engine {} already running an iteration",
            self.id
        );
        let plan = self.plan_iteration(now);
        if plan.is_empty() {
            return None;
        }
        let wall = self.cfg.wall_time(plan.duration_us);
        self.stats.iterations += 1;
        self.stats.busy_us += wall;
        if self.cfg.log_iterations {
            self.log.push(IterationLog {
                start_us: now,
                wall_us: wall,
                decode_seqs: plan.decode.len() as u32,
                prefill_tokens: plan.prefill_tokens() as u32,
            });
        }
        self.in_flight = Some(InFlight { started: now, plan });
        Some(wall)
    }

    /// Applies the finished iteration and returns what it produced.
    pub fn complete_iteration(&mut self, now: Micros) -> Vec<EngineEvent> {
        let Some(it) = self.in_flight.take() else {
            return Vec::new();
        };
        debug_assert!(now > it.started);
        let mut events = Vec::new();
        let mut emit: Vec<SeqId> = Vec::new();
        for id in &it.plan.decode {
            if let Some(s) = self.seqs.get_mut(id) {
                s.computed += 1;
                self.stats.decode_tokens += 1;
                emit.push(*id);
            }
        }
        for &(id, _, c) in &it.plan.chunks {
            if let Some(s) = self.seqs.get_mut(&id) {
                s.computed += c;
                self.stats.prefill_tokens += c as u64;
                if !s.in_prefill() {
                    emit.push(id);
                }
            }
        }
        emit.sort_unstable();
        for id in emit {
            let s = self.seqs.get_mut(&id).expect("seq");
            s.emitted += 1;
            let req = s.req;
            events.push(EngineEvent::Token {
                req,
                seq: id,
                at: now,
            });
            let key = s.key(id);
            if self.cfg.mode == EngineMode::PrefillOnly {
                s.phase = Phase::AwaitingHandoff;
                self.running.remove(&key);
                events.push(EngineEvent::PrefillDone {
                    req,
                    seq: id,
                    at: now,
                });
            } else if s.emitted >= s.decode_len {
                self.running.remove(&key);
                let s = self.seqs.remove(&id).expect("seq");
                self.retire(s, now)
                    .expect("finished sequence holds its blocks");
                events.push(EngineEvent::Finished {
                    req,
                    seq: id,
                    at: now,
                });
            }
        }
        events
    }

    /// Marks the engine failed and drops everything on it. Returns the
    /// request indices that were lost.
    pub fn fail(&mut self) -> Vec<usize> {
        self.lifecycle = Lifecycle::Failed;
        self.in_flight = None;
        self.waiting.clear();
        self.running.clear();
        self.parked.clear();
        let lost = self.seqs.values().map(|s| s.req).collect();
        self.seqs.clear();
        lost
    }

    /// Request indices of sequences currently on this engine.
    pub fn requests(&self) -> Vec<usize> {
        self.seqs.values().map(|s| s.req).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distflow::{EndpointKind, LinkDefaults, Topology};

    fn fabric() -> (DistFlow, FabricRoute) {
        let mut topo = Topology::new(LinkDefaults::default());
        let h = topo.add_host(0);
        let dram = topo.add_endpoint(h, EndpointKind::Dram);
        let npu = topo.add_endpoint(h, EndpointKind::Npu);
        let mut f = DistFlow::new(topo);
        let group = f.link_cluster(&[dram, npu]).unwrap();
        (
            f,
            FabricRoute {
                group,
                src: dram,
                dst: npu,
                bytes_per_block: 0,
            },
        )
    }

    fn req(i: usize, prompt: Vec<u32>, decode: u32) -> EngineRequest {
        EngineRequest {
            req: i,
            prompt: prompt.into(),
            decode_len: decode,
            priority: 0,
            arrival_us: i as Micros,
            context_id: None,
        }
    }

    fn run_to_idle(e: &mut Engine, mut now: Micros) -> (Micros, Vec<EngineEvent>) {
        let mut all = Vec::new();
        while let Some(w) = e.start_iteration(now) {
            now += w;
            all.extend(e.complete_iteration(now));
        }
        (now, all)
    }

    #[test]
    fn defaults_match_calibration_targets() {
        let c = EngineConfig::default();
        let prefill_2k = c.iteration_cost(2048, 0, 0);
        assert!((prefill_2k - 250_000.0).abs() < 5_000.0, "{prefill_2k}");
        // 64 sequences with ~2.1K context each.
        let decode_64 = c.iteration_cost(0, 64, 64 * 135);
        assert!((decode_64 - 30_000.0).abs() < 2_000.0, "{decode_64}");
        c.validate().unwrap();
    }

    #[test]
    fn async_and_sync_wall_time() {
        let mut c = EngineConfig {
            sched_overhead_us: 300,
            ..Default::default()
        };
        assert_eq!(c.wall_time(1000), 1000);
        c.async_sched = false;
        assert_eq!(c.wall_time(1000), 1300);
        c.sched_overhead_us = 0;
        assert_eq!(c.wall_time(1000), 1000);
    }

    #[test]
    fn handoff_bytes_by_request_and_by_layer() {
        let mut c = EngineConfig::default();
        assert_eq!(c.handoff_bytes(2048), 320 << 20);
        c.handoff = HandoffMode::ByLayer;
        assert_eq!(c.handoff_bytes(2048), 80 << 20);
    }

    #[test]
    fn no_cached_prefix_is_ready() {
        let (mut f, route) = fabric();
        let mut e = Engine::new(0, EngineConfig::default());
        e.set_populate_route(route);
        let (_, a) = e.enqueue(req(0, (0..100).collect(), 4), 0, &mut f).unwrap();
        assert_eq!(a, Admission::Ready { cached_tokens: 0 });
        assert_eq!(e.load().queued_tokens, 100);
    }

    #[test]
    fn context_id_reuses_only_the_shared_prefix() {
        let (mut f, route) = fabric();
        let mut e = Engine::new(0, EngineConfig::default());
        e.set_populate_route(route);
        let tagged = |i: usize, suffix: std::ops::Range<u32>| {
            let mut p: Vec<u32> = (0..512).collect();
            p.extend(suffix);
            EngineRequest {
                context_id: Some("ctx".into()),
                ..req(i, p, 3)
            }
        };
        e.enqueue(tagged(0, 1000..1300), 0, &mut f).unwrap();
        let (t, _) = run_to_idle(&mut e, 0);
        let (_, a) = e.enqueue(tagged(1, 2000..2300), t, &mut f).unwrap();
        assert_eq!(a, Admission::Ready { cached_tokens: 512 });
        let (_, events) = run_to_idle(&mut e, t);
        assert!(events
            .iter()
            .any(|ev| matches!(ev, EngineEvent::Finished { req: 1, .. })));
        e.rtc().check_invariants().unwrap();
    }

    #[test]
    fn cached_npu_prefix_reduces_prefill_work() {
        let (mut f, route) = fabric();
        let mut e = Engine::new(0, EngineConfig::default());
        e.set_populate_route(route);
        let prompt: Vec<u32> = (0..1100).collect();
        e.enqueue(req(0, prompt.clone(), 1), 0, &mut f).unwrap();
        let (t, _) = run_to_idle(&mut e, 0);
        let before = e.stats().prefill_tokens;
        let mut second = prompt[..1024].to_vec();
        second.extend(5000..5076);
        let (_, a) = e.enqueue(req(1, second, 1), t, &mut f).unwrap();
        assert_eq!(
            a,
            Admission::Ready {
                cached_tokens: 1024
            }
        );
        run_to_idle(&mut e, t);
        assert_eq!(e.stats().prefill_tokens - before, 1100 - 1024);
    }

    #[test]
    fn dram_prefix_is_fetched_when_cheaper() {
        let (mut f, mut route) = fabric();
        let cfg = EngineConfig {
            a_p: 2.0,
            kv_bytes_per_token: 16 * 1024,
            ..Default::default()
        };
        route.bytes_per_block = cfg.block_bytes();
        let mut e = Engine::new(0, cfg);
        e.set_populate_route(route);
        let prompt: Vec<u32> = (0..1040).collect();
        e.enqueue(req(0, prompt.clone(), 1), 0, &mut f).unwrap();
        let (t, _) = run_to_idle(&mut e, 0);
        // Push the cached prompt down to DRAM.
        let m = e.rtc_mut().match_by_prefix_tokens(&prompt, t);
        let ids: Vec<BlockId> = m.blocks.iter().map(|b| b.0).collect();
        e.rtc_mut().copy(&ids, Tier::Dram, t).unwrap();
        e.rtc_mut().free(&ids).unwrap();
        // 1024 tokens * 16 KiB = 16 MiB: ~498 us over PCIe vs 2048 us to recompute.
        let fetch = f.estimate_us(route.src, route.dst, 16 << 20).unwrap();
        assert!(fetch < 2048);
        let (id, a) = e
            .enqueue(req(1, prompt[..1030].to_vec(), 1), t, &mut f)
            .unwrap();
        let Admission::Parked {
            populate,
            completes_at,
        } = a
        else {
            panic!("expected populate, got {a:?}");
        };
        assert_eq!(completes_at, t + fetch);
        f.advance_to(completes_at);
        let (sid, _, cached) = e.on_populate(populate, &f, completes_at).unwrap().unwrap();
        assert_eq!((sid, cached), (id, 1024));
    }

    #[test]
    fn dram_prefix_is_recomputed_when_fetch_is_slower() {
        let (mut f, mut route) = fabric();
        let cfg = EngineConfig {
            a_p: 0.1,
            kv_bytes_per_token: 16 * 1024,
            ..Default::default()
        };
        route.bytes_per_block = cfg.block_bytes();
        let mut e = Engine::new(0, cfg);
        e.set_populate_route(route);
        let prompt: Vec<u32> = (0..1040).collect();
        e.enqueue(req(0, prompt.clone(), 1), 0, &mut f).unwrap();
        let (t, _) = run_to_idle(&mut e, 0);
        let m = e.rtc_mut().match_by_prefix_tokens(&prompt, t);
        let ids: Vec<BlockId> = m.blocks.iter().map(|b| b.0).collect();
        e.rtc_mut().copy(&ids, Tier::Dram, t).unwrap();
        e.rtc_mut().free(&ids).unwrap();
        let (_, a) = e.enqueue(req(1, prompt, 1), t, &mut f).unwrap();
        assert_eq!(a, Admission::Ready { cached_tokens: 0 });
    }

    #[test]
    fn decodes_first_then_one_chunk() {
        let (mut f, _) = fabric();
        let cfg = EngineConfig {
            chunk_size: 256,
            max_batch_tokens: 512,
            ..Default::default()
        };
        let mut e = Engine::new(0, cfg);
        for i in 0..3 {
            e.enqueue(req(i, vec![i as u32 + 1; 10], 100), 0, &mut f)
                .unwrap();
        }
        let w = e.start_iteration(0).unwrap();
        e.complete_iteration(w);
        e.enqueue(req(9, (0..2048).collect(), 10), w, &mut f)
            .unwrap();
        let plan = e.plan_iteration(w);
        assert_eq!(plan.decode.len(), 3);
        assert_eq!(plan.chunks.len(), 1);
        assert_eq!(plan.chunks[0].2, 256);
    }

    #[test]
    fn empty_engine_plans_nothing() {
        let mut e = Engine::new(0, EngineConfig::default());
        assert!(e.plan_iteration(0).is_empty());
        assert_eq!(e.start_iteration(0), None);
    }

    #[test]
    fn lower_priority_sequence_is_preempted() {
        let (mut f, _) = fabric();
        let cfg = EngineConfig {
            block_size: 4,
            npu_blocks_capacity: 4,
            prefix_caching: false,
            ..Default::default()
        };
        let mut e = Engine::new(0, cfg);
        let mut hi = req(0, vec![1; 8], 10);
        hi.priority = 1;
        let mut lo = req(1, vec![2; 8], 10);
        lo.priority = 2;
        let (hi_id, _) = e.enqueue(hi, 0, &mut f).unwrap();
        let (lo_id, _) = e.enqueue(lo, 0, &mut f).unwrap();
        let w = e.start_iteration(0).unwrap();
        e.complete_iteration(w);
        // Both hold 2 blocks; the next decode needs a 3rd block for each.
        let plan = e.plan_iteration(w);
        assert_eq!(plan.preempted, vec![lo_id]);
        assert_eq!(plan.decode, vec![hi_id]);
        e.rtc().check_invariants().unwrap();
    }

    #[test]
    fn tokens_are_causal_and_sequences_finish() {
        let (mut f, _) = fabric();
        let mut e = Engine::new(0, EngineConfig::default());
        for i in 0..5 {
            e.enqueue(
                req(i, (0..300).map(|t| t + i as u32 * 1000).collect(), 7),
                0,
                &mut f,
            )
            .unwrap();
        }
        let (_, events) = run_to_idle(&mut e, 0);
        let mut last: BTreeMap<usize, Micros> = BTreeMap::new();
        let mut finished = 0;
        for ev in events {
            match ev {
                EngineEvent::Token { req, at, .. } => {
                    if let Some(prev) = last.insert(req, at) {
                        assert!(at > prev);
                    }
                }
                EngineEvent::Finished { .. } => finished += 1,
                EngineEvent::PrefillDone { .. } => unreachable!(),
            }
        }
        assert_eq!(finished, 5);
        assert_eq!(e.active_sequences(), 0);
        let c = e.rtc().counts(Tier::Npu);
        assert_eq!(c.allocated, 0);
        e.rtc().check_invariants().unwrap();
    }

    #[test]
    fn prefill_only_stops_after_first_token() {
        let (mut f, _) = fabric();
        let mut e = Engine::new(0, EngineConfig::with_mode(EngineMode::PrefillOnly));
        let (id, _) = e
            .enqueue(req(0, (0..2048).collect(), 50), 0, &mut f)
            .unwrap();
        let (_, events) = run_to_idle(&mut e, 0);
        assert!(matches!(events.last(), Some(EngineEvent::PrefillDone { seq, .. }) if *seq == id));
        assert_eq!(e.stats().iterations, 1);
        assert_eq!(e.handoff_bytes(id), Some(2048 * 160 * 1024));
        e.finish_handoff(id, 1_000_000).unwrap();
        assert_eq!(
            e.rtc().peek_prefix_len(&(0..2048).collect::<Vec<_>>()),
            2048
        );
        assert_eq!(e.rtc().counts(Tier::Npu).allocated, 0);
    }

    #[test]
    fn decode_engine_reserves_and_rejects_when_full() {
        let cfg = EngineConfig {
            npu_blocks_capacity: 200,
            ..EngineConfig::with_mode(EngineMode::DecodeOnly)
        };
        let mut e = Engine::new(0, cfg);
        let id = e.admit_decode(req(0, (0..2048).collect(), 3), 0).unwrap();
        assert_eq!(
            e.admit_decode(req(1, (0..2048).collect(), 3), 0),
            Err(EngineError::CapacityExhausted)
        );
        assert_eq!(e.start_iteration(0), None);
        e.activate_decode(id).unwrap();
        let (_, events) = run_to_idle(&mut e, 0);
        let tokens = events
            .iter()
            .filter(|e| matches!(e, EngineEvent::Token { .. }))
            .count();
        // The first of the 3 tokens came from the prefill engine.
        assert_eq!(tokens, 2);
    }

    #[test]
    fn chunked_prefill_slows_decode_steps() {
        let c = EngineConfig::default();
        let pure = c.iteration_cost(0, 8, 100);
        let mixed = c.iteration_cost(512, 8, 100);
        assert!(mixed > pure);
    }

    #[test]
    fn swap_preemption_restores_progress() {
        let (mut f, _) = fabric();
        let cfg = EngineConfig {
            block_size: 4,
            npu_blocks_capacity: 4,
            prefix_caching: false,
            preempt_swap: true,
            ..Default::default()
        };
        let mut e = Engine::new(0, cfg);
        let mut a = req(0, vec![1; 8], 6);
        a.priority = 1;
        let mut b = req(1, vec![2; 8], 6);
        b.priority = 2;
        e.enqueue(a, 0, &mut f).unwrap();
        e.enqueue(b, 0, &mut f).unwrap();
        let (_, events) = run_to_idle(&mut e, 0);
        let finished = events
            .iter()
            .filter(|e| matches!(e, EngineEvent::Finished { .. }))
            .count();
        assert_eq!(finished, 2);
        assert!(e.stats().preemptions >= 1);
        // Swapped sequences never recompute their prompt.
        assert_eq!(e.stats().prefill_tokens, 16);
        e.rtc().check_invariants().unwrap();
    }
}
