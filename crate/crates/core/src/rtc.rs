//! KV-cache block manager with prefix-token and context-id indices.
//!
//! Block ids are physical slots: `0..npu_blocks` live in NPU memory, the
//! rest in host DRAM, so a block never changes tier. A cached prefix is a
//! radix node that may hold one placement per tier; moving data between
//! tiers allocates a block in the other tier and attaches it to the same
//! node.
//!
//! Only whole blocks are indexed. Unreferenced placements are evicted in LRU
//! order, deepest first: a placement is evictable only when no child node
//! has a placement in the same tier, and a node losing its last placement
//! must be a leaf. Nodes registered under a context id are never evicted.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::distflow::{DistFlow, DistFlowError, EndpointId, GroupId, TicketId, TransferStatus};
use crate::radix::{BlockRadixTree, NodeId};
use crate::simkernel::Micros;

pub type BlockId = u32;
pub type SeqId = u64;
pub type PopulateId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Npu,
    Dram,
}

impl Tier {
    const ALL: [Tier; 2] = [Tier::Npu, Tier::Dram];

    fn idx(self) -> usize {
        match self {
            Tier::Npu => 0,
            Tier::Dram => 1,
        }
    }

    fn other(self) -> Tier {
        match self {
            Tier::Npu => Tier::Dram,
            Tier::Dram => Tier::Npu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockState {
    Free,
    /// Held by at least one sequence.
    Allocated,
    /// Unreferenced but indexed, so reusable until evicted.
    Cached,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Block {
    pub id: BlockId,
    pub tier: Tier,
    pub state: BlockState,
    pub ref_count: u32,
    pub node: Option<NodeId>,
    pub owner: Option<SeqId>,
    pub last_use: Micros,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RtcConfig {
    pub block_size: usize,
    pub npu_blocks: u32,
    pub dram_blocks: u32,
    /// Evicting an NPU placement first copies it to DRAM when room can be
    /// made there. Stands in for background swap-out.
    pub demote_on_evict: bool,
}

impl Default for RtcConfig {
    fn default() -> Self {
        RtcConfig {
            block_size: 16,
            npu_blocks: 16384,
            dram_blocks: 65536,
            demote_on_evict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RtcError {
    #[error("out of {tier:?} memory: needed {needed} blocks, obtained {available}")]
    OutOfMemory {
        tier: Tier,
        needed: usize,
        available: usize,
    },
    #[error("populate needs {needed} NPU blocks but only {available} can be freed")]
    InsufficientNpuMemory { needed: usize, available: usize },
    #[error("unknown or free block {0}")]
    UnknownBlock(BlockId),
    #[error("block {0} freed twice")]
    DoubleFree(BlockId),
    #[error("{blocks} blocks cannot cover {tokens} tokens in order")]
    InvalidCoverage { tokens: usize, blocks: usize },
    #[error("unknown populate ticket {0}")]
    UnknownTicket(PopulateId),
    #[error(transparent)]
    Transfer(#[from] DistFlowError),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    pub matched_token_count: u32,
    pub blocks: Vec<(BlockId, Tier)>,
    pub fully_on_npu: bool,
    nodes: Vec<NodeId>,
}

impl MatchResult {
    pub fn empty() -> Self {
        MatchResult {
            fully_on_npu: true,
            ..Default::default()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn off_npu_blocks(&self) -> usize {
        self.blocks.iter().filter(|(_, t)| *t != Tier::Npu).count()
    }

    /// Keeps the first `n` blocks.
    pub fn truncated(&self, n: usize, block_size: usize) -> MatchResult {
        let n = n.min(self.blocks.len());
        let blocks = self.blocks[..n].to_vec();
        MatchResult {
            matched_token_count: (n * block_size) as u32,
            fully_on_npu: blocks.iter().all(|(_, t)| *t == Tier::Npu),
            blocks,
            nodes: self.nodes[..n].to_vec(),
        }
    }

    /// Leading run of blocks already on NPU.
    pub fn npu_prefix(&self, block_size: usize) -> MatchResult {
        let n = self
            .blocks
            .iter()
            .take_while(|(_, t)| *t == Tier::Npu)
            .count();
        self.truncated(n, block_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulateStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PopulateTicket {
    pub id: PopulateId,
    pub status: PopulateStatus,
    pub completes_at: Micros,
    pub transfer: Option<TicketId>,
    pub blocks_moved: u32,
}

/// Where populate traffic flows: host DRAM to the engine's NPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FabricRoute {
    pub group: GroupId,
    pub src: EndpointId,
    pub dst: EndpointId,
    pub bytes_per_block: u64,
}

/// Index changes, for mirroring into a scheduler-side tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheEvent {
    /// Whole-block prefix that is now matchable.
    Inserted(Vec<u32>),
    /// Prefix whose node and all descendants are gone.
    Removed(Vec<u32>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TierCounts {
    pub capacity: u32,
    pub free: u32,
    pub allocated: u32,
    pub cached: u32,
}

#[derive(Debug, Clone, Default)]
struct Slot {
    placement: [Option<BlockId>; 2],
    children_in: [u32; 2],
    last_use: Micros,
    pins: u32,
    id_pins: u32,
    ev_key: [Option<(Micros, NodeId)>; 2],
}

impl Slot {
    fn has_any(&self) -> bool {
        self.placement.iter().any(Option::is_some)
    }
}

#[derive(Debug, Clone)]
struct PendingPopulate {
    ticket: PopulateTicket,
    nodes: Vec<NodeId>,
    targets: Vec<(NodeId, BlockId)>,
    broken: bool,
}

#[derive(Debug, Clone)]
pub struct Rtc {
    cfg: RtcConfig,
    blocks: Vec<Block>,
    free: [BTreeSet<BlockId>; 2],
    tree: BlockRadixTree<Slot>,
    evictable: [BTreeSet<(Micros, NodeId)>; 2],
    id_map: BTreeMap<String, Vec<NodeId>>,
    populates: BTreeMap<PopulateId, PendingPopulate>,
    next_populate: PopulateId,
    events: Vec<CacheEvent>,
    evictions: u64,
}

impl Rtc {
    pub fn new(cfg: RtcConfig) -> Self {
        let total = cfg.npu_blocks + cfg.dram_blocks;
        let blocks = (0..total)
            .map(|id| Block {
                id,
                tier: if id < cfg.npu_blocks {
                    Tier::Npu
                } else {
                    Tier::Dram
                },
                state: BlockState::Free,
                ref_count: 0,
                node: None,
                owner: None,
                last_use: 0,
            })
            .collect();
        Rtc {
            cfg,
            blocks,
            free: [
                (0..cfg.npu_blocks).collect(),
                (cfg.npu_blocks..total).collect(),
            ],
            tree: BlockRadixTree::new(cfg.block_size, Slot::default()),
            evictable: Default::default(),
            id_map: BTreeMap::new(),
            populates: BTreeMap::new(),
            next_populate: 0,
            events: Vec::new(),
            evictions: 0,
        }
    }

    pub fn config(&self) -> &RtcConfig {
        &self.cfg
    }

    pub fn block_size(&self) -> usize {
        self.cfg.block_size
    }

    pub fn block(&self, id: BlockId) -> Option<&Block> {
        self.blocks.get(id as usize)
    }

    pub fn evictions(&self) -> u64 {
        self.evictions
    }

    pub fn counts(&self, tier: Tier) -> TierCounts {
        let mut c = TierCounts::default();
        for b in self.blocks.iter().filter(|b| b.tier == tier) {
            c.capacity += 1;
            match b.state {
                BlockState::Free => c.free += 1,
                BlockState::Allocated => c.allocated += 1,
                BlockState::Cached => c.cached += 1,
            }
        }
        c
    }

    pub fn free_blocks(&self, tier: Tier) -> usize {
        self.free[tier.idx()].len()
    }

    /// Placements that could be evicted right now (not counting cascades).
    pub fn evictable_now(&self, tier: Tier) -> usize {
        self.evictable[tier.idx()].len()
    }

    pub fn drain_events(&mut self) -> Vec<CacheEvent> {
        std::mem::take(&mut self.events)
    }

    fn slot(&self, n: NodeId) -> &Slot {
        &self.tree.node(n).data
    }

    fn slot_mut(&mut self, n: NodeId) -> &mut Slot {
        &mut self.tree.node_mut(n).data
    }

    fn live_block(&self, id: BlockId) -> Result<&Block, RtcError> {
        match self.blocks.get(id as usize) {
            Some(b) if b.state != BlockState::Free => Ok(b),
            _ => Err(RtcError::UnknownBlock(id)),
        }
    }

    fn eligible(&self, n: NodeId, tier: Tier) -> bool {
        if n == BlockRadixTree::<Slot>::ROOT {
            return false;
        }
        let node = self.tree.node(n);
        let s = &node.data;
        let Some(b) = s.placement[tier.idx()] else {
            return false;
        };
        self.blocks[b as usize].ref_count == 0
            && s.pins == 0
            && s.id_pins == 0
            && s.children_in[tier.idx()] == 0
            && (s.placement[tier.other().idx()].is_some()
                || node.child_count() == 0
                || (tier == Tier::Npu && self.cfg.demote_on_evict))
    }

    fn refresh(&mut self, n: NodeId) {
        if n == BlockRadixTree::<Slot>::ROOT {
            return;
        }
        for tier in Tier::ALL {
            let want = self.eligible(n, tier).then(|| (self.slot(n).last_use, n));
            let have = self.slot(n).ev_key[tier.idx()];
            if want != have {
                if let Some(k) = have {
                    self.evictable[tier.idx()].remove(&k);
                }
                if let Some(k) = want {
                    self.evictable[tier.idx()].insert(k);
                }
                self.slot_mut(n).ev_key[tier.idx()] = want;
            }
        }
    }

    fn set_placement(&mut self, n: NodeId, tier: Tier, block: Option<BlockId>) {
        let had = self.slot(n).placement[tier.idx()].is_some();
        self.slot_mut(n).placement[tier.idx()] = block;
        let parent = self.tree.node(n).parent.expect("non-root");
        match (had, block.is_some()) {
            (false, true) => self.slot_mut(parent).children_in[tier.idx()] += 1,
            (true, false) => self.slot_mut(parent).children_in[tier.idx()] -= 1,
            _ => {}
        }
        self.refresh(n);
        self.refresh(parent);
    }

    fn return_to_pool(&mut self, b: BlockId) {
        let blk = &mut self.blocks[b as usize];
        blk.state = BlockState::Free;
        blk.ref_count = 0;
        blk.node = None;
        blk.owner = None;
        self.free[blk.tier.idx()].insert(b);
    }

    fn touch(&mut self, n: NodeId, now: Micros) {
        let s = self.slot_mut(n);
        s.last_use = s.last_use.max(now);
        for b in s.placement.into_iter().flatten() {
            let blk = &mut self.blocks[b as usize];
            blk.last_use = blk.last_use.max(now);
        }
        self.refresh(n);
    }

    fn build_result(&mut self, nodes: Vec<NodeId>, now: Micros) -> MatchResult {
        let mut blocks = Vec::with_capacity(nodes.len());
        for &n in &nodes {
            self.touch(n, now);
            let p = self.slot(n).placement;
            let chosen = match (p[0], p[1]) {
                (Some(b), _) => (b, Tier::Npu),
                (None, Some(b)) => (b, Tier::Dram),
                (None, None) => unreachable!("indexed node without placement"),
            };
            blocks.push(chosen);
        }
        MatchResult {
            matched_token_count: (nodes.len() * self.cfg.block_size) as u32,
            fully_on_npu: blocks.iter().all(|(_, t)| *t == Tier::Npu),
            blocks,
            nodes,
        }
    }

    /// Longest whole-block prefix of `tokens` present in the index.
    pub fn match_by_prefix_tokens(&mut self, tokens: &[u32], now: Micros) -> MatchResult {
        let nodes = self.tree.walk(tokens);
        self.build_result(nodes, now)
    }

    /// Read-only variant of the prefix match: no recency update.
    pub fn peek_prefix_len(&self, tokens: &[u32]) -> u32 {
        (self.tree.walk(tokens).len() * self.cfg.block_size) as u32
    }

    pub fn match_by_id(&mut self, context_id: &str, now: Micros) -> MatchResult {
        match self.id_map.get(context_id) {
            Some(nodes) => {
                let nodes = nodes.clone();
                self.build_result(nodes, now)
            }
            None => MatchResult::empty(),
        }
    }

    fn evict_one(&mut self, tier: Tier) -> bool {
        let Some(&(_, n)) = self.evictable[tier.idx()].first() else {
            return false;
        };
        let b = self.slot(n).placement[tier.idx()].expect("evictable placement");
        if tier == Tier::Npu && self.cfg.demote_on_evict && self.slot(n).placement[1].is_none() {
            if let Some(d) = self.take_block(Tier::Dram) {
                let last_use = self.slot(n).last_use;
                let blk = &mut self.blocks[d as usize];
                blk.state = BlockState::Cached;
                blk.ref_count = 0;
                blk.node = Some(n);
                blk.last_use = last_use;
                self.set_placement(n, Tier::Dram, Some(d));
            }
        }
        self.return_to_pool(b);
        self.set_placement(n, tier, None);
        if !self.slot(n).has_any() {
            self.remove_node(n);
        }
        self.evictions += 1;
        true
    }

    /// Pops a free block of `tier`, evicting one cached placement if needed.
    fn take_block(&mut self, tier: Tier) -> Option<BlockId> {
        if self.free[tier.idx()].is_empty() && !self.evict_one(tier) {
            return None;
        }
        self.free[tier.idx()].pop_first()
    }

    fn remove_node(&mut self, n: NodeId) {
        let path = self.tree.path_tokens(n);
        let parent = self.tree.node(n).parent.expect("non-root");
        for tier in Tier::ALL {
            if self.slot(n).placement[tier.idx()].is_some() {
                self.slot_mut(parent).children_in[tier.idx()] -= 1;
            }
        }
        let removed = self.tree.remove_subtree(n);
        let mut id_pinned = BTreeSet::new();
        for (id, node) in &removed {
            let s = &node.data;
            for (t, key) in s.ev_key.iter().enumerate() {
                if let Some(k) = key {
                    self.evictable[t].remove(k);
                }
            }
            for b in s.placement.into_iter().flatten() {
                if self.blocks[b as usize].ref_count == 0 {
                    self.return_to_pool(b);
                } else {
                    self.blocks[b as usize].node = None;
                }
            }
            if s.id_pins > 0 {
                id_pinned.insert(*id);
            }
            if s.pins > 0 {
                for p in self.populates.values_mut() {
                    if p.nodes.contains(id) {
                        p.broken = true;
                    }
                }
            }
        }
        if !id_pinned.is_empty() {
            for nodes in self.id_map.values_mut() {
                if let Some(cut) = nodes.iter().position(|x| id_pinned.contains(x)) {
                    nodes.truncate(cut);
                }
            }
            self.id_map.retain(|_, v| !v.is_empty());
        }
        self.refresh(parent);
        self.events.push(CacheEvent::Removed(path));
    }

    fn alloc(
        &mut self,
        n: usize,
        owner: Option<SeqId>,
        now: Micros,
    ) -> Result<Vec<BlockId>, RtcError> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            match self.take_block(Tier::Npu) {
                Some(b) => out.push(b),
                None => {
                    let available = out.len();
                    for b in out {
                        self.free[Tier::Npu.idx()].insert(b);
                    }
                    return Err(RtcError::OutOfMemory {
                        tier: Tier::Npu,
                        needed: n,
                        available,
                    });
                }
            }
        }
        for &b in &out {
            let blk = &mut self.blocks[b as usize];
            blk.state = BlockState::Allocated;
            blk.ref_count = 1;
            blk.owner = owner;
            blk.last_use = now;
        }
        Ok(out)
    }

    /// Allocates `n` fresh NPU blocks with one reference each. Cached
    /// entries may be evicted to make room, even when the call fails.
    pub fn alloc_blocks(&mut self, n: usize, now: Micros) -> Result<Vec<BlockId>, RtcError> {
        self.alloc(n, None, now)
    }

    /// Allocates one NPU block owned by `seq`.
    pub fn append_block(&mut self, seq: SeqId, now: Micros) -> Result<BlockId, RtcError> {
        Ok(self.alloc(1, Some(seq), now)?[0])
    }

    /// Takes one more reference on each block.
    pub fn acquire(&mut self, ids: &[BlockId], now: Micros) -> Result<(), RtcError> {
        for &id in ids {
            self.live_block(id)?;
        }
        for &id in ids {
            let blk = &mut self.blocks[id as usize];
            blk.ref_count += 1;
            blk.state = BlockState::Allocated;
            blk.last_use = blk.last_use.max(now);
            if let Some(n) = blk.node {
                self.refresh(n);
            }
        }
        Ok(())
    }

    /// Drops one reference per block. Indexed blocks reaching zero stay
    /// cached; unindexed ones return to the pool.
    pub fn release(&mut self, ids: &[BlockId], now: Micros) -> Result<(), RtcError> {
        let mut pending: BTreeMap<BlockId, u32> = BTreeMap::new();
        for &id in ids {
            let blk = self
                .blocks
                .get(id as usize)
                .ok_or(RtcError::UnknownBlock(id))?;
            let used = pending.entry(id).or_insert(0);
            *used += 1;
            if blk.ref_count < *used {
                return Err(RtcError::DoubleFree(id));
            }
        }
        for &id in ids {
            let blk = &mut self.blocks[id as usize];
            blk.ref_count -= 1;
            blk.last_use = blk.last_use.max(now);
            if blk.ref_count > 0 {
                continue;
            }
            blk.owner = None;
            match blk.node {
                Some(n) => {
                    blk.state = BlockState::Cached;
                    self.touch(n, now);
                }
                None => self.return_to_pool(id),
            }
        }
        Ok(())
    }

    /// Explicitly frees blocks. A block with other holders just loses one
    /// reference; otherwise it goes back to the pool and leaves the index in
    /// the same step, taking any now-unreachable descendants with it.
    pub fn free(&mut self, ids: &[BlockId]) -> Result<(), RtcError> {
        let mut seen = BTreeSet::new();
        for &id in ids {
            let blk = self
                .blocks
                .get(id as usize)
                .ok_or(RtcError::UnknownBlock(id))?;
            if blk.state == BlockState::Free || !seen.insert(id) {
                return Err(RtcError::DoubleFree(id));
            }
        }
        for &id in ids {
            // An earlier subtree removal in this call may already have pooled it.
            if self.blocks[id as usize].state == BlockState::Free {
                continue;
            }
            if self.blocks[id as usize].ref_count > 1 {
                self.blocks[id as usize].ref_count -= 1;
                continue;
            }
            let blk = self.blocks[id as usize].clone();
            self.return_to_pool(id);
            if let Some(n) = blk.node {
                self.set_placement(n, blk.tier, None);
                if !self.slot(n).has_any() {
                    self.remove_node(n);
                }
            }
        }
        Ok(())
    }

    /// Places a copy of each block in `dst`. Indexed blocks gain a second
    /// placement on the same node (reused if one exists); unindexed blocks
    /// get a new block with one reference for the caller. Nothing changes
    /// if the copies do not all fit.
    pub fn copy(
        &mut self,
        ids: &[BlockId],
        dst: Tier,
        now: Micros,
    ) -> Result<Vec<BlockId>, RtcError> {
        for &id in ids {
            self.live_block(id)?;
        }
        // Nodes touched here stay pinned until the call ends so later
        // allocations cannot evict placements handed out earlier.
        let mut pinned = Vec::new();
        let mut fresh = Vec::new();
        let mut out = Vec::with_capacity(ids.len());
        let mut failed = false;
        for &id in ids {
            let src = self.blocks[id as usize].clone();
            if src.tier == dst {
                out.push(id);
                continue;
            }
            if let Some(n) = src.node {
                self.slot_mut(n).pins += 1;
                self.refresh(n);
                pinned.push(n);
                if let Some(existing) = self.slot(n).placement[dst.idx()] {
                    out.push(existing);
                    continue;
                }
            }
            let Some(b) = self.take_block(dst) else {
                failed = true;
                break;
            };
            let blk = &mut self.blocks[b as usize];
            blk.last_use = now;
            match src.node {
                Some(n) => {
                    blk.state = BlockState::Cached;
                    blk.node = Some(n);
                    self.set_placement(n, dst, Some(b));
                }
                None => {
                    blk.state = BlockState::Allocated;
                    blk.ref_count = 1;
                    blk.owner = src.owner;
                }
            }
            fresh.push(b);
            out.push(b);
        }
        if failed {
            for &b in &fresh {
                if let Some(n) = self.blocks[b as usize].node {
                    self.set_placement(n, dst, None);
                }
                self.return_to_pool(b);
            }
        }
        for n in pinned {
            self.slot_mut(n).pins -= 1;
            self.refresh(n);
        }
        if failed {
            return Err(RtcError::OutOfMemory {
                tier: dst,
                needed: ids.len(),
                available: fresh.len(),
            });
        }
        Ok(out)
    }

    /// Indexes `tokens` stored in `block_ids`. Only whole blocks enter the
    /// index; a trailing partial block is accepted for coverage but stays
    /// private to its owner. Positions already indexed in the block's tier
    /// keep their existing block.
    pub fn commit_prefix(
        &mut self,
        tokens: &[u32],
        block_ids: &[BlockId],
        context_id: Option<&str>,
        now: Micros,
    ) -> Result<(), RtcError> {
        let bs = self.cfg.block_size;
        let coverage = || RtcError::InvalidCoverage {
            tokens: tokens.len(),
            blocks: block_ids.len(),
        };
        if block_ids.len() != tokens.len().div_ceil(bs) {
            return Err(coverage());
        }
        for &b in block_ids {
            self.live_block(b)?;
        }
        let full = tokens.len() / bs;
        let existing = self.tree.walk(&tokens[..full * bs]);
        for (i, &b) in block_ids.iter().enumerate().take(full) {
            match (self.blocks[b as usize].node, existing.get(i)) {
                (None, _) => {}
                (Some(n), Some(&e)) if n == e => {}
                _ => return Err(coverage()),
            }
        }
        let path = self
            .tree
            .insert_path(&tokens[..full * bs], |_| Slot::default());
        let mut created = false;
        for (i, &(n, is_new)) in path.iter().enumerate() {
            created |= is_new;
            let b = block_ids[i];
            let tier = self.blocks[b as usize].tier;
            if self.blocks[b as usize].node.is_none()
                && self.slot(n).placement[tier.idx()].is_none()
            {
                let blk = &mut self.blocks[b as usize];
                blk.node = Some(n);
                if blk.ref_count == 0 {
                    blk.state = BlockState::Cached;
                }
                self.set_placement(n, tier, Some(b));
            }
            self.touch(n, now);
        }
        if created {
            self.events
                .push(CacheEvent::Inserted(tokens[..full * bs].to_vec()));
        }
        if let Some(ctx) = context_id {
            let nodes: Vec<NodeId> = path.iter().map(|(n, _)| *n).collect();
            for &n in &nodes {
                self.slot_mut(n).id_pins += 1;
                self.refresh(n);
            }
            if let Some(old) = self.id_map.insert(ctx.to_string(), nodes) {
                for n in old {
                    self.slot_mut(n).id_pins -= 1;
                    self.refresh(n);
                }
            }
        }
        Ok(())
    }

    /// Starts moving every off-NPU block of `result` into NPU memory.
    pub fn populate(
        &mut self,
        result: &MatchResult,
        fabric: &mut DistFlow,
        route: FabricRoute,
        now: Micros,
    ) -> Result<PopulateTicket, RtcError> {
        let id = self.next_populate;
        let nodes: Vec<NodeId> = result
            .nodes
            .iter()
            .copied()
            .filter(|n| self.tree.contains(*n))
            .collect();
        let off: Vec<NodeId> = nodes
            .iter()
            .copied()
            .filter(|n| self.slot(*n).placement[Tier::Npu.idx()].is_none())
            .collect();
        if off.is_empty() {
            self.next_populate += 1;
            let ticket = PopulateTicket {
                id,
                status: PopulateStatus::Done,
                completes_at: now,
                transfer: None,
                blocks_moved: 0,
            };
            self.populates.insert(
                id,
                PendingPopulate {
                    ticket: ticket.clone(),
                    nodes: Vec::new(),
                    targets: Vec::new(),
                    broken: false,
                },
            );
            return Ok(ticket);
        }
        for &n in &nodes {
            self.slot_mut(n).pins += 1;
            self.refresh(n);
        }
        let unpin = |rtc: &mut Rtc| {
            for &n in &nodes {
                rtc.slot_mut(n).pins -= 1;
                rtc.refresh(n);
            }
        };
        let blocks = match self.alloc(off.len(), None, now) {
            Ok(b) => b,
            Err(RtcError::OutOfMemory {
                needed, available, ..
            }) => {
                unpin(self);
                return Err(RtcError::InsufficientNpuMemory { needed, available });
            }
            Err(e) => {
                unpin(self);
                return Err(e);
            }
        };
        let bytes = route.bytes_per_block * off.len() as u64;
        let transfer = match fabric.transfer(route.group, route.src, route.dst, bytes, now) {
            Ok(t) => t,
            Err(e) => {
                for &b in &blocks {
                    self.return_to_pool(b);
                }
                unpin(self);
                return Err(e.into());
            }
        };
        self.next_populate += 1;
        let ticket = PopulateTicket {
            id,
            status: PopulateStatus::Pending,
            completes_at: transfer.completes_at,
            transfer: Some(transfer.id),
            blocks_moved: off.len() as u32,
        };
        self.populates.insert(
            id,
            PendingPopulate {
                ticket: ticket.clone(),
                nodes,
                targets: off.into_iter().zip(blocks).collect(),
                broken: false,
            },
        );
        Ok(ticket)
    }

    pub fn populate_ticket(&self, id: PopulateId) -> Option<&PopulateTicket> {
        self.populates.get(&id).map(|p| &p.ticket)
    }

    /// Current status; a finished transfer is applied to the index here.
    pub fn query_populate(
        &mut self,
        id: PopulateId,
        fabric: &DistFlow,
        now: Micros,
    ) -> Result<PopulateStatus, RtcError> {
        let p = self.populates.get(&id).ok_or(RtcError::UnknownTicket(id))?;
        if p.ticket.status != PopulateStatus::Pending {
            return Ok(p.ticket.status);
        }
        let transfer = p.ticket.transfer.expect("pending populate has a transfer");
        if fabric.status(transfer) != Some(TransferStatus::Done) {
            return Ok(PopulateStatus::Pending);
        }
        let finished_at = fabric
            .ticket(transfer)
            .map(|t| t.completes_at)
            .unwrap_or(now);
        let p = self.populates.get(&id).expect("present").clone();
        let status = if p.broken {
            for &(_, b) in &p.targets {
                self.return_to_pool(b);
            }
            PopulateStatus::Failed
        } else {
            for &(n, b) in &p.targets {
                if self.slot(n).placement[Tier::Npu.idx()].is_none() {
                    let blk = &mut self.blocks[b as usize];
                    blk.state = BlockState::Cached;
                    blk.ref_count = 0;
                    blk.node = Some(n);
                    blk.last_use = now;
                    self.set_placement(n, Tier::Npu, Some(b));
                } else {
                    self.return_to_pool(b);
                }
            }
            PopulateStatus::Done
        };
        for &n in &p.nodes {
            if self.tree.contains(n) {
                let s = self.slot_mut(n);
                s.pins = s.pins.saturating_sub(1);
                self.refresh(n);
            }
        }
        let entry = self.populates.get_mut(&id).expect("present");
        entry.ticket.status = status;
        entry.ticket.completes_at = finished_at;
        Ok(status)
    }

    /// The placement LRU eviction would pick next in `tier`.
    pub fn lru_victim(&self, tier: Tier) -> Option<(Micros, BlockId)> {
        self.evictable[tier.idx()]
            .first()
            .map(|&(t, n)| (t, self.slot(n).placement[tier.idx()].expect("placement")))
    }

    /// Whole-block sequences currently indexed at the leaves of the tree.
    pub fn indexed_sequences(&self) -> Vec<Vec<u32>> {
        self.tree
            .ids()
            .filter(|&n| n != BlockRadixTree::<Slot>::ROOT && self.tree.node(n).child_count() == 0)
            .map(|n| self.tree.path_tokens(n))
            .collect()
    }

    /// Radix tree as JSON: token spans, placements, and reference counts.
    pub fn dump(&self) -> Value {
        let nodes: Vec<Value> = self
            .tree
            .ids()
            .filter(|&n| n != BlockRadixTree::<Slot>::ROOT)
            .map(|n| {
                let node = self.tree.node(n);
                let place = |t: Tier| {
                    node.data.placement[t.idx()].map(
                        |b| json!({"block": b, "ref_count": self.blocks[b as usize].ref_count}),
                    )
                };
                json!({
                    "id": n,
                    "parent": node.parent,
                    "depth": node.depth,
                    "tokens": node.chunk.to_vec(),
                    "npu": place(Tier::Npu),
                    "dram": place(Tier::Dram),
                    "last_use": node.data.last_use,
                    "pinned": node.data.pins > 0 || node.data.id_pins > 0,
                })
            })
            .collect();
        json!({
            "block_size": self.cfg.block_size,
            "nodes": nodes,
            "contexts": self.id_map.keys().collect::<Vec<_>>(),
        })
    }

    /// Full consistency audit of counters, placements and eviction sets.
    pub fn check_invariants(&self) -> Result<(), String> {
        for tier in Tier::ALL {
            let c = self.counts(tier);
            if c.free + c.allocated + c.cached != c.capacity {
                return Err(format!("{tier:?} accounting broken: {c:?}"));
            }
            if c.free as usize != self.free[tier.idx()].len() {
                return Err(format!("{tier:?} free list out of sync"));
            }
        }
        for b in &self.blocks {
            let ok = match b.state {
                BlockState::Free => b.ref_count == 0 && b.node.is_none(),
                BlockState::Allocated => b.ref_count > 0,
                BlockState::Cached => b.ref_count == 0 && b.node.is_some(),
            };
            if !ok {
                return Err(format!("block {} inconsistent: {b:?}", b.id));
            }
            if let Some(n) = b.node {
                if self
                    .tree
                    .get(n)
                    .and_then(|x| x.data.placement[b.tier.idx()])
                    != Some(b.id)
                {
                    return Err(format!(
                        "block {} points at node {n} which does not hold it",
                        b.id
                    ));
                }
            }
        }
        for n in self
            .tree
            .ids()
            .filter(|&n| n != BlockRadixTree::<Slot>::ROOT)
        {
            let s = self.slot(n);
            if !s.has_any() {
                return Err(format!("node {n} has no placement"));
            }
            for tier in Tier::ALL {
                if let Some(b) = s.placement[tier.idx()] {
                    if self.blocks[b as usize].node != Some(n) {
                        return Err(format!("node {n} holds block {b} that points elsewhere"));
                    }
                }
                let count = self
                    .tree
                    .children(n)
                    .iter()
                    .filter(|c| self.slot(**c).placement[tier.idx()].is_some())
                    .count() as u32;
                if count != s.children_in[tier.idx()] {
                    return Err(format!("node {n} child counter wrong for {tier:?}"));
                }
                let want = self.eligible(n, tier).then_some((s.last_use, n));
                if want != s.ev_key[tier.idx()]
                    || want.is_some_and(|k| !self.evictable[tier.idx()].contains(&k))
                {
                    return Err(format!("node {n} eviction key stale for {tier:?}"));
                }
            }
        }
        for tier in Tier::ALL {
            if self.evictable[tier.idx()].len()
                != self
                    .tree
                    .ids()
                    .filter(|&n| {
                        n != BlockRadixTree::<Slot>::ROOT
                            && self.slot(n).ev_key[tier.idx()].is_some()
                    })
                    .count()
            {
                return Err(format!("{tier:?} eviction set has stray entries"));
            }
        }
        Ok(())
    }
}
