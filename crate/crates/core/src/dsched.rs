//! Request routing across a group of serving units.
//!
//! A unit is either one colocated engine or a prefill/decode pair. Routing
//! first picks a unit kind from a JCT heatmap indexed by prompt length and
//! predicted decode/prompt ratio, then picks a member of that kind: the one
//! holding the longest cached prefix when loads are balanced, otherwise the
//! least loaded one.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::radix::{BlockRadixTree, NodeId};
use crate::rtc::CacheEvent;

pub type TeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    Colocated,
    Disaggregated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Unit {
    Colocated { te: TeId },
    DisaggPair { prefill: TeId, decode: TeId },
}

impl Unit {
    pub fn kind(&self) -> UnitKind {
        match self {
            Unit::Colocated { .. } => UnitKind::Colocated,
            Unit::DisaggPair { .. } => UnitKind::Disaggregated,
        }
    }

    /// Identity used for tie-breaking: the engine that receives the prompt.
    pub fn id(&self) -> TeId {
        match self {
            Unit::Colocated { te } => *te,
            Unit::DisaggPair { prefill, .. } => *prefill,
        }
    }
}

/// A unit and its load at decision time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitView {
    pub unit: Unit,
    /// Queued plus running tokens, summed over the unit's engines.
    pub load: u64,
    /// Queued tokens only; breaks locality ties.
    pub queued: u64,
}

// ---------------------------------------------------------------------------
// Heatmap

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapAxes {
    /// Lower edges of prompt-length buckets, ascending.
    pub prefill_edges: Vec<u32>,
    /// Lower edges of decode/prompt ratio buckets, ascending.
    pub ratio_edges: Vec<f64>,
}

impl Default for HeatmapAxes {
    fn default() -> Self {
        HeatmapAxes {
            prefill_edges: vec![512, 1024, 2048, 4096, 8192],
            ratio_edges: vec![0.01, 0.05, 0.1, 0.25, 0.5, 1.0],
        }
    }
}

fn bucket_of<T: PartialOrd + Copy>(edges: &[T], x: T) -> Option<usize> {
    if edges.is_empty() || x < edges[0] {
        return None;
    }
    Some(
        edges
            .iter()
            .rposition(|e| *e <= x)
            .expect("x >= first edge"),
    )
}

impl HeatmapAxes {
    pub fn rows(&self) -> usize {
        self.prefill_edges.len()
    }

    pub fn cols(&self) -> usize {
        self.ratio_edges.len()
    }

    pub fn validate(&self) -> Result<(), HeatmapError> {
        let ok = !self.prefill_edges.is_empty()
            && !self.ratio_edges.is_empty()
            && self.prefill_edges.windows(2).all(|w| w[0] < w[1])
            && self.ratio_edges.windows(2).all(|w| w[0] < w[1])
            && self.prefill_edges[0] > 0
            && self.ratio_edges[0] > 0.0;
        if ok {
            Ok(())
        } else {
            Err(HeatmapError::BadAxes)
        }
    }

    /// Cell for a prompt length and decode/prompt ratio. Buckets are
    /// half-open `[e_i, e_{i+1})`, the last one unbounded; values below the
    /// first edge are out of range.
    pub fn cell(&self, prefill_len: u32, ratio: f64) -> Option<(usize, usize)> {
        Some((
            bucket_of(&self.prefill_edges, prefill_len)?,
            bucket_of(&self.ratio_edges, ratio)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HeatmapError {
    #[error("no measurement for rps {rps} cell ({row}, {col})")]
    MissingCell { rps: f64, row: usize, col: usize },
    #[error("JCT must be positive, got {0}")]
    NonPositiveJct(f64),
    #[error("bucket edges must be positive and strictly ascending")]
    BadAxes,
    #[error("at least one rps value is required")]
    NoProfiles,
}

/// Mean JCT of both setups for one cell at one request rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellProfile {
    pub rps: f64,
    pub row: usize,
    pub col: usize,
    pub jct_colocated_us: f64,
    pub jct_disaggregated_us: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpsGrid {
    pub rps: f64,
    pub cells: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heatmap {
    pub axes: HeatmapAxes,
    pub per_rps: Vec<RpsGrid>,
    pub combined: Vec<Vec<f64>>,
}

/// Relative JCT penalty of the colocated setup: positive means the
/// disaggregated setup finished faster.
pub fn cell_value(jct_colocated: f64, jct_disaggregated: f64) -> f64 {
    jct_colocated / jct_disaggregated - 1.0
}

/// Builds one grid per rate from `profiles`, then sums them element-wise.
pub fn build_heatmap(axes: HeatmapAxes, profiles: &[CellProfile]) -> Result<Heatmap, HeatmapError> {
    axes.validate()?;
    let mut rates: Vec<f64> = profiles.iter().map(|p| p.rps).collect();
    rates.sort_by(f64::total_cmp);
    rates.dedup();
    if rates.is_empty() {
        return Err(HeatmapError::NoProfiles);
    }
    let mut per_rps = Vec::with_capacity(rates.len());
    for &rps in &rates {
        let mut cells = vec![vec![f64::NAN; axes.cols()]; axes.rows()];
        for p in profiles.iter().filter(|p| p.rps == rps) {
            for jct in [p.jct_colocated_us, p.jct_disaggregated_us] {
                if !(jct > 0.0) {
                    return Err(HeatmapError::NonPositiveJct(jct));
                }
            }
            if p.row < axes.rows() && p.col < axes.cols() {
                cells[p.row][p.col] = cell_value(p.jct_colocated_us, p.jct_disaggregated_us);
            }
        }
        for (row, r) in cells.iter().enumerate() {
            if let Some(col) = r.iter().position(|v| v.is_nan()) {
                return Err(HeatmapError::MissingCell { rps, row, col });
            }
        }
        per_rps.push(RpsGrid { rps, cells });
    }
    let combined = combine(&per_rps);
    Ok(Heatmap {
        axes,
        per_rps,
        combined,
    })
}

/// Element-wise sum of same-shaped grids.
pub fn combine(grids: &[RpsGrid]) -> Vec<Vec<f64>> {
    let mut out = grids[0]
        .cells
        .iter()
        .map(|r| vec![0.0; r.len()])
        .collect::<Vec<_>>();
    for g in grids {
        for (o, r) in out.iter_mut().zip(&g.cells) {
            for (a, b) in o.iter_mut().zip(r) {
                *a += b;
            }
        }
    }
    out
}

impl Heatmap {
    /// Combined value for a prompt length and decode length, if in range.
    pub fn lookup(&self, prefill_len: u32, decode_len: u32) -> Option<f64> {
        if prefill_len == 0 {
            return None;
        }
        let ratio = decode_len as f64 / prefill_len as f64;
        let (r, c) = self.axes.cell(prefill_len, ratio)?;
        Some(self.combined[r][c])
    }

    /// Share of cells whose sign is strictly positive at every rate or
    /// strictly negative at every rate.
    pub fn sign_stability(&self) -> f64 {
        let (rows, cols) = (self.axes.rows(), self.axes.cols());
        let mut stable = 0;
        for r in 0..rows {
            for c in 0..cols {
                let vals = self.per_rps.iter().map(|g| g.cells[r][c]);
                let pos = vals.clone().all(|v| v > 0.0);
                let neg = vals.clone().all(|v| v < 0.0);
                if pos || neg {
                    stable += 1;
                }
            }
        }
        stable as f64 / (rows * cols) as f64
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Heatmap> {
        serde_json::from_str(s)
    }
}

// ---------------------------------------------------------------------------
// Decode-length prediction

/// Predicts a decode-length bucket for a request.
pub trait DecodePredictor {
    fn bucket_size(&self) -> u32;

    fn predict_bucket(&self, request_id: &str, true_decode_len: u32) -> u32;

    /// Midpoint of the predicted bucket, used as the length estimate.
    fn predict_len(&self, request_id: &str, true_decode_len: u32) -> u32 {
        let b = self.bucket_size();
        self.predict_bucket(request_id, true_decode_len) * b + b / 2
    }
}

/// FNV-1a, used to derive a stable per-request stream.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Returns the true bucket with probability `accuracy`; otherwise a bucket
/// `k >= 1` steps away with probability proportional to `0.5^k`, in a
/// uniformly chosen direction (upward when below bucket 0 would result).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyOracle {
    pub bucket_size: u32,
    pub accuracy: f64,
    pub seed: u64,
}

impl Default for NoisyOracle {
    fn default() -> Self {
        NoisyOracle {
            bucket_size: 128,
            accuracy: 0.849,
            seed: 0,
        }
    }
}

impl DecodePredictor for NoisyOracle {
    fn bucket_size(&self) -> u32 {
        self.bucket_size
    }

    fn predict_bucket(&self, request_id: &str, true_decode_len: u32) -> u32 {
        let exact = true_decode_len / self.bucket_size;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(request_id));
        if rng.random::<f64>() < self.accuracy {
            return exact;
        }
        let mut k = 1u32;
        while rng.random::<bool>() {
            k += 1;
        }
        // A downward miss that would pass bucket 0 goes up instead, so a
        // miss never lands on the true bucket.
        if rng.random::<bool>() || k > exact {
            exact.saturating_add(k)
        } else {
            exact - k
        }
    }
}

// ---------------------------------------------------------------------------
// Global prompt trees

/// Scheduler-side mirror of every engine's cached prefixes, one per unit kind.
/// Each node lists the engines that hold its prefix; the sets shrink going
/// down a path.
#[derive(Debug, Clone)]
pub struct GlobalPromptTree {
    tree: BlockRadixTree<BTreeSet<TeId>>,
}

impl GlobalPromptTree {
    pub fn new(block_size: usize) -> Self {
        GlobalPromptTree {
            tree: BlockRadixTree::new(block_size, BTreeSet::new()),
        }
    }

    pub fn insert(&mut self, te: TeId, tokens: &[u32]) {
        let path = self.tree.insert_path(tokens, |_| BTreeSet::new());
        for (n, _) in path {
            self.tree.node_mut(n).data.insert(te);
        }
    }

    /// Drops `te` from the node spelling `tokens` and everything below it.
    pub fn remove(&mut self, te: TeId, tokens: &[u32]) {
        let path = self.tree.walk(tokens);
        if path.len() * self.tree.block_size() != tokens.len() {
            return;
        }
        if let Some(&n) = path.last() {
            self.strip(n, te);
        }
    }

    fn strip(&mut self, n: NodeId, te: TeId) {
        if !self.tree.node_mut(n).data.remove(&te) {
            return;
        }
        if self.tree.node(n).data.is_empty() {
            self.tree.remove_subtree(n);
            return;
        }
        for c in self.tree.children(n) {
            self.strip(c, te);
        }
    }

    /// Matched prefix length in tokens for every engine holding part of `tokens`.
    pub fn match_lengths(&self, tokens: &[u32]) -> BTreeMap<TeId, u32> {
        let bs = self.tree.block_size() as u32;
        let mut out = BTreeMap::new();
        for (depth, n) in self.tree.walk(tokens).into_iter().enumerate() {
            for te in &self.tree.node(n).data {
                out.insert(*te, (depth as u32 + 1) * bs);
            }
        }
        out
    }

    pub fn match_len(&self, te: TeId, tokens: &[u32]) -> u32 {
        self.match_lengths(tokens).get(&te).copied().unwrap_or(0)
    }

    pub fn apply(&mut self, te: TeId, event: &CacheEvent) {
        match event {
            CacheEvent::Inserted(tokens) => self.insert(te, tokens),
            CacheEvent::Removed(tokens) => self.remove(te, tokens),
        }
    }

    pub fn nodes(&self) -> usize {
        self.tree.len() - 1
    }
}

// ---------------------------------------------------------------------------
// Selection

/// Heatmap-driven choice of unit kind. Positive cells, zero cells and
/// lengths outside the map go to disaggregated units; negative cells to
/// colocated ones. Falls back to the other kind when the chosen one is empty.
pub fn pd_aware(
    prompt_len: u32,
    predicted_decode_len: u32,
    units: &[UnitView],
    heatmap: &Heatmap,
) -> Vec<UnitView> {
    let kind = match heatmap.lookup(prompt_len, predicted_decode_len) {
        Some(v) if v < 0.0 => UnitKind::Colocated,
        _ => UnitKind::Disaggregated,
    };
    let chosen: Vec<UnitView> = units
        .iter()
        .copied()
        .filter(|u| u.unit.kind() == kind)
        .collect();
    if chosen.is_empty() {
        units.to_vec()
    } else {
        chosen
    }
}

pub const DEFAULT_BALANCE_EPSILON: f64 = 0.2;

/// Load spread within `epsilon` of the mean (floored at 1).
pub fn is_load_balanced(units: &[UnitView], epsilon: f64) -> bool {
    if units.is_empty() {
        return true;
    }
    let max = units.iter().map(|u| u.load).max().expect("non-empty");
    let min = units.iter().map(|u| u.load).min().expect("non-empty");
    let mean = units.iter().map(|u| u.load as f64).sum::<f64>() / units.len() as f64;
    (max - min) as f64 <= epsilon * mean.max(1.0)
}

/// Least-loaded unit, lowest id on ties.
pub fn load_aware(units: &[UnitView]) -> Unit {
    units
        .iter()
        .min_by_key(|u| (u.load, u.unit.id()))
        .expect("non-empty sub-group")
        .unit
}

/// Cached-prefix lengths a unit can reuse, read from the tree of its kind.
pub struct PrefixTrees<'a> {
    pub colocated: &'a GlobalPromptTree,
    pub prefill: &'a GlobalPromptTree,
}

impl PrefixTrees<'_> {
    fn lengths(&self, tokens: &[u32]) -> [BTreeMap<TeId, u32>; 2] {
        [
            self.colocated.match_lengths(tokens),
            self.prefill.match_lengths(tokens),
        ]
    }
}

/// Longest cached prefix; ties go to fewer queued tokens, then lower id.
pub fn locality_aware(tokens: &[u32], units: &[UnitView], trees: &PrefixTrees<'_>) -> Unit {
    let lens = trees.lengths(tokens);
    units
        .iter()
        .min_by_key(|u| {
            let table = match u.unit.kind() {
                UnitKind::Colocated => &lens[0],
                UnitKind::Disaggregated => &lens[1],
            };
            let m = table.get(&u.unit.id()).copied().unwrap_or(0);
            (std::cmp::Reverse(m), u.queued, u.unit.id())
        })
        .expect("non-empty sub-group")
        .unit
}

/// What the scheduler knows about a request when routing it.
#[derive(Debug, Clone, Copy)]
pub struct RouteQuery<'a> {
    pub request_id: &'a str,
    pub tokens: &'a [u32],
    pub true_decode_len: u32,
}

/// Kind choice by heatmap, then locality when balanced or least load otherwise.
pub fn dist_sched(
    q: &RouteQuery<'_>,
    units: &[UnitView],
    heatmap: &Heatmap,
    predictor: &dyn DecodePredictor,
    trees: &PrefixTrees<'_>,
    epsilon: f64,
) -> Unit {
    assert!(!units.is_empty(), "empty TE group");
    if units.len() == 1 {
        return units[0].unit;
    }
    let predicted = predictor.predict_len(q.request_id, q.true_decode_len);
    let sub = pd_aware(q.tokens.len() as u32, predicted, units, heatmap);
    if is_load_balanced(&sub, epsilon) {
        locality_aware(q.tokens, &sub, trees)
    } else {
        load_aware(&sub)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchStrategy {
    RoundRobin,
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DpGroupView {
    pub id: u32,
    pub queued_tokens: u64,
}

/// Data-parallel group choice. `cursor` carries round-robin state.
pub fn dp_dispatch(groups: &[DpGroupView], strategy: DispatchStrategy, cursor: &mut usize) -> u32 {
    assert!(!groups.is_empty(), "no DP groups");
    match strategy {
        DispatchStrategy::RoundRobin => {
            let g = groups[*cursor % groups.len()].id;
            *cursor = (*cursor + 1) % groups.len();
            g
        }
        DispatchStrategy::Greedy => {
            groups
                .iter()
                .min_by_key(|g| (g.queued_tokens, g.id))
                .expect("non-empty")
                .id
        }
    }
}

// ---------------------------------------------------------------------------
// Policies

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Round robin over units.
    #[serde(alias = "rr")]
    RoundRobin,
    #[serde(alias = "load")]
    LoadOnly,
    #[serde(alias = "locality")]
    LocalityOnly,
    /// Heatmap kind choice, then round robin within the kind.
    #[serde(alias = "pd")]
    PdOnly,
    Combined,
}

impl Policy {
    pub fn needs_heatmap(self) -> bool {
        matches!(self, Policy::PdOnly | Policy::Combined)
    }

    pub fn parse(s: &str) -> Option<Policy> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "rr" | "round_robin" => Some(Policy::RoundRobin),
            "load_only" | "load" => Some(Policy::LoadOnly),
            "locality_only" | "locality" => Some(Policy::LocalityOnly),
            "pd_only" | "pd" => Some(Policy::PdOnly),
            "combined" => Some(Policy::Combined),
            _ => None,
        }
    }
}

/// Routing state for one TE group.
#[derive(Debug, Clone)]
pub struct Scheduler {
    pub policy: Policy,
    pub epsilon: f64,
    heatmap: Option<Heatmap>,
    predictor: NoisyOracle,
    colocated_tree: GlobalPromptTree,
    prefill_tree: GlobalPromptTree,
    rr: usize,
    rr_kind: [usize; 2],
}

impl Scheduler {
    pub fn new(
        policy: Policy,
        heatmap: Option<Heatmap>,
        predictor: NoisyOracle,
        block_size: usize,
    ) -> Self {
        Scheduler {
            policy,
            epsilon: DEFAULT_BALANCE_EPSILON,
            heatmap,
            predictor,
            colocated_tree: GlobalPromptTree::new(block_size),
            prefill_tree: GlobalPromptTree::new(block_size),
            rr: 0,
            rr_kind: [0; 2],
        }
    }

    pub fn heatmap(&self) -> Option<&Heatmap> {
        self.heatmap.as_ref()
    }

    pub fn tree(&self, kind: UnitKind) -> &GlobalPromptTree {
        match kind {
            UnitKind::Colocated => &self.colocated_tree,
            UnitKind::Disaggregated => &self.prefill_tree,
        }
    }

    /// Mirrors a cache change reported by engine `te` of unit kind `kind`.
    pub fn on_te_cache_update(&mut self, te: TeId, kind: UnitKind, events: &[CacheEvent]) {
        let tree = match kind {
            UnitKind::Colocated => &mut self.colocated_tree,
            UnitKind::Disaggregated => &mut self.prefill_tree,
        };
        for e in events {
            tree.apply(te, e);
        }
    }

    fn trees(&self) -> PrefixTrees<'_> {
        PrefixTrees {
            colocated: &self.colocated_tree,
            prefill: &self.prefill_tree,
        }
    }

    pub fn route(&mut self, q: &RouteQuery<'_>, units: &[UnitView]) -> Unit {
        assert!(!units.is_empty(), "empty TE group");
        match self.policy {
            Policy::RoundRobin => {
                let u = units[self.rr % units.len()].unit;
                self.rr = (self.rr + 1) % units.len();
                u
            }
            Policy::LoadOnly => load_aware(units),
            Policy::LocalityOnly => locality_aware(q.tokens, units, &self.trees()),
            Policy::PdOnly => {
                let hm = self.heatmap.as_ref().expect("policy needs a heatmap");
                let predicted = self.predictor.predict_len(q.request_id, q.true_decode_len);
                let sub = pd_aware(q.tokens.len() as u32, predicted, units, hm);
                let k = match sub[0].unit.kind() {
                    UnitKind::Colocated => 0,
                    UnitKind::Disaggregated => 1,
                };
                let u = sub[self.rr_kind[k] % sub.len()].unit;
                self.rr_kind[k] = (self.rr_kind[k] + 1) % sub.len();
                u
            }
            Policy::Combined => {
                let hm = self.heatmap.as_ref().expect("policy needs a heatmap");
                dist_sched(q, units, hm, &self.predictor, &self.trees(), self.epsilon)
            }
        }
    }
}
